//! Policy assembly: dual-stream visual backbone + projector + causal
//! decoder emitting discretized action tokens, with three fusion variants.
//!
//! - `VisionOnly`: RGB and instruction only.
//! - `TactileConcat`: projected tactile patch tokens appended after the
//!   image tokens (sequence grows by the tactile patch count).
//! - `TactileFilm`: pooled tactile embedding FiLM-conditions the visual
//!   streams; the token sequence stays exactly as long as `VisionOnly`.
//!
//! Decoder input layout per sample:
//! `[visual tokens | tactile tokens (concat only) | BOS | text | actions...]`
//! with learned positions over the whole sequence and causal attention.

use serde::{Deserialize, Serialize};

use crate::actions::{detokenize_action, NormStats, TextVocab, VocabLayout};
use crate::error::{Error, Result};
use crate::film::{ConcatProjector, DepthVariant, FilmBank};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Linear, Mlp, Norm, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tactile::TactileEncoder;
use crate::tensor::Tensor;
use crate::vit::{patchify, DualStream, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    VisionOnly,
    TactileConcat,
    TactileFilm,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vision-only" => Ok(Variant::VisionOnly),
            "tactile-concat" => Ok(Variant::TactileConcat),
            "tactile-film" => Ok(Variant::TactileFilm),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::VisionOnly => "vision-only",
            Variant::TactileConcat => "tactile-concat",
            Variant::TactileFilm => "tactile-film",
        }
    }

    pub fn uses_tactile(self) -> bool {
        !matches!(self, Variant::VisionOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub variant: Variant,
    pub depth_variant: DepthVariant,
    pub vision: ViTConfig,
    pub tactile: ViTConfig,
    pub d_lm: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub vocab: VocabLayout,
    pub action_dims: usize,
    /// Action-chunk horizon H; the policy decodes `action_dims * chunk`
    /// tokens per call.
    pub chunk: usize,
    pub max_seq: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            variant: Variant::VisionOnly,
            depth_variant: DepthVariant::All,
            vision: ViTConfig::rgb_default(),
            tactile: ViTConfig::tactile_default(),
            d_lm: 96,
            lm_blocks: 4,
            lm_heads: 4,
            vocab: VocabLayout::default(),
            action_dims: 3,
            chunk: 1,
            max_seq: 96,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.tactile.validate()?;
        if self.lm_heads == 0 || self.d_lm % self.lm_heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} not divisible by {} heads",
                self.d_lm, self.lm_heads
            )));
        }
        if self.action_dims == 0 || self.chunk == 0 {
            return Err(Error::Config("action_dims and chunk must be positive".into()));
        }
        Ok(())
    }

    pub fn action_tokens_per_step(&self) -> usize {
        self.action_dims * self.chunk
    }
}

/// Time-aligned sensory bundle fed to the policy. Proprioception is recorded
/// for analysis but is not a policy input.
#[derive(Debug, Clone)]
pub struct Observation {
    pub rgb: Image,
    /// Preprocessed tactile frame pair (stacked channels).
    pub tactile: Image,
    pub instruction: Vec<usize>,
    pub proprio: [f64; 3],
}

pub struct Policy<S: Scalar> {
    pub config: PolicyConfig,
    pub store: ParamStore<S>,
    pub text_vocab: TextVocab,
    pub dual: DualStream,
    pub projector: Mlp,
    pub lm_blocks: Vec<TransformerBlock>,
    pub lm_final: Norm,
    /// Token embedding table, tied with the output head.
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub tactile_encoder: Option<TactileEncoder>,
    pub film: Option<FilmBank>,
    pub concat_proj: Option<ConcatProjector>,
    pub norm_stats: Option<NormStats>,
    pub lora_wrapped: bool,
    pub seed: u64,
}

impl<S: Scalar> Policy<S> {
    /// Construct a policy. Base-module parameters are drawn from streams
    /// derived from `(seed, parameter name)`, so every variant built from
    /// the same seed shares bit-identical base weights.
    pub fn build(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store: ParamStore<S> = ParamStore::new(seed);

        let dual = DualStream::build(&mut store, "vis_a", "vis_b", config.vision)?;
        let projector =
            crate::vit::build_projector(&mut store, "proj", dual.fused_dim(), config.d_lm)?;

        let tok_embed = store.register_normal(
            "lm.tok_embed",
            config.vocab.total(),
            config.d_lm,
            0.02,
        )?;
        let pos_embed =
            store.register_normal("lm.pos", config.max_seq, config.d_lm, 0.02)?;
        let mut lm_blocks = Vec::with_capacity(config.lm_blocks);
        for i in 0..config.lm_blocks {
            lm_blocks.push(TransformerBlock::build(
                &mut store,
                &format!("lm.blocks.{i}"),
                config.d_lm,
                config.lm_heads,
                4,
            )?);
        }
        let lm_final = Norm::build(&mut store, "lm.final_norm", config.d_lm)?;

        let (tactile_encoder, film, concat_proj) = match config.variant {
            Variant::VisionOnly => (None, None, None),
            Variant::TactileFilm => {
                let enc = TactileEncoder::build(&mut store, "tac", config.tactile)?;
                let bank = FilmBank::build(
                    &mut store,
                    "film",
                    config.tactile.embed_dim,
                    config.vision.embed_dim,
                    config.depth_variant,
                    config.vision.blocks,
                )?;
                (Some(enc), Some(bank), None)
            }
            Variant::TactileConcat => {
                let enc = TactileEncoder::build(&mut store, "tac", config.tactile)?;
                let proj = ConcatProjector::build(
                    &mut store,
                    "tconcat",
                    config.tactile.embed_dim,
                    config.d_lm,
                )?;
                (Some(enc), None, Some(proj))
            }
        };
        // The tactile encoder never trains with the policy: it is either
        // loaded from a probe-pretraining checkpoint or kept frozen at init.
        store.freeze_prefix("tac.");

        let text_vocab = TextVocab::standard(config.vocab)?;
        Ok(Policy {
            config,
            store,
            text_vocab,
            dual,
            projector,
            lm_blocks,
            lm_final,
            tok_embed,
            pos_embed,
            tactile_encoder,
            film,
            concat_proj,
            norm_stats: None,
            lora_wrapped: false,
            seed,
        })
    }

    /// Number of tactile tokens appended to the decoder input (0 except for
    /// the concatenation variant).
    pub fn extra_tactile_tokens(&self) -> usize {
        if self.concat_proj.is_some() {
            self.config.tactile.tokens()
        } else {
            0
        }
    }

    /// Decoder input length for an observation, before any action tokens:
    /// visual tokens + appended tactile tokens + BOS + text.
    pub fn input_sequence_length(&self, obs: &Observation) -> usize {
        self.config.vision.tokens() + self.extra_tactile_tokens() + 1 + obs.instruction.len()
    }

    fn check_seq_len(&self, total: usize) -> Result<()> {
        if total > self.config.max_seq {
            return Err(Error::dim(
                "sequence_length",
                format!("{total} tokens exceed max {}", self.config.max_seq),
            ));
        }
        Ok(())
    }

    /// Stack and patchify a batch of RGB frames.
    fn rgb_tokens(&self, obs: &[&Observation]) -> Result<Tensor<S>> {
        let mut rows = Vec::new();
        let cfg = &self.config.vision;
        for o in obs {
            if o.rgb.height != cfg.image_size || o.rgb.width != cfg.image_size {
                return Err(Error::dim("rgb_tokens", "frame size vs config"));
            }
            let t: Tensor<S> = patchify(&o.rgb, cfg.patch_size)?;
            rows.extend_from_slice(t.data());
        }
        Tensor::matrix(obs.len() * cfg.tokens(), cfg.patch_dim(), rows)
    }

    fn tactile_tokens(&self, obs: &[&Observation]) -> Result<Tensor<S>> {
        let cfg = &self.config.tactile;
        let mut rows = Vec::new();
        for o in obs {
            if o.tactile.height != cfg.image_size || o.tactile.channels != cfg.channels {
                return Err(Error::dim("tactile_tokens", "frame size vs config"));
            }
            let t: Tensor<S> = patchify(&o.tactile, cfg.patch_size)?;
            rows.extend_from_slice(t.data());
        }
        Tensor::matrix(obs.len() * cfg.tokens(), cfg.patch_dim(), rows)
    }

    /// Build the decoder input `[B*T x d_lm]` for a batch with uniform
    /// instruction and action-token lengths. Returns (sequence, T).
    fn assemble_sequence(
        &self,
        g: &mut Graph<S>,
        obs: &[&Observation],
        action_tokens: &[&[usize]],
    ) -> Result<(Var, usize)> {
        let batch = obs.len();
        if batch == 0 || action_tokens.len() != batch {
            return Err(Error::Precondition("empty or mismatched batch".into()));
        }
        let text_len = obs[0].instruction.len();
        let act_len = action_tokens[0].len();
        for (o, a) in obs.iter().zip(action_tokens) {
            if o.instruction.len() != text_len || a.len() != act_len {
                return Err(Error::Precondition(
                    "batch requires uniform instruction/action lengths".into(),
                ));
            }
        }

        let vis_t = self.config.vision.tokens();
        let tac_t = self.extra_tactile_tokens();
        let emb_len = 1 + text_len + act_len;
        let total = vis_t + tac_t + emb_len;
        self.check_seq_len(total)?;

        // Visual pathway (optionally FiLM-conditioned).
        let rgb = self.rgb_tokens(obs)?;
        let rgb_var = g.input(&rgb)?;
        let (film_a, film_b, tactile_feats) = if let Some(enc) = &self.tactile_encoder {
            let tac = self.tactile_tokens(obs)?;
            let tac_var = g.input(&tac)?;
            let (features, pooled) = enc.forward(g, &self.store, tac_var, batch)?;
            match &self.film {
                Some(bank) => {
                    let (a, b) = bank.film_vars(g, &self.store, pooled)?;
                    (Some(a), Some(b), Some(features))
                }
                None => (None, None, Some(features)),
            }
        } else {
            (None, None, None)
        };
        let fused = self.dual.forward(
            g,
            &self.store,
            rgb_var,
            batch,
            film_a.as_ref(),
            film_b.as_ref(),
        )?;
        let vis_lm = self.projector.forward(g, &self.store, fused)?;

        // Tactile tokens for the concatenation baseline.
        let tact_lm = match (&self.concat_proj, tactile_feats) {
            (Some(proj), Some(features)) => Some(proj.forward(g, &self.store, features)?),
            _ => None,
        };

        // BOS + text + teacher-forced action ids, embedded via the tied table.
        let mut ids = Vec::with_capacity(batch * emb_len);
        for (o, acts) in obs.iter().zip(action_tokens) {
            ids.push(self.config.vocab.bos());
            ids.extend_from_slice(&o.instruction);
            ids.extend_from_slice(acts);
        }
        let table = g.param(&self.store, self.tok_embed)?;
        let emb = g.gather_rows(table, &ids)?;

        // Interleave [vis | tact | emb] blocks into per-sample sequences.
        let seq = if batch == 1 {
            let mut parts = vec![vis_lm];
            if let Some(t) = tact_lm {
                parts.push(t);
            }
            parts.push(emb);
            g.concat_rows(&parts)?
        } else {
            let mut parts = vec![vis_lm];
            let mut tact_base = batch * vis_t;
            let emb_base;
            if let Some(t) = tact_lm {
                parts.push(t);
                emb_base = tact_base + batch * tac_t;
            } else {
                tact_base = 0;
                emb_base = batch * vis_t;
            }
            parts.push(emb);
            let stacked = g.concat_rows(&parts)?;
            let mut perm = Vec::with_capacity(batch * total);
            for s in 0..batch {
                for i in 0..vis_t {
                    perm.push(s * vis_t + i);
                }
                if tac_t > 0 {
                    for i in 0..tac_t {
                        perm.push(tact_base + s * tac_t + i);
                    }
                }
                for i in 0..emb_len {
                    perm.push(emb_base + s * emb_len + i);
                }
            }
            g.gather_rows(stacked, &perm)?
        };

        // Learned positions over the full sequence.
        let pos = g.param(&self.store, self.pos_embed)?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..total).collect();
        let pos_rows = g.gather_rows(pos, &pos_idx)?;
        let x = g.add(seq, pos_rows)?;
        Ok((x, total))
    }

    fn decoder_forward(&self, g: &mut Graph<S>, x: Var, t: usize) -> Result<Var> {
        let mut h = x;
        for block in &self.lm_blocks {
            let (next, _) = block.forward(g, &self.store, h, t, true, None)?;
            h = next;
        }
        self.lm_final.forward(g, &self.store, h)
    }

    /// Logits rows (tied head) for the given sequence positions of each
    /// sample, stacked `[B*len(positions) x vocab]`.
    fn logits_at(
        &self,
        g: &mut Graph<S>,
        h: Var,
        t: usize,
        batch: usize,
        positions: &[usize],
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch * positions.len());
        for s in 0..batch {
            for &p in positions {
                rows.push(s * t + p);
            }
        }
        let picked = g.gather_rows(h, &rows)?;
        let table = g.param(&self.store, self.tok_embed)?;
        g.matmul_nt(picked, table)
    }

    /// Teacher-forced mean cross-entropy over the action-token positions.
    pub fn training_loss(
        &self,
        g: &mut Graph<S>,
        obs: &[&Observation],
        action_tokens: &[&[usize]],
    ) -> Result<Var> {
        let batch = obs.len();
        let act_len = action_tokens[0].len();
        let (x, t) = self.assemble_sequence(g, obs, action_tokens)?;
        let h = self.decoder_forward(g, x, t)?;
        // Position p predicts token p+1; action token j sits at
        // prefix_len + j, so its predictor is prefix_len + j - 1.
        let prefix_len = t - act_len;
        let positions: Vec<usize> = (0..act_len).map(|j| prefix_len + j - 1).collect();
        let logits = self.logits_at(g, h, t, batch, &positions)?;
        let targets: Vec<usize> =
            action_tokens.iter().flat_map(|a| a.iter().copied()).collect();
        g.cross_entropy(logits, &targets)
    }

    /// Next-token logits given an observation and the action tokens emitted
    /// so far (autoregressive interface).
    pub fn next_token_logits(&self, obs: &Observation, so_far: &[usize]) -> Result<Vec<S>> {
        let mut g: Graph<S> = Graph::new();
        let (x, t) = self.assemble_sequence(&mut g, &[obs], &[so_far])?;
        let h = self.decoder_forward(&mut g, x, t)?;
        let logits = self.logits_at(&mut g, h, t, 1, &[t - 1])?;
        Ok(g.data(logits).to_vec())
    }

    /// Greedy decode of `action_dims * chunk` tokens, masked to the action
    /// range; ties break toward the lowest token id.
    pub fn decode_action_tokens(&self, obs: &Observation) -> Result<Vec<usize>> {
        let n = self.config.action_tokens_per_step();
        let layout = self.config.vocab;
        let mut g: Graph<S> = Graph::new();
        let mut decoded: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..n {
            // Prefix recomputation is wasted work, but a fresh assembly per
            // token keeps decode identical to the training-time layout.
            let (x, t) = self.assemble_sequence(&mut g, &[obs], &[&decoded])?;
            let h = self.decoder_forward(&mut g, x, t)?;
            let logits = self.logits_at(&mut g, h, t, 1, &[t - 1])?;
            let row = g.data(logits);
            let mut best = layout.action_start();
            let mut best_v = row[best];
            for tok in layout.action_start()..layout.action_end() {
                if row[tok] > best_v {
                    best_v = row[tok];
                    best = tok;
                }
            }
            decoded.push(best);
        }
        Ok(decoded)
    }

    /// Greedy decode straight to continuous actions
    /// (`action_dims * chunk` values).
    pub fn predict_action(&self, obs: &Observation) -> Result<Vec<f64>> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| Error::State("policy has no normalization stats".into()))?;
        let tokens = self.decode_action_tokens(obs)?;
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(self.config.action_dims) {
            out.extend(detokenize_action(chunk, stats, &self.config.vocab)?);
        }
        Ok(out)
    }

    /// Names of the shared base modules (everything a `VisionOnly` twin also
    /// has), excluding adapter tensors.
    pub fn base_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .map(|(_, e)| e.name.clone())
            .filter(|n| {
                (n.starts_with("vis_a.")
                    || n.starts_with("vis_b.")
                    || n.starts_with("proj.")
                    || n.starts_with("lm."))
                    && !n.contains(".lora.")
            })
            .collect()
    }

    /// Checksum over all base parameters, order-independent content hash.
    pub fn base_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut names = self.base_param_names();
        names.sort();
        let mut hasher = Sha256::new();
        for n in names {
            let id = self.store.id(&n).expect("name from store");
            hasher.update(n.as_bytes());
            hasher.update(self.store.checksum(id).as_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    /// Copy every parameter whose name exists in `source` from it
    /// (shape-checked). Returns the number of tensors copied.
    pub fn copy_matching_params_from(&mut self, source: &ParamStore<S>) -> Result<usize> {
        let mut copied = 0;
        for (_, entry) in source.iter() {
            if let Some(id) = self.store.id(&entry.name) {
                let dst = self.store.entry_mut(id);
                if dst.value.shape() != entry.value.shape() {
                    return Err(Error::dim(
                        "copy_params",
                        format!("shape mismatch for {}", entry.name),
                    ));
                }
                dst.value = entry.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// All linears with their hierarchical names, for adapter targeting.
    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = Vec::new();
        for stream in [&mut self.dual.stream_a, &mut self.dual.stream_b] {
            v.push(&mut stream.patch_proj);
            for b in &mut stream.blocks {
                v.extend(b.linears_mut());
            }
        }
        v.push(&mut self.projector.fc1);
        v.push(&mut self.projector.fc2);
        for b in &mut self.lm_blocks {
            v.extend(b.linears_mut());
        }
        if let Some(enc) = &mut self.tactile_encoder {
            v.push(&mut enc.stream.patch_proj);
            for b in &mut enc.stream.blocks {
                v.extend(b.linears_mut());
            }
        }
        if let Some(proj) = &mut self.concat_proj {
            v.push(&mut proj.mlp.fc1);
            v.push(&mut proj.mlp.fc2);
        }
        v
    }
}
