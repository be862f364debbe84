//! Behavior-cloning training, tactile-encoder pretraining, and LoRA
//! post-training of the tactile variants.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::actions::tokenize_action;
use crate::checkpoint;
use crate::dataset::{DemoMeta, EpisodeRecord, ProbeExample, ProbeTask};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lora::{lora_wrap, LoraSpec};
use crate::nn::Mlp;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::policy::{Observation, Policy, PolicyConfig, Variant};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::tactile::{preprocess_pair, TactileEncoder, FRAME_GAP};
use crate::tensor::Tensor;
use crate::vit::{patchify, ViTConfig};

use super::config::RunConfig;

/// Training-run parameters (a view over [`RunConfig`]).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub eval_cadence: usize,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        TrainConfig {
            steps: run.steps,
            batch_size: run.batch_size,
            lr: run.lr,
            warmup: run.warmup,
            seed: run.seed,
            eval_cadence: run.eval_cadence,
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Build the policy observation for demonstration step `(episode, t)`.
pub fn observation_from_record(
    meta: &DemoMeta,
    episode: &EpisodeRecord,
    t: usize,
    instruction: &[usize],
    tactile_size: usize,
) -> Result<Observation> {
    let step = &episode.steps[t];
    let older = &episode.steps[t.saturating_sub(FRAME_GAP)].tactile;
    let background = &episode.steps[0].tactile;
    let tactile = preprocess_pair(older, &step.tactile, background, tactile_size)?;
    let _ = meta;
    Ok(Observation {
        rgb: step.rgb.clone(),
        tactile,
        instruction: instruction.to_vec(),
        proprio: step.proprio,
    })
}

/// Tokenized action-chunk targets for step `t` (horizon H clamps at the
/// episode end by repeating the last action).
fn chunk_targets(
    policy_cfg: &PolicyConfig,
    stats: &crate::actions::NormStats,
    episode: &EpisodeRecord,
    t: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(policy_cfg.action_tokens_per_step());
    for h in 0..policy_cfg.chunk {
        let idx = (t + h).min(episode.steps.len() - 1);
        out.extend(tokenize_action(
            &episode.steps[idx].action,
            stats,
            &policy_cfg.vocab,
        )?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Teacher-forced behavior cloning on uniformly sampled (episode, step)
/// pairs. Logs the loss every 100 steps, checkpoints every `eval_cadence`
/// steps, aborts on a non-finite loss keeping the last good checkpoint.
pub fn train_policy<S: Scalar>(
    policy: &mut Policy<S>,
    meta: &DemoMeta,
    episodes: &[EpisodeRecord],
    config: &TrainConfig,
    out_dir: &Path,
    lora: Option<&LoraSpec>,
) -> Result<TrainOutput> {
    if episodes.is_empty() {
        return Err(Error::Precondition("no demonstrations".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let stats = policy
        .norm_stats
        .clone()
        .ok_or_else(|| Error::Precondition("policy needs norm stats before training".into()))?;

    // Flat index of all (episode, step) pairs.
    let mut pairs = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in 0..ep.steps.len() {
            pairs.push((e, t));
        }
    }
    let instruction = policy.text_vocab.tokenize(&meta.instruction);
    let mut order_rng = derive_rng(config.seed, "data-order");
    let mut adam = Adam::new(&policy.store, AdamConfig { lr: config.lr, ..Default::default() });
    adam.extend_for(&policy.store);

    let final_path = out_dir.join("policy.tvla");
    let last_path = out_dir.join("policy_last.tvla");
    let mut losses = Vec::new();
    let mut last_loss = f64::NAN;

    for step in 0..config.steps {
        let mut obs_batch = Vec::with_capacity(config.batch_size);
        let mut tok_batch: Vec<Vec<usize>> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let (e, t) = pairs[order_rng.random_range(0..pairs.len())];
            obs_batch.push(observation_from_record(
                meta,
                &episodes[e],
                t,
                &instruction,
                policy.config.tactile.image_size,
            )?);
            tok_batch.push(chunk_targets(&policy.config, &stats, &episodes[e], t)?);
        }
        let obs_refs: Vec<&Observation> = obs_batch.iter().collect();
        let tok_refs: Vec<&[usize]> = tok_batch.iter().map(|v| v.as_slice()).collect();

        policy.store.zero_grads();
        let mut g: Graph<S> = Graph::new();
        let loss_var = policy.training_loss(&mut g, &obs_refs, &tok_refs);
        let loss = match loss_var {
            Ok(v) => {
                let l = g.scalar_value(v).into_f64();
                g.backward(v)?;
                g.write_grads(&mut policy.store);
                l
            }
            Err(Error::NonFinite { op }) => {
                checkpoint::save_policy(&last_path, policy, lora)?;
                return Err(Error::State(format!(
                    "loss diverged (non-finite in {op}) at step {step}; last good checkpoint at {}",
                    last_path.display()
                )));
            }
            Err(e) => return Err(e),
        };
        adam.step_with_lr(&mut policy.store, config.lr_at(step))?;
        last_loss = loss;

        if step % 100 == 0 {
            losses.push((step, loss));
        }
        if config.eval_cadence > 0 && (step + 1) % config.eval_cadence == 0 {
            checkpoint::save_policy(&last_path, policy, lora)?;
        }
    }
    losses.push((config.steps, last_loss));

    checkpoint::save_policy(&final_path, policy, lora)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("loss.csv"))?);
    writeln!(f, "step,loss")?;
    for (s, l) in &losses {
        writeln!(f, "{s},{l:.6}")?;
    }
    Ok(TrainOutput { checkpoint: final_path, losses, final_loss: last_loss })
}

/// Fresh policy + stats + optional pretrained tactile encoder, then train.
pub fn train_from_scratch<S: Scalar>(
    run: &RunConfig,
    meta: &DemoMeta,
    episodes: &[EpisodeRecord],
    encoder_ckpt: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutput> {
    let mut policy: Policy<S> = Policy::build(run.policy_config(), run.seed)?;
    policy.norm_stats = Some(crate::dataset::compute_norm_stats(episodes, false)?);
    if let Some(enc) = encoder_ckpt {
        load_encoder_into_policy(&mut policy, enc)?;
    }
    train_policy(&mut policy, meta, episodes, &TrainConfig::from_run(run), out_dir, None)
}

/// Copy pretrained tactile-encoder tensors into a policy (no-op for the
/// vision-only variant, which has no tactile tower).
pub fn load_encoder_into_policy<S: Scalar>(policy: &mut Policy<S>, path: &Path) -> Result<()> {
    if policy.tactile_encoder.is_none() {
        return Ok(());
    }
    let (cfg, store) = checkpoint::load_encoder::<S>(path)?;
    if cfg != policy.config.tactile {
        return Err(Error::Config(
            "tactile encoder checkpoint config differs from the policy's".into(),
        ));
    }
    let copied = policy.copy_matching_params_from(&store)?;
    if copied != store.len() {
        return Err(Error::Config("encoder checkpoint did not cover the tactile tower".into()));
    }
    Ok(())
}

/// LoRA post-training: attach a tactile variant to a trained vision-only
/// base, freeze the base, train adapters + new tactile machinery.
pub fn finetune<S: Scalar>(
    base_ckpt: &Path,
    meta: &DemoMeta,
    episodes: &[EpisodeRecord],
    variant: Variant,
    run: &RunConfig,
    encoder_ckpt: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutput> {
    if variant == Variant::VisionOnly {
        return Err(Error::Config("finetune needs a tactile variant (nothing to fuse)".into()));
    }
    let base: Policy<S> = checkpoint::load_policy(base_ckpt)?;
    if base.config.variant != Variant::VisionOnly {
        return Err(Error::Config("finetune expects a vision-only base checkpoint".into()));
    }

    let mut config = base.config;
    config.variant = variant;
    config.depth_variant = run.depth_variant;
    let mut policy: Policy<S> = Policy::build(config, base.seed)?;
    policy.copy_matching_params_from(&base.store)?;
    policy.norm_stats = base.norm_stats.clone();
    if let Some(enc) = encoder_ckpt {
        load_encoder_into_policy(&mut policy, enc)?;
    }

    let spec = LoraSpec { rank: run.lora_rank, alpha: run.lora_alpha, ..Default::default() };
    lora_wrap(&mut policy, &spec)?;
    train_policy(&mut policy, meta, episodes, &TrainConfig::from_run(run), out_dir, Some(&spec))
}

// ── Tactile-encoder pretraining ─────────────────────────────────────────

/// 80/20 split by example index, before any shuffling.
pub fn probe_split(examples: &[ProbeExample]) -> (&[ProbeExample], &[ProbeExample]) {
    let cut = examples.len() * 8 / 10;
    examples.split_at(cut)
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    /// (step, per-task loss) log, every 100 steps.
    pub losses: Vec<(usize, Vec<f64>)>,
}

fn probe_tokens<S: Scalar>(cfg: &ViTConfig, batch: &[&ProbeExample]) -> Result<Tensor<S>> {
    let mut rows: Vec<S> = Vec::new();
    for ex in batch {
        let t: Tensor<S> = patchify(&ex.frames, cfg.patch_size)?;
        rows.extend_from_slice(t.data());
    }
    Tensor::matrix(batch.len() * cfg.tokens(), cfg.patch_dim(), rows)
}

/// Train the tactile ViT jointly on the three probe tasks through temporary
/// classification heads, then freeze it and save only the encoder subtree.
pub fn pretrain_tactile<S: Scalar>(
    datasets: &[(ProbeTask, Vec<ProbeExample>)],
    encoder_cfg: ViTConfig,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    out_path: &Path,
) -> Result<PretrainOutput> {
    let mut store: ParamStore<S> = ParamStore::new(seed);
    let encoder = TactileEncoder::build(&mut store, "tac", encoder_cfg)?;
    let d_t = encoder_cfg.embed_dim;
    // Temporary heads. Pooled features are whitened per dimension over the
    // batch before each MLP: the discriminative directions are small against
    // the common feature variance, and the heads stall without it.
    let mut heads = Vec::new();
    for (task, _) in datasets {
        heads.push(Mlp::build(&mut store, &format!("probe_head.{}", task.tag()), d_t, d_t, 2)?);
    }

    let mut order_rng = derive_rng(seed, "pretrain-order");
    let mut adam = Adam::new(&store, AdamConfig { lr, ..Default::default() });
    let mut last_loss = f64::NAN;
    let mut losses = Vec::new();

    for step in 0..steps {
        store.zero_grads();
        let mut g: Graph<S> = Graph::new();
        let mut total: Option<crate::graph::Var> = None;
        let mut per_task = Vec::with_capacity(datasets.len());
        for ((_, examples), head) in datasets.iter().zip(&heads) {
            let (train, _) = probe_split(examples);
            let batch: Vec<&ProbeExample> =
                (0..batch_size).map(|_| &train[order_rng.random_range(0..train.len())]).collect();
            let tokens = probe_tokens::<S>(&encoder_cfg, &batch)?;
            let x = g.input(&tokens)?;
            let (_, pooled) = encoder.forward(&mut g, &store, x, batch.len())?;
            let whitened = g.standardize_cols(pooled, 1e-5)?;
            let logits = head.forward(&mut g, &store, whitened)?;
            let labels: Vec<usize> = batch.iter().map(|e| e.label as usize).collect();
            let loss = g.cross_entropy(logits, &labels)?;
            per_task.push(g.scalar_value(loss).into_f64());
            total = Some(match total {
                None => loss,
                Some(acc) => g.add(acc, loss)?,
            });
        }
        if step % 100 == 0 {
            losses.push((step, per_task));
        }
        let loss_var = total.expect("at least one probe task");
        let loss = g.scalar_value(loss_var).into_f64();
        if !loss.is_finite() {
            return Err(Error::State(format!("pretraining loss diverged at step {step}")));
        }
        g.backward(loss_var)?;
        g.write_grads(&mut store);
        adam.step(&mut store)?;
        last_loss = loss;
    }

    store.freeze_prefix("tac.");
    checkpoint::save_encoder(out_path, &store, encoder_cfg, seed)?;
    Ok(PretrainOutput { checkpoint: out_path.to_path_buf(), final_loss: last_loss, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect_demos, make_probe_dataset};
    use crate::sim::TaskSpec;

    fn tiny_run(variant: Variant) -> RunConfig {
        let mut run = RunConfig::default();
        run.variant = variant;
        run.steps = 12;
        run.batch_size = 2;
        run.eval_cadence = 6;
        run.lr = 3e-3;
        run.vision_embed = 16;
        run.vision_blocks = 3;
        run.vision_heads = 2;
        run.tactile_embed = 8;
        run.tactile_blocks = 3;
        run.tactile_heads = 2;
        run.d_lm = 24;
        run.lm_blocks = 2;
        run.lm_heads = 2;
        run
    }

    #[test]
    fn short_training_runs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::by_name("circle3").unwrap();
        let (meta, episodes) = collect_demos(&task, 3, 0.3, 100).unwrap();
        let run = tiny_run(Variant::VisionOnly);
        let out = train_from_scratch::<f64>(&run, &meta, &episodes, None, dir.path()).unwrap();
        assert!(out.checkpoint.exists());
        assert!(dir.path().join("loss.csv").exists());
        let first = out.losses.first().unwrap().1;
        assert!(first.is_finite());
        // Untrained head: loss starts near ln(vocab).
        let uniform = (323.0f64).ln();
        assert!((first - uniform).abs() < 0.5, "initial loss {first} vs ln(vocab) {uniform}");
    }

    #[test]
    fn same_seed_same_loss_curve() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::by_name("circle3").unwrap();
        let (meta, episodes) = collect_demos(&task, 2, 0.3, 200).unwrap();
        let run = tiny_run(Variant::VisionOnly);
        let a = train_from_scratch::<f64>(&run, &meta, &episodes, None, &dir.path().join("a"))
            .unwrap();
        let b = train_from_scratch::<f64>(&run, &meta, &episodes, None, &dir.path().join("b"))
            .unwrap();
        assert_eq!(a.losses, b.losses, "two runs with one seed must match exactly");
        // And the checkpoints must be byte-identical.
        assert_eq!(
            std::fs::read(&a.checkpoint).unwrap(),
            std::fs::read(&b.checkpoint).unwrap()
        );
    }

    #[test]
    fn finetune_rejects_vision_only_target_and_base_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::by_name("circle3").unwrap();
        let (meta, episodes) = collect_demos(&task, 2, 0.3, 300).unwrap();
        let run = tiny_run(Variant::VisionOnly);
        let base =
            train_from_scratch::<f64>(&run, &meta, &episodes, None, &dir.path().join("base"))
                .unwrap();
        let err = finetune::<f64>(
            &base.checkpoint,
            &meta,
            &episodes,
            Variant::VisionOnly,
            &run,
            None,
            &dir.path().join("ft"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("nothing to fuse"));
    }

    #[test]
    fn finetune_freezes_base_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::by_name("circle3").unwrap();
        let (meta, episodes) = collect_demos(&task, 2, 0.3, 400).unwrap();
        let mut run = tiny_run(Variant::VisionOnly);
        let base =
            train_from_scratch::<f64>(&run, &meta, &episodes, None, &dir.path().join("base"))
                .unwrap();
        run.variant = Variant::TactileFilm;
        run.steps = 8;
        let ft = finetune::<f64>(
            &base.checkpoint,
            &meta,
            &episodes,
            Variant::TactileFilm,
            &run,
            None,
            &dir.path().join("ft"),
        )
        .unwrap();

        // Frozen tensors in the finetuned checkpoint equal the base values.
        let base_policy: Policy<f64> = checkpoint::load_policy(&base.checkpoint).unwrap();
        let ft_policy: Policy<f64> = checkpoint::load_policy(&ft.checkpoint).unwrap();
        let mut checked = 0;
        for (_, e) in ft_policy.store.iter() {
            if !e.frozen || e.name.starts_with("tac.") {
                continue;
            }
            let bid = base_policy.store.id(&e.name).expect("base tensor");
            assert_eq!(
                base_policy.store.value(bid).data(),
                e.value.data(),
                "frozen tensor {} changed during finetune",
                e.name
            );
            checked += 1;
        }
        assert!(checked > 10, "expected many frozen base tensors, saw {checked}");
    }

    #[test]
    fn pretrain_freezes_encoder_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 6,
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let datasets: Vec<(ProbeTask, Vec<ProbeExample>)> = ProbeTask::all()
            .into_iter()
            .map(|t| (t, make_probe_dataset(t, 40, 5)))
            .collect();
        let p1 = dir.path().join("enc1.tvla");
        let p2 = dir.path().join("enc2.tvla");
        pretrain_tactile::<f64>(&datasets, cfg, 5, 4, 1e-3, 7, &p1).unwrap();
        pretrain_tactile::<f64>(&datasets, cfg, 5, 4, 1e-3, 7, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (_, store) = checkpoint::load_encoder::<f64>(&p1).unwrap();
        assert!(store.iter().all(|(_, e)| e.frozen), "all encoder tensors flagged frozen");
        assert!(store.iter().all(|(_, e)| e.name.starts_with("tac.")));
    }
}
