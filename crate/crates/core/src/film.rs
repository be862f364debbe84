//! FiLM parameter generation and application, conditioned-block selection
//! for the depth ablation, and the token-concatenation baseline projector.
//!
//! Each conditioned (stream, block) pair owns a two-layer MLP
//! `d_t -> 2 d_t -> 2 embed_dim` whose final layer starts at exactly zero,
//! so gamma = beta = 0 and conditioning begins as the identity
//! `F * (1 + 0) + 0 = F`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::FilmVars;

/// Which of the two visual streams a generator conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum StreamId {
    A,
    B,
}

impl StreamId {
    pub fn tag(self) -> &'static str {
        match self {
            StreamId::A => "a",
            StreamId::B => "b",
        }
    }
}

/// Per-block, per-channel scale and shift produced from the pooled tactile
/// embedding.
#[derive(Debug, Clone)]
pub struct FiLMParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub block_index: usize,
    pub stream: StreamId,
}

/// Conditioning depth for the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DepthVariant {
    All,
    Early,
    Middle,
    Late,
}

impl DepthVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DepthVariant::All),
            "early" => Ok(DepthVariant::Early),
            "middle" => Ok(DepthVariant::Middle),
            "late" => Ok(DepthVariant::Late),
            other => Err(Error::Config(format!("unknown depth variant '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DepthVariant::All => "all",
            DepthVariant::Early => "early",
            DepthVariant::Middle => "middle",
            DepthVariant::Late => "late",
        }
    }
}

/// Blocks receiving FiLM for a given depth variant. The thirds variants
/// select exactly `ceil(B/3)` contiguous blocks: first, centered (start
/// `floor((B - k) / 2)`), or last.
pub fn select_film_blocks(variant: DepthVariant, blocks: usize) -> Result<BTreeSet<usize>> {
    if blocks == 0 {
        return Err(Error::Config("zero transformer blocks".into()));
    }
    if variant != DepthVariant::All && blocks < 3 {
        return Err(Error::Config(format!(
            "depth variant {:?} needs at least 3 blocks, got {blocks}",
            variant
        )));
    }
    let k = blocks.div_ceil(3);
    let range = match variant {
        DepthVariant::All => 0..blocks,
        DepthVariant::Early => 0..k,
        DepthVariant::Middle => {
            let start = (blocks - k) / 2;
            start..start + k
        }
        DepthVariant::Late => blocks - k..blocks,
    };
    Ok(range.collect())
}

/// One FiLM generator MLP: pooled z in, concatenated (gamma, beta) out.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    pub block_index: usize,
    pub stream: StreamId,
    pub embed_dim: usize,
    hidden: Linear,
    out: Linear,
}

impl FilmGenerator {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_t: usize,
        embed_dim: usize,
        block_index: usize,
        stream: StreamId,
    ) -> Result<Self> {
        let name = format!("{prefix}.{}.b{block_index}", stream.tag());
        let hidden = Linear::build(store, &format!("{name}.hidden"), d_t, 2 * d_t, true)?;
        let out = Linear::build_zeroed(store, &format!("{name}.out"), 2 * d_t, 2 * embed_dim)?;
        Ok(FilmGenerator { block_index, stream, embed_dim, hidden, out })
    }

    /// Graph-level generation from pooled z `[batch x d_t]`; returns
    /// (gamma, beta), each `[batch x embed_dim]`.
    pub fn generate<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        z: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, store, z)?;
        let a = g.gelu(h)?;
        let o = self.out.forward(g, store, a)?;
        let gamma = g.slice_cols(o, 0, self.embed_dim)?;
        let beta = g.slice_cols(o, self.embed_dim, 2 * self.embed_dim)?;
        Ok((gamma, beta))
    }

    /// Value-level generation for a single z (tests, inspection).
    pub fn generate_value<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        z: &[S],
    ) -> Result<FiLMParams<S>> {
        let zt = Tensor::matrix(1, z.len(), z.to_vec())?;
        let mut g: Graph<S> = Graph::new();
        let zv = g.input(&zt)?;
        let (gamma, beta) = self.generate(&mut g, store, zv)?;
        Ok(FiLMParams {
            gamma: g.data(gamma).to_vec(),
            beta: g.data(beta).to_vec(),
            block_index: self.block_index,
            stream: self.stream,
        })
    }
}

/// The full set of generators for one policy: one per conditioned block per
/// stream, all fed from the same pooled z.
#[derive(Debug, Clone)]
pub struct FilmBank {
    pub conditioned: BTreeSet<usize>,
    pub generators: BTreeMap<(StreamId, usize), FilmGenerator>,
}

impl FilmBank {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_t: usize,
        embed_dim: usize,
        variant: DepthVariant,
        blocks: usize,
    ) -> Result<Self> {
        let conditioned = select_film_blocks(variant, blocks)?;
        let mut generators = BTreeMap::new();
        for stream in [StreamId::A, StreamId::B] {
            for &b in &conditioned {
                generators.insert(
                    (stream, b),
                    FilmGenerator::build(store, prefix, d_t, embed_dim, b, stream)?,
                );
            }
        }
        Ok(FilmBank { conditioned, generators })
    }

    pub fn generator(&self, stream: StreamId, block: usize) -> Result<&FilmGenerator> {
        self.generators
            .get(&(stream, block))
            .ok_or_else(|| Error::Config(format!("block {block} is not conditioned")))
    }

    /// Produce the per-stream FiLM maps for a batch of pooled z values.
    pub fn film_vars<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        z: Var,
    ) -> Result<(FilmVars, FilmVars)> {
        let mut map_a = FilmVars::new();
        let mut map_b = FilmVars::new();
        for ((stream, block), generator) in &self.generators {
            let (gamma, beta) = generator.generate(g, store, z)?;
            match stream {
                StreamId::A => map_a.insert(*block, (gamma, beta)),
                StreamId::B => map_b.insert(*block, (gamma, beta)),
            };
        }
        Ok((map_a, map_b))
    }

    pub fn generator_count(&self) -> usize {
        self.generators.len()
    }
}

/// Tactile-token projector for the concatenation baseline: per-patch
/// two-layer MLP `d_t -> 2 d_t -> d_lm`; token count is preserved.
#[derive(Debug, Clone)]
pub struct ConcatProjector {
    pub mlp: Mlp,
}

impl ConcatProjector {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_t: usize,
        d_lm: usize,
    ) -> Result<Self> {
        Ok(ConcatProjector { mlp: Mlp::build(store, prefix, d_t, 2 * d_t, d_lm)? })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        patch_features: Var,
    ) -> Result<Var> {
        self.mlp.forward(g, store, patch_features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirds_selection_b6() {
        let b = 6;
        assert_eq!(
            select_film_blocks(DepthVariant::Early, b).unwrap(),
            BTreeSet::from([0, 1])
        );
        assert_eq!(
            select_film_blocks(DepthVariant::Middle, b).unwrap(),
            BTreeSet::from([2, 3])
        );
        assert_eq!(
            select_film_blocks(DepthVariant::Late, b).unwrap(),
            BTreeSet::from([4, 5])
        );
        assert_eq!(
            select_film_blocks(DepthVariant::All, b).unwrap(),
            BTreeSet::from([0, 1, 2, 3, 4, 5])
        );
    }

    #[test]
    fn ceiling_rule_b7() {
        assert_eq!(
            select_film_blocks(DepthVariant::Early, 7).unwrap(),
            BTreeSet::from([0, 1, 2])
        );
    }

    #[test]
    fn small_b_rejected_for_thirds() {
        assert!(select_film_blocks(DepthVariant::Early, 2).is_err());
        assert!(select_film_blocks(DepthVariant::All, 2).is_ok());
    }

    #[test]
    fn fresh_generator_emits_exact_zero() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let generator =
            FilmGenerator::build(&mut store, "film", 8, 16, 0, StreamId::A).unwrap();
        let z: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 2.0).collect();
        let p = generator.generate_value(&store, &z).unwrap();
        assert!(p.gamma.iter().all(|&v| v == 0.0));
        assert!(p.beta.iter().all(|&v| v == 0.0));
        assert_eq!(p.gamma.len(), 16);
    }

    #[test]
    fn zero_z_with_zero_biases_emits_zero() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let generator =
            FilmGenerator::build(&mut store, "film", 8, 16, 1, StreamId::B).unwrap();
        let p = generator.generate_value(&store, &vec![0.0; 8]).unwrap();
        assert!(p.gamma.iter().all(|&v| v == 0.0));
        assert!(p.beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_count_is_blocks_times_streams() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let bank = FilmBank::build(&mut store, "film", 8, 16, DepthVariant::All, 6).unwrap();
        assert_eq!(bank.generator_count(), 12);
        let mut store2: ParamStore<f64> = ParamStore::new(4);
        let bank2 = FilmBank::build(&mut store2, "film", 8, 16, DepthVariant::Late, 6).unwrap();
        assert_eq!(bank2.generator_count(), 4);
    }

    #[test]
    fn unconditioned_block_lookup_fails() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let bank = FilmBank::build(&mut store, "film", 8, 16, DepthVariant::Early, 6).unwrap();
        assert!(bank.generator(StreamId::A, 0).is_ok());
        assert!(bank.generator(StreamId::A, 5).is_err());
    }

    #[test]
    fn only_selected_blocks_have_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        FilmBank::build(&mut store, "film", 8, 16, DepthVariant::Middle, 6).unwrap();
        let names: Vec<String> = store.iter().map(|(_, e)| e.name.clone()).collect();
        for b in 0..6 {
            let present = names.iter().any(|n| n.contains(&format!(".b{b}.")));
            assert_eq!(present, [2, 3].contains(&b), "block {b}");
        }
    }

    #[test]
    fn one_gradient_step_makes_film_nonzero() {
        use crate::optim::{Adam, AdamConfig};
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let generator =
            FilmGenerator::build(&mut store, "film", 4, 4, 0, StreamId::A).unwrap();
        let z = Tensor::matrix(1, 4, vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1; 8]).unwrap();

        let mut adam = Adam::new(&store, AdamConfig { lr: 0.05, ..Default::default() });
        store.zero_grads();
        {
            let mut g: Graph<f64> = Graph::new();
            let zv = g.input(&z).unwrap();
            let (gamma, beta) = generator.generate(&mut g, &store, zv).unwrap();
            let xv = g.input(&x).unwrap();
            let y = g.film_apply(xv, gamma, beta, 2).unwrap();
            let loss = g.cross_entropy(y, &[0, 3]).unwrap();
            g.backward(loss).unwrap();
            g.write_grads(&mut store);
        }
        adam.step(&mut store).unwrap();
        let p = generator.generate_value(&store, &[0.5, -0.25, 1.0, 0.75]).unwrap();
        let any_nonzero =
            p.gamma.iter().chain(p.beta.iter()).any(|&v| v != 0.0);
        assert!(any_nonzero, "training must move gamma/beta off zero");
    }

    #[test]
    fn concat_projector_preserves_token_count() {
        let mut store: ParamStore<f64> = ParamStore::new(4);
        let proj = ConcatProjector::build(&mut store, "tconcat", 32, 96).unwrap();
        let x = Tensor::matrix(16, 32, vec![0.01; 512]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let xv = g.input(&x).unwrap();
        let y = proj.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.dims(y), (16, 96));
    }

    #[test]
    fn concat_projector_gradients() {
        use crate::gradcheck::grad_check;
        let mut store: ParamStore<f64> = ParamStore::new(19);
        let proj = ConcatProjector::build(&mut store, "tconcat", 4, 6).unwrap();
        let x = {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(2, "cp");
            Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
        };
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.input(&x)?;
            let y = proj.forward(g, s, xv)?;
            g.cross_entropy(y, &[0, 5, 2])
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
