//! ViT encoder streams with FiLM hook points.
//!
//! The visual backbone is two independent streams of identical architecture
//! whose per-patch features are fused channel-wise; the tactile encoder is a
//! single smaller stream pooled by mean. Patchification is bit-exact and
//! bijective: raster-ordered non-overlapping patches, channel-last within a
//! patch.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Mlp, Norm, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    /// Default RGB stream: 48x48 input, 8 px patches, 6 blocks of width 64.
    pub fn rgb_default() -> Self {
        ViTConfig {
            image_size: 48,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            blocks: 6,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    /// Default tactile stream: 32x32 input with 6 channels (two stacked RGB
    /// frames), 16 patch tokens of width 32.
    pub fn tactile_default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 6,
            embed_dim: 32,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Flatten an image into `[tokens x patch_size^2 * C]`, patches in raster
/// order (top-left, top-right, ..., bottom-right), pixels raster-ordered
/// within the patch, channels last.
pub fn patchify<S: Scalar>(image: &Image, patch_size: usize) -> Result<Tensor<S>> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch size {patch_size}",
            image.height, image.width
        )));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let tokens = rows * cols;
    let patch_dim = patch_size * patch_size * image.channels;
    let mut out = Vec::with_capacity(tokens * patch_dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..patch_size {
                for c in 0..patch_size {
                    for ch in 0..image.channels {
                        out.push(S::from_f64(image.get(pr * patch_size + r, pc * patch_size + c, ch)));
                    }
                }
            }
        }
    }
    Tensor::matrix(tokens, patch_dim, out)
}

/// Inverse of [`patchify`]; exact on all pixels.
pub fn unpatchify<S: Scalar>(
    tokens: &Tensor<S>,
    patch_size: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Image> {
    let rows = height / patch_size;
    let cols = width / patch_size;
    let (n, pd) = tokens.dims2();
    if n != rows * cols || pd != patch_size * patch_size * channels {
        return Err(Error::dim("unpatchify", format!("{n}x{pd} tokens for {height}x{width}x{channels}")));
    }
    let mut img = Image::zeros(height, width, channels);
    let data = tokens.data();
    let mut i = 0usize;
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..patch_size {
                for c in 0..patch_size {
                    for ch in 0..channels {
                        img.set(pr * patch_size + r, pc * patch_size + c, ch, data[i].into_f64());
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Per-stream FiLM conditioning: block index -> (gamma, beta) graph nodes of
/// shape `[batch x embed_dim]`.
pub type FilmVars = BTreeMap<usize, (Var, Var)>;

/// One ViT stream: patch projection, learned positional embeddings, pre-norm
/// transformer blocks, final norm. No class token; pooling, where needed, is
/// the mean over patch tokens.
#[derive(Debug, Clone)]
pub struct VitStream {
    pub config: ViTConfig,
    pub patch_proj: crate::nn::Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: Norm,
}

/// Per-block feature maps captured at the conditioning site
/// (post-normalization, before any FiLM and before self-attention).
pub struct BlockActivations {
    pub per_block: Vec<Var>,
}

impl VitStream {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: ViTConfig,
    ) -> Result<Self> {
        config.validate()?;
        let patch_proj = crate::nn::Linear::build(
            store,
            &format!("{prefix}.patch_proj"),
            config.patch_dim(),
            config.embed_dim,
            true,
        )?;
        let pos = store.register_normal(
            &format!("{prefix}.pos"),
            config.tokens(),
            config.embed_dim,
            0.02,
        )?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            blocks.push(TransformerBlock::build(
                store,
                &format!("{prefix}.blocks.{i}"),
                config.embed_dim,
                config.heads,
                config.mlp_ratio,
            )?);
        }
        let final_norm = Norm::build(store, &format!("{prefix}.final_norm"), config.embed_dim)?;
        Ok(VitStream { config, patch_proj, pos, blocks, final_norm })
    }

    /// Forward a batch of patchified images stacked as
    /// `[batch*tokens x patch_dim]`. Bidirectional attention within each
    /// image's token group. FiLM params, when given, apply to the normalized
    /// features entering self-attention of the named blocks only.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        patch_tokens: Var,
        batch: usize,
        film: Option<&FilmVars>,
    ) -> Result<(Var, BlockActivations)> {
        let t = self.config.tokens();
        let (rows, _) = g.dims(patch_tokens);
        if rows != batch * t {
            return Err(Error::dim("vit_forward", format!("{rows} rows != {batch} x {t}")));
        }
        if let Some(map) = film {
            if let Some((&bad, _)) = map.iter().find(|(&i, _)| i >= self.config.blocks) {
                return Err(Error::Config(format!(
                    "film block index {bad} out of range (blocks = {})",
                    self.config.blocks
                )));
            }
        }
        let mut x = self.patch_proj.forward(g, store, patch_tokens)?;
        let pos = g.param(store, self.pos)?;
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let pos_rows = g.gather_rows(pos, &idx)?;
        x = g.add(x, pos_rows)?;

        let mut acts = Vec::with_capacity(self.config.blocks);
        for (i, block) in self.blocks.iter().enumerate() {
            let cond = film.and_then(|m| m.get(&i)).copied();
            let (next, f_pre) = block.forward(g, store, x, t, false, cond)?;
            acts.push(f_pre);
            x = next;
        }
        x = self.final_norm.forward(g, store, x)?;
        Ok((x, BlockActivations { per_block: acts }))
    }
}

/// Channel-wise fusion of two per-patch streams, stream `a` first.
pub fn fuse_streams<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    g.concat_cols(&[a, b])
}

/// A fused dual-stream visual backbone (two independent parameter sets over
/// the same architecture).
#[derive(Debug, Clone)]
pub struct DualStream {
    pub stream_a: VitStream,
    pub stream_b: VitStream,
}

impl DualStream {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix_a: &str,
        prefix_b: &str,
        config: ViTConfig,
    ) -> Result<Self> {
        Ok(DualStream {
            stream_a: VitStream::build(store, prefix_a, config)?,
            stream_b: VitStream::build(store, prefix_b, config)?,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.stream_a.config.embed_dim + self.stream_b.config.embed_dim
    }

    /// Returns fused `[batch*tokens x 2*embed_dim]` features.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        patch_tokens: Var,
        batch: usize,
        film_a: Option<&FilmVars>,
        film_b: Option<&FilmVars>,
    ) -> Result<Var> {
        let (fa, _) = self.stream_a.forward(g, store, patch_tokens, batch, film_a)?;
        let (fb, _) = self.stream_b.forward(g, store, patch_tokens, batch, film_b)?;
        fuse_streams(g, fa, fb)
    }
}

/// Fused-visual-to-decoder projector (two-layer MLP, hidden width = output
/// width).
pub fn build_projector<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    fused_dim: usize,
    d_lm: usize,
) -> Result<Mlp> {
    Mlp::build(store, name, fused_dim, d_lm, d_lm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_single_patch_raster_order() {
        let mut img = Image::zeros(8, 8, 1);
        for r in 0..8 {
            for c in 0..8 {
                img.set(r, c, 0, (r * 8 + c) as f64 / 64.0);
            }
        }
        let t: Tensor<f64> = patchify(&img, 8).unwrap();
        assert_eq!(t.dims2(), (1, 64));
        for i in 0..64 {
            assert_eq!(t.data()[i], i as f64 / 64.0);
        }
    }

    #[test]
    fn patchify_token_order_is_row_major() {
        // 16x16, patch 8 -> 4 tokens ordered TL, TR, BL, BR.
        let mut img = Image::zeros(16, 16, 1);
        let fill = |img: &mut Image, r0: usize, c0: usize, v: f64| {
            for r in 0..8 {
                for c in 0..8 {
                    img.set(r0 + r, c0 + c, 0, v);
                }
            }
        };
        fill(&mut img, 0, 0, 0.1);
        fill(&mut img, 0, 8, 0.2);
        fill(&mut img, 8, 0, 0.3);
        fill(&mut img, 8, 8, 0.4);
        let t: Tensor<f64> = patchify(&img, 8).unwrap();
        assert_eq!(t.dims2(), (4, 64));
        for (tok, expect) in [(0, 0.1), (1, 0.2), (2, 0.3), (3, 0.4)] {
            for j in 0..64 {
                assert_eq!(t.data()[tok * 64 + j], expect);
            }
        }
    }

    #[test]
    fn patchify_constant_image() {
        let mut img = Image::zeros(16, 16, 2);
        for v in img.data_mut() {
            *v = 0.625;
        }
        let t: Tensor<f64> = patchify(&img, 8).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Image::zeros(10, 10, 1);
        assert!(patchify::<f64>(&img, 8).is_err());
    }

    #[test]
    fn patchify_bijective() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(88, "patchify");
        let mut img = Image::zeros(16, 24, 3);
        for v in img.data_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let t: Tensor<f64> = patchify(&img, 8).unwrap();
        let back = unpatchify(&t, 8, 16, 24, 3).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn token_count_for_defaults() {
        assert_eq!(ViTConfig::rgb_default().tokens(), 36);
        assert_eq!(ViTConfig::tactile_default().tokens(), 16);
    }

    #[test]
    fn fused_dim_for_defaults() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        let dual = DualStream::build(&mut store, "vis_a", "vis_b", ViTConfig::rgb_default()).unwrap();
        assert_eq!(dual.fused_dim(), 128);
    }

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn rand_image(seed: u64, h: usize, w: usize, ch: usize) -> Image {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(seed, "vit-image");
        let mut img = Image::zeros(h, w, ch);
        for v in img.data_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn zero_film_is_bit_identical_to_unconditioned() {
        let mut store: ParamStore<f64> = ParamStore::new(21);
        let stream = VitStream::build(&mut store, "vis", tiny_cfg()).unwrap();
        let img = rand_image(1, 16, 16, 1);
        let patches: Tensor<f64> = patchify(&img, 8).unwrap();

        let run = |film: Option<&FilmVars>, store: &ParamStore<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(&patches).unwrap();
            let mut fm = FilmVars::new();
            if film.is_some() {
                let zero = Tensor::<f64>::zeros(vec![1, 8]);
                for i in [0usize, 1] {
                    let ga = g.input(&zero).unwrap();
                    let be = g.input(&zero).unwrap();
                    fm.insert(i, (ga, be));
                }
            }
            let arg = if film.is_some() { Some(&fm) } else { None };
            let (out, _) = stream.forward(&mut g, store, x, 1, arg).unwrap();
            g.data(out).to_vec()
        };
        let plain = run(None, &store);
        let dummy = FilmVars::new();
        let filmed = run(Some(&dummy), &store);
        assert_eq!(plain, filmed, "zero film must be bit-identical");
    }

    #[test]
    fn film_index_out_of_range_is_config_error() {
        let mut store: ParamStore<f64> = ParamStore::new(21);
        let stream = VitStream::build(&mut store, "vis", tiny_cfg()).unwrap();
        let img = rand_image(2, 16, 16, 1);
        let patches: Tensor<f64> = patchify(&img, 8).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&patches).unwrap();
        let zero = Tensor::<f64>::zeros(vec![1, 8]);
        let ga = g.input(&zero).unwrap();
        let be = g.input(&zero).unwrap();
        let mut fm = FilmVars::new();
        fm.insert(5, (ga, be)); // only blocks 0..2 exist
        assert!(stream.forward(&mut g, &store, x, 1, Some(&fm)).is_err());
    }

    #[test]
    fn fuse_streams_concatenates() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.input(&Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
        let f = fuse_streams(&mut g, a, b).unwrap();
        assert_eq!(g.data(f), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fuse_stream_b_never_touches_a_columns() {
        let mut store: ParamStore<f64> = ParamStore::new(33);
        let dual = DualStream::build(&mut store, "vis_a", "vis_b", tiny_cfg()).unwrap();
        let img = rand_image(3, 16, 16, 1);
        let patches: Tensor<f64> = patchify(&img, 8).unwrap();

        let run = |store: &ParamStore<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(&patches).unwrap();
            let fused = dual.forward(&mut g, store, x, 1, None, None).unwrap();
            g.data(fused).to_vec()
        };
        let before = run(&store);
        // Perturb a stream-b weight; columns [0, 8) must not move.
        let bid = store.id("vis_b.blocks.0.attn.h0.q.w").unwrap();
        store.entry_mut(bid).value.data_mut()[0] += 0.5;
        let after = run(&store);
        for row in 0..4 {
            for col in 0..8 {
                assert_eq!(before[row * 16 + col], after[row * 16 + col]);
            }
        }
        assert_ne!(before, after);
    }

    #[test]
    fn two_block_vit_end_to_end_gradients() {
        use crate::gradcheck::grad_check;
        let mut store: ParamStore<f64> = ParamStore::new(55);
        let stream = VitStream::build(&mut store, "vis", tiny_cfg()).unwrap();
        let img = rand_image(4, 16, 16, 1);
        let patches: Tensor<f64> = patchify(&img, 8).unwrap();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.input(&patches)?;
            let (out, _) = stream.forward(g, s, x, 1, None)?;
            g.cross_entropy(out, &[3, 1, 0, 7])
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {} at {:?}", report.max_rel_err, report.worst);
    }
}
