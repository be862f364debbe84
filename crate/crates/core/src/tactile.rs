//! Tactile frame preprocessing and the pooled tactile embedding.
//!
//! Preprocessing mirrors the two-frame recipe: the frame at `t` and the one
//! five steps earlier (clamped at episode start) are background-subtracted,
//! clamped to [0, 1], concatenated channel-wise (older frame first) and
//! area-resized to the encoder resolution.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{patchify, ViTConfig, VitStream};

/// Frame-pair separation, in control steps.
pub const FRAME_GAP: usize = 5;

/// Per-patch tactile features plus their mean — the pooled conditioning
/// vector `z`.
#[derive(Debug, Clone)]
pub struct TactileEmbedding<S> {
    pub patch_features: Tensor<S>,
    pub pooled: Vec<S>,
}

impl<S: Scalar> TactileEmbedding<S> {
    pub fn from_patch_features(patch_features: Tensor<S>) -> Self {
        let (rows, cols) = patch_features.dims2();
        let mut pooled = vec![S::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                pooled[c] = pooled[c] + patch_features.data()[r * cols + c];
            }
        }
        let n = S::from_f64(rows as f64);
        for p in &mut pooled {
            *p = *p / n;
        }
        TactileEmbedding { patch_features, pooled }
    }
}

/// Background-remove, stack (older first) and resize one frame pair.
pub fn preprocess_pair(
    older: &Image,
    current: &Image,
    background: &Image,
    out_size: usize,
) -> Result<Image> {
    let older_d = older.sub_clamped(background)?;
    let current_d = current.sub_clamped(background)?;
    let stacked = older_d.concat_channels(&current_d)?;
    if stacked.height == out_size && stacked.width == out_size {
        Ok(stacked)
    } else {
        stacked.downsample_area(out_size, out_size)
    }
}

/// Select frames `t` and `max(t - FRAME_GAP, 0)`, remove the background
/// reference, stack channels (older first) and resize.
pub fn tactile_preprocess(
    history: &[Image],
    t: usize,
    background: &Image,
    out_size: usize,
) -> Result<Image> {
    if history.is_empty() {
        return Err(Error::Precondition("tactile history is empty".into()));
    }
    if t >= history.len() {
        return Err(Error::Precondition(format!(
            "step {t} outside history of {} frames",
            history.len()
        )));
    }
    preprocess_pair(&history[t.saturating_sub(FRAME_GAP)], &history[t], background, out_size)
}

/// ViT tactile encoder; frozen after probe pretraining (or frozen at random
/// init when no pretrained weights are supplied).
#[derive(Debug, Clone)]
pub struct TactileEncoder {
    pub stream: VitStream,
}

impl TactileEncoder {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: ViTConfig,
    ) -> Result<Self> {
        Ok(TactileEncoder { stream: VitStream::build(store, prefix, config)? })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.stream.config
    }

    /// Graph-level encode of a stacked batch: returns per-patch features
    /// `[batch*p x d_t]` and pooled `z` `[batch x d_t]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        patch_tokens: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let (features, _) = self.stream.forward(g, store, patch_tokens, batch, None)?;
        let pooled = g.mean_rows_grouped(features, self.stream.config.tokens())?;
        Ok((features, pooled))
    }

    /// Value-level encode of one preprocessed image (probe pipelines).
    pub fn encode_value<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        preprocessed: &Image,
    ) -> Result<TactileEmbedding<S>> {
        let cfg = &self.stream.config;
        if preprocessed.height != cfg.image_size
            || preprocessed.width != cfg.image_size
            || preprocessed.channels != cfg.channels
        {
            return Err(Error::dim(
                "tactile_encode",
                format!(
                    "image {}x{}x{} vs config {}x{}x{}",
                    preprocessed.height,
                    preprocessed.width,
                    preprocessed.channels,
                    cfg.image_size,
                    cfg.image_size,
                    cfg.channels
                ),
            ));
        }
        let tokens: Tensor<S> = patchify(preprocessed, cfg.patch_size)?;
        let mut g: Graph<S> = Graph::new();
        let x = g.input(&tokens)?;
        let (features, _) = self.forward(&mut g, store, x, 1)?;
        let (rows, cols) = g.dims(features);
        let tensor = Tensor::matrix(rows, cols, g.data(features).to_vec())?;
        Ok(TactileEmbedding::from_patch_features(tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: f64) -> Image {
        let mut img = Image::zeros(32, 32, 3);
        for p in img.data_mut() {
            *p = v;
        }
        img
    }

    #[test]
    fn step_zero_duplicates_first_frame() {
        let history = vec![frame(0.5)];
        let background = frame(0.25);
        let out = tactile_preprocess(&history, 0, &background, 32).unwrap();
        assert_eq!(out.channels, 6);
        // Both halves come from frame 0: 0.5 - 0.25 everywhere.
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn background_frame_maps_to_zero() {
        let history = vec![frame(0.25)];
        let background = frame(0.25);
        let out = tactile_preprocess(&history, 0, &background, 32).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_count_doubles() {
        let history: Vec<Image> = (0..8).map(|i| frame(i as f64 / 10.0)).collect();
        let out = tactile_preprocess(&history, 7, &frame(0.0), 32).unwrap();
        assert_eq!(out.channels, 6);
        // Older frame (7 - 5 = 2) fills the first three channels.
        assert!((out.get(0, 0, 0) - 0.2).abs() < 1e-15);
        assert!((out.get(0, 0, 3) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn empty_history_is_error() {
        assert!(tactile_preprocess(&[], 0, &frame(0.0), 32).is_err());
    }

    #[test]
    fn pooled_is_mean_of_patches() {
        let pf = Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let emb: TactileEmbedding<f64> = TactileEmbedding::from_patch_features(pf);
        assert!((emb.pooled[0] - 2.0).abs() < 1e-12);
        assert!((emb.pooled[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn encode_is_deterministic_and_pools_mean() {
        let mut store: ParamStore<f64> = ParamStore::new(9);
        let enc = TactileEncoder::build(&mut store, "tac", ViTConfig::tactile_default()).unwrap();
        let mut img = Image::zeros(32, 32, 6);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i % 17) as f64) / 17.0;
        }
        let a = enc.encode_value(&store, &img).unwrap();
        let b = enc.encode_value(&store, &img).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.pooled.len(), 32);

        // Pooling linearity: mean of patch features equals pooled, checked
        // against an independent accumulation.
        let (rows, cols) = a.patch_features.dims2();
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += a.patch_features.data()[r * cols + c];
            }
            assert!((acc / rows as f64 - a.pooled[c]).abs() < 1e-12);
        }
    }
}
