//! Action discretization and the token vocabulary layout.
//!
//! Vocabulary: `[0, V_t)` word-level text ids (id 0 reserved for unknown
//! words), `[V_t, V_t + K)` action bins, then BOS/EOS/PAD. Continuous
//! actions normalize per dimension against robust lo/hi bounds and quantize
//! uniformly into K bins; decoding maps a bin back to its center.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_size: usize,
    pub action_bins: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        VocabLayout { text_size: 64, action_bins: 256 }
    }
}

impl VocabLayout {
    pub fn total(&self) -> usize {
        self.text_size + self.action_bins + 3
    }

    pub fn action_start(&self) -> usize {
        self.text_size
    }

    pub fn action_end(&self) -> usize {
        self.text_size + self.action_bins
    }

    pub fn bos(&self) -> usize {
        self.text_size + self.action_bins
    }

    pub fn eos(&self) -> usize {
        self.text_size + self.action_bins + 1
    }

    pub fn pad(&self) -> usize {
        self.text_size + self.action_bins + 2
    }

    pub fn is_action(&self, token: usize) -> bool {
        (self.action_start()..self.action_end()).contains(&token)
    }

    pub fn action_token(&self, bin: usize) -> usize {
        debug_assert!(bin < self.action_bins);
        self.action_start() + bin
    }

    pub fn bin_of(&self, token: usize) -> Result<usize> {
        if !self.is_action(token) {
            return Err(Error::TokenRange { token, expected: "action" });
        }
        Ok(token - self.action_start())
    }
}

/// Per-dimension normalization bounds (1st/99th percentile of the training
/// actions). Persisted with every policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl NormStats {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim("norm_stats", "lo/hi length mismatch"));
        }
        for (d, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) {
                return Err(Error::Config(format!(
                    "degenerate normalization bounds in dim {d}: lo {l} >= hi {h}"
                )));
            }
        }
        Ok(NormStats { lo, hi })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }
}

/// Per dim: clamp to [lo, hi], quantize into K uniform bins, offset into the
/// action token range.
pub fn tokenize_action(action: &[f64], stats: &NormStats, layout: &VocabLayout) -> Result<Vec<usize>> {
    if action.len() != stats.dims() {
        return Err(Error::dim("tokenize_action", "action dims vs stats"));
    }
    let k = layout.action_bins as f64;
    Ok(action
        .iter()
        .enumerate()
        .map(|(d, &a)| {
            let unit = ((a - stats.lo[d]) / (stats.hi[d] - stats.lo[d])).clamp(0.0, 1.0);
            let bin = ((unit * k) as usize).min(layout.action_bins - 1);
            layout.action_token(bin)
        })
        .collect())
}

/// Inverse: bin center `lo + ((bin + 0.5) / K) (hi - lo)`.
pub fn detokenize_action(
    tokens: &[usize],
    stats: &NormStats,
    layout: &VocabLayout,
) -> Result<Vec<f64>> {
    if tokens.len() != stats.dims() {
        return Err(Error::dim("detokenize_action", "token count vs stats"));
    }
    let k = layout.action_bins as f64;
    tokens
        .iter()
        .enumerate()
        .map(|(d, &t)| {
            let bin = layout.bin_of(t)? as f64;
            Ok(stats.lo[d] + ((bin + 0.5) / k) * (stats.hi[d] - stats.lo[d]))
        })
        .collect()
}

/// Reserved text id for out-of-vocabulary words.
pub const UNK_ID: usize = 0;

/// Word list covering the benchmark instruction strings. The text pipeline
/// is a fixed word-level vocabulary: anything outside it maps to [`UNK_ID`].
const CORE_WORDS: &[&str] = &[
    "insert", "the", "peg", "into", "base", "circle", "square", "pentagon", "plug", "connector",
    "port", "cable", "socket", "push", "fit", "align", "hole", "slot", "a", "b",
];

#[derive(Debug, Clone)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    layout: VocabLayout,
}

impl TextVocab {
    pub fn standard(layout: VocabLayout) -> Result<Self> {
        Self::from_words(CORE_WORDS, layout)
    }

    pub fn from_words(words: &[&str], layout: VocabLayout) -> Result<Self> {
        // Id 0 is UNK; real words start at 1.
        if words.len() + 1 > layout.text_size {
            return Err(Error::Config(format!(
                "{} words exceed text vocab of {}",
                words.len(),
                layout.text_size
            )));
        }
        let mut list = vec!["<unk>".to_string()];
        let mut index = HashMap::new();
        for w in words {
            index.insert(w.to_string(), list.len());
            list.push(w.to_string());
        }
        Ok(TextVocab { words: list, index, layout })
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> NormStats {
        NormStats::new(vec![-1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn boundary_bins() {
        let layout = VocabLayout::default();
        let s = stats();
        let lo_tok = tokenize_action(&[-1.0], &s, &layout).unwrap()[0];
        assert_eq!(layout.bin_of(lo_tok).unwrap(), 0);
        let hi_tok = tokenize_action(&[1.0], &s, &layout).unwrap()[0];
        assert_eq!(layout.bin_of(hi_tok).unwrap(), 255);
    }

    #[test]
    fn center_bin_and_detok_value() {
        let layout = VocabLayout::default();
        let s = stats();
        let tok = tokenize_action(&[0.0], &s, &layout).unwrap()[0];
        assert_eq!(layout.bin_of(tok).unwrap(), 128);
        let back = detokenize_action(&[tok], &s, &layout).unwrap()[0];
        assert!((back - 0.00390625).abs() < 1e-15);
    }

    #[test]
    fn bin_zero_center() {
        let layout = VocabLayout::default();
        let s = stats();
        let tok = layout.action_token(0);
        let back = detokenize_action(&[tok], &s, &layout).unwrap()[0];
        assert!((back - (-0.99609375)).abs() < 1e-15);
    }

    #[test]
    fn roundtrip_error_within_half_bin() {
        let layout = VocabLayout::default();
        let s = stats();
        let half_bin = (1.0 - (-1.0)) / (2.0 * layout.action_bins as f64);
        let mut a = -1.0;
        while a <= 1.0 {
            let toks = tokenize_action(&[a], &s, &layout).unwrap();
            let back = detokenize_action(&toks, &s, &layout).unwrap()[0];
            assert!((a - back).abs() <= half_bin + 1e-12, "a = {a}, back = {back}");
            a += 0.0173;
        }
    }

    #[test]
    fn text_token_rejected_by_detokenize() {
        let layout = VocabLayout::default();
        let s = stats();
        assert!(detokenize_action(&[3], &s, &layout).is_err());
        assert!(detokenize_action(&[layout.bos()], &s, &layout).is_err());
    }

    #[test]
    fn degenerate_stats_rejected() {
        assert!(NormStats::new(vec![0.5], vec![0.5]).is_err());
        assert!(NormStats::new(vec![0.5], vec![0.4]).is_err());
    }

    #[test]
    fn vocab_layout_totals() {
        let layout = VocabLayout::default();
        assert_eq!(layout.total(), 64 + 256 + 3);
        assert_eq!(layout.action_start(), 64);
        assert_eq!(layout.action_end(), 320);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = TextVocab::standard(VocabLayout::default()).unwrap();
        let ids = vocab.tokenize("insert the warp core");
        assert_ne!(ids[0], UNK_ID);
        assert_ne!(ids[1], UNK_ID);
        assert_eq!(ids[2], UNK_ID);
        assert_eq!(ids[3], UNK_ID);
    }

    #[test]
    fn tokenize_is_case_insensitive() {
        let vocab = TextVocab::standard(VocabLayout::default()).unwrap();
        assert_eq!(vocab.tokenize("Insert THE Peg"), vocab.tokenize("insert the peg"));
    }
}
