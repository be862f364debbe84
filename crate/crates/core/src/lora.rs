//! Low-rank adaptation: wrap selected linears with additive `(alpha/r) B A`
//! deltas, freeze the base, and merge adapters back into plain weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LoraAdapter;
use crate::params::checksum_tensor;
use crate::policy::Policy;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Substring patterns over linear names; a linear is wrapped when any
    /// pattern matches.
    pub targets: Vec<String>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        // q/k/v/o and MLP linears of the decoder and both visual streams.
        LoraSpec {
            rank: 8,
            alpha: 16.0,
            targets: vec![
                "vis_a.blocks.".into(),
                "vis_b.blocks.".into(),
                "lm.blocks.".into(),
            ],
        }
    }
}

/// Parameters added by one adapter on a `d_out x d_in` linear.
pub fn adapter_param_count(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}

/// Wrap every matching linear with a fresh adapter (A gaussian, B zero) and
/// freeze the base model. FiLM generators, the tactile-token projector and
/// the tied action head stay trainable; the tactile encoder stays frozen.
/// Returns the total number of adapter parameters added.
pub fn lora_wrap<S: Scalar>(policy: &mut Policy<S>, spec: &LoraSpec) -> Result<usize> {
    if policy.lora_wrapped {
        return Err(Error::State("policy is already LoRA-wrapped".into()));
    }
    if spec.rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }

    // Freeze the pre-existing model, then re-open the method-specific heads.
    for (_, e) in policy.store.iter_mut() {
        e.frozen = true;
    }
    for (_, e) in policy.store.iter_mut() {
        if e.name.starts_with("film.") || e.name.starts_with("tconcat.") || e.name == "lm.tok_embed"
        {
            e.frozen = false;
        }
    }

    // Collect matches first; registering adapters needs &mut store while the
    // linears borrow the module tree.
    let matches: Vec<(String, usize, usize)> = {
        let spec_targets = spec.targets.clone();
        policy
            .linears_mut()
            .iter()
            .filter(|lin| spec_targets.iter().any(|t| lin.name.contains(t.as_str())))
            .map(|lin| (lin.name.clone(), lin.d_in, lin.d_out))
            .collect()
    };
    if matches.is_empty() {
        return Err(Error::Config(format!("no linear matches LoRA targets {:?}", spec.targets)));
    }

    let mut added = 0usize;
    let mut adapters = Vec::with_capacity(matches.len());
    for (name, d_in, d_out) in &matches {
        let a = policy.store.register_normal(&format!("{name}.lora.a"), spec.rank, *d_in, 0.02)?;
        let b = policy.store.register_zeros(&format!("{name}.lora.b"), *d_out, spec.rank)?;
        adapters.push((name.clone(), LoraAdapter { a, b, rank: spec.rank, alpha: spec.alpha }));
        added += adapter_param_count(spec.rank, *d_in, *d_out);
    }
    for lin in policy.linears_mut() {
        if let Some(pos) = adapters.iter().position(|(n, _)| n == &lin.name) {
            lin.lora = Some(adapters[pos].1.clone());
        }
    }
    policy.lora_wrapped = true;
    Ok(added)
}

/// Total adapter parameters currently attached (closed-form check target).
pub fn attached_adapter_params<S: Scalar>(policy: &mut Policy<S>) -> usize {
    policy
        .linears_mut()
        .iter()
        .filter_map(|lin| {
            lin.lora.as_ref().map(|ad| adapter_param_count(ad.rank, lin.d_in, lin.d_out))
        })
        .sum()
}

/// Fold `W <- W + (alpha/r) B A` into every wrapped linear and return a
/// plain (unwrapped, unfrozen-base) policy with identical behavior. The
/// source must be wrapped; merging twice is rejected because the merged
/// policy no longer is.
pub fn lora_merge<S: Scalar>(policy: &Policy<S>) -> Result<Policy<S>> {
    if !policy.lora_wrapped {
        return Err(Error::State("policy has no adapters to merge".into()));
    }
    let mut merged: Policy<S> = Policy::build(policy.config, policy.seed)?;
    merged.copy_matching_params_from(&policy.store)?;
    merged.norm_stats = policy.norm_stats.clone();

    // Apply the low-rank deltas onto the merged store's weights.
    for (_, entry) in policy.store.iter() {
        let name = &entry.name;
        if !name.ends_with(".lora.a") {
            continue;
        }
        let base_name = name.trim_end_matches(".lora.a");
        let a_t = &entry.value;
        let b_id = policy
            .store
            .id(&format!("{base_name}.lora.b"))
            .ok_or_else(|| Error::State(format!("missing lora.b for {base_name}")))?;
        let b_t = policy.store.value(b_id);
        let w_id = merged
            .store
            .id(&format!("{base_name}.w"))
            .ok_or_else(|| Error::State(format!("missing base weight for {base_name}")))?;

        let (r, d_in) = a_t.dims2();
        let (d_out, r2) = b_t.dims2();
        if r != r2 {
            return Err(Error::dim("lora_merge", "rank mismatch between A and B"));
        }
        let scale = S::from_f64(policy_lora_scale(policy)?);

        let mut delta = vec![S::zero(); d_out * d_in];
        crate::graph::matmul_acc(b_t.data(), a_t.data(), d_out, r, d_in, &mut delta);
        let w = merged.store.entry_mut(w_id);
        for (wv, dv) in w.value.data_mut().iter_mut().zip(&delta) {
            *wv = *wv + scale * *dv;
        }
    }
    Ok(merged)
}

/// All adapters in one wrap share rank/alpha; read any attached adapter.
fn policy_lora_scale<S: Scalar>(policy: &Policy<S>) -> Result<f64> {
    for stream in [&policy.dual.stream_a, &policy.dual.stream_b] {
        for b in &stream.blocks {
            for h in &b.attn.heads {
                for lin in [&h.q, &h.k, &h.v, &h.o] {
                    if let Some(ad) = &lin.lora {
                        return Ok(ad.scale());
                    }
                }
            }
            if let Some(ad) = &b.mlp.fc1.lora {
                return Ok(ad.scale());
            }
        }
    }
    for b in &policy.lm_blocks {
        for h in &b.attn.heads {
            for lin in [&h.q, &h.k, &h.v, &h.o] {
                if let Some(ad) = &lin.lora {
                    return Ok(ad.scale());
                }
            }
        }
        if let Some(ad) = &b.mlp.fc1.lora {
            return Ok(ad.scale());
        }
    }
    Err(Error::State("no attached adapter found".into()))
}

/// Checksums of every frozen tensor, for the freeze contract.
pub fn frozen_checksums<S: Scalar>(policy: &Policy<S>) -> Vec<(String, String)> {
    policy
        .store
        .iter()
        .filter(|(_, e)| e.frozen)
        .map(|(_, e)| (e.name.clone(), checksum_tensor::<S>(&e.value)))
        .collect()
}
