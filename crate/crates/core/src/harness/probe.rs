//! Probe-classification evaluation of tactile encoders.
//!
//! For each probe task a fresh two-layer MLP head is trained on the frozen
//! pooled embeddings of the 80% pretraining split; accuracy is reported on
//! the held-out 20%. The output table has one row per probe task (plus the
//! average) and one column per encoder variant.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dataset::{ProbeExample, ProbeTask};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Mlp;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::tactile::TactileEncoder;
use crate::tensor::Tensor;
use crate::vit::{patchify, ViTConfig};

use super::train::probe_split;

/// Pooled embeddings for a set of probe examples under a frozen encoder.
pub fn pooled_embeddings<S: Scalar>(
    encoder: &TactileEncoder,
    store: &ParamStore<S>,
    examples: &[ProbeExample],
) -> Result<Vec<Vec<f64>>> {
    let cfg = *encoder.config();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let mut rows: Vec<S> = Vec::new();
        for ex in chunk {
            let t: Tensor<S> = patchify(&ex.frames, cfg.patch_size)?;
            rows.extend_from_slice(t.data());
        }
        let tokens = Tensor::matrix(chunk.len() * cfg.tokens(), cfg.patch_dim(), rows)?;
        let mut g: Graph<S> = Graph::new();
        let x = g.input(&tokens)?;
        let (_, pooled) = encoder.forward(&mut g, store, x, chunk.len())?;
        let (_, d) = g.dims(pooled);
        let data = g.data(pooled);
        for i in 0..chunk.len() {
            out.push(data[i * d..(i + 1) * d].iter().map(|v| v.into_f64()).collect());
        }
    }
    Ok(out)
}

/// Train a fresh 2-layer MLP head on the train-split embeddings, return
/// held-out accuracy. Embeddings are standardized per dimension with
/// train-split statistics first (the discriminative directions of frozen
/// features are tiny against their common variance; without whitening the
/// head optimizes far too slowly).
pub fn head_accuracy<S: Scalar>(
    embeddings: &[Vec<f64>],
    examples: &[ProbeExample],
    head_steps: usize,
    seed: u64,
    tag: &str,
) -> Result<f64> {
    if embeddings.len() != examples.len() {
        return Err(Error::dim("head_accuracy", "embedding/example count mismatch"));
    }
    let (train_ex, eval_ex) = probe_split(examples);
    let (train_emb_raw, eval_emb_raw) = embeddings.split_at(train_ex.len());
    if train_ex.is_empty() || eval_ex.is_empty() {
        return Err(Error::Precondition("probe split too small".into()));
    }
    let d = train_emb_raw[0].len();

    let mut mean = vec![0.0f64; d];
    for e in train_emb_raw {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= train_emb_raw.len() as f64;
    }
    let mut std = vec![0.0f64; d];
    for e in train_emb_raw {
        for ((sd, v), m) in std.iter_mut().zip(e).zip(&mean) {
            *sd += (v - m) * (v - m);
        }
    }
    for sd in &mut std {
        *sd = (*sd / train_emb_raw.len() as f64).sqrt().max(1e-8);
    }
    let standardize = |e: &Vec<f64>| -> Vec<f64> {
        e.iter().zip(&mean).zip(&std).map(|((v, m), sd)| (v - m) / sd).collect()
    };
    let train_emb: Vec<Vec<f64>> = train_emb_raw.iter().map(standardize).collect();
    let eval_emb: Vec<Vec<f64>> = eval_emb_raw.iter().map(standardize).collect();

    let mut store: ParamStore<S> = ParamStore::new(seed);
    let head = Mlp::build(&mut store, &format!("head.{tag}"), d, d, 2)?;
    let mut adam = Adam::new(&store, AdamConfig { lr: 3e-3, ..Default::default() });
    let mut rng = derive_rng(seed, &format!("probe-head:{tag}"));

    let batch = 16usize;
    for _ in 0..head_steps {
        let mut rows: Vec<S> = Vec::with_capacity(batch * d);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..train_emb.len());
            rows.extend(train_emb[i].iter().map(|&v| S::from_f64(v)));
            labels.push(train_ex[i].label as usize);
        }
        let x = Tensor::matrix(batch, d, rows)?;
        store.zero_grads();
        let mut g: Graph<S> = Graph::new();
        let xv = g.input(&x)?;
        let logits = head.forward(&mut g, &store, xv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        g.write_grads(&mut store);
        adam.step(&mut store)?;
    }

    // Held-out accuracy.
    let mut correct = 0usize;
    for (emb, ex) in eval_emb.iter().zip(eval_ex) {
        let x = Tensor::matrix(1, d, emb.iter().map(|&v| S::from_f64(v)).collect())?;
        let mut g: Graph<S> = Graph::new();
        let xv = g.input(&x)?;
        let logits = head.forward(&mut g, &store, xv)?;
        let row = g.data(logits);
        let pred = if row[1] > row[0] { 1u8 } else { 0u8 };
        if pred == ex.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / eval_ex.len() as f64)
}

/// Accuracy per probe task for one frozen encoder.
pub fn probe_eval<S: Scalar>(
    encoder: &TactileEncoder,
    store: &ParamStore<S>,
    datasets: &[(ProbeTask, Vec<ProbeExample>)],
    head_steps: usize,
    seed: u64,
) -> Result<Vec<(ProbeTask, f64)>> {
    let mut out = Vec::new();
    for (task, examples) in datasets {
        let embeddings = pooled_embeddings(encoder, store, examples)?;
        let acc =
            head_accuracy::<S>(&embeddings, examples, head_steps, seed, task.tag())?;
        out.push((*task, acc));
    }
    Ok(out)
}

/// A frozen random-initialized encoder: the weak-representation baseline.
pub fn random_encoder<S: Scalar>(
    config: ViTConfig,
    seed: u64,
) -> Result<(TactileEncoder, ParamStore<S>)> {
    let mut store: ParamStore<S> = ParamStore::new(seed);
    let encoder = TactileEncoder::build(&mut store, "tac", config)?;
    store.freeze_prefix("tac.");
    Ok((encoder, store))
}

/// Probe-accuracy table: one row per probe task plus the average, one column
/// per encoder variant.
pub fn write_probe_csv(
    path: &Path,
    columns: &[(String, Vec<(ProbeTask, f64)>)],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> =
        std::iter::once("probe_task".to_string()).chain(columns.iter().map(|(n, _)| n.clone())).collect();
    writeln!(f, "{}", header.join(","))?;
    for task in ProbeTask::all() {
        let mut line = vec![task.tag().to_string()];
        for (_, accs) in columns {
            let acc = accs
                .iter()
                .find(|(t, _)| *t == task)
                .map(|(_, a)| *a)
                .ok_or_else(|| Error::Config(format!("missing accuracy for {}", task.tag())))?;
            line.push(format!("{acc:.2}"));
        }
        writeln!(f, "{}", line.join(","))?;
    }
    let mut line = vec!["average".to_string()];
    for (_, accs) in columns {
        let avg = accs.iter().map(|(_, a)| a).sum::<f64>() / accs.len() as f64;
        line.push(format!("{avg:.2}"));
    }
    writeln!(f, "{}", line.join(","))?;
    Ok(())
}

pub fn average_accuracy(accs: &[(ProbeTask, f64)]) -> f64 {
    accs.iter().map(|(_, a)| a).sum::<f64>() / accs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_probe_dataset;

    #[test]
    fn head_learns_linearly_separable_embeddings() {
        // Synthetic embeddings: label fully determined by the sign of dim 0.
        let n = 100;
        let examples: Vec<ProbeExample> = (0..n)
            .map(|i| ProbeExample {
                frames: crate::image::Image::zeros(1, 1, 1),
                label: (i % 2) as u8,
            })
            .collect();
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
                vec![sign * 0.8, 0.1, -0.05, 0.02]
            })
            .collect();
        let acc = head_accuracy::<f64>(&embeddings, &examples, 150, 3, "sep").unwrap();
        assert!(acc >= 99.0, "separable data should be learned, got {acc}");
    }

    #[test]
    fn random_encoder_is_frozen_and_deterministic() {
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 6,
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let (enc_a, store_a) = random_encoder::<f64>(cfg, 5).unwrap();
        let (_enc_b, store_b) = random_encoder::<f64>(cfg, 5).unwrap();
        assert!(store_a.iter().all(|(_, e)| e.frozen));
        let set = make_probe_dataset(ProbeTask::Contact, 8, 1);
        let ea = pooled_embeddings(&enc_a, &store_a, &set).unwrap();
        let eb = pooled_embeddings(&enc_a, &store_b, &set).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn probe_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.csv");
        let col = |base: f64| {
            vec![
                (ProbeTask::RotationHigh, base + 2.0),
                (ProbeTask::RotationLow, base),
                (ProbeTask::Contact, base + 4.0),
            ]
        };
        write_probe_csv(
            &path,
            &[("pretrained".into(), col(90.0)), ("random".into(), col(60.0))],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5); // header + 3 tasks + average
        assert!(lines[0].starts_with("probe_task,pretrained,random"));
        assert!(lines[4].starts_with("average,"));
    }
}
