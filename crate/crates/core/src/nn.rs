//! Shared model building blocks: linears (with optional low-rank adapters),
//! layer norms, MLPs, multi-head attention, and the pre-norm transformer
//! block used by both the ViT streams and the causal decoder.
//!
//! Modules own [`ParamId`]s into a [`ParamStore`]; `forward` binds them as
//! graph leaves, so gradients land back in the store.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Low-rank additive delta on a linear: effective weight W + (alpha/r) B A.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// A: [r x d_in], gaussian init.
    pub a: ParamId,
    /// B: [d_out x r], zero init so the adapter starts as an identity delta.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// y = x W^T (+ bias). Weight is stored [d_out x d_in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.register_normal(&format!("{name}.w"), d_out, d_in, INIT_STD)?;
        let b = if bias { Some(store.register_zeros(&format!("{name}.b"), 1, d_out)?) } else { None };
        Ok(Linear { name: name.to_string(), w, b, d_in, d_out, lora: None })
    }

    /// Zero-initialized weight and bias; used by FiLM generator output layers.
    pub fn build_zeroed<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.register_zeros(&format!("{name}.w"), d_out, d_in)?;
        let b = Some(store.register_zeros(&format!("{name}.b"), 1, d_out)?);
        Ok(Linear { name: name.to_string(), w, b, d_in, d_out, lora: None })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let mut y = g.matmul_nt(x, w)?;
        if let Some(bid) = self.b {
            let b = g.param(store, bid)?;
            y = g.add_bias_row(y, b)?;
        }
        if let Some(lora) = &self.lora {
            let a = g.param(store, lora.a)?;
            let bm = g.param(store, lora.b)?;
            let xa = g.matmul_nt(x, a)?;
            let xab = g.matmul_nt(xa, bm)?;
            let delta = g.scale(xab, S::from_f64(lora.scale()))?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }
}

/// Affine layer norm parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn build<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.register_const(&format!("{name}.gain"), 1, dim, 1.0)?;
        let bias = store.register_zeros(&format!("{name}.bias"), 1, dim)?;
        Ok(Norm { gain, bias })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two-layer MLP with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::build(store, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::build(store, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let a = g.gelu(h)?;
        self.fc2.forward(g, store, a)
    }
}

/// One attention head's projections. Output projection is per head as well;
/// head outputs are summed and a single shared bias is added.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
    pub out_bias: ParamId,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let head_dim = dim / heads;
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            hs.push(AttentionHead {
                q: Linear::build(store, &format!("{name}.h{h}.q"), dim, head_dim, true)?,
                k: Linear::build(store, &format!("{name}.h{h}.k"), dim, head_dim, true)?,
                v: Linear::build(store, &format!("{name}.h{h}.v"), dim, head_dim, true)?,
                o: Linear::build(store, &format!("{name}.h{h}.o"), head_dim, dim, false)?,
            });
        }
        let out_bias = store.register_zeros(&format!("{name}.out_bias"), 1, dim)?;
        Ok(MultiHeadAttention { heads: hs, out_bias, head_dim })
    }

    /// Scaled dot-product attention over groups of `t` rows. `causal` masks
    /// future positions within each group.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        t: usize,
        causal: bool,
    ) -> Result<Var> {
        let inv_sqrt = S::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let mut acc: Option<Var> = None;
        for head in &self.heads {
            let q = head.q.forward(g, store, x)?;
            let k = head.k.forward(g, store, x)?;
            let v = head.v.forward(g, store, x)?;
            let scores = g.matmul_nt_grouped(q, k, t)?;
            let scaled = g.scale(scores, inv_sqrt)?;
            let probs = g.softmax_rows(scaled, t, causal)?;
            let ctx = g.matmul_grouped(probs, v, t)?;
            let out = head.o.forward(g, store, ctx)?;
            acc = Some(match acc {
                None => out,
                Some(a) => g.add(a, out)?,
            });
        }
        let bias = g.param(store, self.out_bias)?;
        g.add_bias_row(acc.expect("at least one head"), bias)
    }
}

/// Pre-norm transformer block. The post-norm features feeding attention are
/// the conditioning site: callers may pass per-group FiLM params to modulate
/// them before self-attention. Returns the block output and those post-norm
/// (pre-FiLM) features.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: Norm,
    pub attn: MultiHeadAttention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: Norm::build(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::build(store, &format!("{name}.attn"), dim, heads)?,
            ln2: Norm::build(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::build(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        t: usize,
        causal: bool,
        film: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let normed = self.ln1.forward(g, store, x)?;
        let attn_in = match film {
            Some((gamma, beta)) => g.film_apply(normed, gamma, beta, t)?,
            None => normed,
        };
        let att = self.attn.forward(g, store, attn_in, t, causal)?;
        let x = g.add(x, att)?;
        let normed2 = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, normed2)?;
        let out = g.add(x, m)?;
        Ok((out, normed))
    }

    /// All linears of this block, for LoRA target matching.
    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = Vec::new();
        for h in &mut self.attn.heads {
            v.push(&mut h.q);
            v.push(&mut h.k);
            v.push(&mut h.v);
            v.push(&mut h.o);
        }
        v.push(&mut self.mlp.fc1);
        v.push(&mut self.mlp.fc2);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn attention_requires_divisible_heads() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        assert!(MultiHeadAttention::build(&mut store, "a", 10, 4).is_err());
        let mut store2: ParamStore<f64> = ParamStore::new(0);
        assert!(MultiHeadAttention::build(&mut store2, "a", 8, 4).is_ok());
    }

    #[test]
    fn single_token_attention_is_value_path() {
        // With one token, softmax over one key is 1, so the output equals
        // o(v(x)) + bias regardless of q/k.
        let mut store: ParamStore<f64> = ParamStore::new(7);
        let mha = MultiHeadAttention::build(&mut store, "attn", 4, 1).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.5, 0.1]).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let xv = g.input(&x).unwrap();
        let out = mha.forward(&mut g, &store, xv, 1, false).unwrap();

        let mut g2: Graph<f64> = Graph::new();
        let xv2 = g2.input(&x).unwrap();
        let v = mha.heads[0].v.forward(&mut g2, &store, xv2).unwrap();
        let o = mha.heads[0].o.forward(&mut g2, &store, v).unwrap();
        let bias = g2.param(&store, mha.out_bias).unwrap();
        let expect = g2.add_bias_row(o, bias).unwrap();

        for (a, b) in g.data(out).iter().zip(g2.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_blocks_future_influence() {
        // Perturbing token 1 must leave row 0's output unchanged.
        let mut store: ParamStore<f64> = ParamStore::new(3);
        let mha = MultiHeadAttention::build(&mut store, "attn", 4, 2).unwrap();
        let base = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8]).unwrap();
        let mut pert = base.clone();
        pert.data_mut()[4] = 9.0;

        let run = |t: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(t).unwrap();
            let out = mha.forward(&mut g, &store, x, 2, true).unwrap();
            g.data(out)[..4].to_vec()
        };
        assert_eq!(run(&base), run(&pert));
    }

    #[test]
    fn attention_full_block_gradients() {
        // t=3, c=8, heads=2 against finite differences.
        use crate::gradcheck::grad_check;
        let mut store: ParamStore<f64> = ParamStore::new(11);
        let mha = MultiHeadAttention::build(&mut store, "attn", 8, 2).unwrap();
        let x_data: Vec<f64> = {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(5, "attn-x");
            (0..24).map(|_| rng.random_range(-0.5..0.5)).collect()
        };
        let x = Tensor::matrix(3, 8, x_data).unwrap();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.input(&x)?;
            let out = mha.forward(g, s, xv, 3, false)?;
            g.cross_entropy(out, &[1, 0, 7])
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn lora_zero_b_is_identity() {
        let mut store: ParamStore<f64> = ParamStore::new(13);
        let mut lin = Linear::build(&mut store, "lin", 4, 3, true).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.5, -0.25, 1.0, 0.125, 0.0, 2.0, -1.0, 0.75]).unwrap();

        let run = |lin: &Linear, store: &ParamStore<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.input(&x).unwrap();
            let y = lin.forward(&mut g, store, xv).unwrap();
            g.data(y).to_vec()
        };
        let before = run(&lin, &store);

        let a = store.register_normal("lin.lora.a", 2, 4, 0.02).unwrap();
        let b = store.register_zeros("lin.lora.b", 3, 2).unwrap();
        lin.lora = Some(LoraAdapter { a, b, rank: 2, alpha: 16.0 });
        let after = run(&lin, &store);
        assert_eq!(before, after, "zero-init adapter must not change the forward");
    }
}
