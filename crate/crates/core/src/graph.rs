//! Reverse-mode autodiff over a flat operation graph.
//!
//! A [`Graph`] is built fresh for every forward pass (one training step, one
//! decode step). Leaves are either inputs (no gradient) or parameters bound
//! from a [`ParamStore`]; operations allocate their outputs eagerly and the
//! backward pass walks the node list in reverse, accumulating vector-Jacobian
//! products. Gradients flow back into the store with [`Graph::write_grads`].
//!
//! Every op output is checked for NaN/Inf; violations surface as
//! [`Error::NonFinite`] instead of propagating.
//!
//! Sequence batching convention: a batch of B sequences of uniform length t
//! is stored stacked as a `[B*t x c]` matrix. Row-wise ops (linear, norm,
//! activation) ignore the grouping; attention-style ops take `t` and treat
//! each consecutive block of t rows as one sequence.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    /// a[m x k] * b[k x n]
    Matmul { a: Var, b: Var },
    /// a[m x k] * b[n x k]^T -> [m x n]
    MatmulNT { a: Var, b: Var },
    /// per group of t rows: a_g[t x d] * b_g[t x d]^T -> [t x t]
    MatmulNTGrouped { a: Var, b: Var, t: usize },
    /// per group of t rows: a_g[t x t] * b_g[t x d] -> [t x d]
    MatmulGrouped { a: Var, b: Var, t: usize },
    Add { a: Var, b: Var },
    Scale { x: Var, c: S },
    /// x[r x c] + broadcast bias[1 x c]
    AddBiasRow { x: Var, bias: Var },
    Gelu { x: Var },
    /// Row-wise layer norm with affine gain/bias; saves per-row mean/rstd.
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<S>, rstd: Vec<S> },
    /// Column-wise standardization over the batch (whitening for probe
    /// heads); saves per-column mean/rstd.
    StandardizeCols { x: Var, mean: Vec<S>, rstd: Vec<S> },
    /// Row-wise softmax over [B*t x t]; `causal` masks j > (row % t).
    SoftmaxRows { x: Var, t: usize, causal: bool },
    /// Mean NLL over rows of logits[n x v]; saves softmax probabilities.
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    /// Row r of group g: x_r * (1 + gamma_g) + beta_g.
    FilmApply { x: Var, gamma: Var, beta: Var, t: usize },
    /// [B*t x c] -> [B x c], mean over each group's rows.
    MeanRowsGrouped { x: Var, t: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    /// out[i] = x[idx[i]]; backward scatter-adds.
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, from: usize, to: usize },
}

struct Node<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// (node, parameter) bindings for gradient write-back.
    bindings: Vec<(Var, ParamId)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>, needs_grad: bool, op: Op<S>) -> Result<Var> {
        debug_assert_eq!(rows * cols, data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { rows, cols, data, grad: None, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    /// Input leaf: data the loss is never differentiated against.
    pub fn input(&mut self, t: &Tensor<S>) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), false, Op::Leaf)
    }

    /// Differentiable leaf not tied to a store (tests, probes).
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<Var> {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), true, Op::Leaf)
    }

    /// Bind a store parameter as a differentiable leaf. `write_grads`
    /// accumulates its gradient back into the store entry.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.value(id))?;
        self.bindings.push((v, id));
        Ok(v)
    }

    // ── Operations ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(m, n, out, needs, Op::Matmul { a, b })
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_acc(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(m, n, out, needs, Op::MatmulNT { a, b })
    }

    pub fn matmul_nt_grouped(&mut self, a: Var, b: Var, t: usize) -> Result<Var> {
        let (ra, d) = self.dims(a);
        let (rb, d2) = self.dims(b);
        if ra != rb || d != d2 || t == 0 || ra % t != 0 {
            return Err(Error::dim(
                "matmul_nt_grouped",
                format!("[{ra}x{d}] vs [{rb}x{d2}], group {t}"),
            ));
        }
        let groups = ra / t;
        let mut out = vec![S::zero(); ra * t];
        for g in 0..groups {
            let av = &self.data(a)[g * t * d..(g + 1) * t * d];
            let bv = &self.data(b)[g * t * d..(g + 1) * t * d];
            matmul_nt_acc(av, bv, t, d, t, &mut out[g * t * t..(g + 1) * t * t]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(ra, t, out, needs, Op::MatmulNTGrouped { a, b, t })
    }

    pub fn matmul_grouped(&mut self, a: Var, b: Var, t: usize) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, d) = self.dims(b);
        if ca != t || ra != rb || t == 0 || ra % t != 0 {
            return Err(Error::dim(
                "matmul_grouped",
                format!("[{ra}x{ca}] * [{rb}x{d}], group {t}"),
            ));
        }
        let groups = ra / t;
        let mut out = vec![S::zero(); ra * d];
        for g in 0..groups {
            let av = &self.data(a)[g * t * t..(g + 1) * t * t];
            let bv = &self.data(b)[g * t * d..(g + 1) * t * d];
            matmul_acc(av, bv, t, t, d, &mut out[g * t * d..(g + 1) * t * d]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(ra, d, out, needs, Op::MatmulGrouped { a, b, t })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::dim("add", format!("[{ra}x{ca}] + [{rb}x{cb}]")));
        }
        let out: Vec<S> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(ra, ca, out, needs, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let (r, cc) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(r, cc, out, needs, Op::Scale { x, c })
    }

    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (rb, cb) = self.dims(bias);
        if rb != 1 || cb != c {
            return Err(Error::dim("add_bias_row", format!("x [{r}x{c}], bias [{rb}x{cb}]")));
        }
        let bv = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(r, c, out, needs, Op::AddBiasRow { x, bias })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| gelu_forward(v)).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (rg, cg) = self.dims(gain);
        let (rb, cb) = self.dims(bias);
        if rg != 1 || cg != c || rb != 1 || cb != c {
            return Err(Error::dim(
                "layer_norm",
                format!("x [{r}x{c}], gain [{rg}x{cg}], bias [{rb}x{cb}]"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Precondition("layer_norm eps must be > 0".into()));
        }
        let epss = S::from_f64(eps);
        let cn = S::from_f64(c as f64);
        let mut out = vec![S::zero(); r * c];
        let mut means = vec![S::zero(); r];
        let mut rstds = vec![S::zero(); r];
        {
            let xv = self.data(x);
            let gv = self.data(gain);
            let bv = self.data(bias);
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mut mean = S::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean / cn;
                let mut var = S::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / cn;
                let rstd = S::one() / (var + epss).sqrt();
                means[i] = mean;
                rstds[i] = rstd;
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    let n = (row[j] - mean) * rstd;
                    orow[j] = n * gv[j] + bv[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(r, c, out, needs, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds })
    }

    /// Standardize each column over the rows: `(x - mean) / sqrt(var + eps)`.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(Error::dim("standardize_cols", "empty input"));
        }
        let rn = S::from_f64(r as f64);
        let epss = S::from_f64(eps);
        let mut mean = vec![S::zero(); c];
        let mut rstd = vec![S::zero(); c];
        let mut out = vec![S::zero(); r * c];
        {
            let xv = self.data(x);
            for i in 0..r {
                for j in 0..c {
                    mean[j] = mean[j] + xv[i * c + j];
                }
            }
            for m in mean.iter_mut() {
                *m = *m / rn;
            }
            for i in 0..r {
                for j in 0..c {
                    let d = xv[i * c + j] - mean[j];
                    rstd[j] = rstd[j] + d * d;
                }
            }
            for s in rstd.iter_mut() {
                *s = S::one() / (*s / rn + epss).sqrt();
            }
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = (xv[i * c + j] - mean[j]) * rstd[j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::StandardizeCols { x, mean, rstd })
    }

    pub fn softmax_rows(&mut self, x: Var, t: usize, causal: bool) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c != t || t == 0 || r % t != 0 {
            return Err(Error::dim("softmax_rows", format!("[{r}x{c}], group {t}")));
        }
        let mut out = vec![S::zero(); r * c];
        {
            let xv = self.data(x);
            for i in 0..r {
                let limit = if causal { (i % t) + 1 } else { t };
                let row = &xv[i * c..i * c + limit];
                let mut maxv = row[0];
                for &v in row {
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut sum = S::zero();
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..limit {
                    let e = (row[j] - maxv).exp();
                    orow[j] = e;
                    sum = sum + e;
                }
                let inv = S::one() / sum;
                for o in orow[..limit].iter_mut() {
                    *o = *o * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::SoftmaxRows { x, t, causal })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} logit rows vs {} targets", targets.len()),
            ));
        }
        for &t in targets {
            if t >= v {
                return Err(Error::TokenRange { token: t, expected: "vocab" });
            }
        }
        let mut probs = vec![S::zero(); n * v];
        let mut loss = S::zero();
        {
            let lv = self.data(logits);
            for i in 0..n {
                let row = &lv[i * v..(i + 1) * v];
                let mut maxv = row[0];
                for &x in row {
                    if x > maxv {
                        maxv = x;
                    }
                }
                let prow = &mut probs[i * v..(i + 1) * v];
                let mut sum = S::zero();
                for j in 0..v {
                    let e = (row[j] - maxv).exp();
                    prow[j] = e;
                    sum = sum + e;
                }
                let inv = S::one() / sum;
                for p in prow.iter_mut() {
                    *p = *p * inv;
                }
                // -log softmax[target], computed from the shifted logits for
                // stability.
                loss = loss - ((row[targets[i]] - maxv) - sum.ln());
            }
        }
        loss = loss / S::from_f64(n as f64);
        let needs = self.needs(logits);
        self.push(1, 1, vec![loss], needs, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// FiLM: row r (group g = r / t) maps to `x_r * (1 + gamma_g) + beta_g`.
    pub fn film_apply(&mut self, x: Var, gamma: Var, beta: Var, t: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (bg, cg) = self.dims(gamma);
        let (bb, cb) = self.dims(beta);
        if t == 0 || r % t != 0 {
            return Err(Error::dim("film_apply", format!("{r} rows, group {t}")));
        }
        let groups = r / t;
        if cg != c || cb != c || bg != groups || bb != groups {
            return Err(Error::dim(
                "film_apply",
                format!("x [{r}x{c}] ({groups} groups), gamma [{bg}x{cg}], beta [{bb}x{cb}]"),
            ));
        }
        let mut out = vec![S::zero(); r * c];
        {
            let xv = self.data(x);
            let gv = self.data(gamma);
            let bv = self.data(beta);
            for i in 0..r {
                let g = i / t;
                let grow = &gv[g * c..(g + 1) * c];
                let brow = &bv[g * c..(g + 1) * c];
                let xrow = &xv[i * c..(i + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] = xrow[j] * (S::one() + grow[j]) + brow[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(r, c, out, needs, Op::FilmApply { x, gamma, beta, t })
    }

    pub fn mean_rows_grouped(&mut self, x: Var, t: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if t == 0 || r % t != 0 {
            return Err(Error::dim("mean_rows_grouped", format!("{r} rows, group {t}")));
        }
        let groups = r / t;
        let tn = S::from_f64(t as f64);
        let mut out = vec![S::zero(); groups * c];
        {
            let xv = self.data(x);
            for g in 0..groups {
                let orow = &mut out[g * c..(g + 1) * c];
                for i in 0..t {
                    let xrow = &xv[(g * t + i) * c..(g * t + i + 1) * c];
                    for j in 0..c {
                        orow[j] = orow[j] + xrow[j];
                    }
                }
                for o in orow.iter_mut() {
                    *o = *o / tn;
                }
            }
        }
        let needs = self.needs(x);
        self.push(groups, c, out, needs, Op::MeanRowsGrouped { x, t })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no parts"));
        }
        let (r, _) = self.dims(parts[0]);
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.dims(p);
            if rp != r {
                return Err(Error::dim("concat_cols", format!("row mismatch {rp} vs {r}")));
            }
            total += cp;
        }
        let mut out = vec![S::zero(); r * total];
        let mut off = 0usize;
        for &p in parts {
            let (_, cp) = self.dims(p);
            let pv = self.data(p);
            for i in 0..r {
                out[i * total + off..i * total + off + cp]
                    .copy_from_slice(&pv[i * cp..(i + 1) * cp]);
            }
            off += cp;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(r, total, out, needs, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no parts"));
        }
        let (_, c) = self.dims(parts[0]);
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.dims(p);
            if cp != c {
                return Err(Error::dim("concat_rows", format!("col mismatch {cp} vs {c}")));
            }
            total += rp;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(total, c, out, needs, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Row gather; doubles as embedding lookup when `x` is a table.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        for &i in idx {
            if i >= r {
                return Err(Error::dim("gather_rows", format!("index {i} out of {r} rows")));
            }
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        self.push(idx.len(), c, out, needs, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if from >= to || to > c {
            return Err(Error::dim("slice_cols", format!("{from}..{to} of {c}")));
        }
        let w = to - from;
        let xv = self.data(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + from..i * c + to]);
        }
        let needs = self.needs(x);
        self.push(r, w, out, needs, Op::SliceCols { x, from, to })
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Gradients of all contributing
    /// nodes with `needs_grad` are populated; call `write_grads` to move
    /// them into a parameter store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(Error::Precondition("backward expects a scalar loss node".into()));
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i)?;
        }

        // Backward is analytic; a non-finite gradient means the forward
        // values were already at the edge of range. Surface it.
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    /// Accumulate all bound parameter gradients into the store.
    pub fn write_grads(&self, store: &mut ParamStore<S>) {
        for &(v, pid) in &self.bindings {
            if let Some(g) = self.grad(v) {
                let dst = store.entry_mut(pid).grad.data_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
    }

    fn take_grad(&self, v: Var) -> Vec<S> {
        self.nodes[v.0].grad.clone().expect("grad present")
    }

    fn accum(&mut self, v: Var, add: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        debug_assert_eq!(len, add.len());
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(add) {
                    *a = *a + b;
                }
            }
            None => self.nodes[v.0].grad = Some(add.to_vec()),
        }
    }

    fn backward_node(&mut self, i: usize) -> Result<()> {
        // Ops are cheap to describe; clone the descriptor to sidestep borrow
        // conflicts while mutating gradient buffers.
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        let out = Var(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let dy = self.take_grad(out);
                let (m, k) = self.dims(a);
                let (_, n) = self.dims(b);
                if self.needs(a) {
                    let mut da = vec![S::zero(); m * k];
                    matmul_nt_acc(&dy, self.data(b), m, n, k, &mut da);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![S::zero(); k * n];
                    matmul_tn_acc(self.data(a), &dy, m, k, n, &mut db);
                    self.accum(b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let dy = self.take_grad(out);
                let (m, k) = self.dims(a);
                let (n, _) = self.dims(b);
                if self.needs(a) {
                    let mut da = vec![S::zero(); m * k];
                    matmul_acc(&dy, self.data(b), m, n, k, &mut da);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![S::zero(); n * k];
                    matmul_tn_acc(&dy, self.data(a), m, n, k, &mut db);
                    self.accum(b, &db);
                }
            }
            Op::MatmulNTGrouped { a, b, t } => {
                let (a, b, t) = (*a, *b, *t);
                let dy = self.take_grad(out);
                let (ra, d) = self.dims(a);
                let groups = ra / t;
                if self.needs(a) {
                    let mut da = vec![S::zero(); ra * d];
                    for g in 0..groups {
                        matmul_acc(
                            &dy[g * t * t..(g + 1) * t * t],
                            &self.data(b)[g * t * d..(g + 1) * t * d],
                            t,
                            t,
                            d,
                            &mut da[g * t * d..(g + 1) * t * d],
                        );
                    }
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![S::zero(); ra * d];
                    for g in 0..groups {
                        matmul_tn_acc(
                            &dy[g * t * t..(g + 1) * t * t],
                            &self.data(a)[g * t * d..(g + 1) * t * d],
                            t,
                            t,
                            d,
                            &mut db[g * t * d..(g + 1) * t * d],
                        );
                    }
                    self.accum(b, &db);
                }
            }
            Op::MatmulGrouped { a, b, t } => {
                let (a, b, t) = (*a, *b, *t);
                let dy = self.take_grad(out);
                let (rb, d) = self.dims(b);
                let groups = rb / t;
                if self.needs(a) {
                    let mut da = vec![S::zero(); rb * t];
                    for g in 0..groups {
                        matmul_nt_acc(
                            &dy[g * t * d..(g + 1) * t * d],
                            &self.data(b)[g * t * d..(g + 1) * t * d],
                            t,
                            d,
                            t,
                            &mut da[g * t * t..(g + 1) * t * t],
                        );
                    }
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![S::zero(); rb * d];
                    for g in 0..groups {
                        matmul_tn_acc(
                            &self.data(a)[g * t * t..(g + 1) * t * t],
                            &dy[g * t * d..(g + 1) * t * d],
                            t,
                            t,
                            d,
                            &mut db[g * t * d..(g + 1) * t * d],
                        );
                    }
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let dy = self.take_grad(out);
                self.accum(a, &dy);
                self.accum(b, &dy);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dy = self.take_grad(out);
                let dx: Vec<S> = dy.iter().map(|&v| v * c).collect();
                self.accum(x, &dx);
            }
            Op::AddBiasRow { x, bias } => {
                let (x, bias) = (*x, *bias);
                let dy = self.take_grad(out);
                self.accum(x, &dy);
                if self.needs(bias) {
                    let mut db = vec![S::zero(); cols];
                    for row in dy.chunks_exact(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accum(bias, &db);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                let dy = self.take_grad(out);
                let dx: Vec<S> = self
                    .data(x)
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &d)| d * gelu_backward(v))
                    .collect();
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let mean = mean.clone();
                let rstd = rstd.clone();
                let dy = self.take_grad(out);
                let cn = S::from_f64(cols as f64);
                let xv = self.data(x).to_vec();
                let gv = self.data(gain).to_vec();
                let mut dx = vec![S::zero(); rows * cols];
                let mut dg = vec![S::zero(); cols];
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let m = mean[r];
                    let s = rstd[r];
                    let mut dnorm_mean = S::zero();
                    let mut dnorm_norm_mean = S::zero();
                    for j in 0..cols {
                        let norm = (xr[j] - m) * s;
                        let dnorm = gv[j] * dyr[j];
                        dnorm_mean = dnorm_mean + dnorm;
                        dnorm_norm_mean = dnorm_norm_mean + dnorm * norm;
                    }
                    dnorm_mean = dnorm_mean / cn;
                    dnorm_norm_mean = dnorm_norm_mean / cn;
                    let dxr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let norm = (xr[j] - m) * s;
                        let dnorm = gv[j] * dyr[j];
                        db[j] = db[j] + dyr[j];
                        dg[j] = dg[j] + norm * dyr[j];
                        dxr[j] = (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dg);
                self.accum(bias, &db);
            }
            Op::StandardizeCols { x, mean, rstd } => {
                let x = *x;
                let mean = mean.clone();
                let rstd = rstd.clone();
                let dy = self.take_grad(out);
                let rn = S::from_f64(rows as f64);
                let xv = self.data(x).to_vec();
                // Per column: dx = rstd * (dy - mean(dy) - xhat * mean(dy * xhat)).
                let mut dy_mean = vec![S::zero(); cols];
                let mut dyxh_mean = vec![S::zero(); cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let xh = (xv[i * cols + j] - mean[j]) * rstd[j];
                        dy_mean[j] = dy_mean[j] + dy[i * cols + j];
                        dyxh_mean[j] = dyxh_mean[j] + dy[i * cols + j] * xh;
                    }
                }
                for j in 0..cols {
                    dy_mean[j] = dy_mean[j] / rn;
                    dyxh_mean[j] = dyxh_mean[j] / rn;
                }
                let mut dx = vec![S::zero(); rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let xh = (xv[i * cols + j] - mean[j]) * rstd[j];
                        dx[i * cols + j] =
                            rstd[j] * (dy[i * cols + j] - dy_mean[j] - xh * dyxh_mean[j]);
                    }
                }
                self.accum(x, &dx);
            }
            Op::SoftmaxRows { x, t, causal } => {
                let (x, t, causal) = (*x, *t, *causal);
                let dy = self.take_grad(out);
                let pv = self.data(out).to_vec();
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let limit = if causal { (r % t) + 1 } else { t };
                    let p = &pv[r * cols..r * cols + limit];
                    let d = &dy[r * cols..r * cols + limit];
                    let mut dot = S::zero();
                    for j in 0..limit {
                        dot = dot + p[j] * d[j];
                    }
                    let dxr = &mut dx[r * cols..r * cols + limit];
                    for j in 0..limit {
                        dxr[j] = p[j] * (d[j] - dot);
                    }
                }
                self.accum(x, &dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let dy = self.take_grad(out)[0];
                let (n, v) = self.dims(logits);
                let scale = dy / S::from_f64(n as f64);
                let mut dl = probs;
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * v + t] = dl[i * v + t] - S::one();
                }
                for d in dl.iter_mut() {
                    *d = *d * scale;
                }
                self.accum(logits, &dl);
            }
            Op::FilmApply { x, gamma, beta, t } => {
                let (x, gamma, beta, t) = (*x, *gamma, *beta, *t);
                let dy = self.take_grad(out);
                let groups = rows / t;
                let xv = self.data(x).to_vec();
                let gv = self.data(gamma).to_vec();
                if self.needs(x) {
                    let mut dx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        let g = r / t;
                        for j in 0..cols {
                            dx[r * cols + j] =
                                dy[r * cols + j] * (S::one() + gv[g * cols + j]);
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.needs(gamma) {
                    let mut dgm = vec![S::zero(); groups * cols];
                    for r in 0..rows {
                        let g = r / t;
                        for j in 0..cols {
                            dgm[g * cols + j] =
                                dgm[g * cols + j] + dy[r * cols + j] * xv[r * cols + j];
                        }
                    }
                    self.accum(gamma, &dgm);
                }
                if self.needs(beta) {
                    let mut dbt = vec![S::zero(); groups * cols];
                    for r in 0..rows {
                        let g = r / t;
                        for j in 0..cols {
                            dbt[g * cols + j] = dbt[g * cols + j] + dy[r * cols + j];
                        }
                    }
                    self.accum(beta, &dbt);
                }
            }
            Op::MeanRowsGrouped { x, t } => {
                let (x, t) = (*x, *t);
                let dy = self.take_grad(out);
                let (rx, _) = self.dims(x);
                let tn = S::from_f64(t as f64);
                let mut dx = vec![S::zero(); rx * cols];
                for r in 0..rx {
                    let g = r / t;
                    for j in 0..cols {
                        dx[r * cols + j] = dy[g * cols + j] / tn;
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let dy = self.take_grad(out);
                let mut off = 0usize;
                for p in parts {
                    let (rp, cp) = self.dims(p);
                    if self.needs(p) {
                        let mut dp = vec![S::zero(); rp * cp];
                        for i in 0..rp {
                            dp[i * cp..(i + 1) * cp]
                                .copy_from_slice(&dy[i * cols + off..i * cols + off + cp]);
                        }
                        self.accum(p, &dp);
                    }
                    off += cp;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let dy = self.take_grad(out);
                let mut off = 0usize;
                for p in parts {
                    let (rp, cp) = self.dims(p);
                    if self.needs(p) {
                        self.accum(p, &dy[off * cp..(off + rp) * cp]);
                    }
                    off += rp;
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let dy = self.take_grad(out);
                let (rx, _) = self.dims(x);
                let mut dx = vec![S::zero(); rx * cols];
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[src * cols + j] = dx[src * cols + j] + dy[i * cols + j];
                    }
                }
                self.accum(x, &dx);
            }
            Op::SliceCols { x, from, to } => {
                let (x, from, to) = (*x, *from, *to);
                let dy = self.take_grad(out);
                let (rx, cx) = self.dims(x);
                let w = to - from;
                let mut dx = vec![S::zero(); rx * cx];
                for i in 0..rx {
                    dx[i * cx + from..i * cx + to].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                self.accum(x, &dx);
            }
        }
        Ok(())
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::MatmulNT { .. } => "matmul_nt",
        Op::MatmulNTGrouped { .. } => "matmul_nt_grouped",
        Op::MatmulGrouped { .. } => "matmul_grouped",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::AddBiasRow { .. } => "add_bias_row",
        Op::Gelu { .. } => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::StandardizeCols { .. } => "standardize_cols",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::FilmApply { .. } => "film_apply",
        Op::MeanRowsGrouped { .. } => "mean_rows_grouped",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::SliceCols { .. } => "slice_cols",
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// out[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = *o + acc;
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu_forward<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let s = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = S::from_f64(0.044715);
    half * x * (S::one() + (s * (x + c * x * x * x)).tanh())
}

pub fn gelu_backward<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let s = S::from_f64(0.797_884_560_802_865_4);
    let c = S::from_f64(0.044715);
    let three = S::from_f64(3.0);
    let inner = s * (x + c * x * x * x);
    let th = inner.tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * s * (S::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.input(&t(2, 2, &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.input(&t(2, 1, &[3.0, 4.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(&t(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.input(&t(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(1, 3, &[1.0, 1.0, 1.0])).unwrap();
        let gain = g.input(&t(1, 3, &[1.0, 1.0, 1.0])).unwrap();
        let bias = g.input(&t(1, 3, &[0.0, 0.0, 0.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in g.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_values() {
        // x = [1, 3], eps -> 0: normalized to [-1, 1].
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(1, 2, &[1.0, 3.0])).unwrap();
        let gain = g.input(&t(1, 2, &[1.0, 1.0])).unwrap();
        let bias = g.input(&t(1, 2, &[0.0, 0.0])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let out = g.data(y);
        assert!((out[0] + 1.0).abs() < 1e-6);
        assert!((out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.input(&t(1, 4, &[0.3, 0.3, 0.3, 0.3])).unwrap();
        let loss = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.input(&t(1, 4, &[0.0, 50.0, 0.0, 0.0])).unwrap();
        let loss = g.cross_entropy(logits, &[1]).unwrap();
        assert!(g.scalar_value(loss) < 1e-8);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.input(&t(1, 4, &[0.0; 4])).unwrap();
        assert!(g.cross_entropy(logits, &[4]).is_err());
    }

    #[test]
    fn cross_entropy_backward_matches_softmax_minus_onehot() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(&t(1, 3, &[0.2, -0.1, 0.5])).unwrap();
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        let exps: Vec<f64> = [0.2f64, -0.1, 0.5].iter().map(|v| f64::exp(*v)).collect();
        let z: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
        assert!((grad[0] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((grad[1] - p[1]).abs() < 1e-12);
        assert!((grad[2] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn film_identity_at_zero_is_bit_exact() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(2, 2, &[1.5, -2.25, 0.0, 3.125])).unwrap();
        let gamma = g.input(&t(1, 2, &[0.0, 0.0])).unwrap();
        let beta = g.input(&t(1, 2, &[0.0, 0.0])).unwrap();
        let y = g.film_apply(x, gamma, beta, 2).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn film_hand_case() {
        // F=[[1,2],[3,4]], gamma=[1,0], beta=[0,1] -> [[2,3],[6,5]]
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let gamma = g.input(&t(1, 2, &[1.0, 0.0])).unwrap();
        let beta = g.input(&t(1, 2, &[0.0, 1.0])).unwrap();
        let y = g.film_apply(x, gamma, beta, 2).unwrap();
        assert_eq!(g.data(y), &[2.0, 3.0, 6.0, 5.0]);
    }

    #[test]
    fn film_collapse_case() {
        // gamma = -1 everywhere collapses every row to beta.
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let gamma = g.input(&t(1, 2, &[-1.0, -1.0])).unwrap();
        let beta = g.input(&t(1, 2, &[7.0, -3.0])).unwrap();
        let y = g.film_apply(x, gamma, beta, 2).unwrap();
        assert_eq!(g.data(y), &[7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&t(2, 2, &[0.0, 99.0, 1.0, 1.0])).unwrap();
        let p = g.softmax_rows(x, 2, true).unwrap();
        let pv = g.data(p);
        // Row 0 may only attend to position 0.
        assert_eq!(pv[0], 1.0);
        assert_eq!(pv[1], 0.0);
        assert!((pv[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_roundtrip_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&t(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let y = g.gather_rows(x, &[0, 2, 0]).unwrap();
        // loss = sum of gathered = x0 + x2 + x0
        let ones = g.input(&t(1, 3, &[1.0, 1.0, 1.0])).unwrap();
        let loss = g.matmul(ones, y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn nan_input_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let r = g.input(&t(1, 1, &[f64::NAN]));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    fn rand_tensor(name: &str, rows: usize, cols: usize) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(42, name);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-0.8..0.8)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Run grad_check over a single-op graph; every differentiable op must
    /// match central differences to 1e-4 relative error.
    fn check_op<F>(name: &str, shapes: &[(usize, usize)], build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    {
        use crate::gradcheck::grad_check;
        use crate::params::ParamStore;
        let mut store: ParamStore<f64> = ParamStore::new(42);
        let mut ids = Vec::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let pname = format!("{name}:{i}");
            let t = rand_tensor(&pname, r, c);
            ids.push(store.register(&pname, t).unwrap());
        }
        let ids2 = ids.clone();
        let readout_name = format!("{name}:readout");
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let vars: Vec<Var> =
                ids2.iter().map(|&id| g.param(s, id)).collect::<Result<_>>()?;
            let out = build(g, &vars)?;
            // Reduce to a scalar through a fixed quadratic so every output
            // coordinate influences the loss nonlinearly.
            let (r, c) = g.dims(out);
            let w = g.input(&rand_tensor(&readout_name, r, c))?;
            let wx = g.add(out, w)?;
            let act = g.gelu(wx)?;
            let flatl = g.input(&Tensor::matrix(1, r, vec![1.0; r]).unwrap())?;
            let rowsum = g.matmul(flatl, act)?; // [1 x c]
            let sq = g.matmul_nt(rowsum, rowsum)?; // scalar
            Ok(sq)
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "{name}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_op_matmul() {
        check_op("matmul", &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]));
    }

    #[test]
    fn grad_op_matmul_nt() {
        check_op("matmul_nt", &[(3, 4), (2, 4)], |g, v| g.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn grad_op_matmul_grouped() {
        check_op("mm_ntg", &[(6, 4), (6, 4)], |g, v| g.matmul_nt_grouped(v[0], v[1], 3));
        check_op("mm_g", &[(6, 3), (6, 4)], |g, v| g.matmul_grouped(v[0], v[1], 3));
    }

    #[test]
    fn grad_op_add_scale_bias() {
        check_op("add", &[(2, 3), (2, 3)], |g, v| g.add(v[0], v[1]));
        check_op("scale", &[(2, 3)], |g, v| g.scale(v[0], -1.75));
        check_op("bias", &[(3, 4), (1, 4)], |g, v| g.add_bias_row(v[0], v[1]));
    }

    #[test]
    fn grad_op_gelu() {
        check_op("gelu", &[(2, 5)], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn grad_op_layer_norm() {
        check_op("ln", &[(3, 4), (1, 4), (1, 4)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn grad_op_standardize_cols() {
        check_op("std_cols", &[(5, 3)], |g, v| g.standardize_cols(v[0], 1e-5));
    }

    #[test]
    fn grad_op_softmax_rows() {
        check_op("sm", &[(4, 4)], |g, v| g.softmax_rows(v[0], 4, false));
        check_op("sm_causal", &[(4, 4)], |g, v| g.softmax_rows(v[0], 4, true));
        check_op("sm_grouped", &[(6, 3)], |g, v| g.softmax_rows(v[0], 3, true));
    }

    #[test]
    fn grad_op_cross_entropy() {
        use crate::gradcheck::grad_check;
        use crate::params::ParamStore;
        let mut store: ParamStore<f64> = ParamStore::new(9);
        let id = store.register("logits", rand_tensor("ce", 2, 5)).unwrap();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, id)?;
            g.cross_entropy(x, &[3, 0])
        };
        let report = grad_check(&mut store, &f, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_op_film_apply() {
        check_op("film", &[(4, 3), (2, 3), (2, 3)], |g, v| g.film_apply(v[0], v[1], v[2], 2));
    }

    #[test]
    fn grad_op_mean_rows_grouped() {
        check_op("mean", &[(6, 3)], |g, v| g.mean_rows_grouped(v[0], 3));
    }

    #[test]
    fn grad_op_concat_gather_slice() {
        check_op("ccols", &[(3, 2), (3, 4)], |g, v| g.concat_cols(&[v[0], v[1]]));
        check_op("crows", &[(2, 3), (4, 3)], |g, v| g.concat_rows(&[v[0], v[1]]));
        check_op("gather", &[(4, 3)], |g, v| g.gather_rows(v[0], &[1, 3, 1, 0]));
        check_op("slice", &[(3, 5)], |g, v| g.slice_cols(v[0], 1, 4));
    }

    #[test]
    fn forward_deterministic() {
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(&t(2, 3, &[0.1, -0.2, 0.3, 1.0, 2.0, -1.5])).unwrap();
            let w = g.input(&t(2, 3, &[0.5, 0.25, -0.125, 0.75, -0.5, 0.0625])).unwrap();
            let h = g.matmul_nt(x, w).unwrap();
            let a = g.gelu(h).unwrap();
            g.data(a).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical forward");
    }
}
