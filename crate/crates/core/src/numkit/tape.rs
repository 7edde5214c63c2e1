//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order; `backward` walks it once in reverse. Ops are coarse
//! (fused attention, layer norm, cross-entropy) to keep per-node overhead
//! negligible next to the arithmetic.

use super::kernels::{self, dot64};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, s: f32 },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<Vec<f32>> },
    SelectRows { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` did not participate in the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let x3 = x * x * x;
    let u = C * (x + 0.044_715 * x3);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        check_finite(&out, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `x[m×k] · w[n×k]ᵀ`, the usual dense layer with `w` stored as
    /// `[out_features × in_features]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (n, k2) = self.value(w).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("linear: input width {k} vs weight width {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, m, k, n, false);
        let out = Tensor::new(vec![m, n], out)?;
        check_finite(&out, "linear")?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Linear { x, w }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        check_finite(&out, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::dim(format!(
                "add_row: bias {:?} for width {n}",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        check_finite(&out, "add_row")?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).scale(s);
        check_finite(&out, "scale")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale { a, s }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu(x).0);
        check_finite(&out, "gelu")?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gelu { a }, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::dim("layer_norm: gain/bias width"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = (1.0 / (var + f64::from(LN_EPS)).sqrt()) as f32;
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean as f32) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        check_finite(&out, "layer_norm")?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(Error::Index(format!("embedding id {id} >= {rows}")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; `segments` lists `(start, len)` row
    /// ranges, each attended independently with a causal mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
        let (m, d) = self.value(q).dims2()?;
        if self.value(k).shape() != [m, d] || self.value(v).shape() != [m, d] {
            return Err(Error::dim("attention: q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; m * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            if start + len > m {
                return Err(Error::Index(format!("attention segment {start}+{len} > {m}")));
            }
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0f32; len * len];
                for i in 0..len {
                    let qi = &qs[(start + i) * d + off..(start + i) * d + off + dh];
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &ks[(start + j) * d + off..(start + j) * d + off + dh];
                        let s = dot64(qi, kj) as f32 * scale;
                        p[i * len + j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0f64;
                    for j in 0..=i {
                        let e = (p[i * len + j] - mx).exp();
                        p[i * len + j] = e;
                        z += f64::from(e);
                    }
                    let inv = (1.0 / z) as f32;
                    let orow = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..=i {
                        let pij = p[i * len + j] * inv;
                        p[i * len + j] = pij;
                        let vj = &vs[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let out = Tensor::new(vec![m, d], out)?;
        check_finite(&out, "attention")?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("select_rows {r} >= {m}")));
            }
            out.extend_from_slice(self.value(a).row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (b, vocab) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::dim(format!("cross_entropy: {b} rows, {} targets", targets.len())));
        }
        if b == 0 {
            return Err(Error::input("cross_entropy over an empty batch"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Index(format!("target {t} >= vocab {vocab}")));
        }
        let lg = self.value(logits).data();
        let mut probs = vec![0.0f32; b * vocab];
        let mut total = 0.0f64;
        for r in 0..b {
            let row = &lg[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| f64::from(v - mx).exp()).sum();
            let lse = f64::from(mx) + z.ln();
            total += lse - f64::from(row[targets[r] as usize]);
            for c in 0..vocab {
                probs[r * vocab + c] = (f64::from(row[c] - mx).exp() / z) as f32;
            }
        }
        let loss = (total / b as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                self.accum(grads, *a, |da| kernels::gemm_nt(gd, bd, da, m, n, k, true));
                self.accum(grads, *b, |db| kernels::gemm_tn(ad, gd, db, k, m, n, true));
            }
            Op::Linear { x, w } => {
                let (m, k) = self.value(*x).dims2()?;
                let (n, _) = self.value(*w).dims2()?;
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                self.accum(grads, *x, |dx| kernels::gemm_nn(gd, wd, dx, m, n, k, true));
                self.accum(grads, *w, |dw| kernels::gemm_tn(gd, xd, dw, n, m, k, true));
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accum(grads, *v, |d| {
                        for (o, gv) in d.iter_mut().zip(gd) {
                            *o += gv;
                        }
                    });
                }
            }
            Op::AddRow { a, bias } => {
                let (m, n) = self.value(*a).dims2()?;
                self.accum(grads, *a, |d| {
                    for (o, gv) in d.iter_mut().zip(gd) {
                        *o += gv;
                    }
                });
                self.accum(grads, *bias, |d| {
                    for r in 0..m {
                        for (o, gv) in d.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Scale { a, s } => {
                self.accum(grads, *a, |d| {
                    for (o, gv) in d.iter_mut().zip(gd) {
                        *o += gv * s;
                    }
                });
            }
            Op::Gelu { a } => {
                let xs = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((o, gv), &x) in d.iter_mut().zip(gd).zip(xs) {
                        *o += gv * gelu(x).1;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = self.value(*x).dims2()?;
                let gn = self.value(*gain).data();
                self.accum(grads, *gain, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += gd[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                self.accum(grads, *bias, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += gd[r * n + c];
                        }
                    }
                });
                self.accum(grads, *x, |d| {
                    let mut dxhat = vec![0.0f32; n];
                    for r in 0..m {
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for c in 0..n {
                            let v = gd[r * n + c] * gn[c];
                            dxhat[c] = v;
                            mean_d += f64::from(v);
                            mean_dx += f64::from(v) * f64::from(xhat[r * n + c]);
                        }
                        let mean_d = (mean_d / n as f64) as f32;
                        let mean_dx = (mean_dx / n as f64) as f32;
                        for c in 0..n {
                            d[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (_, dm) = self.value(*table).dims2()?;
                self.accum(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for c in 0..dm {
                            d[id * dm + c] += gd[r * dm + c];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (m, d) = self.value(*q).dims2()?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qs, ks, vs) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0f32; m * d];
                let mut dk = vec![0.0f32; m * d];
                let mut dv = vec![0.0f32; m * d];
                let mut pi = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let off = h * dh;
                        let mut ds = vec![0.0f32; len];
                        for i in 0..len {
                            let gi = &gd[(start + i) * d + off..(start + i) * d + off + dh];
                            let mut row_dot = 0.0f64;
                            for j in 0..=i {
                                let pij = p[i * len + j];
                                let vj = &vs[(start + j) * d + off..(start + j) * d + off + dh];
                                let dp = dot64(gi, vj) as f32;
                                ds[j] = dp;
                                row_dot += f64::from(pij) * f64::from(dp);
                                let dvj = &mut dv[(start + j) * d + off..(start + j) * d + off + dh];
                                for (o, &gv) in dvj.iter_mut().zip(gi) {
                                    *o += pij * gv;
                                }
                            }
                            let row_dot = row_dot as f32;
                            let qi = &qs[(start + i) * d + off..(start + i) * d + off + dh];
                            for j in 0..=i {
                                let s = p[i * len + j] * (ds[j] - row_dot) * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                let kj = &ks[(start + j) * d + off..(start + j) * d + off + dh];
                                let dqi = &mut dq[(start + i) * d + off..(start + i) * d + off + dh];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o += s * kv;
                                }
                                let dkj = &mut dk[(start + j) * d + off..(start + j) * d + off + dh];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o += s * qv;
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    self.accum(grads, *var, |d| {
                        for (o, b) in d.iter_mut().zip(&buf) {
                            *o += b;
                        }
                    });
                }
            }
            Op::SelectRows { a, rows } => {
                let (_, n) = self.value(*a).dims2()?;
                self.accum(grads, *a, |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            d[r * n + c] += gd[i * n + c];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, vocab) = self.value(*logits).dims2()?;
                let up = gd[0] / b as f32;
                self.accum(grads, *logits, |d| {
                    for r in 0..b {
                        for c in 0..vocab {
                            d[r * vocab + c] += up * probs[r * vocab + c];
                        }
                        d[r * vocab + targets[r] as usize] -= up;
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    /// Checks d(loss)/d(input) against central differences for a scalar
    /// function built on a fresh tape.
    fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();

        let eval = |ins: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
            let l = build(&mut t, &vs).unwrap();
            f64::from(t.value(l).data()[0])
        };
        let h = 1e-2f32;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]);
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * f64::from(h));
                let an = f64::from(analytic.data()[j]);
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-2));
                assert!(err < tol, "input {i} elem {j}: analytic {an} vs fd {fd}");
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut Rng::new(seed))
    }

    fn sum_sq_loss(t: &mut Tape, v: Var) -> Result<Var> {
        // Reduce an arbitrary matrix to a scalar through cross-entropy with
        // fixed targets, which exercises a non-trivial upstream gradient.
        let (rows, cols) = t.value(v).dims2()?;
        let targets: Vec<u32> = (0..rows).map(|r| (r % cols) as u32).collect();
        t.cross_entropy(v, &targets)
    }

    #[test]
    fn cross_entropy_peaked_and_uniform() {
        let mut t = Tape::new();
        let mut peaked = Tensor::full(&[1, 4], -1e4);
        peaked.data_mut()[2] = 1e4;
        let l = t.constant(peaked);
        let ce = t.cross_entropy(l, &[2]).unwrap();
        assert_eq!(t.value(ce).data()[0], 0.0);

        let u = t.constant(Tensor::zeros(&[3, 64]));
        let ce = t.cross_entropy(u, &[0, 5, 63]).unwrap();
        assert!((f64::from(t.value(ce).data()[0]) - 64f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(t.cross_entropy(u, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn grad_cross_entropy() {
        grad_check(&[rand(&[3, 5], 1)], |t, v| t.cross_entropy(v[0], &[0, 4, 2]), 1e-4);
    }

    #[test]
    fn grad_matmul_and_linear() {
        grad_check(
            &[rand(&[3, 4], 2), rand(&[4, 5], 3)],
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                sum_sq_loss(t, m)
            },
            1e-3,
        );
        grad_check(
            &[rand(&[3, 4], 4), rand(&[5, 4], 5)],
            |t, v| {
                let m = t.linear(v[0], v[1])?;
                sum_sq_loss(t, m)
            },
            1e-3,
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        grad_check(
            &[rand(&[2, 3], 6), rand(&[2, 3], 7), rand(&[3], 8)],
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.add_row(a, v[2])?;
                let c = t.gelu(b)?;
                let d = t.scale(c, 1.7)?;
                sum_sq_loss(t, d)
            },
            1e-3,
        );
    }

    #[test]
    fn grad_layer_norm() {
        grad_check(
            &[rand(&[3, 6], 9), rand(&[6], 10), rand(&[6], 11)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                sum_sq_loss(t, y)
            },
            1e-3,
        );
    }

    #[test]
    fn grad_embedding_and_select() {
        grad_check(
            &[rand(&[5, 4], 12)],
            |t, v| {
                let e = t.embedding(v[0], &[1, 3, 3, 0])?;
                let s = t.select_rows(e, &[2, 0])?;
                sum_sq_loss(t, s)
            },
            1e-3,
        );
    }

    #[test]
    fn grad_attention() {
        grad_check(
            &[rand(&[5, 4], 13), rand(&[5, 4], 14), rand(&[5, 4], 15)],
            |t, v| {
                let a = t.attention(v[0], v[1], v[2], 2, &[(0, 3), (3, 2)])?;
                sum_sq_loss(t, a)
            },
            1e-3,
        );
    }

    #[test]
    fn non_participating_gradient_is_zero() {
        let mut t = Tape::new();
        let a = t.param(rand(&[2, 3], 1));
        let unused = t.param(rand(&[4], 2));
        let loss = t.cross_entropy(a, &[0, 1]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[4]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(rand(&[2, 3], 1));
        let w = t.param(rand(&[3, 3], 2));
        let y = t.linear(a, w).unwrap();
        let loss = t.cross_entropy(y, &[0, 1]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a), Tensor::zeros(&[2, 3]));
        assert!(g.get(w).norm() > 0.0);
    }

    #[test]
    fn deterministic_forward_backward() {
        let run = || {
            let mut t = Tape::new();
            let q = t.param(rand(&[4, 4], 1));
            let a = t.attention(q, q, q, 2, &[(0, 4)]).unwrap();
            let loss = t.cross_entropy(a, &[0, 1, 2, 3]).unwrap();
            let g = t.backward(loss).unwrap();
            (t.value(loss).clone(), g.get(q))
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.bit_eq(&l2));
        assert!(g1.bit_eq(&g2));
    }
}
