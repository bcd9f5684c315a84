//! Transformer building blocks with hand-written backward passes.
//!
//! A block is pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`, with a SiLU
//! MLP. Inference runs through [`BlockParams::forward_cached`], which appends
//! keys and values to a [`KvCache`]; training runs through
//! [`BlockParams::forward_train`] / [`BlockParams::backward`]. Both paths
//! share the same per-row kernels and produce identical activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::{axpy, dot, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A set of trainable tensors visited in a fixed, documented order. The same
/// order is used for weight files, optimizers and gradient checks.
pub trait Parameters: Clone {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>);

    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src: Vec<&Matrix> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            axpy(dst.data_mut(), scale, s.data());
        }
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Matrix::randn(inputs, outputs, std, rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        let b = self.bias.row(0);
        for i in 0..y.rows() {
            axpy(y.row_mut(i), 1.0, b);
        }
        y
    }

    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.bias.row(0));
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                axpy(out, xk, self.weight.row(k));
            }
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        x.accumulate_t_matmul(dy, &mut grad.weight);
        let gb = grad.bias.row_mut(0);
        for i in 0..dy.rows() {
            axpy(gb, 1.0, dy.row(i));
        }
        dy.matmul_t(&self.weight)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub shift: Matrix,
}

#[derive(Clone, Debug)]
pub struct LayerNormTape {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Matrix::filled(1, dim, 1.0),
            shift: Matrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormTape) {
        let d = x.cols();
        let mut y = Matrix::zeros(x.rows(), d);
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let (g, b) = (self.gain.row(0), self.shift.row(0));
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(rstd);
            let nrow = normalized.row_mut(i);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * rstd;
            }
            let yrow = y.row_mut(i);
            for j in 0..d {
                yrow[j] = g[j] * normalized.get(i, j) + b[j];
            }
        }
        (y, LayerNormTape { normalized, inv_std })
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.forward(x).0
    }

    pub fn backward(&self, tape: &LayerNormTape, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let g = self.gain.row(0);
        for i in 0..dy.rows() {
            let xhat = tape.normalized.row(i);
            let dyr = dy.row(i);
            {
                let gg = grad.gain.row_mut(0);
                for j in 0..d {
                    gg[j] += dyr[j] * xhat[j];
                }
            }
            axpy(grad.shift.row_mut(0), 1.0, dyr);
            let dxhat: Vec<f64> = (0..d).map(|j| dyr[j] * g[j]).collect();
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot(&dxhat, xhat) / d as f64;
            let rstd = tape.inv_std[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "shift"), &self.shift));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.gain);
        out.push(&mut self.shift);
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|z| *z *= sigmoid(*z));
    y
}

/// `dL/dz` for `y = silu(z)`.
pub fn silu_backward(z: &Matrix, dy: &Matrix) -> Matrix {
    let mut dz = dy.clone();
    for (d, &zz) in dz.data_mut().iter_mut().zip(z.data()) {
        let s = sigmoid(zz);
        *d *= s * (1.0 + zz * (1.0 - s));
    }
    dz
}

/// Keys and values of every row a block has seen, one matrix each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub keys: Matrix,
    pub values: Matrix,
}

impl KvCache {
    pub fn new(dim: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, dim),
            values: Matrix::zeros(0, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncate(&mut self, len: usize) {
        self.keys.truncate_rows(len);
        self.values.truncate_rows(len);
    }

    pub fn compact(&mut self, keep_prefix: usize, extra: &[usize]) {
        self.keys.compact_rows(keep_prefix, extra);
        self.values.compact_rows(keep_prefix, extra);
    }
}

/// Masked multi-head scaled dot-product attention. Returns the concatenated
/// head outputs and, when requested, the per-head attention weights.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AttentionMask,
    heads: usize,
    keep_weights: bool,
) -> (Matrix, Option<Vec<Matrix>>) {
    let n = q.rows();
    let keys = k.rows();
    let dim = q.cols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(n, dim);
    let mut weights = keep_weights.then(|| vec![Matrix::zeros(n, keys); heads]);
    let mut scores = vec![0.0; keys];
    for i in 0..n {
        let allowed = mask.row(i);
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let qi = &q.row(i)[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..keys {
                if allowed[j] {
                    let s = dot(qi, &k.row(j)[span.clone()]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
            }
            let mut sum = 0.0;
            for j in 0..keys {
                if allowed[j] {
                    scores[j] = (scores[j] - max).exp();
                    sum += scores[j];
                }
            }
            let o = &mut out.row_mut(i)[span.clone()];
            for j in 0..keys {
                if allowed[j] {
                    let w = scores[j] / sum;
                    axpy(o, w, &v.row(j)[span.clone()]);
                    if let Some(ws) = weights.as_mut() {
                        ws[h].row_mut(i)[j] = w;
                    }
                }
            }
        }
    }
    (out, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub heads: usize,
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Activations saved by [`BlockParams::forward_train`].
#[derive(Clone, Debug)]
pub struct BlockTape {
    x: Matrix,
    ln_attn: LayerNormTape,
    attn_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Matrix>,
    attn: Matrix,
    ln_mlp: LayerNormTape,
    mlp_in_x: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

impl BlockParams {
    /// `depth` scales the residual-branch output projections.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must divide into heads");
        let std_in = 1.0 / (dim as f64).sqrt();
        let std_res = std_in / (2.0 * depth.max(1) as f64).sqrt();
        Self {
            heads,
            ln_attn: LayerNorm::new(dim),
            query: Linear::new(dim, dim, std_in, rng),
            key: Linear::new(dim, dim, std_in, rng),
            value: Linear::new(dim, dim, std_in, rng),
            attn_out: Linear::new(dim, dim, std_res, rng),
            ln_mlp: LayerNorm::new(dim),
            mlp_in: Linear::new(dim, mlp_hidden, std_in, rng),
            mlp_out: Linear::new(mlp_hidden, dim, 1.0 / (mlp_hidden as f64).sqrt() / (2.0 * depth.max(1) as f64).sqrt(), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.inputs()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_in.outputs()
    }

    fn check(&self, x: &Matrix, mask: &AttentionMask, cached: usize) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "block expects width {}, got {}",
                self.dim(),
                x.cols()
            )));
        }
        if mask.queries() != x.rows() || mask.keys() != cached + x.rows() {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} for {} new rows over {} cached",
                mask.queries(),
                mask.keys(),
                x.rows(),
                cached
            )));
        }
        Ok(())
    }

    fn mlp(&self, x1: &Matrix) -> Matrix {
        let b = self.ln_mlp.apply(x1);
        let z = self.mlp_in.forward(&b);
        let mut y = self.mlp_out.forward(&silu(&z));
        y.add_assign(x1);
        y
    }

    /// Processes new rows against everything already in `cache`, then
    /// appends their keys and values.
    pub fn forward_cached(
        &self,
        x: &Matrix,
        cache: &mut KvCache,
        mask: &AttentionMask,
    ) -> Result<Matrix> {
        self.check(x, mask, cache.len())?;
        let a = self.ln_attn.apply(x);
        let q = self.query.forward(&a);
        cache.keys.append(&self.key.forward(&a))?;
        cache.values.append(&self.value.forward(&a))?;
        let (o, _) = attend(&q, &cache.keys, &cache.values, mask, self.heads, false);
        let mut x1 = self.attn_out.forward(&o);
        x1.add_assign(x);
        Ok(self.mlp(&x1))
    }

    /// Full-sequence forward that keeps what [`Self::backward`] needs.
    pub fn forward_train(&self, x: &Matrix, mask: &AttentionMask) -> Result<(Matrix, BlockTape)> {
        self.check(x, mask, 0)?;
        let (attn_in, ln_attn) = self.ln_attn.forward(x);
        let q = self.query.forward(&attn_in);
        let k = self.key.forward(&attn_in);
        let v = self.value.forward(&attn_in);
        let (attn, weights) = attend(&q, &k, &v, mask, self.heads, true);
        let mut x1 = self.attn_out.forward(&attn);
        x1.add_assign(x);
        let (mlp_in_x, ln_mlp) = self.ln_mlp.forward(&x1);
        let pre_act = self.mlp_in.forward(&mlp_in_x);
        let act = silu(&pre_act);
        let mut y = self.mlp_out.forward(&act);
        y.add_assign(&x1);
        let tape = BlockTape {
            x: x.clone(),
            ln_attn,
            attn_in,
            q,
            k,
            v,
            weights: weights.expect("weights kept"),
            attn,
            ln_mlp,
            mlp_in_x,
            pre_act,
            act,
        };
        Ok((y, tape))
    }

    pub fn backward(&self, tape: &BlockTape, dy: &Matrix, grad: &mut BlockParams) -> Matrix {
        // MLP branch.
        let dact = self.mlp_out.backward(&tape.act, dy, &mut grad.mlp_out);
        let dpre = silu_backward(&tape.pre_act, &dact);
        let dmlp_x = self.mlp_in.backward(&tape.mlp_in_x, &dpre, &mut grad.mlp_in);
        let mut dx1 = self.ln_mlp.backward(&tape.ln_mlp, &dmlp_x, &mut grad.ln_mlp);
        dx1.add_assign(dy);

        // Attention branch.
        let dattn = self.attn_out.backward(&tape.attn, &dx1, &mut grad.attn_out);
        let n = dattn.rows();
        let dim = self.dim();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(n, dim);
        let mut dk = Matrix::zeros(n, dim);
        let mut dv = Matrix::zeros(n, dim);
        let mut dp = vec![0.0; n];
        for h in 0..self.heads {
            let span = h * dh..(h + 1) * dh;
            let w = &tape.weights[h];
            for i in 0..n {
                let doi = &dattn.row(i)[span.clone()];
                let wi = w.row(i);
                let mut rowdot = 0.0;
                for j in 0..n {
                    if wi[j] != 0.0 {
                        dp[j] = dot(doi, &tape.v.row(j)[span.clone()]);
                        rowdot += wi[j] * dp[j];
                        axpy(&mut dv.row_mut(j)[span.clone()], wi[j], doi);
                    }
                }
                for j in 0..n {
                    if wi[j] != 0.0 {
                        let ds = wi[j] * (dp[j] - rowdot) * scale;
                        axpy(&mut dq.row_mut(i)[span.clone()], ds, &tape.k.row(j)[span.clone()]);
                        axpy(&mut dk.row_mut(j)[span.clone()], ds, &tape.q.row(i)[span.clone()]);
                    }
                }
            }
        }
        let mut da = self.query.backward(&tape.attn_in, &dq, &mut grad.query);
        da.add_assign(&self.key.backward(&tape.attn_in, &dk, &mut grad.key));
        da.add_assign(&self.value.backward(&tape.attn_in, &dv, &mut grad.value));
        let mut dx = self.ln_attn.backward(&tape.ln_attn, &da, &mut grad.ln_attn);
        dx.add_assign(&dx1);
        debug_assert_eq!(dx.rows(), tape.x.rows());
        dx
    }
}

impl Parameters for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.ln_attn.visit(&join(prefix, "ln_attn"), out);
        self.query.visit(&join(prefix, "query"), out);
        self.key.visit(&join(prefix, "key"), out);
        self.value.visit(&join(prefix, "value"), out);
        self.attn_out.visit(&join(prefix, "attn_out"), out);
        self.ln_mlp.visit(&join(prefix, "ln_mlp"), out);
        self.mlp_in.visit(&join(prefix, "mlp_in"), out);
        self.mlp_out.visit(&join(prefix, "mlp_out"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.ln_attn.visit_mut(out);
        self.query.visit_mut(out);
        self.key.visit_mut(out);
        self.value.visit_mut(out);
        self.attn_out.visit_mut(out);
        self.ln_mlp.visit_mut(out);
        self.mlp_in.visit_mut(out);
        self.mlp_out.visit_mut(out);
    }
}
