use super::gemm::{self, View, ViewMut};
use super::graph::{shape_err, Graph, Op, Var};
use super::{Result, Tensor, TensorError};

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(n).zip(g.chunks_exact(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
        dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
    }
    dx
}

pub(crate) fn layer_norm_backward(y: &[f64], g: &[f64], inv_std: &[f64], n: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(y.len());
    for ((yr, gr), &s) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(inv_std) {
        let mg = gr.iter().sum::<f64>() / n as f64;
        let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
        dx.extend(gr.iter().zip(yr).map(|(g, y)| s * (g - mg - y * mgy)));
    }
    dx
}

/// Variance floor inside layer normalization. Small enough that normalized
/// rows of unit-scale data have variance 1 to within 1e-8.
pub const LAYER_NORM_EPS: f64 = 1e-10;

struct AttnDims {
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
    dh: usize,
    dvh: usize,
}

fn attn_dims(
    sq: &[usize],
    sk: &[usize],
    sv: &[usize],
    batch: usize,
    heads: usize,
) -> Result<AttnDims> {
    let bad = || shape_err("attention", sq, sk);
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || batch == 0 || heads == 0 {
        return Err(bad());
    }
    if sq[1] != sk[1] || sk[0] != sv[0] || sq[0] % batch != 0 || sk[0] % batch != 0 {
        return Err(bad());
    }
    if sq[1] % heads != 0 || sv[1] % heads != 0 {
        return Err(TensorError::Contract(format!(
            "attention: {heads} heads do not divide widths {} / {}",
            sq[1], sv[1]
        )));
    }
    Ok(AttnDims {
        nq: sq[0] / batch,
        nk: sk[0] / batch,
        d: sq[1],
        dv: sv[1],
        dh: sq[1] / heads,
        dvh: sv[1] / heads,
    })
}

pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    g: &[f64],
    batch: usize,
    heads: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dims = attn_dims(q.shape(), k.shape(), v.shape(), batch, heads).expect("validated in forward");
    let AttnDims { nq, nk, d, dv, dh, dvh } = dims;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dvv = vec![0.0; v.len()];
    let mut dp = vec![0.0; nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            let go = View { data: g, offset: b * nq * dv + h * dvh, rs: dv, cs: 1 };
            // dV += P^T dO
            gemm::gemm(
                nk,
                nq,
                dvh,
                1.0,
                View::transposed(p, nk),
                go,
                1.0,
                ViewMut { data: &mut dvv, offset: b * nk * dv + h * dvh, rs: dv, cs: 1 },
            );
            // dP = dO V^T
            gemm::gemm(
                nq,
                dvh,
                nk,
                1.0,
                go,
                View { data: v.data(), offset: b * nk * dv + h * dvh, rs: 1, cs: dv },
                0.0,
                ViewMut::row_major(&mut dp, nk),
            );
            // dS = P * (dP - rowdot(dP, P)), folded with the logit scale
            for (pr, dr) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(p, d)| p * d).sum();
                for (d, p) in dr.iter_mut().zip(pr) {
                    *d = p * (*d - dot) * scale;
                }
            }
            // dQ = dS K
            gemm::gemm(
                nq,
                nk,
                dh,
                1.0,
                View::row_major(&dp, nk),
                View { data: k.data(), offset: b * nk * d + h * dh, rs: d, cs: 1 },
                1.0,
                ViewMut { data: &mut dq, offset: b * nq * d + h * dh, rs: d, cs: 1 },
            );
            // dK = dS^T Q
            gemm::gemm(
                nk,
                nq,
                dh,
                1.0,
                View::transposed(&dp, nk),
                View { data: q.data(), offset: b * nq * d + h * dh, rs: d, cs: 1 },
                1.0,
                ViewMut { data: &mut dk, offset: b * nk * d + h * dh, rs: d, cs: 1 },
            );
        }
    }
    (dq, dk, dvv)
}

impl Graph {
    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    /// The affine part is applied separately with `mul_cols`/`add_cols`.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Scaled dot-product attention over a batch of independent sequences.
    ///
    /// `q: [batch * nq, d]`, `k: [batch * nk, d]`, `v: [batch * nk, dv]`.
    /// Head `h` uses columns `[h * d/heads, (h + 1) * d/heads)` of each input
    /// and writes the matching column block of the `[batch * nq, dv]` output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let dims = attn_dims(self.shape(q), self.shape(k), self.shape(v), batch, heads)?;
        let AttnDims { nq, nk, d, dv, dh, dvh } = dims;
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; batch * nq * dv];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
                gemm::gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    View { data: qt.data(), offset: b * nq * d + h * dh, rs: d, cs: 1 },
                    View { data: kt.data(), offset: b * nk * d + h * dh, rs: 1, cs: d },
                    0.0,
                    ViewMut::row_major(p, nk),
                );
                for row in p.chunks_exact_mut(nk) {
                    softmax_in_place(row);
                }
                gemm::gemm(
                    nq,
                    nk,
                    dvh,
                    1.0,
                    View::row_major(p, nk),
                    View { data: vt.data(), offset: b * nk * dv + h * dvh, rs: dv, cs: 1 },
                    0.0,
                    ViewMut { data: &mut out, offset: b * nq * dv + h * dvh, rs: dv, cs: 1 },
                );
            }
        }
        let out = Tensor::from_parts(vec![batch * nq, dv], out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights saved by an [`Graph::attention`] node, laid out as
    /// `[batch][head][nq][nk]`. `None` for other nodes or when no input
    /// required a gradient.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }
}

/// Attention weights computed without a graph, `[batch][head][nq][nk]`.
/// Used for inspection when the attention node was recorded as a constant.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    batch: usize,
    heads: usize,
    scale: f64,
) -> Result<Vec<f64>> {
    let dims = attn_dims(q.shape(), k.shape(), k.shape(), batch, heads)?;
    let AttnDims { nq, nk, d, dh, .. } = dims;
    let mut probs = vec![0.0; batch * heads * nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            gemm::gemm(
                nq,
                dh,
                nk,
                scale,
                View { data: q.data(), offset: b * nq * d + h * dh, rs: d, cs: 1 },
                View { data: k.data(), offset: b * nk * d + h * dh, rs: 1, cs: d },
                0.0,
                ViewMut::row_major(p, nk),
            );
            for row in p.chunks_exact_mut(nk) {
                softmax_in_place(row);
            }
        }
    }
    Ok(probs)
}
