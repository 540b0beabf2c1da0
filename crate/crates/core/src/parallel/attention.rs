use crate::comm::Rank;
use crate::error::{Error, Result};
use crate::parallel::tp::{tp_allreduce, tp_row_linear};
use crate::tensor::{ops, Element, Float, Tensor};

/// Local attention projections. `wq`, `wk`, `wv` are `[H, hl*hs]` column
/// slices and `wo` the matching `[hl*hs, H]` row slice.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights<'a, T: Element> {
    pub wq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub wo: &'a Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    /// Heads computed on this rank.
    pub heads: usize,
    pub head_size: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttnSaved<T: Element> {
    pub x: Tensor<T>,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// `[B*heads, C, C]`, zero above the diagonal.
    pub probs: Tensor<T>,
    pub ctx: Tensor<T>,
}

impl<T: Float> AttnSaved<T> {
    pub fn bytes(&self) -> usize {
        [&self.x, &self.q, &self.k, &self.v, &self.probs, &self.ctx]
            .iter()
            .map(|t| t.size_bytes())
            .sum()
    }
}

fn check<T: Element>(op: &'static str, q: &Tensor<T>, s: &AttnShape) -> Result<usize> {
    let width = s.heads * s.head_size;
    if q.ndim() != 2 || q.dim(1) != width || s.seq_len == 0 || !q.dim(0).is_multiple_of(s.seq_len) {
        return Err(Error::shape(op, format!("q {:?} for {s:?}", q.shape())));
    }
    Ok(q.dim(0) / s.seq_len)
}

/// Causal softmax attention over `[B*C, heads*hs]` projections. Returns the
/// context and the attention probabilities.
pub fn causal_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, s: &AttnShape) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = check("causal_attention", q, s)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("causal_attention", format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let (c, hs, w) = (s.seq_len, s.head_size, s.heads * s.head_size);
    let scale = T::lit(1.0 / (hs as f64).sqrt());
    let mut ctx = Tensor::zeros(q.shape());
    let mut probs = Tensor::zeros(&[b * s.heads, c, c]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for bi in 0..b {
        for h in 0..s.heads {
            let p = &mut probs.data_mut()[(bi * s.heads + h) * c * c..][..c * c];
            for i in 0..c {
                let qi = &qd[(bi * c + i) * w + h * hs..][..hs];
                let row = &mut p[i * c..(i + 1) * c];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &kd[(bi * c + j) * w + h * hs..][..hs];
                    let mut dot = T::zero();
                    for d in 0..hs {
                        dot += qi[d] * kj[d];
                    }
                    row[j] = dot * scale;
                    if row[j] > max {
                        max = row[j];
                    }
                }
                let mut sum = T::zero();
                for x in &mut row[..=i] {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in &mut row[..=i] {
                    *x /= sum;
                }
            }
            for i in 0..c {
                let out = &mut ctx.data_mut()[(bi * c + i) * w + h * hs..][..hs];
                for j in 0..=i {
                    let pij = p[i * c + j];
                    let vj = &vd[(bi * c + j) * w + h * hs..][..hs];
                    for d in 0..hs {
                        out[d] += pij * vj[d];
                    }
                }
            }
        }
    }
    Ok((ctx, probs))
}

/// Returns `(dq, dk, dv)`.
pub fn causal_attention_backward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    dctx: &Tensor<T>,
    s: &AttnShape,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let b = check("causal_attention_backward", q, s)?;
    if dctx.shape() != q.shape() || probs.shape() != [b * s.heads, s.seq_len, s.seq_len] {
        return Err(Error::shape(
            "causal_attention_backward",
            format!("dctx {:?}, probs {:?}", dctx.shape(), probs.shape()),
        ));
    }
    let (c, hs, w) = (s.seq_len, s.head_size, s.heads * s.head_size);
    let scale = T::lit(1.0 / (hs as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dctx.data());
    let mut dp = vec![T::zero(); c];
    for bi in 0..b {
        for h in 0..s.heads {
            let p = &probs.data()[(bi * s.heads + h) * c * c..][..c * c];
            let at = |t: usize| (bi * c + t) * w + h * hs;
            for i in 0..c {
                let gi = &gd[at(i)..][..hs];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vj = &vd[at(j)..][..hs];
                    let mut x = T::zero();
                    for d in 0..hs {
                        x += gi[d] * vj[d];
                    }
                    dp[j] = x;
                    dot += p[i * c + j] * x;
                    let pij = p[i * c + j];
                    let dvj = &mut dv.data_mut()[at(j)..][..hs];
                    for d in 0..hs {
                        dvj[d] += pij * gi[d];
                    }
                }
                for j in 0..=i {
                    let ds = p[i * c + j] * (dp[j] - dot) * scale;
                    let (qi, kj) = (&qd[at(i)..][..hs], &kd[at(j)..][..hs]);
                    let dqi = &mut dq.data_mut()[at(i)..][..hs];
                    for d in 0..hs {
                        dqi[d] += ds * kj[d];
                    }
                    let dkj = &mut dk.data_mut()[at(j)..][..hs];
                    for d in 0..hs {
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Multi-head causal attention with this rank's heads; the output projection
/// is row-parallel so the result is summed over the TP group.
pub fn tp_attention_forward<T: Float>(
    rank: &mut Rank<'_>,
    x: &Tensor<T>,
    w: &AttnWeights<'_, T>,
    s: &AttnShape,
) -> Result<(Tensor<T>, AttnSaved<T>)> {
    let q = ops::matmul(x, w.wq)?;
    let k = ops::matmul(x, w.wk)?;
    let v = ops::matmul(x, w.wv)?;
    let (ctx, probs) = causal_attention(&q, &k, &v, s)?;
    let out = tp_row_linear(rank, &ctx, w.wo)?;
    Ok((
        out,
        AttnSaved {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

/// Returns `dx` (summed over TP) and `[dwq, dwk, dwv, dwo]`.
pub fn tp_attention_backward<T: Float>(
    rank: &mut Rank<'_>,
    saved: &AttnSaved<T>,
    w: &AttnWeights<'_, T>,
    dy: &Tensor<T>,
    s: &AttnShape,
) -> Result<(Tensor<T>, [Tensor<T>; 4])> {
    let dwo = ops::matmul_tn(&saved.ctx, dy)?;
    let dctx = ops::matmul_nt(dy, w.wo)?;
    let (dq, dk, dv) = causal_attention_backward(&saved.q, &saved.k, &saved.v, &saved.probs, &dctx, s)?;
    let mut dx = ops::matmul_nt(&dq, w.wq)?;
    dx.add_assign(&ops::matmul_nt(&dk, w.wk)?)?;
    dx.add_assign(&ops::matmul_nt(&dv, w.wv)?)?;
    let dx = tp_allreduce(rank, dx)?;
    let dwq = ops::matmul_tn(&saved.x, &dq)?;
    let dwk = ops::matmul_tn(&saved.x, &dk)?;
    let dwv = ops::matmul_tn(&saved.x, &dv)?;
    Ok((dx, [dwq, dwk, dwv, dwo]))
}
