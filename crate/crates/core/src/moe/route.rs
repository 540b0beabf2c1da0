use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::tensor::{ops, Element, Float, IndexTensor, Tensor};

/// Router outputs for the local tokens of one rank.
#[derive(Clone, Debug)]
pub struct RouterOutput<T: Element> {
    /// `[S, N]`
    pub logits: Tensor<T>,
    /// `[S, N]`
    pub probs: Tensor<T>,
    /// `[S, K]`, renormalized when the config asks for it.
    pub weights: Tensor<T>,
    /// `[S, K]`
    pub indices: IndexTensor,
    /// Raw top-k probabilities before renormalization.
    pub topk_probs: Tensor<T>,
}

pub fn route<T: Float>(input: &Tensor<T>, router_weight: &Tensor<T>, cfg: &MoeConfig) -> Result<RouterOutput<T>> {
    if !input.is_finite() {
        return Err(Error::Routing("non-finite router input".into()));
    }
    let logits = ops::matmul(input, router_weight)?;
    if !logits.is_finite() {
        return Err(Error::Routing("non-finite router logits".into()));
    }
    if logits.dim(1) != cfg.num_experts {
        return Err(Error::shape(
            "route",
            format!("router produces {} logits for {} experts", logits.dim(1), cfg.num_experts),
        ));
    }
    let probs = ops::softmax(&logits);
    let (topk_probs, indices) = ops::topk(&probs, cfg.top_k)?;
    let weights = if cfg.normalize_topk_weights {
        renormalize(&topk_probs)
    } else {
        topk_probs.clone()
    };
    Ok(RouterOutput {
        logits,
        probs,
        weights,
        indices,
        topk_probs,
    })
}

fn renormalize<T: Float>(p: &Tensor<T>) -> Tensor<T> {
    let mut w = p.clone();
    for r in 0..w.rows() {
        let row = w.row_mut(r);
        let s: T = row.iter().copied().sum();
        for v in row {
            *v /= s;
        }
    }
    w
}

/// Backward of per-token renormalization `w = p / sum(p)`.
pub fn renormalize_backward<T: Float>(topk_probs: &Tensor<T>, weights: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut out = grad.clone();
    for r in 0..out.rows() {
        let s: T = topk_probs.row(r).iter().copied().sum();
        let dot: T = grad.row(r).iter().zip(weights.row(r)).map(|(&g, &w)| g * w).sum();
        for v in out.row_mut(r) {
            *v = (*v - dot) / s;
        }
    }
    out
}

/// Forced uniform routing for the `seq_len` local tokens of EP rank
/// `ep_rank`. Global token `g = ep_rank * seq_len + t` picks experts
/// `(g*K + j) mod N`, each with weight `1/K`.
///
/// The flag reports whether every expert receives exactly the same number of
/// tokens across the EP group; otherwise counts differ by at most one.
pub fn fur_route<T: Float>(cfg: &MoeConfig, seq_len: usize, ep_rank: usize) -> (Tensor<T>, IndexTensor, bool) {
    let (n, k) = (cfg.num_experts, cfg.top_k);
    let exact = (seq_len * cfg.ep * k).is_multiple_of(n);
    let w = T::lit(1.0 / k as f64);
    let weights = Tensor::full(&[seq_len, k], w);
    let mut indices = IndexTensor::zeros(&[seq_len, k]);
    for t in 0..seq_len {
        let g = ep_rank * seq_len + t;
        for j in 0..k {
            indices.set(&[t, j], (g * k + j) % n);
        }
    }
    (weights, indices, exact)
}
