//! Naive per-token, per-expert MoE used as the correctness oracle for the
//! fast block. Deliberately shares no kernels with it beyond routing.

use crate::error::Result;
use crate::moe::route::{self, RouterOutput};
use crate::moe::{ExpertWeights, MoeConfig};
use crate::tensor::{ops, Float, IndexTensor, Tensor};

struct TokenExpert<T> {
    gate: Vec<T>,
    up: Vec<T>,
    mul: Vec<T>,
    out: Vec<T>,
}

fn expert_mlp<T: Float>(x: &[T], w: &ExpertWeights<T>, e: usize) -> TokenExpert<T> {
    let (h, i) = (w.hidden(), w.intermediate());
    let mut gate = vec![T::zero(); i];
    let mut up = vec![T::zero(); i];
    for j in 0..i {
        for (hh, &xv) in x.iter().enumerate() {
            gate[j] += xv * w.gate.get(&[e, hh, j]);
            up[j] += xv * w.up.get(&[e, hh, j]);
        }
    }
    let mul: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| ops::silu(g) * u).collect();
    let mut out = vec![T::zero(); h];
    for (hh, o) in out.iter_mut().enumerate() {
        for (j, &m) in mul.iter().enumerate() {
            *o += m * w.down.get(&[e, j, hh]);
        }
    }
    TokenExpert { gate, up, mul, out }
}

/// `experts` holds all `N` experts on one rank.
pub fn reference_moe_forward<T: Float>(input: &Tensor<T>, experts: &ExpertWeights<T>, cfg: &MoeConfig) -> Result<Tensor<T>> {
    let r = route::route(input, &experts.router, cfg)?;
    Ok(reference_moe_forward_routed(input, experts, &r.weights, &r.indices))
}

/// Same as [`reference_moe_forward`] with routing supplied by the caller.
pub fn reference_moe_forward_routed<T: Float>(
    input: &Tensor<T>,
    experts: &ExpertWeights<T>,
    weights: &Tensor<T>,
    indices: &IndexTensor,
) -> Tensor<T> {
    let mut out = Tensor::zeros(input.shape());
    for t in 0..input.rows() {
        for (k, &e) in indices.row(t).iter().enumerate() {
            let y = expert_mlp(input.row(t), experts, e);
            let wk = weights.get(&[t, k]);
            for (o, &v) in out.row_mut(t).iter_mut().zip(&y.out) {
                *o += wk * v;
            }
        }
    }
    out
}

/// Full gradients of `sum(output * output_grad)` with respect to the input
/// and every expert and router weight.
pub fn reference_moe_backward<T: Float>(
    input: &Tensor<T>,
    experts: &ExpertWeights<T>,
    cfg: &MoeConfig,
    output_grad: &Tensor<T>,
) -> Result<(Tensor<T>, ExpertWeights<T>)> {
    let RouterOutput {
        probs,
        weights,
        indices,
        topk_probs,
        ..
    } = route::route(input, &experts.router, cfg)?;
    let (h, i) = (experts.hidden(), experts.intermediate());
    let mut grads = ExpertWeights::zeros(experts.num_local(), h, i, cfg.num_experts);
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweights = Tensor::zeros(weights.shape());

    for t in 0..input.rows() {
        let x = input.row(t);
        let dy = output_grad.row(t);
        for (k, &e) in indices.row(t).iter().enumerate() {
            let y = expert_mlp(x, experts, e);
            let wk = weights.get(&[t, k]);
            dweights.set(&[t, k], y.out.iter().zip(dy).map(|(&a, &b)| a * b).sum());
            let dout: Vec<T> = dy.iter().map(|&g| g * wk).collect();
            let mut dmul = vec![T::zero(); i];
            for j in 0..i {
                for hh in 0..h {
                    let gd = grads.down.get(&[e, j, hh]) + y.mul[j] * dout[hh];
                    grads.down.set(&[e, j, hh], gd);
                    dmul[j] += dout[hh] * experts.down.get(&[e, j, hh]);
                }
            }
            for j in 0..i {
                let sg = ops::silu(y.gate[j]);
                let sig = T::one() / (T::one() + (-y.gate[j]).exp());
                let dsilu = sig * (T::one() + y.gate[j] * (T::one() - sig));
                let dg = dmul[j] * y.up[j] * dsilu;
                let du = dmul[j] * sg;
                for (hh, &xv) in x.iter().enumerate() {
                    grads.gate.set(&[e, hh, j], grads.gate.get(&[e, hh, j]) + xv * dg);
                    grads.up.set(&[e, hh, j], grads.up.get(&[e, hh, j]) + xv * du);
                    let dx = dinput.get(&[t, hh]) + dg * experts.gate.get(&[e, hh, j]) + du * experts.up.get(&[e, hh, j]);
                    dinput.set(&[t, hh], dx);
                }
            }
        }
    }

    if cfg.normalize_topk_weights {
        dweights = route::renormalize_backward(&topk_probs, &weights, &dweights);
    }
    let n = cfg.num_experts;
    for t in 0..input.rows() {
        let mut dp = vec![T::zero(); n];
        for (k, &e) in indices.row(t).iter().enumerate() {
            dp[e] += dweights.get(&[t, k]);
        }
        let p = probs.row(t);
        let dot: T = dp.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for e in 0..n {
            let dl = p[e] * (dp[e] - dot);
            for hh in 0..h {
                let xv = input.get(&[t, hh]);
                grads.router.set(&[hh, e], grads.router.get(&[hh, e]) + xv * dl);
                dinput.set(&[t, hh], dinput.get(&[t, hh]) + dl * experts.router.get(&[hh, e]));
            }
        }
    }
    Ok((dinput, grads))
}
