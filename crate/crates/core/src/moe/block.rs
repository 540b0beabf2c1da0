use serde_json::json;

use crate::comm::{Axis, Rank};
use crate::error::{Error, Result};
use crate::moe::kernels::{self, ExpertActivations, RoutingArtifacts};
use crate::moe::route::{self, RouterOutput};
use crate::moe::{ExpertWeights, MoeConfig};
use crate::tensor::{ops, Element, Float, IndexTensor, Tensor};

/// Routing statistics of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxStats {
    /// Selections per global expert among this rank's local tokens.
    pub selections: Vec<usize>,
    /// Gathered tokens routed to each expert hosted on this rank.
    pub local_expert_tokens: Vec<usize>,
    /// Mean router probability per expert over local tokens; empty under FUR.
    pub mean_probs: Vec<f64>,
    /// FUR only: whether the forced assignment is exactly uniform.
    pub uniform: bool,
}

/// Everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct MoeSaved<T: Element> {
    pub cfg: MoeConfig,
    pub fur: bool,
    pub input: Tensor<T>,
    pub router: Option<RouterOutput<T>>,
    /// Local `[S, K]` choices.
    pub indices: IndexTensor,
    pub gathered_input: Tensor<T>,
    pub gathered_weights: Tensor<T>,
    pub artifacts: RoutingArtifacts,
    pub acts: ExpertActivations<T>,
}

impl<T: Float> MoeSaved<T> {
    /// Routing artifacts plus router tensors, for golden-file comparisons.
    pub fn routing_json(&self) -> Result<String> {
        let f = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
        let router = self.router.as_ref().map(|r| {
            json!({
                "logits": f(&r.logits),
                "probs": f(&r.probs),
            })
        });
        let v = json!({
            "fur": self.fur,
            "router": router,
            "weights": f(&self.gathered_weights),
            "artifacts": self.artifacts,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Gradients of one block invocation. `experts.router` is zero under FUR.
#[derive(Clone, Debug)]
pub struct MoeGrads<T: Element> {
    pub input: Tensor<T>,
    pub experts: ExpertWeights<T>,
}

/// Allgather `input`, `weights` and `indices` over the EP group; the
/// backward counterpart is [`Rank::reducescatter`] on the first two.
pub fn gather_tokens<T: Float>(
    rank: &mut Rank<'_>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    indices: &IndexTensor,
) -> Result<(Tensor<T>, Tensor<T>, IndexTensor)> {
    let ep = rank.group(Axis::Ep);
    Ok((
        rank.allgather(&ep, input)?,
        rank.allgather(&ep, weights)?,
        rank.allgather(&ep, indices)?,
    ))
}

fn check_weights<T: Float>(w: &ExpertWeights<T>, cfg: &MoeConfig, tp: usize) -> Result<()> {
    let nr = cfg.experts_per_rank();
    let il = cfg.intermediate / tp;
    let (h, n) = (cfg.hidden, cfg.num_experts);
    let ok = w.gate.shape() == [nr, h, il]
        && w.up.shape() == [nr, h, il]
        && w.down.shape() == [nr, il, h]
        && w.router.shape() == [h, n];
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            "fast_moe_forward",
            format!(
                "expert weights gate {:?} up {:?} down {:?} router {:?} do not match nr={nr} h={h} i={il} n={n}",
                w.gate.shape(),
                w.up.shape(),
                w.down.shape(),
                w.router.shape()
            ),
        ))
    }
}

pub fn fast_moe_forward<T: Float>(
    rank: &mut Rank<'_>,
    input: &Tensor<T>,
    w: &ExpertWeights<T>,
    cfg: &MoeConfig,
    fur: bool,
) -> Result<(Tensor<T>, MoeSaved<T>, AuxStats)> {
    let topo = rank.topology();
    if topo.ep != cfg.ep {
        return Err(Error::Config(format!("moe ep={} but world ep={}", cfg.ep, topo.ep)));
    }
    check_weights(w, cfg, topo.tp)?;
    if input.ndim() != 2 || input.dim(1) != cfg.hidden {
        return Err(Error::shape("fast_moe_forward", format!("input {:?}", input.shape())));
    }
    let s = input.dim(0);
    let ep_rank = rank.coords().ep;

    let (router, weights, indices, uniform) = if fur {
        let (w, i, exact) = route::fur_route::<T>(cfg, s, ep_rank);
        (None, w, i, exact)
    } else {
        let r = route::route(input, &w.router, cfg)?;
        let (wt, idx) = (r.weights.clone(), r.indices.clone());
        (Some(r), wt, idx, false)
    };

    let (g_input, g_weights, g_indices) = gather_tokens(rank, input, &weights, &indices)?;
    let art = kernels::build_artifacts(&g_indices, ep_rank, cfg)?;
    let mut acts = kernels::expert_forward(&g_input, &art, w)?;
    let tp = rank.group(Axis::Tp);
    if tp.size() > 1 {
        acts.mlp_out = rank.allreduce(&tp, &acts.mlp_out)?;
    }
    let partial = kernels::output_reduction_forward(&acts.mlp_out, &g_weights, &art);
    let ep = rank.group(Axis::Ep);
    let output = rank.reducescatter(&ep, &partial)?;
    if !output.is_finite() {
        return Err(Error::Routing("non-finite moe output".into()));
    }

    let mut selections = vec![0usize; cfg.num_experts];
    for &e in indices.data() {
        selections[e] += 1;
    }
    let mean_probs = match &router {
        Some(r) => (0..cfg.num_experts)
            .map(|e| (0..s).map(|t| r.probs.get(&[t, e]).as_f64()).sum::<f64>() / s.max(1) as f64)
            .collect(),
        None => Vec::new(),
    };
    let stats = AuxStats {
        selections,
        local_expert_tokens: art.token_counts(),
        mean_probs,
        uniform,
    };
    let saved = MoeSaved {
        cfg: *cfg,
        fur,
        input: input.clone(),
        router,
        indices,
        gathered_input: g_input,
        gathered_weights: g_weights,
        artifacts: art,
        acts,
    };
    Ok((output, saved, stats))
}

/// `probs_grad_extra` is an additional `[S, N]` gradient on the router
/// probabilities, such as from the load-balancing loss.
pub fn fast_moe_backward<T: Float>(
    rank: &mut Rank<'_>,
    output_grad: &Tensor<T>,
    saved: &MoeSaved<T>,
    w: &ExpertWeights<T>,
    probs_grad_extra: Option<&Tensor<T>>,
) -> Result<MoeGrads<T>> {
    if output_grad.shape() != saved.input.shape() {
        return Err(Error::shape(
            "fast_moe_backward",
            format!("output_grad {:?} vs input {:?}", output_grad.shape(), saved.input.shape()),
        ));
    }
    let ep = rank.group(Axis::Ep);
    let tp = rank.group(Axis::Tp);
    let art = &saved.artifacts;

    let og = rank.allgather(&ep, output_grad)?;
    let (mlp_out_grad, wgrad_full) =
        kernels::output_reduction_backward(&og, &saved.acts.mlp_out, &saved.gathered_weights, art);
    let eg = kernels::expert_backward(&saved.acts, art, w, &mlp_out_grad)?;
    let mut mlp_in_grad = eg.mlp_in;
    if tp.size() > 1 {
        mlp_in_grad = rank.allreduce(&tp, &mlp_in_grad)?;
    }
    let token_grad = kernels::scatter_token_grads(&mlp_in_grad, art);
    let mut input_grad = rank.reducescatter(&ep, &token_grad)?;

    let mut router_grad = Tensor::zeros(w.router.shape());
    if let Some(r) = &saved.router {
        let mut wgrad = rank.reducescatter(&ep, &wgrad_full)?;
        if saved.cfg.normalize_topk_weights {
            wgrad = route::renormalize_backward(&r.topk_probs, &r.weights, &wgrad);
        }
        let mut probs_grad = match probs_grad_extra {
            Some(g) => g.clone(),
            None => Tensor::zeros(r.probs.shape()),
        };
        for t in 0..saved.indices.rows() {
            for (k, &e) in saved.indices.row(t).iter().enumerate() {
                let v = probs_grad.get(&[t, e]) + wgrad.get(&[t, k]);
                probs_grad.set(&[t, e], v);
            }
        }
        let logits_grad = ops::softmax_backward(&r.probs, &probs_grad)?;
        router_grad = ops::matmul_tn(&saved.input, &logits_grad)?;
        input_grad.add_assign(&ops::matmul_nt(&logits_grad, &w.router)?)?;
    }

    Ok(MoeGrads {
        input: input_grad,
        experts: ExpertWeights {
            gate: eg.gate,
            up: eg.up,
            down: eg.down,
            router: router_grad,
        },
    })
}

/// Load-balancing loss summed over consecutive segments of `seq_len` local
/// tokens: each segment contributes `N * sum_e f_e * p_e` where `f_e` is the
/// fraction of the segment's selections that picked expert `e` (treated as a
/// constant) and `p_e` its mean router probability. Returns the sum, its
/// gradient on `probs`, and the number of segments.
pub fn load_balance_loss<T: Float>(
    probs: &Tensor<T>,
    indices: &IndexTensor,
    seq_len: usize,
) -> Result<(f64, Tensor<T>, usize)> {
    let (s, n) = (probs.dim(0), probs.dim(1));
    let k = indices.dim(1);
    if seq_len == 0 || indices.rows() != s {
        return Err(Error::contract(
            "load_balance_loss",
            format!("seq_len={seq_len}, probs {:?}, indices {:?}", probs.shape(), indices.shape()),
        ));
    }
    let mut grad = Tensor::zeros(&[s, n]);
    let mut total = 0.0;
    let mut segments = 0;
    for start in (0..s).step_by(seq_len) {
        let end = (start + seq_len).min(s);
        let len = (end - start) as f64;
        let mut f = vec![0.0f64; n];
        for t in start..end {
            for &e in indices.row(t) {
                f[e] += 1.0;
            }
        }
        for v in &mut f {
            *v /= len * k as f64;
        }
        for e in 0..n {
            let p: f64 = (start..end).map(|t| probs.get(&[t, e]).as_f64()).sum::<f64>() / len;
            total += n as f64 * f[e] * p;
            let g = T::lit(n as f64 * f[e] / len);
            for t in start..end {
                grad.set(&[t, e], g);
            }
        }
        segments += 1;
    }
    Ok((total, grad, segments))
}
