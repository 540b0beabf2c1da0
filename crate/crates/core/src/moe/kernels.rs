//! Stages 2 to 5 of the fast MoE block. Logical threads run as a sequential
//! loop; every write targets a slot owned by exactly one thread.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::moe::{ExpertWeights, MoeConfig};
use crate::tensor::{ops, Element, Float, IndexTensor, Tensor};

/// Counting and index tensors of one block invocation on one rank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RoutingArtifacts {
    /// Gathered token count `T`.
    pub tokens: usize,
    pub top_k: usize,
    pub token_block_size: usize,
    /// Logical thread count `TH = ceil(T / TBS)`.
    pub threads: usize,
    pub experts_per_rank: usize,
    /// First global expert id hosted here.
    pub expert_start: usize,
    /// Routed (token, expert) pairs handled by this rank.
    pub routed: usize,
    /// Gathered `[T, K]` expert choices, row-major.
    pub indices: Vec<usize>,
    /// `[NR * TH]`, expert-major.
    pub partial_token_counts: Vec<usize>,
    pub partial_cum_token_counts: Vec<usize>,
    pub cum_token_counts: Vec<usize>,
    pub expert_counts: Vec<usize>,
    pub cum_expert_counts: Vec<usize>,
    pub input_indices: Vec<usize>,
    pub output_indices: Vec<usize>,
    pub selected_expert_indices: Vec<usize>,
    /// `[NR * TH]`
    pub counter: Vec<usize>,
}

impl RoutingArtifacts {
    /// Tokens routed to each local expert.
    pub fn token_counts(&self) -> Vec<usize> {
        self.cum_token_counts.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn count_tokens(indices: &IndexTensor, ep_rank: usize, cfg: &MoeConfig) -> Result<RoutingArtifacts> {
    if indices.ndim() != 2 || indices.dim(1) != cfg.top_k {
        return Err(Error::shape(
            "count_tokens",
            format!("indices {:?}, expected [T, {}]", indices.shape(), cfg.top_k),
        ));
    }
    if let Some(&bad) = indices.data().iter().find(|&&n| n >= cfg.num_experts) {
        return Err(Error::contract(
            "count_tokens",
            format!("expert id {bad} outside [0, {})", cfg.num_experts),
        ));
    }
    let (t_total, k) = (indices.dim(0), cfg.top_k);
    let tbs = cfg.token_block_size;
    let th = t_total.div_ceil(tbs);
    let nr = cfg.experts_per_rank();
    let (n_start, n_end) = cfg.expert_range(ep_rank);

    let mut partial = vec![0usize; nr * th];
    let mut expert_counts = vec![0usize; t_total];
    for tid in 0..th {
        for i in 0..tbs {
            let t = tid * tbs + i;
            if t >= t_total {
                break;
            }
            for &n in &indices.row(t)[..k] {
                if (n_start..n_end).contains(&n) {
                    partial[(n - n_start) * th + tid] += 1;
                    expert_counts[t] += 1;
                }
            }
        }
    }
    let partial_cum = ops::prefix_sum(&partial);
    let cum_expert = ops::prefix_sum(&expert_counts);
    let cum_token: Vec<usize> = (0..=nr).map(|n| partial_cum[n * th]).collect();
    let routed = cum_token[nr];
    debug_assert_eq!(routed, cum_expert[t_total]);
    Ok(RoutingArtifacts {
        tokens: t_total,
        top_k: k,
        token_block_size: tbs,
        threads: th,
        experts_per_rank: nr,
        expert_start: n_start,
        routed,
        indices: indices.data().to_vec(),
        partial_token_counts: partial,
        partial_cum_token_counts: partial_cum,
        cum_token_counts: cum_token,
        expert_counts,
        cum_expert_counts: cum_expert,
        input_indices: Vec::new(),
        output_indices: Vec::new(),
        selected_expert_indices: Vec::new(),
        counter: vec![0; nr * th],
    })
}

/// Fills `input_indices`, `output_indices`, `selected_expert_indices` and
/// `counter`.
pub fn generate_indices(art: &mut RoutingArtifacts) {
    let (th, tbs, k, t_total) = (art.threads, art.token_block_size, art.top_k, art.tokens);
    let n_end = art.expert_start + art.experts_per_rank;
    let rt = art.routed;
    let mut input_indices = vec![0usize; rt];
    let mut output_indices = vec![0usize; rt];
    let mut selected = vec![0usize; rt];
    let mut counter = vec![0usize; art.experts_per_rank * th];
    for tid in 0..th {
        for i in 0..tbs {
            let t = tid * tbs + i;
            if t >= t_total {
                break;
            }
            let mut o_ind = art.cum_expert_counts[t];
            for kk in 0..k {
                let n = art.indices[t * k + kk];
                if (art.expert_start..n_end).contains(&n) {
                    let slot = (n - art.expert_start) * th + tid;
                    let i_ind = art.partial_cum_token_counts[slot] + counter[slot];
                    input_indices[i_ind] = t;
                    output_indices[o_ind] = i_ind;
                    selected[o_ind] = kk;
                    counter[slot] += 1;
                    o_ind += 1;
                }
            }
        }
    }
    art.input_indices = input_indices;
    art.output_indices = output_indices;
    art.selected_expert_indices = selected;
    art.counter = counter;
}

/// Stage 2 and Stage 3 together.
pub fn build_artifacts(indices: &IndexTensor, ep_rank: usize, cfg: &MoeConfig) -> Result<RoutingArtifacts> {
    let mut art = count_tokens(indices, ep_rank, cfg)?;
    generate_indices(&mut art);
    Ok(art)
}

/// Stage-4 activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ExpertActivations<T: Element> {
    pub mlp_in: Tensor<T>,
    pub gate_out: Tensor<T>,
    pub up_out: Tensor<T>,
    pub mul_out: Tensor<T>,
    pub mlp_out: Tensor<T>,
}

pub fn gather_rows<T: Float>(input: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let h = input.row_len();
    let mut data = Vec::with_capacity(rows.len() * h);
    for &r in rows {
        data.extend_from_slice(input.row(r));
    }
    Tensor::new(&[rows.len(), h], data).expect("row gather preserves shape")
}

pub fn expert_forward<T: Float>(
    input: &Tensor<T>,
    art: &RoutingArtifacts,
    w: &ExpertWeights<T>,
) -> Result<ExpertActivations<T>> {
    let mlp_in = gather_rows(input, &art.input_indices);
    let b = &art.cum_token_counts;
    let gate_out = ops::grouped_mm(&mlp_in, &w.gate, b)?;
    let up_out = ops::grouped_mm(&mlp_in, &w.up, b)?;
    let mul_out = ops::silu_glu(&gate_out, &up_out)?;
    let mlp_out = ops::grouped_mm(&mul_out, &w.down, b)?;
    Ok(ExpertActivations {
        mlp_in,
        gate_out,
        up_out,
        mul_out,
        mlp_out,
    })
}

/// Gradients of the merged expert weights plus `mlp_in_grad[RT, H]`.
pub struct ExpertGrads<T: Element> {
    pub mlp_in: Tensor<T>,
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

pub fn expert_backward<T: Float>(
    acts: &ExpertActivations<T>,
    art: &RoutingArtifacts,
    w: &ExpertWeights<T>,
    mlp_out_grad: &Tensor<T>,
) -> Result<ExpertGrads<T>> {
    let b = &art.cum_token_counts;
    let (dmul, ddown) = ops::grouped_mm_backward(&acts.mul_out, &w.down, b, mlp_out_grad)?;
    let (dgate_out, dup_out) = ops::silu_glu_backward(&acts.gate_out, &acts.up_out, &dmul)?;
    let (mut din, dgate) = ops::grouped_mm_backward(&acts.mlp_in, &w.gate, b, &dgate_out)?;
    let (din_up, dup) = ops::grouped_mm_backward(&acts.mlp_in, &w.up, b, &dup_out)?;
    din.add_assign(&din_up)?;
    Ok(ExpertGrads {
        mlp_in: din,
        gate: dgate,
        up: dup,
        down: ddown,
    })
}

/// Adds row `i` of `rows_grad` into row `input_indices[i]` of a `[T, H]`
/// zero tensor, in ascending `i`.
pub fn scatter_token_grads<T: Float>(rows_grad: &Tensor<T>, art: &RoutingArtifacts) -> Tensor<T> {
    let h = rows_grad.row_len();
    let mut out = Tensor::zeros(&[art.tokens, h]);
    for (i, &t) in art.input_indices.iter().enumerate() {
        for (o, &g) in out.row_mut(t).iter_mut().zip(rows_grad.row(i)) {
            *o += g;
        }
    }
    out
}

pub fn output_reduction_forward<T: Float>(
    mlp_out: &Tensor<T>,
    weights: &Tensor<T>,
    art: &RoutingArtifacts,
) -> Tensor<T> {
    let h = mlp_out.row_len();
    let mut output = Tensor::zeros(&[art.tokens, h]);
    for t in 0..art.tokens {
        let (base, end) = (art.cum_expert_counts[t], art.cum_expert_counts[t + 1]);
        let row = output.row_mut(t);
        for (hh, out) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in base..end {
                let k = art.selected_expert_indices[i];
                let index = art.output_indices[i];
                acc += weights.get(&[t, k]) * mlp_out.get(&[index, hh]);
            }
            *out = acc;
        }
    }
    output
}

/// Returns `(mlp_out_grad[RT, H], weights_grad[T, K])`.
pub fn output_reduction_backward<T: Float>(
    output_grad: &Tensor<T>,
    mlp_out: &Tensor<T>,
    weights: &Tensor<T>,
    art: &RoutingArtifacts,
) -> (Tensor<T>, Tensor<T>) {
    let h = output_grad.row_len();
    let mut mlp_out_grad = Tensor::zeros(&[art.routed, h]);
    let mut weights_grad = Tensor::zeros(&[art.tokens, art.top_k]);
    for rt in 0..art.routed {
        let o_ind = art.output_indices[rt];
        let t = art.input_indices[o_ind];
        let k = art.selected_expert_indices[rt];
        let w = weights.get(&[t, k]);
        let mut acc = T::zero();
        let og = output_grad.row(t);
        let mo = mlp_out.row(o_ind);
        for (hh, g) in mlp_out_grad.row_mut(o_ind).iter_mut().enumerate() {
            *g = w * og[hh];
            acc += mo[hh] * og[hh];
        }
        weights_grad.set(&[t, k], acc);
    }
    (mlp_out_grad, weights_grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> (IndexTensor, MoeConfig) {
        let idx = IndexTensor::new(&[4, 2], vec![0, 1, 0, 2, 1, 3, 2, 3]).unwrap();
        let mut cfg = MoeConfig::new(4, 2, 2, 2, 2).unwrap();
        cfg.token_block_size = 4;
        (idx, cfg)
    }

    #[test]
    fn count_tokens_worked_example() {
        let (idx, cfg) = example();
        let art = count_tokens(&idx, 0, &cfg).unwrap();
        assert_eq!(art.threads, 1);
        assert_eq!(art.token_counts(), vec![2, 2]);
        assert_eq!(art.expert_counts, vec![2, 1, 1, 0]);
        assert_eq!(art.routed, 4);
        let art1 = count_tokens(&idx, 1, &cfg).unwrap();
        assert_eq!(art1.token_counts(), vec![2, 2]);
        assert_eq!(art1.expert_counts, vec![0, 1, 1, 2]);
    }

    #[test]
    fn generate_indices_worked_example() {
        let (idx, cfg) = example();
        let art = build_artifacts(&idx, 0, &cfg).unwrap();
        assert_eq!(art.input_indices, vec![0, 1, 0, 2]);
        assert_eq!(art.output_indices, vec![0, 2, 1, 3]);
        // token 2 selects its local expert 1 at position k=0
        assert_eq!(art.selected_expert_indices, vec![0, 1, 0, 0]);
        assert_eq!(art.counter, art.partial_token_counts);
    }

    #[test]
    fn no_local_expert_means_empty() {
        let idx = IndexTensor::new(&[2, 1], vec![2, 3]).unwrap();
        let cfg = MoeConfig::new(4, 1, 2, 2, 2).unwrap();
        let art = build_artifacts(&idx, 0, &cfg).unwrap();
        assert_eq!(art.routed, 0);
        assert!(art.partial_token_counts.iter().all(|&c| c == 0));
        assert!(art.input_indices.is_empty() && art.output_indices.is_empty());
    }

    #[test]
    fn out_of_range_expert_is_rejected() {
        let idx = IndexTensor::new(&[1, 1], vec![9]).unwrap();
        let cfg = MoeConfig::new(4, 1, 2, 2, 1).unwrap();
        assert!(count_tokens(&idx, 0, &cfg).is_err());
    }

    #[test]
    fn padded_scan_when_block_does_not_divide() {
        let idx = IndexTensor::new(&[5, 1], vec![0, 1, 0, 1, 0]).unwrap();
        let mut cfg = MoeConfig::new(2, 1, 2, 2, 1).unwrap();
        cfg.token_block_size = 2;
        let art = build_artifacts(&idx, 0, &cfg).unwrap();
        assert_eq!(art.threads, 3);
        assert_eq!(art.token_counts(), vec![3, 2]);
        assert_eq!(art.input_indices, vec![0, 2, 4, 1, 3]);
    }

    #[test]
    fn reduction_with_unit_weights_copies_rows() {
        let idx = IndexTensor::new(&[3, 1], vec![1, 0, 1]).unwrap();
        let cfg = MoeConfig::new(2, 1, 2, 2, 1).unwrap();
        let art = build_artifacts(&idx, 0, &cfg).unwrap();
        let mlp_out = Tensor::<f32>::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::<f32>::full(&[3, 1], 1.0);
        let out = output_reduction_forward(&mlp_out, &w, &art);
        for t in 0..3 {
            let o_ind = art.output_indices[art.cum_expert_counts[t]];
            assert_eq!(out.row(t), mlp_out.row(o_ind));
        }
        let (g, wg) = output_reduction_backward(&Tensor::zeros(&[3, 2]), &mlp_out, &w, &art);
        assert!(g.data().iter().chain(wg.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn reduction_backward_single_token_by_hand() {
        let idx = IndexTensor::new(&[1, 1], vec![0]).unwrap();
        let cfg = MoeConfig::new(1, 1, 3, 2, 1).unwrap();
        let art = build_artifacts(&idx, 0, &cfg).unwrap();
        let mlp_out = Tensor::<f64>::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::<f64>::full(&[1, 1], 0.25);
        let og = Tensor::<f64>::new(&[1, 3], vec![4.0, 1.0, 2.0]).unwrap();
        let (g, wg) = output_reduction_backward(&og, &mlp_out, &w, &art);
        assert_eq!(g.data(), &[1.0, 0.25, 0.5]);
        assert_eq!(wg.data(), &[4.0 - 2.0 + 1.0]);
    }
}
