use serde::{Deserialize, Serialize};

use crate::comm::{Axis, Rank};
use crate::error::{Error, Result};
use crate::model::stage::{forward_backward, reduce_losses, StepOutput};
use crate::model::LocalModel;
use crate::optim::{round_weights, AdamWConfig, OptimizerMode, ShardPlan, ShardedOptimizer};
use crate::parallel::PipelineSchedule;
use crate::reliability::detect_soft_failure;
use crate::tensor::Tensor;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub aux_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub tokens_per_s: Option<f64>,
    /// Global routed selections per layer and expert; empty for dense models.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expert_counts: Vec<Vec<u64>>,
}

/// Optimizer over `model`'s current values as fp32 masters; the model
/// weights are then rounded to bf16.
pub fn build_optimizer(model: &mut LocalModel<f32>, mode: OptimizerMode, cfg: AdamWConfig) -> Result<ShardedOptimizer> {
    cfg.validate()?;
    let plan = ShardPlan::new(model.topo, mode, model.param_infos());
    let opt = ShardedOptimizer::new(cfg, plan, model.tp_replicated(), model.coords, &model.params)?;
    round_weights(&mut model.params);
    Ok(opt)
}

/// Global expert selections per layer, summed over every rank's tokens.
fn global_expert_counts<T: crate::tensor::Float>(rank: &mut Rank<'_>, out: &StepOutput<T>, layers: usize, experts: usize) -> Result<Vec<Vec<u64>>> {
    if experts == 0 {
        return Ok(Vec::new());
    }
    let mut local = vec![0f64; layers * experts];
    if rank.coords().tp == 0 {
        for (l, rc) in out.routing.iter().enumerate() {
            for (e, &c) in rc.selections.iter().enumerate() {
                local[l * experts + e] = c as f64;
            }
        }
    }
    let world = rank.group(Axis::World);
    let total = if world.size() > 1 {
        rank.allreduce(&world, &Tensor::from_vec(local))?.into_data()
    } else {
        local
    };
    Ok(total.chunks(experts).map(|c| c.iter().map(|&v| v as u64).collect()).collect())
}

/// Forward, backward, failure check and optimizer update for one step on
/// this rank's sequences. `poison` replaces a local gradient with NaN, as a
/// failing node would.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    rank: &mut Rank<'_>,
    model: &mut LocalModel<f32>,
    opt: &mut ShardedOptimizer,
    schedule: &PipelineSchedule,
    local_tokens: &[usize],
    step: u64,
    fur: bool,
    poison: bool,
) -> Result<StepMetrics> {
    let mut out = forward_backward(rank, model, schedule, local_tokens, fur)?;
    if poison {
        if let Some(g) = out.grads.first_mut().and_then(|g| g.data_mut().first_mut()) {
            *g = f32::NAN;
        }
    }
    if let Some(fault) = detect_soft_failure(rank, out.ce + out.aux, &out.grads)? {
        return Err(Error::SoftFailure {
            rank: fault.rank,
            node: fault.node,
            step,
        });
    }
    let (loss, aux_loss) = reduce_losses(rank, &out)?;
    let expert_counts = global_expert_counts(rank, &out, model.cfg.layers, model.cfg.experts)?;
    let report = opt.step(rank, &mut model.params, &out.grads, step)?;
    Ok(StepMetrics {
        step,
        loss,
        aux_loss,
        grad_norm: report.grad_norm,
        lr: report.lr,
        tokens_per_s: None,
        expert_counts,
    })
}
