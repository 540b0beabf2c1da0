use crate::comm::{Axis, Coords, ProcessGroup, Rank};
use crate::comm::collective::even_split;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, bf16_round, clip_scale, lr_at_step, AdamWConfig, OptimizerMode, ParamClass, ShardPlan, SliceState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
}

/// Optimizer for the local parameters of one rank.
///
/// Every mode reduces each gradient element over its replication group in
/// ascending data-rank order and scales once, so DDP, SO and EPSO produce
/// bitwise-identical updates and differ only in who holds which states.
#[derive(Clone, Debug)]
pub struct ShardedOptimizer {
    pub cfg: AdamWConfig,
    pub plan: ShardPlan,
    /// Parameters identical on every TP rank; their norm contribution is
    /// divided by the TP width.
    pub tp_replicated: Vec<bool>,
    pub coords: Coords,
    pub states: Vec<SliceState>,
    /// Updates applied since the states were created.
    pub t: u64,
}

fn flat(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_vec(t.data().to_vec())
}

impl ShardedOptimizer {
    /// `masters` are the full-precision local parameter values.
    pub fn new(cfg: AdamWConfig, plan: ShardPlan, tp_replicated: Vec<bool>, coords: Coords, masters: &[Tensor<f32>]) -> Result<Self> {
        if masters.len() != plan.params.len() || tp_replicated.len() != masters.len() {
            return Err(Error::contract(
                "ShardedOptimizer::new",
                format!("{} tensors, {} plan entries", masters.len(), plan.params.len()),
            ));
        }
        let states = masters
            .iter()
            .enumerate()
            .map(|(i, m)| SliceState::new(m.data()[plan.owned_range(i, &coords)].to_vec()))
            .collect();
        Ok(Self {
            cfg,
            plan,
            tp_replicated,
            coords,
            states,
            t: 0,
        })
    }

    pub fn state_bytes(&self) -> usize {
        self.states.iter().map(SliceState::bytes).sum()
    }

    fn mode(&self) -> OptimizerMode {
        self.plan.mode
    }

    /// Group over which the owned slices of `class` are gathered back.
    fn owner_group(&self, rank: &Rank<'_>, class: ParamClass) -> Option<ProcessGroup> {
        match (self.mode(), class) {
            (OptimizerMode::Ddp, _) => None,
            (OptimizerMode::So, _) | (OptimizerMode::Epso, ParamClass::Expert) => Some(rank.group(Axis::Dp)),
            (OptimizerMode::Epso, ParamClass::NonExpert) => Some(rank.group(Axis::DpEp)),
        }
    }

    /// Mean-reduce one gradient. Returns `(reduce-slice, owned-slice)`.
    fn reduce(&self, rank: &mut Rank<'_>, i: usize, grad: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
        let info = self.plan.params[i];
        let topo = rank.topology();
        let mut g = flat(grad);
        let (group, size) = match info.class {
            ParamClass::NonExpert => (rank.group(Axis::DpEp), topo.dp * topo.ep),
            ParamClass::Expert => {
                if topo.ep > 1 {
                    g.scale(1.0 / topo.ep as f32);
                }
                (rank.group(Axis::Dp), topo.dp)
            }
        };
        let inv = 1.0 / size as f32;
        let rr = self.plan.reduce_range(i, &self.coords);
        if self.mode() == OptimizerMode::Ddp {
            let mut full = if size > 1 { rank.allreduce(&group, &g)? } else { g };
            if size > 1 {
                full.scale(inv);
            }
            let reduced = full.data()[rr].to_vec();
            return Ok((reduced, full.into_data()));
        }
        let mut slice = if size > 1 {
            rank.reducescatter_v(&group, &g, &even_split(info.numel, size))?
        } else {
            g
        };
        if size > 1 {
            slice.scale(inv);
        }
        let reduced = slice.data().to_vec();
        let owned = if self.mode() == OptimizerMode::So && info.class == ParamClass::NonExpert && topo.ep > 1 {
            let ep = rank.group(Axis::Ep);
            rank.allgather_v(&ep, &slice)?.into_data()
        } else {
            reduced.clone()
        };
        Ok((reduced, owned))
    }

    /// Reduce gradients, clip by the global norm, update owned slices and
    /// regather the bf16 compute weights into `weights`.
    pub fn step(&mut self, rank: &mut Rank<'_>, weights: &mut [Tensor<f32>], grads: &[Tensor<f32>], step: u64) -> Result<StepReport> {
        let n = self.plan.params.len();
        if weights.len() != n || grads.len() != n {
            return Err(Error::contract(
                "ShardedOptimizer::step",
                format!("{} weights, {} grads, {n} params", weights.len(), grads.len()),
            ));
        }
        let tp = rank.topology().tp as f64;
        let mut owned_grads = Vec::with_capacity(n);
        let mut sq = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            let (reduced, owned) = self.reduce(rank, i, g)?;
            let s: f64 = reduced.iter().map(|&x| x as f64 * x as f64).sum();
            sq += if self.tp_replicated[i] { s / tp } else { s };
            owned_grads.push(owned);
        }
        let world = rank.group(Axis::World);
        let total = if world.size() > 1 { rank.allreduce_f64(&world, sq)? } else { sq };
        let grad_norm = total.sqrt();
        let scale = clip_scale(grad_norm, &self.cfg, step);
        let lr = lr_at_step(step, &self.cfg);
        self.t += 1;

        for (i, mut g) in owned_grads.into_iter().enumerate() {
            if scale != 1.0 {
                let s = scale as f32;
                g.iter_mut().for_each(|x| *x *= s);
            }
            let range = self.plan.owned_range(i, &self.coords);
            let mut out = vec![0.0f32; range.len()];
            adamw_step(&mut self.states[i], &g, lr, self.t, &self.cfg, &mut out);
            let class = self.plan.params[i].class;
            match self.owner_group(rank, class) {
                Some(group) if group.size() > 1 => {
                    let full = rank.allgather_v(&group, &Tensor::from_vec(out))?;
                    weights[i].data_mut().copy_from_slice(full.data());
                }
                _ => weights[i].data_mut()[range].copy_from_slice(&out),
            }
        }
        Ok(StepReport {
            grad_norm,
            clip_scale: scale,
            lr,
        })
    }

    /// Full-tensor master and moments of parameter `i`, assembled from the
    /// owning group. Collective over that group.
    pub fn gather_state(&self, rank: &mut Rank<'_>, i: usize) -> Result<SliceState> {
        let s = &self.states[i];
        match self.owner_group(rank, self.plan.params[i].class) {
            Some(group) if group.size() > 1 => {
                let mut get = |v: &Vec<f32>| -> Result<Vec<f32>> {
                    Ok(rank.allgather_v(&group, &Tensor::from_vec(v.clone()))?.into_data())
                };
                Ok(SliceState {
                    master: get(&s.master)?,
                    exp_avg: get(&s.exp_avg)?,
                    exp_avg_sq: get(&s.exp_avg_sq)?,
                })
            }
            _ => Ok(s.clone()),
        }
    }

    /// Replace the owned slices from full-tensor states.
    pub fn load_full_states(&mut self, full: &[SliceState], t: u64) -> Result<()> {
        if full.len() != self.states.len() {
            return Err(Error::Checkpoint(format!(
                "{} optimizer states for {} parameters",
                full.len(),
                self.states.len()
            )));
        }
        for (i, f) in full.iter().enumerate() {
            let r = self.plan.owned_range(i, &self.coords);
            if f.len() != self.plan.params[i].numel {
                return Err(Error::Checkpoint(format!("state {i} has {} values, expected {}", f.len(), self.plan.params[i].numel)));
            }
            self.states[i] = SliceState {
                master: f.master[r.clone()].to_vec(),
                exp_avg: f.exp_avg[r.clone()].to_vec(),
                exp_avg_sq: f.exp_avg_sq[r].to_vec(),
            };
        }
        self.t = t;
        Ok(())
    }
}

/// Round every weight to bf16 in place.
pub fn round_weights(weights: &mut [Tensor<f32>]) {
    for w in weights {
        w.data_mut().iter_mut().for_each(|x| *x = bf16_round(*x));
    }
}
