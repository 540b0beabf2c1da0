use std::collections::HashMap;

use crate::comm::{Axis, Rank};
use crate::error::{Error, Result};
use crate::model::layers::{AttnBlock, DenseMlpBlock, MlpSaved, MoeBlock, MoeBlockSaved, NormBlock, NormSaved};
use crate::model::params::{layer_base, slot, LocalModel};
use crate::moe::{ExpertWeights, MoeConfig};
use crate::parallel::{pp_execute, ActivationMeter, AttnSaved, AttnShape, AttnWeights, Block, PipelineSchedule, PipelineStage, Retained};
use crate::tensor::{ops, Float, Tensor};

enum MlpRetained<T: Float> {
    Moe(Retained<T, MoeBlockSaved<T>>),
    Dense(Retained<T, MlpSaved<T>>),
}

enum UnitState<T: Float> {
    Embed,
    Layer {
        layer: usize,
        n1: Retained<T, NormSaved<T>>,
        attn: Retained<T, AttnSaved<T>>,
        n2: Retained<T, NormSaved<T>>,
        mlp: MlpRetained<T>,
    },
    Head {
        norm: Retained<T, NormSaved<T>>,
        h: Tensor<T>,
        dlogits: Tensor<T>,
    },
}

/// Per-layer routing counts gathered over a step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingCounts {
    /// Selections per global expert among this rank's tokens.
    pub selections: Vec<u64>,
    /// Per microbatch: gathered tokens routed to each locally hosted expert.
    pub local_expert_tokens: Vec<Vec<usize>>,
    /// FUR only: whether every invocation was exactly uniform.
    pub uniform: bool,
}

/// Forward and backward of the local chunks of one rank over a step's
/// microbatches, accumulating gradients.
pub struct StageRunner<'m, T: Float> {
    model: &'m LocalModel<T>,
    microbatches: Vec<Vec<usize>>,
    ce_scale: f64,
    moe: Vec<Option<MoeBlock<T>>>,
    states: HashMap<(usize, usize), Vec<UnitState<T>>>,
    keep_logits: bool,
    pub logits: Vec<Tensor<T>>,
    pub grads: Vec<Tensor<T>>,
    /// Cross-entropy summed over this rank's microbatches, already scaled to
    /// the local per-token mean.
    pub ce: f64,
    /// Coefficient-weighted auxiliary loss, scaled to the local per-sequence
    /// mean and summed over local layers.
    pub aux: f64,
    /// Indexed by global layer; empty for layers not held here.
    pub routing: Vec<RoutingCounts>,
    pub meter: ActivationMeter,
}

impl<'m, T: Float> StageRunner<'m, T> {
    /// `microbatches` hold whole sequences of `context` tokens each.
    pub fn new(model: &'m LocalModel<T>, microbatches: Vec<Vec<usize>>, fur: bool) -> Result<Self> {
        let cfg = &model.cfg;
        let c = cfg.context;
        let mut local_seqs = 0;
        for mb in &microbatches {
            if mb.is_empty() || mb.len() % c != 0 {
                return Err(Error::Data(format!("microbatch of {} tokens is not whole sequences of {c}", mb.len())));
            }
            if let Some(&t) = mb.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Data(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
            }
            local_seqs += mb.len() / c;
        }
        if local_seqs == 0 {
            return Err(Error::Data("no sequences in batch".into()));
        }
        let ce_scale = 1.0 / (local_seqs * (c - 1)) as f64;
        let aux_scale = cfg.aux_loss_coeff / local_seqs as f64;
        let mut moe = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let base = layer_base(cfg, l);
            if !cfg.is_moe() || model.local(base).is_none() {
                moe.push(None);
                continue;
            }
            let mcfg = MoeConfig {
                num_experts: cfg.experts,
                top_k: cfg.top_k,
                hidden: cfg.hidden_size,
                intermediate: cfg.intermediate_size,
                ep: model.topo.ep,
                token_block_size: cfg.token_block_size,
                normalize_topk_weights: cfg.normalize_topk_weights,
            };
            mcfg.validate()?;
            moe.push(Some(MoeBlock {
                w: ExpertWeights {
                    router: model.param(base + slot::MLP).clone(),
                    gate: model.param(base + slot::MLP + 1).clone(),
                    up: model.param(base + slot::MLP + 2).clone(),
                    down: model.param(base + slot::MLP + 3).clone(),
                },
                cfg: mcfg,
                fur,
                seq_len: c,
                aux_scale,
            }));
        }
        Ok(Self {
            model,
            microbatches,
            ce_scale,
            moe,
            states: HashMap::new(),
            keep_logits: false,
            logits: Vec::new(),
            grads: model.zero_grads(),
            ce: 0.0,
            aux: 0.0,
            routing: vec![RoutingCounts::default(); cfg.layers],
            meter: ActivationMeter::default(),
        })
    }

    /// Keep the output logits of every forward.
    pub fn keep_logits(mut self) -> Self {
        self.keep_logits = true;
        self
    }

    fn add_grad(&mut self, global: usize, g: &Tensor<T>) -> Result<()> {
        let i = self.model.local(global).expect("gradient for a local parameter");
        self.grads[i].add_assign(g)
    }

    fn attn(&self, l: usize) -> AttnBlock<'m, T> {
        let m = self.model;
        let base = layer_base(&m.cfg, l);
        AttnBlock {
            w: AttnWeights {
                wq: m.param(base + slot::WQ),
                wk: m.param(base + slot::WK),
                wv: m.param(base + slot::WV),
                wo: m.param(base + slot::WO),
            },
            shape: AttnShape {
                heads: m.cfg.heads / m.topo.tp,
                head_size: m.cfg.head_size,
                seq_len: m.cfg.context,
            },
        }
    }

    fn dense(&self, l: usize) -> DenseMlpBlock<'m, T> {
        let m = self.model;
        let base = layer_base(&m.cfg, l);
        DenseMlpBlock {
            gate: m.param(base + slot::MLP),
            up: m.param(base + slot::MLP + 1),
            down: m.param(base + slot::MLP + 2),
        }
    }

    fn norm(&self, global: usize) -> NormBlock<'m, T> {
        NormBlock {
            weight: self.model.param(global),
        }
    }

    fn embed(&self, mb: usize) -> Tensor<T> {
        let emb = self.model.param(0);
        let h = emb.dim(1);
        let tokens = &self.microbatches[mb];
        let mut x = Tensor::zeros(&[tokens.len(), h]);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(emb.row(t));
        }
        x
    }

    fn layer_forward(&mut self, rank: &mut Rank<'_>, l: usize, x: Tensor<T>) -> Result<(Tensor<T>, UnitState<T>)> {
        let sac = self.model.cfg.sac;
        let base = layer_base(&self.model.cfg, l);
        let norm1 = self.norm(base + slot::ATTN_NORM);
        let (h1, s) = norm1.forward(rank, &x)?;
        let n1 = Retained::keep::<NormBlock<T>>(s, &x, &h1, sac.checkpoint_norm, &mut self.meter);
        let attn = self.attn(l);
        let (a, s) = attn.forward(rank, &h1)?;
        let attn_r = Retained::keep::<AttnBlock<T>>(s, &h1, &a, sac.checkpoint_attention, &mut self.meter);
        let x2 = x.add(&a)?;
        let norm2 = self.norm(base + slot::MLP_NORM);
        let (h2, s) = norm2.forward(rank, &x2)?;
        let n2 = Retained::keep::<NormBlock<T>>(s, &x2, &h2, sac.checkpoint_norm, &mut self.meter);
        let (m, mlp) = match self.moe[l].take() {
            Some(block) => {
                let res = block.forward(rank, &h2);
                let (m, s) = match res {
                    Ok(v) => v,
                    Err(e) => {
                        self.moe[l] = Some(block);
                        return Err(e);
                    }
                };
                self.aux += s.aux_sum * block.aux_scale;
                let rc = &mut self.routing[l];
                if rc.selections.is_empty() {
                    rc.selections = vec![0; block.cfg.num_experts];
                    rc.uniform = true;
                }
                for (a, &b) in rc.selections.iter_mut().zip(&s.stats.selections) {
                    *a += b as u64;
                }
                rc.local_expert_tokens.push(s.stats.local_expert_tokens.clone());
                rc.uniform &= s.stats.uniform;
                let r = Retained::keep::<MoeBlock<T>>(s, &h2, &m, sac.checkpoint_moe, &mut self.meter);
                self.moe[l] = Some(block);
                (m, MlpRetained::Moe(r))
            }
            None => {
                let block = self.dense(l);
                let (m, s) = block.forward(rank, &h2)?;
                let r = Retained::keep::<DenseMlpBlock<T>>(s, &h2, &m, sac.checkpoint_moe, &mut self.meter);
                (m, MlpRetained::Dense(r))
            }
        };
        let out = x2.add(&m)?;
        Ok((
            out,
            UnitState::Layer {
                layer: l,
                n1,
                attn: attn_r,
                n2,
                mlp,
            },
        ))
    }

    fn layer_backward(&mut self, rank: &mut Rank<'_>, state: UnitState<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
        let UnitState::Layer { layer: l, n1, attn, n2, mlp } = state else {
            unreachable!("layer state")
        };
        let base = layer_base(&self.model.cfg, l);
        let dh2 = match mlp {
            MlpRetained::Moe(r) => {
                let block = self.moe[l].take().expect("moe block for a local layer");
                let res = r.backward(&block, rank, &dy, &mut self.meter);
                self.moe[l] = Some(block);
                let (dh2, g) = res?;
                for (k, gk) in g.iter().enumerate() {
                    self.add_grad(base + slot::MLP + k, gk)?;
                }
                dh2
            }
            MlpRetained::Dense(r) => {
                let block = self.dense(l);
                let (dh2, g) = r.backward(&block, rank, &dy, &mut self.meter)?;
                for (k, gk) in g.iter().enumerate() {
                    self.add_grad(base + slot::MLP + k, gk)?;
                }
                dh2
            }
        };
        let norm2 = self.norm(base + slot::MLP_NORM);
        let (dx2n, g) = n2.backward(&norm2, rank, &dh2, &mut self.meter)?;
        self.add_grad(base + slot::MLP_NORM, &g[0])?;
        let dx2 = dy.add(&dx2n)?;
        let block = self.attn(l);
        let (dh1, g) = attn.backward(&block, rank, &dx2, &mut self.meter)?;
        for (k, gk) in g.iter().enumerate() {
            self.add_grad(base + slot::WQ + k, gk)?;
        }
        let norm1 = self.norm(base + slot::ATTN_NORM);
        let (dxn, g) = n1.backward(&norm1, rank, &dh1, &mut self.meter)?;
        self.add_grad(base + slot::ATTN_NORM, &g[0])?;
        dx2.add(&dxn)
    }

    fn head_forward(&mut self, rank: &mut Rank<'_>, mb: usize, x: Tensor<T>) -> Result<UnitState<T>> {
        let n = self.model.specs.len();
        let norm = self.norm(n - 2);
        let (h, s) = norm.forward(rank, &x)?;
        let norm_r = Retained::keep::<NormBlock<T>>(s, &x, &h, self.model.cfg.sac.checkpoint_norm, &mut self.meter);
        let logits = ops::matmul(&h, self.model.param(n - 1))?;
        let (ce, dlogits) = cross_entropy(&logits, &self.microbatches[mb], self.model.cfg.context, self.ce_scale)?;
        self.ce += ce * self.ce_scale;
        if self.keep_logits {
            self.logits.push(logits);
        }
        self.meter.hold(h.size_bytes() + dlogits.size_bytes());
        Ok(UnitState::Head { norm: norm_r, h, dlogits })
    }

    fn head_backward(&mut self, rank: &mut Rank<'_>, state: UnitState<T>) -> Result<Tensor<T>> {
        let UnitState::Head { norm, h, dlogits } = state else {
            unreachable!("head state")
        };
        self.meter.release(h.size_bytes() + dlogits.size_bytes());
        let n = self.model.specs.len();
        let head = self.model.param(n - 1);
        let dh = ops::matmul_nt(&dlogits, head)?;
        let dhead = ops::matmul_tn(&h, &dlogits)?;
        self.add_grad(n - 1, &dhead)?;
        let block = self.norm(n - 2);
        let (dx, g) = norm.backward(&block, rank, &dh, &mut self.meter)?;
        self.add_grad(n - 2, &g[0])?;
        Ok(dx)
    }

    fn embed_backward(&mut self, mb: usize, dx: &Tensor<T>) {
        let i = self.model.local(0).expect("embedding on the first stage");
        let g = &mut self.grads[i];
        for (r, &t) in self.microbatches[mb].iter().enumerate() {
            for (a, &b) in g.row_mut(t).iter_mut().zip(dx.row(r)) {
                *a += b;
            }
        }
    }
}

/// Next-token cross-entropy over every position but the last of each
/// sequence, computed in f64. Returns the unscaled sum and the gradient of
/// `scale * sum` with respect to the logits.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, tokens: &[usize], context: usize, scale: f64) -> Result<(f64, Tensor<T>)> {
    let v = logits.dim(1);
    if logits.rows() != tokens.len() {
        return Err(Error::shape("cross_entropy", format!("{} rows for {} tokens", logits.rows(), tokens.len())));
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    let mut p = vec![0f64; v];
    for r in 0..tokens.len() {
        if (r + 1) % context == 0 {
            continue;
        }
        let target = tokens[r + 1];
        let row = logits.row(r);
        let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (pi, x) in p.iter_mut().zip(row) {
            *pi = (x.as_f64() - max).exp();
            sum += *pi;
        }
        total += sum.ln() + max - row[target].as_f64();
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let onehot = if j == target { 1.0 } else { 0.0 };
            *g = T::lit((p[j] / sum - onehot) * scale);
        }
    }
    Ok((total, grad))
}

impl<T: Float> PipelineStage<T> for StageRunner<'_, T> {
    fn forward(&mut self, rank: &mut Rank<'_>, chunk: usize, mb: usize, input: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let units = self.model.chunk_units(chunk);
        let last = self.model.cfg.layers + 1;
        let mut x = input;
        let mut states = Vec::with_capacity(units.len());
        for u in units {
            if u == 0 {
                x = Some(self.embed(mb));
                states.push(UnitState::Embed);
            } else if u == last {
                let input = x.take().ok_or_else(|| Error::contract("stage forward", "head without input"))?;
                states.push(self.head_forward(rank, mb, input)?);
            } else {
                let input = x.take().ok_or_else(|| Error::contract("stage forward", "layer without input"))?;
                let (out, st) = self.layer_forward(rank, u - 1, input)?;
                states.push(st);
                x = Some(out);
            }
        }
        self.states.insert((chunk, mb), states);
        Ok(x)
    }

    fn backward(&mut self, rank: &mut Rank<'_>, chunk: usize, mb: usize, grad: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let states = self
            .states
            .remove(&(chunk, mb))
            .ok_or_else(|| Error::contract("stage backward", format!("no forward for chunk {chunk} microbatch {mb}")))?;
        let mut g = grad;
        for st in states.into_iter().rev() {
            match st {
                UnitState::Embed => {
                    let dx = g.take().ok_or_else(|| Error::contract("stage backward", "embedding without grad"))?;
                    self.embed_backward(mb, &dx);
                }
                s @ UnitState::Head { .. } => g = Some(self.head_backward(rank, s)?),
                s @ UnitState::Layer { .. } => {
                    let dy = g.take().ok_or_else(|| Error::contract("stage backward", "layer without grad"))?;
                    g = Some(self.layer_backward(rank, s, dy)?);
                }
            }
        }
        Ok(g)
    }
}

/// Unreduced outcome of one forward/backward over a rank's microbatches.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Float> {
    pub grads: Vec<Tensor<T>>,
    pub ce: f64,
    pub aux: f64,
    pub routing: Vec<RoutingCounts>,
    pub peak_activation_bytes: usize,
}

/// Split `tokens` (whole sequences) into `m` equal microbatches.
pub fn split_microbatches(tokens: &[usize], context: usize, m: usize) -> Result<Vec<Vec<usize>>> {
    let seqs = tokens.len() / context.max(1);
    if m == 0 || seqs == 0 || !tokens.len().is_multiple_of(context) || !seqs.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "{seqs} local sequences cannot be split into {m} microbatches"
        )));
    }
    Ok(tokens.chunks(tokens.len() / m).map(<[usize]>::to_vec).collect())
}

/// Forward and backward of this rank's pipeline part on its local sequences.
pub fn forward_backward<T: Float>(
    rank: &mut Rank<'_>,
    model: &LocalModel<T>,
    schedule: &PipelineSchedule,
    local_tokens: &[usize],
    fur: bool,
) -> Result<StepOutput<T>> {
    if schedule.virtual_stages != model.virtual_stages {
        return Err(Error::Config(format!(
            "schedule has {} virtual stages, model {}",
            schedule.virtual_stages, model.virtual_stages
        )));
    }
    let mbs = split_microbatches(local_tokens, model.cfg.context, schedule.microbatches)?;
    let mut runner = StageRunner::new(model, mbs, fur)?;
    pp_execute(rank, schedule, &mut runner)?;
    Ok(StepOutput {
        grads: runner.grads,
        ce: runner.ce,
        aux: runner.aux,
        routing: runner.routing,
        peak_activation_bytes: runner.meter.peak,
    })
}

/// Global-mean cross-entropy and auxiliary loss, identical on every rank.
pub fn reduce_losses<T: Float>(rank: &mut Rank<'_>, out: &StepOutput<T>) -> Result<(f64, f64)> {
    let topo = rank.topology();
    let c = rank.coords();
    let world = rank.group(Axis::World);
    let lead = c.tp == 0;
    let ce = if lead && c.pp + 1 == topo.pp { out.ce } else { 0.0 };
    let aux = if lead { out.aux } else { 0.0 };
    let w = (topo.dp * topo.ep) as f64;
    if world.size() == 1 {
        return Ok((ce, aux));
    }
    let ce = rank.allreduce_f64(&world, ce)? / w;
    let aux = rank.allreduce_f64(&world, aux)? / w;
    Ok((ce, aux))
}

/// Loss of a model held entirely on this rank, on whole sequences.
/// Returns `(cross-entropy, auxiliary loss, logits)`.
pub fn forward_loss<T: Float>(rank: &mut Rank<'_>, model: &LocalModel<T>, tokens: &[usize], fur: bool) -> Result<(f64, f64, Tensor<T>)> {
    if model.topo.pp != 1 {
        return Err(Error::Config("forward_loss needs the whole model on one pipeline stage".into()));
    }
    let mut runner = StageRunner::new(model, vec![tokens.to_vec()], fur)?.keep_logits();
    let mut x = None;
    for chunk in 0..model.num_chunks() {
        x = runner.forward(rank, chunk, 0, x)?;
    }
    let logits = runner.logits.pop().expect("head ran");
    Ok((runner.ce, runner.aux, logits))
}
