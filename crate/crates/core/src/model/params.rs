use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::comm::{Coords, Topology};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{ParamClass, ParamInfo};
use crate::tensor::{Float, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Init {
    Normal,
    Ones,
}

/// A parameter of the full model and how it is split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub class: ParamClass,
    /// Axis divided across TP ranks, if any.
    pub tp_axis: Option<usize>,
    /// Axis divided across EP ranks, if any.
    pub ep_axis: Option<usize>,
    pub unit: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn local_shape(&self, topo: &Topology) -> Vec<usize> {
        let mut s = self.shape.clone();
        if let Some(a) = self.tp_axis {
            s[a] /= topo.tp;
        }
        if let Some(a) = self.ep_axis {
            s[a] /= topo.ep;
        }
        s
    }

    /// The local block of `full` for `c`.
    pub fn shard<T: Float>(&self, full: &Tensor<T>, topo: &Topology, c: &Coords) -> Tensor<T> {
        let mut t = full.clone();
        if let Some(a) = self.ep_axis {
            let len = self.shape[a] / topo.ep;
            t = t.narrow(a, c.ep * len, len);
        }
        if let Some(a) = self.tp_axis {
            let len = self.shape[a] / topo.tp;
            t = t.narrow(a, c.tp * len, len);
        }
        t
    }

    /// Inverse of [`ParamSpec::shard`]: add `local` into its block of `full`.
    pub fn accumulate<T: Float>(&self, full: &mut Tensor<T>, local: &Tensor<T>, topo: &Topology, c: &Coords) -> Result<()> {
        let mut start = vec![0usize; self.shape.len()];
        if let Some(a) = self.ep_axis {
            start[a] = c.ep * self.shape[a] / topo.ep;
        }
        if let Some(a) = self.tp_axis {
            start[a] = c.tp * self.shape[a] / topo.tp;
        }
        if local.shape() != self.local_shape(topo).as_slice() {
            return Err(Error::shape("ParamSpec::accumulate", format!("{} local {:?}", self.name, local.shape())));
        }
        // walk the local block element by element
        let ls = local.shape().to_vec();
        let mut idx = vec![0usize; ls.len()];
        let mut g = vec![0usize; ls.len()];
        for &v in local.data() {
            for d in 0..ls.len() {
                g[d] = idx[d] + start[d];
            }
            let cur = full.get(&g);
            full.set(&g, cur + v);
            for d in (0..ls.len()).rev() {
                idx[d] += 1;
                if idx[d] < ls[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(())
    }
}

/// Offsets of per-layer parameters relative to the layer's first one.
pub mod slot {
    pub const ATTN_NORM: usize = 0;
    pub const WQ: usize = 1;
    pub const WK: usize = 2;
    pub const WV: usize = 3;
    pub const WO: usize = 4;
    pub const MLP_NORM: usize = 5;
    /// MoE layers: router, gate, up, down. Dense layers: gate, up, down.
    pub const MLP: usize = 6;
}

/// Model units: `0` is the embedding, `1..=L` the layers, `L+1` the final
/// norm and output head.
pub fn num_units(cfg: &ModelConfig) -> usize {
    cfg.layers + 2
}

pub fn params_per_layer(cfg: &ModelConfig) -> usize {
    if cfg.is_moe() {
        10
    } else {
        9
    }
}

/// Index of the first parameter of layer `l`.
pub fn layer_base(cfg: &ModelConfig, l: usize) -> usize {
    1 + l * params_per_layer(cfg)
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (h, a, i, n, v) = (cfg.hidden_size, cfg.attn_width(), cfg.intermediate_size, cfg.experts, cfg.vocab_size);
    let spec = |name: String, shape: Vec<usize>, class, tp_axis, ep_axis, unit, init| ParamSpec {
        name,
        shape,
        class,
        tp_axis,
        ep_axis,
        unit,
        init,
    };
    use Init::*;
    use ParamClass::*;
    let mut out = vec![spec("embed".into(), vec![v, h], NonExpert, None, None, 0, Normal)];
    for l in 0..cfg.layers {
        let u = l + 1;
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push(spec(p("attn_norm"), vec![h], NonExpert, None, None, u, Ones));
        for w in ["wq", "wk", "wv"] {
            out.push(spec(p(w), vec![h, a], NonExpert, Some(1), None, u, Normal));
        }
        out.push(spec(p("wo"), vec![a, h], NonExpert, Some(0), None, u, Normal));
        out.push(spec(p("mlp_norm"), vec![h], NonExpert, None, None, u, Ones));
        if cfg.is_moe() {
            out.push(spec(p("router"), vec![h, n], NonExpert, None, None, u, Normal));
            out.push(spec(p("experts.gate"), vec![n, h, i], Expert, Some(2), Some(0), u, Normal));
            out.push(spec(p("experts.up"), vec![n, h, i], Expert, Some(2), Some(0), u, Normal));
            out.push(spec(p("experts.down"), vec![n, i, h], Expert, Some(1), Some(0), u, Normal));
        } else {
            out.push(spec(p("mlp.gate"), vec![h, i], NonExpert, Some(1), None, u, Normal));
            out.push(spec(p("mlp.up"), vec![h, i], NonExpert, Some(1), None, u, Normal));
            out.push(spec(p("mlp.down"), vec![i, h], NonExpert, Some(0), None, u, Normal));
        }
    }
    let u = cfg.layers + 1;
    out.push(spec("final_norm".into(), vec![h], NonExpert, None, None, u, Ones));
    out.push(spec("head".into(), vec![h, v], NonExpert, None, None, u, Normal));
    out
}

/// Units of chunk `c` out of `chunks`: `[ceil(c*U/C), ceil((c+1)*U/C))`.
pub fn chunk_units(units: usize, chunks: usize, c: usize) -> Range<usize> {
    (c * units).div_ceil(chunks)..((c + 1) * units).div_ceil(chunks)
}

/// Full-size initial value of parameter `idx`, a pure function of the seed.
pub fn init_full<T: Float>(spec: &ParamSpec, idx: usize, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Ones => Tensor::full(&spec.shape, T::one()),
        Init::Normal => {
            let s = seed ^ (idx as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            Tensor::randn(&spec.shape, INIT_STD, &mut rng)
        }
    }
}

/// Check that the topology divides the model.
pub fn check_topology(cfg: &ModelConfig, topo: &Topology) -> Result<()> {
    if !cfg.heads.is_multiple_of(topo.tp) {
        return Err(Error::Config(format!("{} heads not divisible by tp={}", cfg.heads, topo.tp)));
    }
    if !cfg.intermediate_size.is_multiple_of(topo.tp) {
        return Err(Error::Config(format!(
            "intermediate size {} not divisible by tp={}",
            cfg.intermediate_size, topo.tp
        )));
    }
    if cfg.is_moe() {
        if !cfg.experts.is_multiple_of(topo.ep) {
            return Err(Error::Config(format!("{} experts not divisible by ep={}", cfg.experts, topo.ep)));
        }
    } else if topo.ep > 1 {
        return Err(Error::Config("expert parallelism needs an MoE model".into()));
    }
    Ok(())
}

/// Parameters held by one rank: the units of its pipeline chunks, sharded
/// for its TP and EP coordinates.
#[derive(Clone, Debug)]
pub struct LocalModel<T: Float> {
    pub cfg: ModelConfig,
    pub topo: Topology,
    pub coords: Coords,
    pub virtual_stages: usize,
    pub specs: Vec<ParamSpec>,
    /// Global indices of the local parameters, ascending.
    pub param_ids: Vec<usize>,
    pub params: Vec<Tensor<T>>,
    local_index: Vec<Option<usize>>,
}

impl<T: Float> LocalModel<T> {
    pub fn init(cfg: &ModelConfig, topo: Topology, coords: Coords, virtual_stages: usize, seed: u64) -> Result<Self> {
        Self::build(cfg, topo, coords, virtual_stages, |spec, idx| {
            let full = init_full::<T>(spec, idx, seed);
            Ok(spec.shard(&full, &topo, &coords))
        })
    }

    /// Build from a function producing each local tensor.
    pub fn build(
        cfg: &ModelConfig,
        topo: Topology,
        coords: Coords,
        virtual_stages: usize,
        mut make: impl FnMut(&ParamSpec, usize) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_topology(cfg, &topo)?;
        if virtual_stages == 0 {
            return Err(Error::Config("virtual stages must be positive".into()));
        }
        if topo.pp * virtual_stages > num_units(cfg) {
            return Err(Error::Config(format!(
                "{} pipeline chunks for {} units",
                topo.pp * virtual_stages,
                num_units(cfg)
            )));
        }
        let specs = param_specs(cfg);
        let units = num_units(cfg);
        let chunks = topo.pp * virtual_stages;
        let mut mine = vec![false; units];
        for v in 0..virtual_stages {
            for u in chunk_units(units, chunks, v * topo.pp + coords.pp) {
                mine[u] = true;
            }
        }
        let mut param_ids = Vec::new();
        let mut params = Vec::new();
        let mut local_index = vec![None; specs.len()];
        for (i, s) in specs.iter().enumerate() {
            if mine[s.unit] {
                let t = make(s, i)?;
                if t.shape() != s.local_shape(&topo).as_slice() {
                    return Err(Error::shape("LocalModel::build", format!("{}: {:?}", s.name, t.shape())));
                }
                local_index[i] = Some(params.len());
                param_ids.push(i);
                params.push(t);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            topo,
            coords,
            virtual_stages,
            specs,
            param_ids,
            params,
            local_index,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.topo.pp * self.virtual_stages
    }

    pub fn chunk_units(&self, chunk: usize) -> Range<usize> {
        chunk_units(num_units(&self.cfg), self.num_chunks(), chunk)
    }

    pub fn local(&self, global: usize) -> Option<usize> {
        self.local_index.get(global).copied().flatten()
    }

    /// Local tensor of global parameter `global`; panics if not held here.
    pub fn param(&self, global: usize) -> &Tensor<T> {
        &self.params[self.local(global).unwrap_or_else(|| panic!("parameter {global} not on this rank"))]
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Optimizer view of the local parameters.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.param_ids
            .iter()
            .zip(&self.params)
            .map(|(&i, p)| ParamInfo {
                numel: p.numel(),
                class: self.specs[i].class,
            })
            .collect()
    }

    /// Whether each local parameter is identical on every TP rank.
    pub fn tp_replicated(&self) -> Vec<bool> {
        self.param_ids.iter().map(|&i| self.specs[i].tp_axis.is_none()).collect()
    }

    pub fn num_local_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

/// Raw local gradients or weights of one rank, in its `param_ids` order.
#[derive(Clone, Debug)]
pub struct RankTensors<T: Float> {
    pub coords: Coords,
    pub param_ids: Vec<usize>,
    pub tensors: Vec<Tensor<T>>,
}

/// Full-model gradients of the global-mean loss from unreduced per-rank
/// gradients: every data rank contributes `1/(DP*EP)` of its slice, and
/// TP-replicated parameters are taken from TP rank 0 only.
pub fn assemble_grads<T: Float>(specs: &[ParamSpec], topo: &Topology, ranks: &[RankTensors<T>]) -> Result<Vec<Tensor<T>>> {
    let mut full: Vec<Tensor<T>> = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
    let inv = T::lit(1.0 / (topo.dp * topo.ep) as f64);
    for r in ranks {
        for (&i, t) in r.param_ids.iter().zip(&r.tensors) {
            let s = &specs[i];
            if s.tp_axis.is_none() && r.coords.tp != 0 {
                continue;
            }
            s.accumulate(&mut full[i], &t.scaled(inv), topo, &r.coords)?;
        }
    }
    Ok(full)
}

/// Full-model weights from the replicas with DP rank 0 (and EP rank 0 for
/// non-expert parameters).
pub fn assemble_weights<T: Float>(specs: &[ParamSpec], topo: &Topology, ranks: &[RankTensors<T>]) -> Result<Vec<Tensor<T>>> {
    let mut full: Vec<Tensor<T>> = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
    for r in ranks {
        if r.coords.dp != 0 {
            continue;
        }
        for (&i, t) in r.param_ids.iter().zip(&r.tensors) {
            let s = &specs[i];
            if (s.tp_axis.is_none() && r.coords.tp != 0) || (s.ep_axis.is_none() && r.coords.ep != 0) {
                continue;
            }
            s.accumulate(&mut full[i], t, topo, &r.coords)?;
        }
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_params;

    #[test]
    fn specs_match_count() {
        for cfg in [ModelConfig::tiny(), {
            let mut c = ModelConfig::tiny();
            c.experts = 0;
            c
        }] {
            let n: usize = param_specs(&cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(n as u64, count_params(&cfg).total);
        }
    }

    #[test]
    fn chunks_cover_units() {
        for (u, c) in [(4, 1), (4, 2), (4, 4), (7, 3), (8, 8)] {
            let mut all = Vec::new();
            for i in 0..c {
                all.extend(chunk_units(u, c, i));
            }
            assert_eq!(all, (0..u).collect::<Vec<_>>());
            assert!(!chunk_units(u, c, 0).is_empty());
            assert!(!chunk_units(u, c, c - 1).is_empty());
        }
    }

    #[test]
    fn shard_then_accumulate_roundtrips() {
        let cfg = ModelConfig::tiny();
        let topo = Topology::new(1, 2, 2, 1).unwrap();
        let spec = &param_specs(&cfg)[layer_base(&cfg, 0) + slot::MLP + 3];
        let full = init_full::<f64>(spec, 3, 7);
        let mut back = Tensor::zeros(&spec.shape);
        for ep in 0..2 {
            for tp in 0..2 {
                let c = Coords { dp: 0, tp, ep, pp: 0 };
                spec.accumulate(&mut back, &spec.shard(&full, &topo, &c), &topo, &c).unwrap();
            }
        }
        assert_eq!(back, full);
    }
}
