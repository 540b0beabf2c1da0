use serde::Serialize;

use crate::comm::Topology;
use crate::optim::OptimizerMode;

/// Default device capacity: 64 GB per tile.
pub const DEFAULT_CAPACITY_BYTES: f64 = 64e9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryBreakdown {
    pub mode: OptimizerMode,
    pub weights: f64,
    pub grads: f64,
    pub master: f64,
    pub optimizer: f64,
    pub total: f64,
    pub total_gb: f64,
    pub capacity_gb: f64,
    pub feasible: bool,
}

/// Per-rank bytes for bf16 weights and grads, fp32 master and the two fp32
/// moments. Model-parallel axes divide the parameters they shard: TP and PP
/// split everything, EP additionally splits the `expert_params`.
pub fn memory_report(total_params: f64, expert_params: f64, mode: OptimizerMode, topo: &Topology, capacity_bytes: f64) -> MemoryBreakdown {
    let mp = (topo.tp * topo.pp) as f64;
    let non_expert = (total_params - expert_params).max(0.0) / mp;
    let expert = expert_params / (mp * topo.ep as f64);
    let local = non_expert + expert;
    let (dp, ep) = (topo.dp as f64, topo.ep as f64);
    let sharded = match mode {
        OptimizerMode::Ddp => local,
        OptimizerMode::So => local / dp,
        OptimizerMode::Epso => non_expert / (dp * ep) + expert / dp,
    };
    let weights = 2.0 * local;
    let grads = 2.0 * local;
    let master = 4.0 * sharded;
    let optimizer = 8.0 * sharded;
    let total = weights + grads + master + optimizer;
    MemoryBreakdown {
        mode,
        weights,
        grads,
        master,
        optimizer,
        total,
        total_gb: total / 1e9,
        capacity_gb: capacity_bytes / 1e9,
        feasible: total <= capacity_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_billion_ddp_needs_112_gb() {
        let r = memory_report(7e9, 0.0, OptimizerMode::Ddp, &Topology::serial(), DEFAULT_CAPACITY_BYTES);
        assert_eq!(r.total, 112e9);
        assert!(!r.feasible);
    }

    #[test]
    fn zero_params() {
        let r = memory_report(0.0, 0.0, OptimizerMode::So, &Topology::serial(), DEFAULT_CAPACITY_BYTES);
        assert_eq!(r.total, 0.0);
        assert!(r.feasible);
    }

    #[test]
    fn so_formula() {
        let p = 1e6;
        for d in [1, 2, 4, 8] {
            let t = Topology::new(d, 1, 1, 1).unwrap();
            let r = memory_report(p, 0.0, OptimizerMode::So, &t, DEFAULT_CAPACITY_BYTES);
            assert!((r.total - (4.0 * p + 12.0 * p / d as f64)).abs() < 1e-6);
        }
    }
}
