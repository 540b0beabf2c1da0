use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::collective::even_split;
use crate::comm::{Coords, Topology};
use crate::error::{Error, Result};

/// How a parameter is replicated across the data-parallel axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamClass {
    /// Replicated across DP only.
    Expert,
    /// Replicated across DP x EP.
    NonExpert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    /// Replicated optimizer states, allreduced gradients.
    Ddp,
    /// States sharded across DP.
    So,
    /// Expert states sharded across DP, non-expert across DP x EP.
    Epso,
}

impl fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerMode::Ddp => "ddp",
            OptimizerMode::So => "so",
            OptimizerMode::Epso => "epso",
        })
    }
}

impl FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddp" => Ok(OptimizerMode::Ddp),
            "so" => Ok(OptimizerMode::So),
            "epso" => Ok(OptimizerMode::Epso),
            other => Err(Error::Config(format!("unknown optimizer mode {other:?} (ddp, so, epso)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub numel: usize,
    pub class: ParamClass,
}

fn range_of(counts: &[usize], i: usize) -> Range<usize> {
    let start: usize = counts[..i].iter().sum();
    start..start + counts[i]
}

/// Ownership of optimizer-state slices for the parameters of one
/// model-parallel partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShardPlan {
    pub mode: OptimizerMode,
    pub topology: Topology,
    pub params: Vec<ParamInfo>,
}

impl ShardPlan {
    pub fn new(topology: Topology, mode: OptimizerMode, params: Vec<ParamInfo>) -> Self {
        Self { mode, topology, params }
    }

    /// Slice of the flattened `param` whose reduced gradient this data rank
    /// computes first: the finest split over the parameter's replication
    /// group, identical in every mode.
    pub fn reduce_range(&self, param: usize, c: &Coords) -> Range<usize> {
        let p = &self.params[param];
        match p.class {
            ParamClass::NonExpert => range_of(&even_split(p.numel, self.topology.dp * self.topology.ep), c.data_rank(&self.topology)),
            ParamClass::Expert => range_of(&even_split(p.numel, self.topology.dp), c.dp),
        }
    }

    /// Slice whose fp32 master and moments this rank holds.
    pub fn owned_range(&self, param: usize, c: &Coords) -> Range<usize> {
        let p = &self.params[param];
        match (self.mode, p.class) {
            (OptimizerMode::Ddp, _) => 0..p.numel,
            (OptimizerMode::So, ParamClass::NonExpert) => {
                let ep = self.topology.ep;
                let fine = even_split(p.numel, self.topology.dp * ep);
                let first = range_of(&fine, c.dp * ep);
                let last = range_of(&fine, c.dp * ep + ep - 1);
                first.start..last.end
            }
            _ => self.reduce_range(param, c),
        }
    }

    pub fn state_bytes(&self, c: &Coords) -> usize {
        (0..self.params.len()).map(|i| 12 * self.owned_range(i, c).len()).sum()
    }

    /// Sum of state bytes over every data rank of this partition.
    pub fn partition_state_bytes(&self) -> usize {
        let t = self.topology;
        let mut total = 0;
        for dp in 0..t.dp {
            for ep in 0..t.ep {
                total += self.state_bytes(&Coords { dp, ep, tp: 0, pp: 0 });
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(dp: usize, ep: usize) -> Coords {
        Coords { dp, ep, tp: 0, pp: 0 }
    }

    #[test]
    fn degenerate_plan_owns_everything() {
        let plan = ShardPlan::new(
            Topology::serial(),
            OptimizerMode::Epso,
            vec![ParamInfo { numel: 10, class: ParamClass::NonExpert }],
        );
        assert_eq!(plan.owned_range(0, &coords(0, 0)), 0..10);
    }

    #[test]
    fn slices_partition_each_group() {
        let t = Topology::new(3, 1, 2, 1).unwrap();
        let params = vec![
            ParamInfo { numel: 17, class: ParamClass::NonExpert },
            ParamInfo { numel: 11, class: ParamClass::Expert },
        ];
        for mode in [OptimizerMode::So, OptimizerMode::Epso] {
            let plan = ShardPlan::new(t, mode, params.clone());
            for (i, p) in params.iter().enumerate() {
                for ep in 0..2 {
                    let mut covered = vec![0; p.numel];
                    for dp in 0..3 {
                        let r = plan.owned_range(i, &coords(dp, ep));
                        covered[r].iter_mut().for_each(|c| *c += 1);
                    }
                    let expect = if mode == OptimizerMode::Epso && p.class == ParamClass::NonExpert {
                        None
                    } else {
                        Some(1)
                    };
                    if let Some(e) = expect {
                        assert!(covered.iter().all(|&c| c == e), "{mode} param {i}: {covered:?}");
                    }
                }
            }
        }
        let epso = ShardPlan::new(t, OptimizerMode::Epso, params.clone());
        let mut covered = [0; 17];
        for dp in 0..3 {
            for ep in 0..2 {
                covered[epso.owned_range(0, &coords(dp, ep))].iter_mut().for_each(|c| *c += 1);
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn large_moe_byte_accounting() {
        // DP=2, EP=2: one expert tensor per rank, one non-expert tensor
        let t = Topology::new(2, 1, 2, 1).unwrap();
        let (pe, pne) = (400, 1000);
        let params = vec![
            ParamInfo { numel: pe, class: ParamClass::Expert },
            ParamInfo { numel: pne, class: ParamClass::NonExpert },
        ];
        let so = ShardPlan::new(t, OptimizerMode::So, params.clone());
        let epso = ShardPlan::new(t, OptimizerMode::Epso, params);
        for dp in 0..2 {
            for ep in 0..2 {
                assert_eq!(so.state_bytes(&coords(dp, ep)), 12 * (pe + pne) / 2);
                assert_eq!(epso.state_bytes(&coords(dp, ep)), 12 * (pe / 2 + pne / 4));
            }
        }
        // each EP rank holds different experts, so the EPSO total is 12P
        assert_eq!(epso.partition_state_bytes(), 12 * (2 * pe + pne));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("EPSO".parse::<OptimizerMode>().unwrap(), OptimizerMode::Epso);
        assert!("zero3".parse::<OptimizerMode>().is_err());
    }
}
