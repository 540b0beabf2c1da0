use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comm::{Axis, Rank};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    /// The node dies.
    Hard,
    /// The node keeps running but produces NaN gradients.
    #[serde(alias = "soft", alias = "nan", alias = "softnan")]
    SoftNaN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InjectedFailure {
    pub step: u64,
    /// Physical node id.
    pub node: usize,
    pub kind: FailureKind,
}

/// Injected failures and the node pool of a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailurePlan {
    pub failures: Vec<InjectedFailure>,
    pub buffer_nodes: Vec<usize>,
    pub excluded: BTreeSet<usize>,
}

impl FailurePlan {
    pub fn new(failures: Vec<InjectedFailure>, buffer_nodes: Vec<usize>) -> Self {
        Self {
            failures,
            buffer_nodes,
            excluded: BTreeSet::new(),
        }
    }

    /// Read a JSON list of `{step, node, kind}`.
    pub fn load_failures(path: &Path) -> Result<Vec<InjectedFailure>> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Failure injected at `step` on one of `active` nodes, if any. Each
    /// failure fires once.
    pub fn take(&mut self, step: u64, active: &[usize]) -> Option<InjectedFailure> {
        let i = self.failures.iter().position(|f| f.step == step && active.contains(&f.node))?;
        Some(self.failures.remove(i))
    }

    /// Replace `failed` in `active` by the first buffer node. Returns the
    /// new node list.
    pub fn relaunch(&mut self, active: &[usize], failed: usize) -> Result<Vec<usize>> {
        if !active.contains(&failed) {
            return Err(Error::contract("relaunch", format!("node {failed} is not active")));
        }
        self.excluded.insert(failed);
        if self.buffer_nodes.is_empty() {
            return Err(Error::BufferExhausted { failed_node: failed });
        }
        let spare = self.buffer_nodes.remove(0);
        Ok(active.iter().map(|&n| if n == failed { spare } else { n }).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftFault {
    pub rank: usize,
    pub node: usize,
}

/// Check the local loss and gradients for NaN or Inf and agree across the
/// world on the first faulty rank. Collective over all ranks.
pub fn detect_soft_failure<T: Float>(rank: &mut Rank<'_>, local_loss: f64, grads: &[Tensor<T>]) -> Result<Option<SoftFault>> {
    let bad = !local_loss.is_finite() || grads.iter().any(|g| !g.is_finite());
    let world = rank.group(Axis::World);
    let flags = if world.size() > 1 {
        rank.allgather(&world, &Tensor::from_vec(vec![if bad { 1.0f64 } else { 0.0 }]))?
    } else {
        Tensor::from_vec(vec![if bad { 1.0 } else { 0.0 }])
    };
    Ok(flags.data().iter().position(|&f| f != 0.0).map(|r| SoftFault {
        rank: r,
        node: rank.world().node_of(r),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relaunch_consumes_buffers() {
        let mut p = FailurePlan::new(Vec::new(), vec![7, 8]);
        let a = p.relaunch(&[0, 1, 2], 1).unwrap();
        assert_eq!(a, vec![0, 7, 2]);
        assert_eq!(p.buffer_nodes, vec![8]);
        let b = p.relaunch(&a, 7).unwrap();
        assert_eq!(b, vec![0, 8, 2]);
        assert!(matches!(p.relaunch(&b, 0), Err(Error::BufferExhausted { failed_node: 0 })));
        assert!(p.excluded.contains(&1) && p.excluded.contains(&7));
    }

    #[test]
    fn failures_fire_once() {
        let f = InjectedFailure {
            step: 5,
            node: 1,
            kind: FailureKind::Hard,
        };
        let mut p = FailurePlan::new(vec![f], vec![]);
        assert_eq!(p.take(4, &[0, 1]), None);
        assert_eq!(p.take(5, &[0, 2]), None);
        assert_eq!(p.take(5, &[0, 1]), Some(f));
        assert_eq!(p.take(5, &[0, 1]), None);
    }

    #[test]
    fn failure_file_format() {
        let v: Vec<InjectedFailure> = serde_json::from_str(r#"[{"step":3,"node":0,"kind":"hard"},{"step":4,"node":1,"kind":"nan"}]"#).unwrap();
        assert_eq!(v[1].kind, FailureKind::SoftNaN);
    }
}
