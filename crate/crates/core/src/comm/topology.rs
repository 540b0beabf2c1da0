use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the parallelism axes, or a fused view over several of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    Dp,
    Tp,
    Ep,
    Pp,
    /// Fused data x expert group, used by the EP-aware sharded optimizer.
    DpEp,
    World,
}

impl Axis {
    fn varies(self) -> &'static [Axis] {
        match self {
            Axis::Dp => &[Axis::Dp],
            Axis::Tp => &[Axis::Tp],
            Axis::Ep => &[Axis::Ep],
            Axis::Pp => &[Axis::Pp],
            Axis::DpEp => &[Axis::Dp, Axis::Ep],
            Axis::World => &[Axis::Dp, Axis::Tp, Axis::Ep, Axis::Pp],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::Dp => "dp",
            Axis::Tp => "tp",
            Axis::Ep => "ep",
            Axis::Pp => "pp",
            Axis::DpEp => "dpxep",
            Axis::World => "world",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub dp: usize,
    pub tp: usize,
    pub ep: usize,
    pub pp: usize,
}

impl Topology {
    pub fn new(dp: usize, tp: usize, ep: usize, pp: usize) -> Result<Self> {
        if dp == 0 || tp == 0 || ep == 0 || pp == 0 {
            return Err(Error::Config(format!(
                "topology extents must be positive (dp={dp} tp={tp} ep={ep} pp={pp})"
            )));
        }
        Ok(Self { dp, tp, ep, pp })
    }

    pub fn serial() -> Self {
        Self { dp: 1, tp: 1, ep: 1, pp: 1 }
    }

    pub fn world_size(&self) -> usize {
        self.dp * self.tp * self.ep * self.pp
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Dp => self.dp,
            Axis::Tp => self.tp,
            Axis::Ep => self.ep,
            Axis::Pp => self.pp,
            Axis::DpEp => self.dp * self.ep,
            Axis::World => self.world_size(),
        }
    }

    /// Number of ranks that consume distinct data.
    pub fn data_parallel_width(&self) -> usize {
        self.dp * self.ep
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dp={} tp={} ep={} pp={}", self.dp, self.tp, self.ep, self.pp)
    }
}

/// Coordinates of a rank along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Coords {
    pub dp: usize,
    pub tp: usize,
    pub ep: usize,
    pub pp: usize,
}

impl Coords {
    fn get(&self, axis: Axis) -> usize {
        match axis {
            Axis::Dp => self.dp,
            Axis::Tp => self.tp,
            Axis::Ep => self.ep,
            Axis::Pp => self.pp,
            _ => unreachable!("fused axes have no single coordinate"),
        }
    }

    fn set(&mut self, axis: Axis, v: usize) {
        match axis {
            Axis::Dp => self.dp = v,
            Axis::Tp => self.tp = v,
            Axis::Ep => self.ep = v,
            Axis::Pp => self.pp = v,
            _ => unreachable!("fused axes have no single coordinate"),
        }
    }

    /// Index of a rank inside the fused data-parallel x expert group.
    pub fn data_rank(&self, topo: &Topology) -> usize {
        self.dp * topo.ep + self.ep
    }
}

/// Rank layout: axes from outermost to innermost. The default places PP
/// outermost and TP innermost so that EP groups stay inside a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub order: [Axis; 4],
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            order: [Axis::Pp, Axis::Dp, Axis::Ep, Axis::Tp],
        }
    }
}

impl Layout {
    pub fn new(order: [Axis; 4]) -> Result<Self> {
        let mut seen = [Axis::Dp, Axis::Tp, Axis::Ep, Axis::Pp].map(|a| order.contains(&a));
        seen.sort();
        if !seen.iter().all(|&b| b) {
            return Err(Error::Config(format!("layout {order:?} must name dp, tp, ep, pp once each")));
        }
        Ok(Self { order })
    }
}

/// Ordered member list of one group along one axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProcessGroup {
    pub axis: Axis,
    pub ranks: Vec<usize>,
}

impl ProcessGroup {
    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn index_of(&self, rank: usize) -> Option<usize> {
        self.ranks.iter().position(|&r| r == rank)
    }

    /// Groups along one axis partition the world, so the lowest member
    /// identifies the group.
    pub fn id(&self) -> (Axis, usize) {
        (self.axis, self.ranks[0])
    }

    pub fn label(&self) -> String {
        let members: Vec<String> = self.ranks.iter().map(|r| r.to_string()).collect();
        format!("{}[{}]", self.axis, members.join("-"))
    }
}

/// Static rank geometry: topology plus layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankLayout {
    pub topology: Topology,
    pub layout: Layout,
}

impl RankLayout {
    pub fn new(topology: Topology, layout: Layout) -> Self {
        Self { topology, layout }
    }

    pub fn world_size(&self) -> usize {
        self.topology.world_size()
    }

    pub fn coords(&self, rank: usize) -> Coords {
        let mut c = Coords { dp: 0, tp: 0, ep: 0, pp: 0 };
        let mut rem = rank;
        for &axis in self.layout.order.iter().rev() {
            let n = self.topology.extent(axis);
            c.set(axis, rem % n);
            rem /= n;
        }
        c
    }

    pub fn rank_of(&self, c: &Coords) -> usize {
        self.layout
            .order
            .iter()
            .fold(0, |acc, &axis| acc * self.topology.extent(axis) + c.get(axis))
    }

    /// The group along `axis` that contains `rank`, members in ascending
    /// rank order.
    pub fn group(&self, axis: Axis, rank: usize) -> ProcessGroup {
        let base = self.coords(rank);
        let mut ranks: Vec<usize> = (0..self.world_size())
            .filter(|&r| {
                let c = self.coords(r);
                [Axis::Dp, Axis::Tp, Axis::Ep, Axis::Pp]
                    .iter()
                    .filter(|a| !axis.varies().contains(a))
                    .all(|&a| c.get(a) == base.get(a))
            })
            .collect();
        ranks.sort_unstable();
        ProcessGroup { axis, ranks }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_is_pp_dp_ep_tp() {
        let rl = RankLayout::new(Topology::new(2, 2, 2, 2).unwrap(), Layout::default());
        for r in 0..16 {
            assert_eq!(rl.rank_of(&rl.coords(r)), r);
        }
        assert_eq!(rl.coords(1), Coords { pp: 0, dp: 0, ep: 0, tp: 1 });
        assert_eq!(rl.coords(2), Coords { pp: 0, dp: 0, ep: 1, tp: 0 });
        assert_eq!(rl.coords(8).pp, 1);
        assert_eq!(rl.group(Axis::Ep, 0).ranks, vec![0, 2]);
        assert_eq!(rl.group(Axis::Dp, 1).ranks, vec![1, 5]);
        assert_eq!(rl.group(Axis::DpEp, 0).ranks, vec![0, 2, 4, 6]);
        assert_eq!(rl.group(Axis::Pp, 3).ranks, vec![3, 11]);
    }

    #[test]
    fn groups_partition_the_world() {
        let rl = RankLayout::new(Topology::new(3, 1, 2, 2).unwrap(), Layout::default());
        for axis in [Axis::Dp, Axis::Tp, Axis::Ep, Axis::Pp, Axis::DpEp, Axis::World] {
            let mut count = vec![0; rl.world_size()];
            let mut seen = std::collections::HashSet::new();
            for r in 0..rl.world_size() {
                let g = rl.group(axis, r);
                assert!(g.index_of(r).is_some());
                assert_eq!(g.size(), rl.topology.extent(axis));
                if seen.insert(g.id()) {
                    for &m in &g.ranks {
                        count[m] += 1;
                    }
                }
            }
            assert!(count.iter().all(|&c| c == 1), "{axis}: {count:?}");
        }
    }

    #[test]
    fn layout_must_be_a_permutation() {
        assert!(Layout::new([Axis::Dp, Axis::Dp, Axis::Ep, Axis::Pp]).is_err());
        assert!(Layout::new([Axis::Tp, Axis::Dp, Axis::Ep, Axis::Pp]).is_ok());
    }
}
