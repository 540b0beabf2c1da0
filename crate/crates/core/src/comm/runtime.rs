//! In-process multi-rank runtime.
//!
//! Every rank runs as its own thread. Collectives rendezvous on a slot keyed
//! by (group, per-group sequence number). The last member to arrive evaluates
//! the pure collective from [`super::collective`] and every member picks up
//! its share. Point-to-point messages go through FIFO mailboxes keyed by
//! (src, dst, tag).
//!
//! In [`ExecMode::Lockstep`] a baton makes exactly one rank runnable at a
//! time, handed round-robin whenever the holder blocks or finishes. A
//! deadlock then shows up as "nobody can take the baton" and is reported
//! immediately instead of after the hang timeout.

use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::collective::{self, even_split};
use super::ledger::TrafficLedger;
use super::topology::{Axis, Coords, Layout, ProcessGroup, RankLayout, Topology};
use crate::error::{Error, Result};
use crate::tensor::{Element, Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    #[default]
    Threaded,
    /// One rank at a time, deterministic round-robin.
    Lockstep,
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub topology: Topology,
    pub layout: Layout,
    pub tiles_per_node: usize,
    pub hang_timeout: Duration,
    pub mode: ExecMode,
}

impl WorldConfig {
    pub const DEFAULT_TILES_PER_NODE: usize = 12;
    pub const DEFAULT_HANG_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            layout: Layout::default(),
            tiles_per_node: Self::DEFAULT_TILES_PER_NODE,
            hang_timeout: Self::DEFAULT_HANG_TIMEOUT,
            mode: ExecMode::Threaded,
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_tiles_per_node(mut self, tiles: usize) -> Self {
        self.tiles_per_node = tiles.max(1);
        self
    }

    pub fn with_hang_timeout(mut self, timeout: Duration) -> Self {
        self.hang_timeout = timeout;
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.topology.world_size().div_ceil(self.tiles_per_node)
    }
}

pub struct World {
    cfg: WorldConfig,
    /// Physical node id for each logical node slot.
    nodes: Vec<usize>,
    ledger: Arc<Mutex<TrafficLedger>>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Self {
        let nodes = (0..cfg.num_nodes()).collect();
        Self {
            cfg,
            nodes,
            ledger: Arc::default(),
        }
    }

    /// A world whose logical node slots map onto the given physical nodes,
    /// as after a relaunch that swapped in buffer nodes.
    pub fn with_nodes(cfg: WorldConfig, nodes: Vec<usize>) -> Result<Self> {
        if nodes.len() != cfg.num_nodes() {
            return Err(Error::Config(format!(
                "{} ranks at {} tiles per node need {} nodes, got {}",
                cfg.topology.world_size(),
                cfg.tiles_per_node,
                cfg.num_nodes(),
                nodes.len()
            )));
        }
        Ok(Self {
            cfg,
            nodes,
            ledger: Arc::default(),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn topology(&self) -> Topology {
        self.cfg.topology
    }

    pub fn layout(&self) -> RankLayout {
        RankLayout::new(self.cfg.topology, self.cfg.layout)
    }

    pub fn world_size(&self) -> usize {
        self.cfg.topology.world_size()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn node_of(&self, rank: usize) -> usize {
        self.nodes[rank / self.cfg.tiles_per_node]
    }

    pub fn ledger(&self) -> TrafficLedger {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    pub fn reset_ledger(&self) {
        self.ledger.lock().expect("ledger poisoned").clear();
    }

    /// Run `f` once per rank and collect the per-rank results in rank order.
    pub fn run<R, F>(&self, f: F) -> Vec<Result<R>>
    where
        R: Send,
        F: Fn(&mut Rank<'_>) -> Result<R> + Sync,
    {
        let n = self.world_size();
        let shared = Shared::new(n, self.cfg.mode, self.cfg.hang_timeout);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|r| {
                    let shared = &shared;
                    let f = &f;
                    std::thread::Builder::new()
                        .name(format!("rank-{r}"))
                        .stack_size(16 << 20)
                        .spawn_scoped(s, move || {
                            let _guard = FinishGuard { shared, rank: r };
                            shared.await_start(r);
                            let mut rank = Rank::new(self, shared, r);
                            f(&mut rank)
                        })
                        .expect("spawn rank thread")
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(r, h)| {
                    h.join().unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_default();
                        Err(Error::contract("rank", format!("rank {r} panicked: {msg}")))
                    })
                })
                .collect()
        })
    }

    /// [`World::run`], collapsed to the first root-cause error. Hangs are
    /// reported only when no rank failed for another reason.
    pub fn run_all<R, F>(&self, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&mut Rank<'_>) -> Result<R> + Sync,
    {
        root_cause(self.run(f))
    }
}

pub fn root_cause<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    if results.iter().all(|r| r.is_ok()) {
        return results.into_iter().collect();
    }
    let mut first_hang = None;
    for r in results {
        match r {
            Err(e) if !e.is_hang() => return Err(e),
            Err(e) => {
                first_hang.get_or_insert(e);
            }
            Ok(_) => {}
        }
    }
    Err(first_hang.expect("at least one error"))
}

type Payload = Box<dyn Any + Send>;
type SlotKey = ((Axis, usize), u64);

struct Slot {
    name: &'static str,
    inputs: Vec<Option<Payload>>,
    arrived: usize,
    outcome: Option<std::result::Result<Vec<Option<Payload>>, String>>,
    remaining: usize,
}

struct State {
    slots: HashMap<SlotKey, Slot>,
    mailboxes: HashMap<(usize, usize, u64), VecDeque<Payload>>,
    finished: Vec<bool>,
    baton: usize,
    blocked: Vec<bool>,
    deadlock: bool,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
    mode: ExecMode,
    timeout: Duration,
}

impl Shared {
    fn new(n: usize, mode: ExecMode, timeout: Duration) -> Self {
        Self {
            state: Mutex::new(State {
                slots: HashMap::new(),
                mailboxes: HashMap::new(),
                finished: vec![false; n],
                baton: 0,
                blocked: vec![false; n],
                deadlock: false,
            }),
            cv: Condvar::new(),
            mode,
            timeout,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn await_start(&self, me: usize) {
        if self.mode == ExecMode::Lockstep {
            let mut st = self.lock();
            while st.baton != me && !st.deadlock {
                st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
            }
        }
    }

    /// Something changed that may unblock waiting ranks.
    fn progress(&self, st: &mut State) {
        st.blocked.iter_mut().for_each(|b| *b = false);
        self.cv.notify_all();
    }

    fn pass_baton(st: &mut State, me: usize) {
        let n = st.finished.len();
        for off in 1..=n {
            let r = (me + off) % n;
            if !st.finished[r] && !st.blocked[r] {
                st.baton = r;
                return;
            }
        }
        if st.finished.iter().any(|f| !f) {
            st.deadlock = true;
        }
    }

    fn wait<'a, R>(
        &'a self,
        me: usize,
        mut st: MutexGuard<'a, State>,
        describe: impl Fn() -> (String, String),
        mut poll: impl FnMut(&mut State) -> Option<R>,
        missing: impl Fn(&State) -> Vec<usize>,
    ) -> Result<R> {
        let start = Instant::now();
        loop {
            if let Some(r) = poll(&mut st) {
                return Ok(r);
            }
            let miss = missing(&st);
            let hang = |miss: Vec<usize>| {
                let (collective, group) = describe();
                Error::Hang {
                    collective,
                    group,
                    missing: miss,
                }
            };
            if st.deadlock || miss.iter().any(|&r| st.finished[r]) {
                return Err(hang(miss));
            }
            match self.mode {
                ExecMode::Threaded => {
                    let elapsed = start.elapsed();
                    if elapsed >= self.timeout {
                        return Err(hang(miss));
                    }
                    st = self
                        .cv
                        .wait_timeout(st, self.timeout - elapsed)
                        .unwrap_or_else(|p| p.into_inner())
                        .0;
                }
                ExecMode::Lockstep => {
                    st.blocked[me] = true;
                    Self::pass_baton(&mut st, me);
                    self.cv.notify_all();
                    while st.baton != me && !st.deadlock {
                        st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
                    }
                }
            }
        }
    }
}

struct FinishGuard<'a> {
    shared: &'a Shared,
    rank: usize,
}

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.shared.lock();
        st.finished[self.rank] = true;
        self.shared.progress(&mut st);
        if self.shared.mode == ExecMode::Lockstep && st.baton == self.rank {
            Shared::pass_baton(&mut st, self.rank);
        }
        self.shared.cv.notify_all();
    }
}

/// Per-transfer byte accounting: `(sent, received)` for each member.
type Traffic = Vec<(u64, u64)>;

/// One rank's handle on the world: identity, groups and collectives.
pub struct Rank<'w> {
    rank: usize,
    coords: Coords,
    world: &'w World,
    shared: &'w Shared,
    seqs: HashMap<(Axis, usize), u64>,
}

impl<'w> Rank<'w> {
    fn new(world: &'w World, shared: &'w Shared, rank: usize) -> Self {
        Self {
            rank,
            coords: world.layout().coords(rank),
            world,
            shared,
            seqs: HashMap::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn coords(&self) -> Coords {
        self.coords
    }

    pub fn topology(&self) -> Topology {
        self.world.topology()
    }

    pub fn world_size(&self) -> usize {
        self.world.world_size()
    }

    pub fn node(&self) -> usize {
        self.world.node_of(self.rank)
    }

    pub fn world(&self) -> &'w World {
        self.world
    }

    pub fn group(&self, axis: Axis) -> ProcessGroup {
        self.world.layout().group(axis, self.rank)
    }

    fn credit(&self, name: &str, label: &str, members: &[usize], traffic: &[(u64, u64)]) {
        let mut ledger = self.world.ledger.lock().expect("ledger poisoned");
        for (&r, &(sent, recv)) in members.iter().zip(traffic) {
            ledger.credit(name, label, r, sent, recv);
        }
    }

    /// Rendezvous on `group`: deposit `input`, and once every member has
    /// arrived evaluate `compute` over all inputs in member order.
    fn collective<I, O>(
        &mut self,
        name: &'static str,
        group: &ProcessGroup,
        input: I,
        compute: impl FnOnce(Vec<I>) -> Result<(Vec<O>, Traffic)>,
    ) -> Result<O>
    where
        I: Send + 'static,
        O: Send + 'static,
    {
        let me = group.index_of(self.rank).ok_or_else(|| Error::Collective {
            collective: name.into(),
            group: group.label(),
            detail: format!("rank {} is not a member", self.rank),
        })?;
        let g = group.size();
        let seq = {
            let s = self.seqs.entry(group.id()).or_insert(0);
            *s += 1;
            *s
        };
        let key = (group.id(), seq);
        let label = group.label();

        let mut st = self.shared.lock();
        let slot = st.slots.entry(key).or_insert_with(|| Slot {
            name,
            inputs: (0..g).map(|_| None).collect(),
            arrived: 0,
            outcome: None,
            remaining: g,
        });
        let mismatch = slot.name != name && slot.outcome.is_none();
        if mismatch {
            slot.outcome = Some(Err(format!(
                "members disagree on the collective: {} vs {name}",
                slot.name
            )));
        }
        slot.inputs[me] = Some(Box::new(input));
        slot.arrived += 1;
        let complete = slot.arrived == g && slot.outcome.is_none();
        if mismatch {
            self.shared.progress(&mut st);
        }
        if complete {
            let slot = st.slots.get_mut(&key).expect("slot");
            let inputs: Vec<Payload> = slot.inputs.iter_mut().map(|i| i.take().expect("deposited")).collect();
            drop(st);
            let typed: Option<Vec<I>> = inputs.into_iter().map(|b| b.downcast::<I>().ok().map(|b| *b)).collect();
            let outcome = match typed {
                None => Err("members contributed different element types".to_string()),
                Some(v) => match compute(v) {
                    Ok((outs, traffic)) => {
                        if g > 1 {
                            self.credit(name, &label, &group.ranks, &traffic);
                        }
                        Ok(outs.into_iter().map(|o| Some(Box::new(o) as Payload)).collect())
                    }
                    Err(e) => Err(e.to_string()),
                },
            };
            st = self.shared.lock();
            st.slots.get_mut(&key).expect("slot").outcome = Some(outcome);
            self.shared.progress(&mut st);
        }

        let ranks = group.ranks.clone();
        let out = self.shared.wait(
            self.rank,
            st,
            || (name.to_string(), label.clone()),
            |st| {
                let slot = st.slots.get_mut(&key)?;
                let res = match slot.outcome.as_mut()? {
                    Ok(outs) => Ok(outs[me].take().expect("output taken once")),
                    Err(msg) => Err(msg.clone()),
                };
                slot.remaining -= 1;
                if slot.remaining == 0 {
                    st.slots.remove(&key);
                }
                Some(res)
            },
            |st| match st.slots.get(&key) {
                Some(slot) if slot.arrived < g => ranks
                    .iter()
                    .zip(&slot.inputs)
                    .filter(|(_, i)| i.is_none())
                    .map(|(&r, _)| r)
                    .collect(),
                _ => Vec::new(),
            },
        )?;
        match out {
            Ok(b) => Ok(*b.downcast::<O>().expect("collective output type")),
            Err(detail) => Err(Error::Collective {
                collective: name.into(),
                group: label,
                detail,
            }),
        }
    }

    /// Concatenate every member's tensor along axis 0 in group order.
    pub fn allgather<T: Element>(&mut self, group: &ProcessGroup, local: &Tensor<T>) -> Result<Tensor<T>> {
        self.collective("allgather", group, local.clone(), |inputs| {
            let sizes: Vec<u64> = inputs.iter().map(|t| t.size_bytes() as u64).collect();
            let total: u64 = sizes.iter().sum();
            let out = collective::allgather(&inputs)?;
            let g = inputs.len() as u64;
            let traffic = sizes.iter().map(|&s| ((g - 1) * s, total - s)).collect();
            Ok((vec![out; inputs.len()], traffic))
        })
    }

    /// Allgather where members may contribute different axis-0 extents.
    pub fn allgather_v<T: Element>(&mut self, group: &ProcessGroup, local: &Tensor<T>) -> Result<Tensor<T>> {
        self.collective("allgather", group, local.clone(), |inputs| {
            let sizes: Vec<u64> = inputs.iter().map(|t| t.size_bytes() as u64).collect();
            let total: u64 = sizes.iter().sum();
            let out = collective::allgather_v(&inputs)?;
            let g = inputs.len() as u64;
            let traffic = sizes.iter().map(|&s| ((g - 1) * s, total - s)).collect();
            Ok((vec![out; inputs.len()], traffic))
        })
    }

    pub fn reducescatter<T: Float>(&mut self, group: &ProcessGroup, local: &Tensor<T>) -> Result<Tensor<T>> {
        let g = group.size();
        let rows = local.rows();
        if !rows.is_multiple_of(g) {
            return Err(Error::contract(
                "reducescatter",
                format!("axis-0 extent {rows} not divisible by group size {g}"),
            ));
        }
        self.reducescatter_v(group, local, &vec![rows / g; g])
    }

    /// Sum across members, then member `i` keeps `counts[i]` consecutive rows.
    pub fn reducescatter_v<T: Float>(&mut self, group: &ProcessGroup, local: &Tensor<T>, counts: &[usize]) -> Result<Tensor<T>> {
        let counts = counts.to_vec();
        self.collective("reducescatter", group, local.clone(), move |inputs| {
            let row_bytes = (inputs[0].row_len() * T::DTYPE.size_bytes()) as u64;
            let total = inputs[0].size_bytes() as u64;
            let outs = collective::reducescatter_v(&inputs, &counts)?;
            let g = inputs.len() as u64;
            let traffic = counts
                .iter()
                .map(|&c| {
                    let chunk = c as u64 * row_bytes;
                    (total - chunk, (g - 1) * chunk)
                })
                .collect();
            Ok((outs, traffic))
        })
    }

    pub fn allreduce<T: Float>(&mut self, group: &ProcessGroup, local: &Tensor<T>) -> Result<Tensor<T>> {
        self.collective("allreduce", group, local.clone(), |inputs| {
            let g = inputs.len();
            let total = inputs[0].size_bytes() as u64;
            let out = collective::allreduce(&inputs)?;
            let traffic = even_split(inputs[0].numel(), g)
                .into_iter()
                .map(|c| {
                    let chunk = (c * T::DTYPE.size_bytes()) as u64;
                    let v = (total - chunk) + (g as u64 - 1) * chunk;
                    (v, v)
                })
                .collect();
            Ok((vec![out; g], traffic))
        })
    }

    /// Allreduce followed by division by the group size.
    pub fn allreduce_mean<T: Float>(&mut self, group: &ProcessGroup, local: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = self.allreduce(group, local)?;
        if group.size() > 1 {
            out.scale(T::one() / T::lit(group.size() as f64));
        }
        Ok(out)
    }

    pub fn allreduce_f64(&mut self, group: &ProcessGroup, value: f64) -> Result<f64> {
        Ok(self.allreduce(group, &Tensor::from_vec(vec![value]))?.data()[0])
    }

    /// `root` is a global rank id that must belong to `group`. Non-root
    /// members pass a buffer whose contents are ignored.
    pub fn broadcast<T: Element>(&mut self, group: &ProcessGroup, root: usize, value: &Tensor<T>) -> Result<Tensor<T>> {
        let root_idx = group.index_of(root).ok_or_else(|| Error::Collective {
            collective: "broadcast".into(),
            group: group.label(),
            detail: format!("root {root} outside group"),
        })?;
        let me = group.index_of(self.rank);
        let payload = if me == Some(root_idx) { Some(value.clone()) } else { None };
        self.collective("broadcast", group, payload, move |mut inputs| {
            let g = inputs.len();
            let v = inputs[root_idx].take().ok_or_else(|| Error::contract("broadcast", "root sent nothing"))?;
            let bytes = v.size_bytes() as u64;
            let traffic = (0..g)
                .map(|i| if i == root_idx { ((g as u64 - 1) * bytes, 0) } else { (0, bytes) })
                .collect();
            Ok((vec![v; g], traffic))
        })
    }

    /// Member `i`'s `j`-th chunk goes to member `j`; returns the chunks this
    /// rank received, in sender order.
    pub fn all2all<T: Element>(&mut self, group: &ProcessGroup, chunks: Vec<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        if chunks.len() != group.size() {
            return Err(Error::Collective {
                collective: "all2all".into(),
                group: group.label(),
                detail: format!("{} chunks for a group of {}", chunks.len(), group.size()),
            });
        }
        self.collective("all2all", group, chunks, |inputs| {
            let g = inputs.len();
            let mut traffic = vec![(0u64, 0u64); g];
            for (i, row) in inputs.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    if i != j {
                        traffic[i].0 += c.size_bytes() as u64;
                        traffic[j].1 += c.size_bytes() as u64;
                    }
                }
            }
            Ok((collective::all2all(inputs)?, traffic))
        })
    }

    pub fn barrier(&mut self, group: &ProcessGroup) -> Result<()> {
        self.collective("barrier", group, (), |inputs| Ok((vec![(); inputs.len()], vec![(0, 0); inputs.len()])))
    }

    /// Non-blocking buffered send.
    pub fn send<T: Element>(&mut self, dst: usize, tag: u64, tensor: Tensor<T>) -> Result<()> {
        if dst >= self.world_size() {
            return Err(Error::contract("send", format!("destination {dst} outside world")));
        }
        let bytes = tensor.size_bytes() as u64;
        let label = format!("p2p[{}->{}]", self.rank, dst);
        self.credit("sendrecv", &label, &[self.rank, dst], &[(bytes, 0), (0, bytes)]);
        let mut st = self.shared.lock();
        st.mailboxes
            .entry((self.rank, dst, tag))
            .or_default()
            .push_back(Box::new(tensor));
        self.shared.progress(&mut st);
        Ok(())
    }

    /// Blocking receive of the oldest message from `src` with `tag`.
    pub fn recv<T: Element>(&mut self, src: usize, tag: u64) -> Result<Tensor<T>> {
        if src >= self.world_size() {
            return Err(Error::contract("recv", format!("source {src} outside world")));
        }
        let me = self.rank;
        let st = self.shared.lock();
        let payload = self.shared.wait(
            me,
            st,
            || ("recv".to_string(), format!("p2p[{src}->{me}] tag {tag}")),
            |st| st.mailboxes.get_mut(&(src, me, tag)).and_then(|q| q.pop_front()),
            |_| vec![src],
        )?;
        payload
            .downcast::<Tensor<T>>()
            .map(|b| *b)
            .map_err(|_| Error::contract("recv", "message element type mismatch"))
    }
}
