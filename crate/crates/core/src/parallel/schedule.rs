use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Gpipe,
    #[serde(rename = "1f1b")]
    OneFOneB,
    Interleaved,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Gpipe => "gpipe",
            ScheduleKind::OneFOneB => "1f1b",
            ScheduleKind::Interleaved => "interleaved",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpipe" => Ok(ScheduleKind::Gpipe),
            "1f1b" | "one_f_one_b" => Ok(ScheduleKind::OneFOneB),
            "interleaved" | "interleaved_1f1b" | "interleaved-1f1b" => Ok(ScheduleKind::Interleaved),
            other => Err(Error::Config(format!("unknown schedule {other:?} (gpipe, 1f1b, interleaved)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub phase: Phase,
    pub microbatch: usize,
    /// Virtual stage on the owning rank; always 0 unless interleaved.
    pub vstage: usize,
}

impl Event {
    fn f(microbatch: usize, vstage: usize) -> Self {
        Self {
            phase: Phase::Forward,
            microbatch,
            vstage,
        }
    }

    fn b(microbatch: usize, vstage: usize) -> Self {
        Self {
            phase: Phase::Backward,
            microbatch,
            vstage,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = if self.phase == Phase::Forward { 'F' } else { 'B' };
        if self.vstage == 0 {
            write!(f, "{p}{}", self.microbatch)
        } else {
            write!(f, "{p}{}.{}", self.microbatch, self.vstage)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PipelineSchedule {
    pub kind: ScheduleKind,
    pub stages: usize,
    pub microbatches: usize,
    pub virtual_stages: usize,
    /// Per pipeline rank, in execution order.
    pub events: Vec<Vec<Event>>,
}

/// Microbatch and virtual stage of the `k`-th forward (or backward) of an
/// interleaved schedule.
fn interleaved_slot(k: usize, pp: usize, v: usize, backward: bool) -> (usize, usize) {
    let group = k % (pp * v);
    let mut chunk = group / pp;
    if backward {
        chunk = v - 1 - chunk;
    }
    let mb = (k / (pp * v)) * pp + k % pp;
    (mb, chunk)
}

pub fn build_schedule(kind: ScheduleKind, pp: usize, microbatches: usize, virtual_stages: usize) -> Result<PipelineSchedule> {
    let m = microbatches;
    if pp == 0 || m == 0 {
        return Err(Error::Config(format!("schedule needs pp >= 1 and microbatches >= 1 (pp={pp}, m={m})")));
    }
    let v = if kind == ScheduleKind::Interleaved { virtual_stages } else { 1 };
    if v == 0 {
        return Err(Error::Config("virtual stages must be positive".into()));
    }
    if kind == ScheduleKind::Interleaved && v > 1 && !m.is_multiple_of(pp) {
        return Err(Error::Config(format!(
            "interleaved schedule needs microbatches divisible by pp (m={m}, pp={pp})"
        )));
    }
    let mut events = Vec::with_capacity(pp);
    for r in 0..pp {
        let mut ev = Vec::with_capacity(2 * m * v);
        match kind {
            ScheduleKind::Gpipe => {
                ev.extend((0..m).map(|i| Event::f(i, 0)));
                ev.extend((0..m).map(|i| Event::b(i, 0)));
            }
            _ if v == 1 => {
                let warmup = (pp - 1 - r).min(m);
                ev.extend((0..warmup).map(|i| Event::f(i, 0)));
                for i in 0..m - warmup {
                    ev.push(Event::f(warmup + i, 0));
                    ev.push(Event::b(i, 0));
                }
                ev.extend((m - warmup..m).map(|i| Event::b(i, 0)));
            }
            _ => {
                let total = m * v;
                let warmup = if m == pp {
                    total
                } else {
                    ((pp - r - 1) * 2 + (v - 1) * pp).min(total)
                };
                let fwd = |k: usize| {
                    let (mb, c) = interleaved_slot(k, pp, v, false);
                    Event::f(mb, c)
                };
                let bwd = |k: usize| {
                    let (mb, c) = interleaved_slot(k, pp, v, true);
                    Event::b(mb, c)
                };
                ev.extend((0..warmup).map(fwd));
                for i in 0..total - warmup {
                    ev.push(fwd(warmup + i));
                    ev.push(bwd(i));
                }
                ev.extend((total - warmup..total).map(bwd));
            }
        }
        events.push(ev);
    }
    Ok(PipelineSchedule {
        kind,
        stages: pp,
        microbatches: m,
        virtual_stages: v,
        events,
    })
}

impl PipelineSchedule {
    pub fn num_chunks(&self) -> usize {
        self.stages * self.virtual_stages
    }

    /// Global model chunk run by pipeline rank `rank` at virtual stage `vstage`.
    pub fn chunk_of(&self, rank: usize, vstage: usize) -> usize {
        vstage * self.stages + rank
    }

    /// Pipeline rank owning chunk `c`.
    pub fn owner(&self, chunk: usize) -> usize {
        chunk % self.stages
    }

    /// Replay all ranks with buffered sends. A forward of chunk `c` needs the
    /// forward of `c-1`; a backward needs its own forward and the backward of
    /// `c+1`. Fails on duplicates, omissions or a stuck replay.
    pub fn validate(&self) -> Result<()> {
        let chunks = self.num_chunks();
        let mut seen = HashSet::new();
        for (r, ev) in self.events.iter().enumerate() {
            for e in ev {
                if e.microbatch >= self.microbatches || e.vstage >= self.virtual_stages {
                    return Err(Error::contract("schedule", format!("rank {r}: event {e} out of range")));
                }
                if !seen.insert((e.phase, e.microbatch, self.chunk_of(r, e.vstage))) {
                    return Err(Error::contract("schedule", format!("rank {r}: duplicate event {e}")));
                }
            }
        }
        if seen.len() != 2 * self.microbatches * chunks {
            return Err(Error::contract(
                "schedule",
                format!("{} events, expected {}", seen.len(), 2 * self.microbatches * chunks),
            ));
        }
        let mut done = HashSet::new();
        let mut pos = vec![0usize; self.stages];
        loop {
            let mut progressed = false;
            for r in 0..self.stages {
                while let Some(e) = self.events[r].get(pos[r]) {
                    let c = self.chunk_of(r, e.vstage);
                    let ready = match e.phase {
                        Phase::Forward => c == 0 || done.contains(&(Phase::Forward, e.microbatch, c - 1)),
                        Phase::Backward => {
                            done.contains(&(Phase::Forward, e.microbatch, c))
                                && (c + 1 == chunks || done.contains(&(Phase::Backward, e.microbatch, c + 1)))
                        }
                    };
                    if !ready {
                        break;
                    }
                    done.insert((e.phase, e.microbatch, c));
                    pos[r] += 1;
                    progressed = true;
                }
            }
            if pos.iter().zip(&self.events).all(|(&p, ev)| p == ev.len()) {
                return Ok(());
            }
            if !progressed {
                let stuck: Vec<String> = (0..self.stages)
                    .filter_map(|r| self.events[r].get(pos[r]).map(|e| format!("rank {r} at {e}")))
                    .collect();
                return Err(Error::contract("schedule", format!("deadlock: {}", stuck.join(", "))));
            }
        }
    }

    /// Largest number of forwarded but not yet backwarded microbatch chunks
    /// held by `rank`.
    pub fn peak_in_flight(&self, rank: usize) -> usize {
        let mut cur = 0usize;
        let mut peak = 0;
        for e in &self.events[rank] {
            match e.phase {
                Phase::Forward => {
                    cur += 1;
                    peak = peak.max(cur);
                }
                Phase::Backward => cur -= 1,
            }
        }
        peak
    }

    /// `rank,slot,phase,microbatch,vstage` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,slot,phase,microbatch,vstage\n");
        for (r, ev) in self.events.iter().enumerate() {
            for (slot, e) in ev.iter().enumerate() {
                let p = if e.phase == Phase::Forward { "F" } else { "B" };
                let _ = writeln!(out, "{r},{slot},{p},{},{}", e.microbatch, e.vstage);
            }
        }
        out
    }

    /// Compact rendering of one rank's timeline, e.g. `F0 F1 B0 B1`.
    pub fn timeline(&self, rank: usize) -> String {
        self.events[rank].iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpipe_two_stages() {
        let s = build_schedule(ScheduleKind::Gpipe, 2, 2, 1).unwrap();
        assert_eq!(s.timeline(0), "F0 F1 B0 B1");
        s.validate().unwrap();
    }

    #[test]
    fn single_stage_alternates() {
        for kind in [ScheduleKind::Gpipe, ScheduleKind::OneFOneB, ScheduleKind::Interleaved] {
            let s = build_schedule(kind, 1, 3, 1).unwrap();
            s.validate().unwrap();
            if kind != ScheduleKind::Gpipe {
                assert_eq!(s.timeline(0), "F0 B0 F1 B1 F2 B2");
            }
        }
    }

    #[test]
    fn one_f_one_b_peak_is_pp() {
        let s = build_schedule(ScheduleKind::OneFOneB, 4, 8, 1).unwrap();
        s.validate().unwrap();
        assert_eq!(s.peak_in_flight(0), 4);
        assert_eq!(s.peak_in_flight(3), 1);
    }

    #[test]
    fn interleaved_is_valid() {
        for (pp, m, v) in [(2, 2, 2), (2, 4, 2), (4, 8, 2), (4, 4, 3), (3, 6, 2)] {
            let s = build_schedule(ScheduleKind::Interleaved, pp, m, v).unwrap();
            s.validate().unwrap_or_else(|e| panic!("pp={pp} m={m} v={v}: {e}"));
        }
        assert!(build_schedule(ScheduleKind::Interleaved, 2, 3, 2).is_err());
    }

    #[test]
    fn broken_schedule_is_rejected() {
        let mut s = build_schedule(ScheduleKind::Gpipe, 2, 2, 1).unwrap();
        s.events[1].swap(0, 2);
        assert!(s.validate().is_err());
        let mut s = build_schedule(ScheduleKind::OneFOneB, 2, 2, 1).unwrap();
        s.events[0].pop();
        assert!(s.validate().is_err());
    }
}
