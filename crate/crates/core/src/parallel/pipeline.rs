use crate::comm::Rank;
use crate::error::{Error, Result};
use crate::parallel::schedule::{Phase, PipelineSchedule};
use crate::tensor::{Element, Tensor};

/// The model chunks of one pipeline rank.
///
/// `forward` receives `None` only for the first chunk and returns `None`
/// only for the last; `backward` mirrors this.
pub trait PipelineStage<T: Element> {
    fn forward(&mut self, rank: &mut Rank<'_>, chunk: usize, microbatch: usize, input: Option<Tensor<T>>) -> Result<Option<Tensor<T>>>;

    fn backward(&mut self, rank: &mut Rank<'_>, chunk: usize, microbatch: usize, grad: Option<Tensor<T>>) -> Result<Option<Tensor<T>>>;
}

fn tag(chunk: usize, microbatch: usize, chunks: usize, phase: Phase) -> u64 {
    let dir = if phase == Phase::Forward { 0 } else { 1 };
    ((microbatch * chunks + chunk) as u64) << 1 | dir
}

/// Run this rank's part of `schedule`, moving activations and gradients
/// between neighbouring chunks with tagged point-to-point messages.
pub fn pp_execute<T: Element, S: PipelineStage<T>>(rank: &mut Rank<'_>, schedule: &PipelineSchedule, stage: &mut S) -> Result<()> {
    let topo = rank.topology();
    if topo.pp != schedule.stages {
        return Err(Error::Config(format!("schedule for {} stages on pp={}", schedule.stages, topo.pp)));
    }
    let me = rank.coords();
    let layout = rank.world().layout();
    let peer = |pp: usize| {
        let mut c = me;
        c.pp = pp;
        layout.rank_of(&c)
    };
    let chunks = schedule.num_chunks();
    for e in &schedule.events[me.pp] {
        let c = schedule.chunk_of(me.pp, e.vstage);
        let mb = e.microbatch;
        match e.phase {
            Phase::Forward => {
                let input = if c > 0 {
                    Some(rank.recv::<T>(peer(schedule.owner(c - 1)), tag(c, mb, chunks, Phase::Forward))?)
                } else {
                    None
                };
                let out = stage.forward(rank, c, mb, input)?;
                match (out, c + 1 < chunks) {
                    (Some(t), true) => rank.send(peer(schedule.owner(c + 1)), tag(c + 1, mb, chunks, Phase::Forward), t)?,
                    (None, false) => {}
                    (o, _) => {
                        return Err(Error::contract(
                            "pp_execute",
                            format!("chunk {c} of {chunks} forward returned output={}", o.is_some()),
                        ))
                    }
                }
            }
            Phase::Backward => {
                let grad = if c + 1 < chunks {
                    Some(rank.recv::<T>(peer(schedule.owner(c + 1)), tag(c, mb, chunks, Phase::Backward))?)
                } else {
                    None
                };
                let out = stage.backward(rank, c, mb, grad)?;
                match (out, c > 0) {
                    (Some(t), true) => rank.send(peer(schedule.owner(c - 1)), tag(c - 1, mb, chunks, Phase::Backward), t)?,
                    (None, false) => {}
                    (o, _) => {
                        return Err(Error::contract(
                            "pp_execute",
                            format!("chunk {c} backward returned grad={}", o.is_some()),
                        ))
                    }
                }
            }
        }
    }
    Ok(())
}
