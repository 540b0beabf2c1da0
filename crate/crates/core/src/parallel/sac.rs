use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::Rank;
use crate::error::{Error, Result};
use crate::tensor::{Element, Float, Tensor};

/// Which sub-blocks keep only their input and recompute in backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SacPolicy {
    pub checkpoint_norm: bool,
    pub checkpoint_attention: bool,
    pub checkpoint_moe: bool,
}

impl SacPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            checkpoint_norm: true,
            checkpoint_attention: true,
            checkpoint_moe: true,
        }
    }

    pub fn any(&self) -> bool {
        self.checkpoint_norm || self.checkpoint_attention || self.checkpoint_moe
    }
}

impl fmt::Display for SacPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.checkpoint_norm {
            parts.push("norm");
        }
        if self.checkpoint_attention {
            parts.push("attn");
        }
        if self.checkpoint_moe {
            parts.push("moe");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// `none`, `all`, or a comma list of `norm`, `attn`, `moe`.
impl FromStr for SacPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = SacPolicy::none();
        for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "none" => {}
                "all" => p = SacPolicy::all(),
                "norm" => p.checkpoint_norm = true,
                "attn" | "attention" => p.checkpoint_attention = true,
                "moe" | "mlp" => p.checkpoint_moe = true,
                other => return Err(Error::Config(format!("unknown sac module {other:?} (norm, attn, moe)"))),
            }
        }
        Ok(p)
    }
}

/// A deterministic sub-block with explicit saved state.
pub trait Block<T: Element> {
    type Saved;

    fn forward(&self, rank: &mut Rank<'_>, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Saved)>;

    /// Returns the input gradient and the parameter gradients.
    fn backward(&self, rank: &mut Rank<'_>, saved: &Self::Saved, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)>;

    fn saved_bytes(saved: &Self::Saved) -> usize;
}

/// Running and peak bytes of retained activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationMeter {
    pub current: usize,
    pub peak: usize,
}

impl ActivationMeter {
    pub fn hold(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }
}

fn checksum<T: Float>(t: &Tensor<T>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in t.data() {
        h ^= v.as_f64().to_bits();
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// What a block keeps between its forward and backward.
#[derive(Clone, Debug)]
pub enum Retained<T: Element, S> {
    Full(S),
    /// Only the input; the output checksum detects non-reproducible
    /// recomputation.
    Input { input: Tensor<T>, checksum: u64 },
}

impl<T: Float, S> Retained<T, S> {
    /// Keep `saved`, or drop it in favour of `input` when `checkpoint` is set.
    pub fn keep<B: Block<T, Saved = S>>(saved: S, input: &Tensor<T>, output: &Tensor<T>, checkpoint: bool, meter: &mut ActivationMeter) -> Self {
        let r = if checkpoint {
            Retained::Input {
                input: input.clone(),
                checksum: checksum(output),
            }
        } else {
            Retained::Full(saved)
        };
        meter.hold(r.bytes::<B>());
        r
    }

    pub fn bytes<B: Block<T, Saved = S>>(&self) -> usize {
        match self {
            Retained::Full(s) => B::saved_bytes(s),
            Retained::Input { input, .. } => input.size_bytes(),
        }
    }

    /// Backward, recomputing the forward first if only the input was kept.
    pub fn backward<B: Block<T, Saved = S>>(
        self,
        block: &B,
        rank: &mut Rank<'_>,
        dy: &Tensor<T>,
        meter: &mut ActivationMeter,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        meter.release(self.bytes::<B>());
        match self {
            Retained::Full(s) => block.backward(rank, &s, dy),
            Retained::Input { input, checksum: expect } => {
                let (out, saved) = block.forward(rank, &input)?;
                if checksum(&out) != expect {
                    return Err(Error::contract("recompute", "block output changed on recomputation"));
                }
                block.backward(rank, &saved, dy)
            }
        }
    }
}
