use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Float, Tensor};

pub const DEFAULT_TOKEN_BLOCK_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    /// Per-expert intermediate size, before any tensor-parallel split.
    pub intermediate: usize,
    pub ep: usize,
    /// Rows of the gathered routing table scanned by one logical thread.
    pub token_block_size: usize,
    pub normalize_topk_weights: bool,
}

impl MoeConfig {
    pub fn new(num_experts: usize, top_k: usize, hidden: usize, intermediate: usize, ep: usize) -> Result<Self> {
        let cfg = Self {
            num_experts,
            top_k,
            hidden,
            intermediate,
            ep,
            token_block_size: DEFAULT_TOKEN_BLOCK_SIZE,
            normalize_topk_weights: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ep == 0 || !self.num_experts.is_multiple_of(self.ep) {
            return Err(Error::Config(format!(
                "{} experts cannot be split evenly over ep={}",
                self.num_experts, self.ep
            )));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k={} must be in [1, {}]",
                self.top_k, self.num_experts
            )));
        }
        if self.token_block_size == 0 {
            return Err(Error::Config("token_block_size must be positive".into()));
        }
        Ok(())
    }

    /// Experts hosted per EP rank (`NR`).
    pub fn experts_per_rank(&self) -> usize {
        self.num_experts / self.ep
    }

    /// Global id range `[start, end)` of the experts on EP rank `r`.
    pub fn expert_range(&self, ep_rank: usize) -> (usize, usize) {
        let nr = self.experts_per_rank();
        (ep_rank * nr, (ep_rank + 1) * nr)
    }
}

/// Merged expert weights of one rank plus the replicated router. Expert `e`
/// of EP rank `r` is global expert `r * NR + e`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights<T: Element> {
    /// `[NR, H, I]`
    pub gate: Tensor<T>,
    /// `[NR, H, I]`
    pub up: Tensor<T>,
    /// `[NR, I, H]`
    pub down: Tensor<T>,
    /// `[H, N]`
    pub router: Tensor<T>,
}

impl<T: Float> ExpertWeights<T> {
    pub fn zeros(num_local: usize, hidden: usize, intermediate: usize, num_experts: usize) -> Self {
        Self {
            gate: Tensor::zeros(&[num_local, hidden, intermediate]),
            up: Tensor::zeros(&[num_local, hidden, intermediate]),
            down: Tensor::zeros(&[num_local, intermediate, hidden]),
            router: Tensor::zeros(&[hidden, num_experts]),
        }
    }

    pub fn num_local(&self) -> usize {
        self.gate.dim(0)
    }

    pub fn hidden(&self) -> usize {
        self.gate.dim(1)
    }

    pub fn intermediate(&self) -> usize {
        self.gate.dim(2)
    }

    /// The experts owned by EP rank `ep_rank` of `ep`, and the
    /// `tp_rank`-th of `tp` slices of their intermediate dimension.
    pub fn shard(&self, ep_rank: usize, ep: usize, tp_rank: usize, tp: usize) -> Result<Self> {
        let (n, i) = (self.num_local(), self.intermediate());
        if n % ep != 0 || i % tp != 0 {
            return Err(Error::contract(
                "ExpertWeights::shard",
                format!("{n} experts / ep={ep}, intermediate {i} / tp={tp}"),
            ));
        }
        let (nr, il) = (n / ep, i / tp);
        Ok(Self {
            gate: self.gate.narrow(0, ep_rank * nr, nr).narrow(2, tp_rank * il, il),
            up: self.up.narrow(0, ep_rank * nr, nr).narrow(2, tp_rank * il, il),
            down: self.down.narrow(0, ep_rank * nr, nr).narrow(1, tp_rank * il, il),
            router: self.router.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.gate.numel() + self.up.numel() + self.down.numel() + self.router.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(MoeConfig::new(6, 2, 8, 8, 4).is_err());
        assert!(MoeConfig::new(4, 5, 8, 8, 1).is_err());
        let c = MoeConfig::new(8, 2, 8, 8, 4).unwrap();
        assert_eq!(c.experts_per_rank(), 2);
        assert_eq!(c.expert_range(3), (6, 8));
    }

    #[test]
    fn shard_picks_contiguous_experts() {
        let mut w = ExpertWeights::<f32>::zeros(4, 2, 4, 4);
        for (i, v) in w.gate.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let s = w.shard(1, 2, 1, 2).unwrap();
        assert_eq!(s.gate.shape(), &[2, 2, 2]);
        // expert 2, row 0, columns 2..4
        assert_eq!(s.gate.get(&[0, 0, 0]), w.gate.get(&[2, 0, 2]));
        assert_eq!(s.down.shape(), &[2, 2, 2]);
        assert!(w.shard(0, 3, 0, 1).is_err());
    }
}
