use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::DEFAULT_TOKEN_BLOCK_SIZE;
use crate::parallel::SacPolicy;

/// Vocabulary used for the large presets.
pub const PRESET_VOCAB: usize = 50304;
/// Byte-level vocabulary: 256 bytes plus EOS.
pub const BYTE_VOCAB: usize = 257;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub head_size: usize,
    /// Dense MLP width, or per-expert width for MoE layers.
    pub intermediate_size: usize,
    /// 0 means dense.
    pub experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub context: usize,
    pub aux_loss_coeff: f64,
    pub normalize_topk_weights: bool,
    pub token_block_size: usize,
    pub sac: SacPolicy,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn preset(name: &str, layers: usize, hidden: usize, heads: usize, intermediate: usize, experts: usize, top_k: usize) -> Self {
        Self {
            name: name.to_string(),
            layers,
            hidden_size: hidden,
            heads,
            head_size: 128,
            intermediate_size: intermediate,
            experts,
            top_k,
            vocab_size: PRESET_VOCAB,
            context: 2048,
            aux_loss_coeff: 0.01,
            normalize_topk_weights: false,
            token_block_size: DEFAULT_TOKEN_BLOCK_SIZE,
            sac: SacPolicy::none(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "mula-tiny".into(),
            layers: 2,
            hidden_size: 64,
            heads: 4,
            head_size: 16,
            intermediate_size: 128,
            experts: 8,
            top_k: 2,
            vocab_size: BYTE_VOCAB,
            context: 32,
            aux_loss_coeff: 0.01,
            normalize_topk_weights: false,
            token_block_size: DEFAULT_TOKEN_BLOCK_SIZE,
            sac: SacPolicy::none(),
        }
    }

    pub fn presets() -> Vec<ModelConfig> {
        vec![
            Self::preset("mula-1b", 16, 2048, 16, 8192, 0, 0),
            Self::preset("mula-7b-a1b", 16, 2048, 16, 1024, 64, 8),
            Self::preset("mula-20b-a2b", 32, 2048, 16, 1024, 96, 8),
            Self::preset("mula-100b-a7b", 48, 3072, 24, 1536, 144, 8),
            Self::preset("mula-220b-a10b", 64, 3072, 24, 1536, 240, 8),
            Self::tiny(),
        ]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::presets()
            .into_iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let names: Vec<String> = Self::presets().into_iter().map(|c| c.name).collect();
                Error::Config(format!("unknown preset {name:?} (one of {})", names.join(", ")))
            })
    }

    pub fn is_moe(&self) -> bool {
        self.experts > 0
    }

    /// Width of the attention projections.
    pub fn attn_width(&self) -> usize {
        self.heads * self.head_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("head_size", self.head_size),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("token_block_size", self.token_block_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.context < 2 {
            return Err(Error::Config(format!("context {} too short for next-token loss", self.context)));
        }
        if self.is_moe() && (self.top_k == 0 || self.top_k > self.experts) {
            return Err(Error::Config(format!("top_k={} must be in [1, {}]", self.top_k, self.experts)));
        }
        if !(self.aux_loss_coeff.is_finite() && self.aux_loss_coeff >= 0.0) {
            return Err(Error::Config(format!("aux_loss_coeff {} must be finite and >= 0", self.aux_loss_coeff)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub active: u64,
    pub expert: u64,
}

/// Untied input embedding and output head, per-layer attention and two
/// norms, router and experts (or a dense MLP), and a final norm. Active
/// parameters count `top_k` experts per layer.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (h, v, l) = (cfg.hidden_size as u64, cfg.vocab_size as u64, cfg.layers as u64);
    let attn = 4 * h * cfg.attn_width() as u64 + 2 * h;
    let mlp = 3 * h * cfg.intermediate_size as u64;
    let shared = 2 * v * h + h;
    if !cfg.is_moe() {
        let total = shared + l * (attn + mlp);
        return ParamCount {
            total,
            active: total,
            expert: 0,
        };
    }
    let router = h * cfg.experts as u64;
    let expert = l * cfg.experts as u64 * mlp;
    let non_expert = shared + l * (attn + router);
    ParamCount {
        total: non_expert + expert,
        active: non_expert + l * cfg.top_k as u64 * mlp,
        expert,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_expert_is_all_active() {
        let mut c = ModelConfig::tiny();
        c.experts = 1;
        c.top_k = 1;
        let p = count_params(&c);
        assert_eq!(p.total, p.active);
    }

    #[test]
    fn lookup() {
        assert_eq!(ModelConfig::by_name("MULA-TINY").unwrap().vocab_size, 257);
        assert!(ModelConfig::by_name("mula-3b").is_err());
    }
}
