use crate::comm::Rank;
use crate::error::{Error, Result};
use crate::moe::{fast_moe_backward, fast_moe_forward, load_balance_loss, AuxStats, ExpertWeights, MoeConfig, MoeSaved};
use crate::parallel::{
    tp_allreduce, tp_attention_backward, tp_attention_forward, tp_col_linear, tp_row_linear, tp_row_linear_backward,
    AttnSaved, AttnShape, AttnWeights, Block,
};
use crate::tensor::{ops, Element, Float, Tensor};

/// RMSNorm with a learned scale.
#[derive(Clone, Copy, Debug)]
pub struct NormBlock<'a, T: Element> {
    pub weight: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct NormSaved<T: Element> {
    pub x: Tensor<T>,
    /// Reciprocal RMS per row.
    pub rstd: Vec<T>,
}

impl<T: Float> Block<T> for NormBlock<'_, T> {
    type Saved = NormSaved<T>;

    fn forward(&self, _rank: &mut Rank<'_>, x: &Tensor<T>) -> Result<(Tensor<T>, NormSaved<T>)> {
        let h = self.weight.numel();
        if x.shape().last() != Some(&h) {
            return Err(Error::shape("rmsnorm", format!("x {:?}, weight {:?}", x.shape(), self.weight.shape())));
        }
        let hf = T::lit(h as f64);
        let eps = T::lit(ops::RMS_EPS);
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for row in out.data_mut().chunks_mut(h) {
            let mut ss = T::zero();
            for &v in row.iter() {
                ss += v * v;
            }
            let r = T::one() / (ss / hf + eps).sqrt();
            for (v, &w) in row.iter_mut().zip(self.weight.data()) {
                *v = *v * r * w;
            }
            rstd.push(r);
        }
        Ok((out, NormSaved { x: x.clone(), rstd }))
    }

    fn backward(&self, _rank: &mut Rank<'_>, s: &NormSaved<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let h = self.weight.numel();
        let hf = T::lit(h as f64);
        let w = self.weight.data();
        let mut dx = Tensor::zeros(s.x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        for (((xr, gr), dxr), &r) in s
            .x
            .data()
            .chunks(h)
            .zip(dy.data().chunks(h))
            .zip(dx.data_mut().chunks_mut(h))
            .zip(&s.rstd)
        {
            let mut dot = T::zero();
            for j in 0..h {
                dot += gr[j] * w[j] * xr[j];
            }
            let coef = r * r * r * dot / hf;
            for j in 0..h {
                dxr[j] = r * w[j] * gr[j] - xr[j] * coef;
            }
            for (j, d) in dw.data_mut().iter_mut().enumerate() {
                *d += gr[j] * xr[j] * r;
            }
        }
        Ok((dx, vec![dw]))
    }

    fn saved_bytes(s: &NormSaved<T>) -> usize {
        s.x.size_bytes() + s.rstd.len() * std::mem::size_of::<T>()
    }
}

/// Causal self-attention over this rank's heads.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlock<'a, T: Element> {
    pub w: AttnWeights<'a, T>,
    pub shape: AttnShape,
}

impl<T: Float> Block<T> for AttnBlock<'_, T> {
    type Saved = AttnSaved<T>;

    fn forward(&self, rank: &mut Rank<'_>, x: &Tensor<T>) -> Result<(Tensor<T>, AttnSaved<T>)> {
        tp_attention_forward(rank, x, &self.w, &self.shape)
    }

    fn backward(&self, rank: &mut Rank<'_>, s: &AttnSaved<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (dx, g) = tp_attention_backward(rank, s, &self.w, dy, &self.shape)?;
        Ok((dx, g.into()))
    }

    fn saved_bytes(s: &AttnSaved<T>) -> usize {
        s.bytes()
    }
}

/// SwiGLU MLP with column-parallel gate/up and row-parallel down.
#[derive(Clone, Copy, Debug)]
pub struct DenseMlpBlock<'a, T: Element> {
    pub gate: &'a Tensor<T>,
    pub up: &'a Tensor<T>,
    pub down: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct MlpSaved<T: Element> {
    pub x: Tensor<T>,
    pub g: Tensor<T>,
    pub u: Tensor<T>,
    pub m: Tensor<T>,
}

impl<T: Float> Block<T> for DenseMlpBlock<'_, T> {
    type Saved = MlpSaved<T>;

    fn forward(&self, rank: &mut Rank<'_>, x: &Tensor<T>) -> Result<(Tensor<T>, MlpSaved<T>)> {
        let g = tp_col_linear(x, self.gate)?;
        let u = tp_col_linear(x, self.up)?;
        let m = ops::silu_glu(&g, &u)?;
        let y = tp_row_linear(rank, &m, self.down)?;
        Ok((y, MlpSaved { x: x.clone(), g, u, m }))
    }

    fn backward(&self, rank: &mut Rank<'_>, s: &MlpSaved<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (dm, ddown) = tp_row_linear_backward(&s.m, self.down, dy)?;
        let (dg, du) = ops::silu_glu_backward(&s.g, &s.u, &dm)?;
        let mut dx = ops::matmul_nt(&dg, self.gate)?;
        dx.add_assign(&ops::matmul_nt(&du, self.up)?)?;
        let dx = tp_allreduce(rank, dx)?;
        let dgate = ops::matmul_tn(&s.x, &dg)?;
        let dup = ops::matmul_tn(&s.x, &du)?;
        Ok((dx, vec![dgate, dup, ddown]))
    }

    fn saved_bytes(s: &MlpSaved<T>) -> usize {
        s.x.size_bytes() + s.g.size_bytes() + s.u.size_bytes() + s.m.size_bytes()
    }
}

/// Sparse MoE block with the load-balancing loss of its router.
#[derive(Clone, Debug)]
pub struct MoeBlock<T: Element> {
    pub w: ExpertWeights<T>,
    pub cfg: MoeConfig,
    pub fur: bool,
    /// Tokens per sequence; the auxiliary loss is taken per sequence.
    pub seq_len: usize,
    /// Multiplier on the summed per-sequence auxiliary losses.
    pub aux_scale: f64,
}

#[derive(Clone, Debug)]
pub struct MoeBlockSaved<T: Element> {
    pub moe: MoeSaved<T>,
    pub stats: AuxStats,
    /// Unscaled sum of per-sequence auxiliary losses.
    pub aux_sum: f64,
    pub aux_grad: Option<Tensor<T>>,
}

impl<T: Float> Block<T> for MoeBlock<T> {
    type Saved = MoeBlockSaved<T>;

    fn forward(&self, rank: &mut Rank<'_>, x: &Tensor<T>) -> Result<(Tensor<T>, MoeBlockSaved<T>)> {
        let (y, moe, stats) = fast_moe_forward(rank, x, &self.w, &self.cfg, self.fur)?;
        let (aux_sum, aux_grad) = match &moe.router {
            Some(r) if self.aux_scale != 0.0 => {
                let (sum, mut g, _) = load_balance_loss(&r.probs, &moe.indices, self.seq_len)?;
                g.scale(T::lit(self.aux_scale));
                (sum, Some(g))
            }
            Some(r) => (load_balance_loss(&r.probs, &moe.indices, self.seq_len)?.0, None),
            None => (0.0, None),
        };
        Ok((
            y,
            MoeBlockSaved {
                moe,
                stats,
                aux_sum,
                aux_grad,
            },
        ))
    }

    fn backward(&self, rank: &mut Rank<'_>, s: &MoeBlockSaved<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let g = fast_moe_backward(rank, dy, &s.moe, &self.w, s.aux_grad.as_ref())?;
        Ok((g.input, vec![g.experts.router, g.experts.gate, g.experts.up, g.experts.down]))
    }

    fn saved_bytes(s: &MoeBlockSaved<T>) -> usize {
        let m = &s.moe;
        let a = &m.acts;
        let mut b = m.input.size_bytes()
            + m.indices.size_bytes()
            + m.gathered_input.size_bytes()
            + m.gathered_weights.size_bytes()
            + a.mlp_in.size_bytes()
            + a.gate_out.size_bytes()
            + a.up_out.size_bytes()
            + a.mul_out.size_bytes()
            + a.mlp_out.size_bytes();
        if let Some(r) = &m.router {
            b += r.logits.size_bytes() + r.probs.size_bytes() + r.weights.size_bytes() + r.topk_probs.size_bytes();
        }
        if let Some(g) = &s.aux_grad {
            b += g.size_bytes();
        }
        b
    }
}
