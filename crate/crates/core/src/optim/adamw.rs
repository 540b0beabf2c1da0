use half::bf16;

use crate::optim::AdamWConfig;

/// Round to the nearest bf16 value, kept in f32 storage.
pub fn bf16_round(x: f32) -> f32 {
    bf16::from_f32(x).to_f32()
}

/// fp32 master copy and Adam moments for one contiguous parameter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceState {
    pub master: Vec<f32>,
    pub exp_avg: Vec<f32>,
    pub exp_avg_sq: Vec<f32>,
}

impl SliceState {
    pub fn new(master: Vec<f32>) -> Self {
        let n = master.len();
        Self {
            master,
            exp_avg: vec![0.0; n],
            exp_avg_sq: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.master.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty()
    }

    /// Master plus both moments.
    pub fn bytes(&self) -> usize {
        12 * self.len()
    }
}

/// One AdamW update with bias correction; `t` counts updates including
/// this one. Decoupled weight decay is applied before the Adam step. Writes
/// the bf16-rounded weights into `out`.
pub fn adamw_step(state: &mut SliceState, grad: &[f32], lr: f64, t: u64, cfg: &AdamWConfig, out: &mut [f32]) {
    assert_eq!(grad.len(), state.len(), "gradient slice length");
    assert_eq!(out.len(), state.len(), "output slice length");
    let lr = lr as f32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..grad.len() {
        let g = grad[i];
        let mut p = state.master[i];
        p -= lr * cfg.weight_decay * p;
        let m = b1 * state.exp_avg[i] + (1.0 - b1) * g;
        let v = b2 * state.exp_avg_sq[i] + (1.0 - b2) * g * g;
        state.exp_avg[i] = m;
        state.exp_avg_sq[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        state.master[i] = p;
        out[i] = bf16_round(p);
    }
}
