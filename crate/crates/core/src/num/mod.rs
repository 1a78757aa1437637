//! Dense tensors, reverse-mode autodiff, and the small set of neural
//! building blocks the rest of the crate consumes.

pub mod cx;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use cx::{Cx, InferCx, KvCache};
pub use optim::AdamW;
pub use store::{Gradients, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::{Real, Tensor};

use rand::Rng;

/// `x [n, d_in] · w [d_in, d_out] (+ bias)` with parameters held in a store.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(vec![d_in, d_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Self { w, b }
    }

    pub fn forward<F: Real, C: Cx<F>>(&self, cx: &mut C, x: &C::T) -> C::T {
        let w = cx.param(self.w);
        let y = cx.matmul(x, &w);
        match self.b {
            Some(b) => {
                let bn = cx.param(b);
                cx.add_bias(&y, &bn)
            }
            None => y,
        }
    }
}

/// RMS normalization with a learned gain, applied over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn init<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![d], F::one()));
        Self { gain, eps: 1e-6 }
    }

    pub fn forward<F: Real, C: Cx<F>>(&self, cx: &mut C, x: &C::T) -> C::T {
        let g = cx.param(self.gain);
        cx.rms_norm(x, &g, F::fl(self.eps))
    }
}
