//! Input/output heads around the backbone: the motion adapter, the condition
//! projector, the discrete LM loss, the continuous flow-matching head with
//! its Euler sampler, and the binary exit classifier.

use crate::error::{Error, Result};
use crate::num::{Cx, InferCx, Linear, ParamId, ParamStore, Real, RmsNorm, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Motion adapter `P(z)`: two-layer MLP with GELU and a post-RMSNorm, mapping
/// VAE latents into the embedding space.
#[derive(Debug, Clone, Copy)]
pub struct Adapter {
    pub l1: Linear,
    pub l2: Linear,
    pub norm: RmsNorm,
    pub z_dim: usize,
}

impl Adapter {
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, z_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::init(store, "adapter.l1", z_dim, dim, 0.02, true, rng),
            l2: Linear::init(store, "adapter.l2", dim, dim, 0.02, true, rng),
            norm: RmsNorm::init(store, "adapter.norm", dim),
            z_dim,
        }
    }

    pub fn forward<F: Real, C: Cx<F>>(&self, cx: &mut C, z_rows: &C::T) -> C::T {
        let h = self.l1.forward(cx, z_rows);
        let h = cx.gelu(&h);
        let h = self.l2.forward(cx, &h);
        self.norm.forward(cx, &h)
    }
}

/// Projects backbone hidden states into the flow head's condition space;
/// same two-layer GELU + post-RMSNorm shape as the adapter.
#[derive(Debug, Clone, Copy)]
pub struct CondProjector {
    pub l1: Linear,
    pub l2: Linear,
    pub norm: RmsNorm,
}

impl CondProjector {
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, dim: usize, cond_dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::init(store, "projector.l1", dim, cond_dim, 0.02, true, rng),
            l2: Linear::init(store, "projector.l2", cond_dim, cond_dim, 0.02, true, rng),
            norm: RmsNorm::init(store, "projector.norm", cond_dim),
        }
    }

    pub fn forward<F: Real, C: Cx<F>>(&self, cx: &mut C, hidden_rows: &C::T) -> C::T {
        let h = self.l1.forward(cx, hidden_rows);
        let h = cx.gelu(&h);
        let h = self.l2.forward(cx, &h);
        self.norm.forward(cx, &h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowHeadConfig {
    pub hidden: usize,
    pub depth: usize,
    pub steps: usize,
    pub guidance: f32,
    pub p_uncond: f32,
    pub k_resample: usize,
}

impl Default for FlowHeadConfig {
    fn default() -> Self {
        Self { hidden: 256, depth: 6, steps: 50, guidance: 1.0, p_uncond: 0.1, k_resample: 4 }
    }
}

impl FlowHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.k_resample < 1 || !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Shape(format!(
                "flow config out of range: steps {} k {} p_uncond {}",
                self.steps, self.k_resample, self.p_uncond
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct FlowBlock {
    norm: RmsNorm,
    w1: Linear,
    w2: Linear,
}

/// MLP velocity head with feature-wise modulation: scale/shift/gate computed
/// from SiLU of (timestep embedding + projected condition). The modulation
/// and output projections start at zero so the head begins as the zero
/// velocity field.
#[derive(Debug, Clone)]
pub struct FlowHead {
    pub cfg: FlowHeadConfig,
    pub z_dim: usize,
    in_proj: Linear,
    t_l1: Linear,
    t_l2: Linear,
    mod_lin: Linear,
    blocks: Vec<FlowBlock>,
    final_norm: RmsNorm,
    final_mod: Linear,
    out: Linear,
    /// Learned `[1, hidden]` null condition for classifier-free guidance.
    pub null_cond: ParamId,
}

impl FlowHead {
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, z_dim: usize, cfg: FlowHeadConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let blocks = (0..cfg.depth)
            .map(|i| FlowBlock {
                norm: RmsNorm::init(store, &format!("flow.block{i}.norm"), h),
                w1: Linear::init(store, &format!("flow.block{i}.w1"), h, h, 0.02, true, rng),
                w2: Linear::init(store, &format!("flow.block{i}.w2"), h, h, 0.02, true, rng),
            })
            .collect();
        Self {
            cfg,
            z_dim,
            in_proj: Linear::init(store, "flow.in_proj", z_dim, h, 0.02, true, rng),
            t_l1: Linear::init(store, "flow.t_l1", h, h, 0.02, true, rng),
            t_l2: Linear::init(store, "flow.t_l2", h, h, 0.02, true, rng),
            mod_lin: Linear::init(store, "flow.mod_lin", h, 3 * h, 0.0, true, rng),
            blocks,
            final_norm: RmsNorm::init(store, "flow.final_norm", h),
            final_mod: Linear::init(store, "flow.final_mod", h, 2 * h, 0.0, true, rng),
            out: Linear::init(store, "flow.out", h, z_dim, 0.0, true, rng),
            null_cond: store.add("flow.null_cond", Tensor::zeros(vec![1, h])),
        }
    }

    /// Sinusoidal embedding of timesteps, `[n, hidden]`.
    pub fn timestep_embedding<F: Real>(&self, ts: &[f32]) -> Tensor<F> {
        let dim = self.cfg.hidden;
        let half = dim / 2;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            let x = t as f64 * 1000.0;
            for i in 0..half {
                let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
                data.push(F::fl((x * freq).sin()));
            }
            for i in 0..half {
                let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
                data.push(F::fl((x * freq).cos()));
            }
        }
        Tensor::new(vec![ts.len(), dim], data)
    }

    /// Velocity prediction `f(x_t, t, cond)`; `t_sin` is the precomputed
    /// sinusoidal embedding for the batch.
    pub fn velocity<F: Real, C: Cx<F>>(&self, cx: &mut C, x_t: &C::T, t_sin: &C::T, cond: &C::T) -> C::T {
        let tv = self.t_l1.forward(cx, t_sin);
        let tv = cx.silu(&tv);
        let tv = self.t_l2.forward(cx, &tv);
        let y = cx.add(&tv, cond);
        let ys = cx.silu(&y);
        let m = self.mod_lin.forward(cx, &ys);
        let h = self.cfg.hidden;
        let shift = cx.slice_cols(&m, 0, h);
        let scale = cx.slice_cols(&m, h, h);
        let gate = cx.slice_cols(&m, 2 * h, h);
        let mut state = self.in_proj.forward(cx, x_t);
        for blk in &self.blocks {
            let u = blk.norm.forward(cx, &state);
            let us = cx.mul(&u, &scale);
            let u = cx.add(&u, &us);
            let u = cx.add(&u, &shift);
            let f = blk.w1.forward(cx, &u);
            let f = cx.silu(&f);
            let f = blk.w2.forward(cx, &f);
            let gated = cx.mul(&gate, &f);
            state = cx.add(&state, &gated);
        }
        let fm = self.final_mod.forward(cx, &ys);
        let sh2 = cx.slice_cols(&fm, 0, h);
        let sc2 = cx.slice_cols(&fm, h, h);
        let u = self.final_norm.forward(cx, &state);
        let us = cx.mul(&u, &sc2);
        let u = cx.add(&u, &us);
        let u = cx.add(&u, &sh2);
        self.out.forward(cx, &u)
    }
}

/// The `(t, eps, drop)` draws behind one flow-matching loss evaluation.
/// Draw order per target row: one dropout uniform, then `k` pairs of
/// (uniform t, z_dim normal eps).
#[derive(Debug, Clone)]
pub struct FlowDraws {
    pub drop: Vec<bool>,
    /// `n * k` timesteps, row-major by target.
    pub t: Vec<f32>,
    /// `n * k` noise vectors.
    pub eps: Vec<Vec<f32>>,
}

impl FlowDraws {
    pub fn sample(n: usize, z_dim: usize, cfg: &FlowHeadConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.k_resample;
        let mut drop = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n * k);
        let mut eps = Vec::with_capacity(n * k);
        for _ in 0..n {
            drop.push(rng.random_range(0.0..1.0f32) < cfg.p_uncond);
            for _ in 0..k {
                t.push(rng.random_range(0.0..1.0f32));
                eps.push((0..z_dim).map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    v as f32
                }).collect());
            }
        }
        Self { drop, t, eps }
    }

    /// `x_t = (1-t) eps + t x0` for draw row `i` (target `i / k`).
    pub fn x_t(&self, i: usize, x0: &[f32]) -> Vec<f32> {
        let t = self.t[i];
        self.eps[i].iter().zip(x0).map(|(&e, &x)| (1.0 - t) * e + t * x).collect()
    }

    /// Target velocity `v = x0 - eps` for draw row `i`.
    pub fn v_target(&self, i: usize, x0: &[f32]) -> Vec<f32> {
        self.eps[i].iter().zip(x0).map(|(&e, &x)| x - e).collect()
    }
}

impl FlowHead {
    /// Flow-matching loss over `n` target latents with `k` resampled
    /// timesteps each: mean squared error between the predicted and the
    /// rectified-flow velocity, averaged over draws, targets and dimensions.
    /// With probability `p_uncond` a target's condition is replaced by the
    /// learned null embedding.
    pub fn flow_loss<F: Real, C: Cx<F>>(
        &self,
        cx: &mut C,
        cond: &C::T,
        x0: &[&[f32]],
        draws: &FlowDraws,
    ) -> C::T {
        let n = x0.len();
        let k = self.cfg.k_resample;
        assert_eq!(draws.t.len(), n * k, "draws do not match target count");
        // swap dropped conditions for the null embedding
        let kept: Vec<usize> = (0..n).filter(|&i| !draws.drop[i]).collect();
        let dropped: Vec<usize> = (0..n).filter(|&i| draws.drop[i]).collect();
        let cond_used = if dropped.is_empty() {
            cond.clone()
        } else {
            let null = cx.param(self.null_cond);
            let null_rows = cx.gather_rows(&null, &vec![0; dropped.len()]);
            if kept.is_empty() {
                cx.merge_rows(n, &[(dropped, null_rows)])
            } else {
                let kept_rows = cx.gather_rows(cond, &kept);
                cx.merge_rows(n, &[(kept, kept_rows), (dropped, null_rows)])
            }
        };
        let rep_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let cond_exp = cx.gather_rows(&cond_used, &rep_idx);
        let z = self.z_dim;
        let mut xt = Vec::with_capacity(n * k * z);
        let mut vt = Vec::with_capacity(n * k * z);
        for i in 0..n * k {
            xt.extend(draws.x_t(i, x0[i / k]));
            vt.extend(draws.v_target(i, x0[i / k]));
        }
        let xt = cx.constant(Tensor::from_f32(&Tensor::new(vec![n * k, z], xt)));
        let vt = cx.constant(Tensor::from_f32(&Tensor::new(vec![n * k, z], vt)));
        let t_sin = cx.constant(self.timestep_embedding(&draws.t));
        let pred = self.velocity(cx, &xt, &t_sin, &cond_exp);
        let diff = cx.sub(&pred, &vt);
        let sq = cx.mul(&diff, &diff);
        cx.mean_all(&sq)
    }

    /// Euler sampling with the trained head: `x` starts at seeded Gaussian
    /// noise and integrates `steps` equal steps from t=0 to t=1, with
    /// classifier-free guidance when `guidance > 0`.
    pub fn sample<F: Real>(
        &self,
        store: &ParamStore<F>,
        cond: &[f32],
        steps: usize,
        guidance: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f32>> {
        let cond_t = Tensor::from_f32(&Tensor::new(vec![1, cond.len()], cond.to_vec()));
        let null_t = store.value(self.null_cond).clone();
        let head = self;
        euler_sample(self.z_dim, steps, guidance, rng, |x, t, kind| {
            let mut cx = InferCx::new(store);
            let xt = cx.constant(Tensor::from_f32(&Tensor::new(vec![1, x.len()], x.to_vec())));
            let ts = cx.constant(head.timestep_embedding(&[t]));
            let c = match kind {
                CondKind::Cond => cx.constant(cond_t.clone()),
                CondKind::Null => cx.constant(null_t.clone()),
            };
            let v = head.velocity(&mut cx, &xt, &ts, &c);
            cx.read(&v).to_f32().data
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondKind {
    Cond,
    Null,
}

/// Euler integration of a velocity field from noise (t=0) to data (t=1).
/// State accumulates in f64 so a constant field integrates exactly at f32
/// resolution for any step count. With `guidance > 0` each step evaluates
/// the conditional and null fields and extrapolates
/// `(1+w)·f_cond − w·f_null`; at `w == 0` only the conditional field is
/// evaluated, so the two paths agree bit for bit.
pub fn euler_sample(
    z_dim: usize,
    steps: usize,
    guidance: f32,
    rng: &mut ChaCha8Rng,
    mut v_fn: impl FnMut(&[f32], f32, CondKind) -> Vec<f32>,
) -> Result<Vec<f32>> {
    assert!(steps >= 1, "euler_sample needs at least one step");
    // initial noise at f32 resolution, integrated in f64
    let mut x: Vec<f64> = (0..z_dim)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            (v as f32) as f64
        })
        .collect();
    let w = guidance as f64;
    for i in 0..steps {
        let t0 = i as f64 / steps as f64;
        let t1 = (i + 1) as f64 / steps as f64;
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let vc = v_fn(&x32, t0 as f32, CondKind::Cond);
        let v: Vec<f64> = if guidance > 0.0 {
            let vu = v_fn(&x32, t0 as f32, CondKind::Null);
            vc.iter().zip(&vu).map(|(&c, &u)| (1.0 + w) * c as f64 - w * u as f64).collect()
        } else {
            vc.iter().map(|&c| c as f64).collect()
        };
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("flow sampling diverged at step {i}")));
        }
        let dt = t1 - t0;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    Ok(x.into_iter().map(|v| v as f32).collect())
}

/// Binary stop classifier: five linear layers with Swish activations.
#[derive(Debug, Clone)]
pub struct ExitHead {
    ls: Vec<Linear>,
}

impl ExitHead {
    pub fn init<F: Real, R: Rng>(store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Self {
        let h = 128;
        let dims = [(dim, h), (h, h), (h, h), (h, h), (h, 1)];
        let ls = dims
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Linear::init(store, &format!("exit.l{i}"), a, b, 0.05, true, rng))
            .collect();
        Self { ls }
    }

    /// Logits `[n, 1]` for rows of hidden state.
    pub fn logits<F: Real, C: Cx<F>>(&self, cx: &mut C, hidden_rows: &C::T) -> C::T {
        let mut h = hidden_rows.clone();
        for (i, l) in self.ls.iter().enumerate() {
            h = l.forward(cx, &h);
            if i + 1 < self.ls.len() {
                h = cx.silu(&h);
            }
        }
        h
    }

    /// Stop probability for a single hidden row; clamped strictly inside
    /// (0, 1) even when the sigmoid saturates in f32.
    pub fn probability<F: Real>(&self, store: &ParamStore<F>, hidden: &[f32]) -> f32 {
        let mut cx = InferCx::new(store);
        let h = cx.constant(Tensor::from_f32(&Tensor::new(vec![1, hidden.len()], hidden.to_vec())));
        let l = self.logits(&mut cx, &h);
        let v = cx.read(&l).data[0].as_f64() as f32;
        (1.0 / (1.0 + (-v).exp())).clamp(f32::EPSILON, 1.0 - f32::EPSILON)
    }
}

/// Binary cross-entropy over exit labels; errors on labels outside {0,1}.
pub fn exit_loss<F: Real, C: Cx<F>>(cx: &mut C, logits: &C::T, labels: &[f32]) -> Result<C::T> {
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::InvalidMotion("exit labels must be 0 or 1".into()));
    }
    let labels: Vec<F> = labels.iter().map(|&l| F::fl(l as f64)).collect();
    Ok(cx.bce_logits_mean(logits, &labels))
}
