//! Reconstruction metrics over global poses.

use super::geom;
use super::GlobalPose;
use crate::error::{Error, Result};

fn check_shapes(a: &GlobalPose, b: &GlobalPose) -> Result<(usize, usize)> {
    if a.frames() != b.frames() || a.joint_count() != b.joint_count() {
        return Err(Error::Shape(format!(
            "pose shapes differ: {}x{} vs {}x{}",
            a.frames(),
            a.joint_count(),
            b.frames(),
            b.joint_count()
        )));
    }
    Ok((a.frames(), a.joint_count()))
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(a: &GlobalPose, b: &GlobalPose) -> Result<f64> {
    let (f, n) = check_shapes(a, b)?;
    let mut acc = 0.0f64;
    for fi in 0..f {
        for j in 0..n {
            acc += geom::norm(geom::sub(a.positions[fi][j], b.positions[fi][j])) as f64;
        }
    }
    Ok(acc / (f * n) as f64 * 1000.0)
}

/// Mean per-joint rotation error: geodesic angle between local rotations,
/// in degrees.
pub fn mpjre(a: &GlobalPose, b: &GlobalPose) -> Result<f64> {
    let (f, n) = check_shapes(a, b)?;
    let mut acc = 0.0f64;
    for fi in 0..f {
        for j in 0..n {
            let rel = geom::mat_mul(&geom::transpose(&a.local_rot[fi][j]), &b.local_rot[fi][j]);
            let c = ((geom::trace(&rel) - 1.0) / 2.0).clamp(-1.0, 1.0);
            acc += (c as f64).acos();
        }
    }
    Ok(acc / (f * n) as f64 * 180.0 / std::f64::consts::PI)
}

/// Symmetric jerk percentage error, split into the under-reconstruction part
/// (ground truth jerkier than the prediction: smoothing) and the over part
/// (prediction jerkier: frame-level noise). `total = under + over` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SJpe {
    pub total: f64,
    pub under: f64,
    pub over: f64,
}

/// Jerk is the third-order forward difference of global joint positions; per
/// frame and joint its magnitude is the Euclidean norm of that vector.
/// Differences are taken in f64 so an identically repeated pose has exactly
/// zero jerk.
fn jerk_magnitudes(p: &GlobalPose) -> Vec<f64> {
    let f = p.frames();
    let n = p.joint_count();
    let mut out = Vec::with_capacity((f - 3) * n);
    for fi in 0..f - 3 {
        for j in 0..n {
            let mut sq = 0.0f64;
            for c in 0..3 {
                let a = p.positions[fi][j][c] as f64;
                let b = p.positions[fi + 1][j][c] as f64;
                let cc = p.positions[fi + 2][j][c] as f64;
                let d = p.positions[fi + 3][j][c] as f64;
                let jerk = d - 3.0 * cc + 3.0 * b - a;
                sq += jerk * jerk;
            }
            out.push(sq.sqrt());
        }
    }
    out
}

pub fn sjpe(pred: &GlobalPose, gt: &GlobalPose) -> Result<SJpe> {
    let (f, _) = check_shapes(pred, gt)?;
    if f < 4 {
        return Err(Error::InvalidMotion(format!("sJPE needs at least 4 frames, got {f}")));
    }
    let jp = jerk_magnitudes(pred);
    let jg = jerk_magnitudes(gt);
    let denom: f64 = jg.iter().sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("ground-truth jerk is identically zero".into()));
    }
    let mut under = 0.0f64;
    let mut over = 0.0f64;
    for (&p, &g) in jp.iter().zip(&jg) {
        under += (g - p).max(0.0);
        over += (p - g).max(0.0);
    }
    under /= denom;
    over /= denom;
    Ok(SJpe { total: under + over, under, over })
}

/// Latent storage relative to the raw representation, in percent:
/// `z_dim / (l * frame_dim) * 100`.
pub fn compression_ratio(z_dim: usize, downsample: usize, frame_dim: usize) -> f64 {
    assert!(z_dim > 0 && downsample > 0 && frame_dim > 0, "compression_ratio takes positive extents");
    z_dim as f64 / (downsample as f64 * frame_dim as f64) * 100.0
}
