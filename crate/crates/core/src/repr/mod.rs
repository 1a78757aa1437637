//! The per-frame motion representation and its inverse.
//!
//! A frame packs `[r_vx, r_vz, r_ang(6), local_pos(3N), local_vel(3N),
//! local_rot(6N)]` — 8 + 12N features, 272 for the default 22-joint skeleton.
//! Root planar velocity and yaw delta are expressed in the *previous* frame's
//! yaw frame; local joint positions keep absolute height and are expressed in
//! the *current* frame's yaw frame, so the root height stays recoverable.
//! Sequences are canonical when frame 0 has the root planar position at the
//! origin and yaw 0; `recover` then inverts `build` exactly (up to rounding).

pub mod geom;
pub mod metrics;

use crate::error::{Error, Result};
use geom::{Mat3, Vec3};

/// Fixed joint tree with rest-pose bone offsets in meters.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub parents: Vec<usize>,
    pub offsets: Vec<Vec3>,
    pub end_effectors: Vec<usize>,
    pub names: Vec<&'static str>,
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Per-frame feature width: 8 + 12N.
    pub fn frame_dim(&self) -> usize {
        8 + 12 * self.joint_count()
    }

    /// 22-joint humanoid; 8 + 12·22 = 272 features per frame.
    pub fn humanoid22() -> Self {
        const J: &[(&str, usize, Vec3)] = &[
            ("pelvis", 0, [0.0, 0.0, 0.0]),
            ("left_hip", 0, [0.09, -0.06, 0.0]),
            ("right_hip", 0, [-0.09, -0.06, 0.0]),
            ("spine1", 0, [0.0, 0.12, 0.0]),
            ("left_knee", 1, [0.0, -0.40, 0.0]),
            ("right_knee", 2, [0.0, -0.40, 0.0]),
            ("spine2", 3, [0.0, 0.13, 0.0]),
            ("left_ankle", 4, [0.0, -0.42, 0.0]),
            ("right_ankle", 5, [0.0, -0.42, 0.0]),
            ("spine3", 6, [0.0, 0.05, 0.0]),
            ("left_foot", 7, [0.0, -0.06, 0.12]),
            ("right_foot", 8, [0.0, -0.06, 0.12]),
            ("neck", 9, [0.0, 0.21, 0.0]),
            ("left_collar", 9, [0.07, 0.15, 0.0]),
            ("right_collar", 9, [-0.07, 0.15, 0.0]),
            ("head", 12, [0.0, 0.12, 0.0]),
            ("left_shoulder", 13, [0.10, 0.0, 0.0]),
            ("right_shoulder", 14, [-0.10, 0.0, 0.0]),
            ("left_elbow", 16, [0.26, 0.0, 0.0]),
            ("right_elbow", 17, [-0.26, 0.0, 0.0]),
            ("left_wrist", 18, [0.25, 0.0, 0.0]),
            ("right_wrist", 19, [-0.25, 0.0, 0.0]),
        ];
        let skel = Self {
            parents: J.iter().map(|j| j.1).collect(),
            offsets: J.iter().map(|j| j.2).collect(),
            end_effectors: vec![10, 11, 15, 20, 21],
            names: J.iter().map(|j| j.0).collect(),
        };
        debug_assert!(skel.parents.iter().enumerate().skip(1).all(|(i, &p)| p < i), "joint tree must be topologically ordered");
        debug_assert_eq!(skel.frame_dim(), 272);
        skel
    }

    /// Pelvis height above ground in the rest pose.
    pub fn rest_root_height(&self) -> f32 {
        // hip -> knee -> ankle -> foot chain, left side
        0.06 + 0.40 + 0.42 + 0.06
    }

    /// Forward kinematics: local joint rotations plus a root transform give
    /// global joint positions.
    pub fn forward_kinematics(&self, root_pos: Vec3, root_rot: &Mat3, local_rot: &[Mat3]) -> Vec<Vec3> {
        let n = self.joint_count();
        assert_eq!(local_rot.len(), n, "forward_kinematics needs one rotation per joint");
        let mut global_rot: Vec<Mat3> = Vec::with_capacity(n);
        let mut global_pos: Vec<Vec3> = Vec::with_capacity(n);
        for j in 0..n {
            if j == 0 {
                global_rot.push(geom::mat_mul(root_rot, &local_rot[0]));
                global_pos.push(root_pos);
            } else {
                let p = self.parents[j];
                global_rot.push(geom::mat_mul(&global_rot[p], &local_rot[j]));
                global_pos.push(geom::add(global_pos[p], geom::mat_vec(&global_rot[p], self.offsets[j])));
            }
        }
        global_pos
    }
}

/// Continuous 6-value rotation encoding: the first two columns of the matrix.
pub fn rot6d_encode(r: &Mat3) -> [f32; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Gram-Schmidt decode; always returns an orthonormal matrix with det +1, or
/// an error when the first column (or the projected second) degenerates.
pub fn rot6d_decode(v: &[f32]) -> Result<Mat3> {
    assert_eq!(v.len(), 6, "rot6d takes six values");
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = geom::norm(a1);
    if !n1.is_finite() || n1 < 1e-8 {
        return Err(Error::DegenerateRotation(format!("first column norm {n1}")));
    }
    let b1 = geom::scale(a1, 1.0 / n1);
    let proj = geom::dot(b1, a2);
    let a2o = geom::sub(a2, geom::scale(b1, proj));
    let n2 = geom::norm(a2o);
    if !n2.is_finite() || n2 < 1e-8 {
        return Err(Error::DegenerateRotation(format!("second column collapses, norm {n2}")));
    }
    let b2 = geom::scale(a2o, 1.0 / n2);
    let b3 = geom::cross(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// Global pose trajectory: positions per frame per joint, the root yaw
/// trajectory, and local joint rotations (root tilt at index 0).
#[derive(Debug, Clone)]
pub struct GlobalPose {
    pub fps: f32,
    /// `[F][N]` global joint positions, meters.
    pub positions: Vec<Vec<Vec3>>,
    /// `[F]` root facing about +y, radians.
    pub yaw: Vec<f32>,
    /// `[F][N]` local rotations.
    pub local_rot: Vec<Vec<Mat3>>,
}

impl GlobalPose {
    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    pub fn joint_count(&self) -> usize {
        self.positions.first().map(|f| f.len()).unwrap_or(0)
    }

    pub fn root_planar(&self, f: usize) -> (f32, f32) {
        (self.positions[f][0][0], self.positions[f][0][2])
    }
}

/// Frame-major feature matrix (`F x (8+12N)`) plus its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f32,
    pub joints: usize,
    pub data: Vec<f32>,
}

impl MotionSequence {
    pub fn dim(&self) -> usize {
        8 + 12 * self.joints
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let d = self.dim();
        &self.data[f * d..(f + 1) * d]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let d = self.dim();
        &mut self.data[f * d..(f + 1) * d]
    }

    /// Feature layout offsets: root planar velocity block is `0..2`, root
    /// angular 6d `2..8`, then positions, velocities, rotations.
    pub fn pos_offset(&self) -> usize {
        8
    }
    pub fn vel_offset(&self) -> usize {
        8 + 3 * self.joints
    }
    pub fn rot_offset(&self) -> usize {
        8 + 6 * self.joints
    }

    /// No NaN/Inf anywhere and every rotation block decodes.
    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMotion("non-finite feature".into()));
        }
        let d = self.dim();
        let ro = self.rot_offset();
        for f in 0..self.frames() {
            let frame = &self.data[f * d..(f + 1) * d];
            rot6d_decode(&frame[2..8])?;
            for j in 0..self.joints {
                rot6d_decode(&frame[ro + 6 * j..ro + 6 * j + 6])?;
            }
        }
        Ok(())
    }
}

/// Encodes a global pose trajectory into per-frame features. Frame 0 carries
/// zero velocities and an identity yaw delta.
pub fn build_representation(pose: &GlobalPose, skel: &Skeleton) -> Result<MotionSequence> {
    let f_total = pose.frames();
    let n = skel.joint_count();
    if f_total < 2 {
        return Err(Error::InvalidMotion(format!("need at least 2 frames, got {f_total}")));
    }
    if pose.joint_count() != n || pose.yaw.len() != f_total || pose.local_rot.len() != f_total {
        return Err(Error::Shape("pose joint/yaw/rotation extents disagree with skeleton".into()));
    }
    let d = 8 + 12 * n;
    let mut data = vec![0.0f32; f_total * d];
    for f in 0..f_total {
        let frame = &mut data[f * d..(f + 1) * d];
        let (rx, rz) = pose.root_planar(f);
        if f > 0 {
            let (px, pz) = pose.root_planar(f - 1);
            let inv_prev = geom::yaw_matrix(-pose.yaw[f - 1]);
            let v = geom::mat_vec(&inv_prev, [rx - px, 0.0, rz - pz]);
            frame[0] = v[0];
            frame[1] = v[2];
            let delta = geom::yaw_matrix(pose.yaw[f] - pose.yaw[f - 1]);
            frame[2..8].copy_from_slice(&rot6d_encode(&delta));
        } else {
            frame[2..8].copy_from_slice(&rot6d_encode(&geom::IDENTITY));
        }
        let inv_cur = geom::yaw_matrix(-pose.yaw[f]);
        for j in 0..n {
            let p = pose.positions[f][j];
            let local = geom::mat_vec(&inv_cur, [p[0] - rx, p[1], p[2] - rz]);
            frame[8 + 3 * j..8 + 3 * j + 3].copy_from_slice(&local);
        }
        if f > 0 {
            let inv_prev = geom::yaw_matrix(-pose.yaw[f - 1]);
            let vo = 8 + 3 * n;
            for j in 0..n {
                let dv = geom::sub(pose.positions[f][j], pose.positions[f - 1][j]);
                let local = geom::mat_vec(&inv_prev, dv);
                frame[vo + 3 * j..vo + 3 * j + 3].copy_from_slice(&local);
            }
        }
        let ro = 8 + 6 * n;
        for j in 0..n {
            frame[ro + 6 * j..ro + 6 * j + 6].copy_from_slice(&rot6d_encode(&pose.local_rot[f][j]));
        }
    }
    Ok(MotionSequence { fps: pose.fps, joints: n, data })
}

/// Inverse of [`build_representation`] starting from the canonical initial
/// state (planar origin, yaw 0).
pub fn recover_motion(m: &MotionSequence, skel: &Skeleton) -> Result<GlobalPose> {
    recover_motion_from(m, skel, 0.0, (0.0, 0.0))
}

/// Integrates yaw, then planar translation, then places local joint positions
/// back into the global frame.
pub fn recover_motion_from(
    m: &MotionSequence,
    skel: &Skeleton,
    yaw0: f32,
    planar0: (f32, f32),
) -> Result<GlobalPose> {
    let n = skel.joint_count();
    if m.joints != n {
        return Err(Error::Shape(format!("sequence has {} joints, skeleton {}", m.joints, n)));
    }
    let f_total = m.frames();
    let d = m.dim();
    let mut yaw = Vec::with_capacity(f_total);
    let mut positions = Vec::with_capacity(f_total);
    let mut local_rot = Vec::with_capacity(f_total);
    let mut psi = yaw0;
    let mut planar = planar0;
    for f in 0..f_total {
        let frame = &m.data[f * d..(f + 1) * d];
        let delta = rot6d_decode(&frame[2..8])?;
        let step = geom::mat_vec(&geom::yaw_matrix(psi), [frame[0], 0.0, frame[1]]);
        // root state for frame f integrates the previous frame's yaw frame
        planar = (planar.0 + step[0], planar.1 + step[2]);
        psi += geom::yaw_of(&delta);
        if f == 0 {
            // frame 0 carries no delta by construction; keep the initial state
            psi = yaw0;
            planar = planar0;
        }
        let rot = geom::yaw_matrix(psi);
        let mut frame_pos = Vec::with_capacity(n);
        for j in 0..n {
            let local = [frame[8 + 3 * j], frame[8 + 3 * j + 1], frame[8 + 3 * j + 2]];
            let g = geom::mat_vec(&rot, local);
            frame_pos.push([g[0] + planar.0, g[1], g[2] + planar.1]);
        }
        let ro = m.rot_offset();
        let mut frame_rot = Vec::with_capacity(n);
        for j in 0..n {
            frame_rot.push(rot6d_decode(&frame[ro + 6 * j..ro + 6 * j + 6])?);
        }
        positions.push(frame_pos);
        yaw.push(psi);
        local_rot.push(frame_rot);
    }
    Ok(GlobalPose { fps: m.fps, positions, yaw, local_rot })
}
