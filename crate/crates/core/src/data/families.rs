//! Procedural motion families. Every generator is a pure function of
//! `(kind, params, seed)` and its caption truthfully describes the produced
//! kinematics; `classify` maps a pose back to its family and doubles as the
//! semantic oracle for generation eval.

use crate::error::{Error, Result};
use crate::repr::geom::{self, Mat3, IDENTITY};
use crate::repr::{GlobalPose, Skeleton};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f32::consts::TAU;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Walk,
    Run,
    Turn,
    Wave,
    Jump,
    Squat,
    Idle,
    WalkWave,
}

pub const ALL_KINDS: [MotionKind; 8] = [
    MotionKind::Walk,
    MotionKind::Run,
    MotionKind::Turn,
    MotionKind::Wave,
    MotionKind::Jump,
    MotionKind::Squat,
    MotionKind::Idle,
    MotionKind::WalkWave,
];

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MotionKind::Walk => "walk",
            MotionKind::Run => "run",
            MotionKind::Turn => "turn",
            MotionKind::Wave => "wave",
            MotionKind::Jump => "jump",
            MotionKind::Squat => "squat",
            MotionKind::Idle => "idle",
            MotionKind::WalkWave => "walk_wave",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MotionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "walk" => MotionKind::Walk,
            "run" => MotionKind::Run,
            "turn" => MotionKind::Turn,
            "wave" => MotionKind::Wave,
            "jump" => MotionKind::Jump,
            "squat" => MotionKind::Squat,
            "idle" => MotionKind::Idle,
            "walk_wave" => MotionKind::WalkWave,
            other => return Err(Error::UnknownFamily(other.into())),
        })
    }
}

/// Family parameters. Fields are interpreted per family (`amplitude` is the
/// wave arc, jump height or squat depth; `turn` is the signed total yaw in
/// radians) and unused fields stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub speed: f32,
    pub amplitude: f32,
    pub frequency: f32,
    pub duration_s: f32,
    pub turn: f32,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self { speed: 0.0, amplitude: 0.0, frequency: 0.0, duration_s: 4.0, turn: 0.0 }
    }
}

/// Draws parameters inside the family's documented ranges.
pub fn sample_params(kind: MotionKind, duration_s: f32, rng: &mut ChaCha8Rng) -> MotionParams {
    let mut p = MotionParams { duration_s, ..Default::default() };
    match kind {
        MotionKind::Walk => {
            p.speed = rng.random_range(0.8..1.7);
            p.frequency = 1.5 + 0.3 * p.speed;
        }
        MotionKind::Run => {
            p.speed = rng.random_range(2.2..3.6);
            p.frequency = 2.2 + 0.25 * p.speed;
        }
        MotionKind::Turn => {
            p.speed = rng.random_range(0.3..0.7);
            let mag = rng.random_range(1.2..4.0);
            p.turn = if rng.random_bool(0.5) { mag } else { -mag };
            p.frequency = 1.8;
        }
        MotionKind::Wave => {
            p.frequency = rng.random_range(1.5..3.0);
            p.amplitude = rng.random_range(0.3..0.6);
        }
        MotionKind::Jump => {
            p.amplitude = rng.random_range(0.2..0.4);
            p.frequency = rng.random_range(0.7..0.9); // jump cycles per second
        }
        MotionKind::Squat => {
            p.amplitude = rng.random_range(0.15..0.3);
            p.frequency = rng.random_range(0.4..0.7);
        }
        MotionKind::Idle => {}
        MotionKind::WalkWave => {
            p.speed = rng.random_range(0.8..1.3);
            p.frequency = rng.random_range(1.6..2.4); // wave frequency
        }
    }
    p
}

// joint indices of the humanoid22 skeleton
const L_HIP: usize = 1;
const R_HIP: usize = 2;
const SPINE1: usize = 3;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;
const L_WRIST: usize = 20;
const R_WRIST: usize = 21;

struct FramePose {
    planar: (f32, f32),
    root_y: f32,
    yaw: f32,
    local: Vec<Mat3>,
}

/// Counter-phased leg/arm swing shared by the locomotion families.
fn gait_overlay(local: &mut [Mat3], phase: f32, leg_amp: f32, arm_amp: f32, knee_amp: f32, elbow_bend: f32) {
    let swing = phase.sin();
    local[L_HIP] = geom::rot_x(-leg_amp * swing);
    local[R_HIP] = geom::rot_x(leg_amp * swing);
    // each knee flexes most while its leg swings back
    local[L_KNEE] = geom::rot_x(knee_amp * (0.5 + 0.5 * (phase + 0.6).cos()));
    local[R_KNEE] = geom::rot_x(knee_amp * (0.5 - 0.5 * (phase + 0.6).cos()));
    local[L_SHOULDER] = geom::rot_x(arm_amp * swing);
    local[R_SHOULDER] = geom::rot_x(-arm_amp * swing);
    local[L_ELBOW] = geom::rot_y(-elbow_bend);
    local[R_ELBOW] = geom::rot_y(elbow_bend);
}

/// Right arm raised overhead with the forearm oscillating.
fn wave_overlay(local: &mut [Mat3], t: f32, freq: f32, amp: f32, phase0: f32) {
    local[R_SHOULDER] = geom::rot_z(-1.9);
    local[R_ELBOW] = geom::rot_z(-0.4 + amp * (TAU * freq * t + phase0).sin());
}

fn frame_for(kind: MotionKind, p: &MotionParams, t: f32, phase0: f32, n: usize, rest_h: f32) -> FramePose {
    let mut fp = FramePose { planar: (0.0, 0.0), root_y: rest_h, yaw: 0.0, local: vec![IDENTITY; n] };
    match kind {
        MotionKind::Walk | MotionKind::Run => {
            let run = kind == MotionKind::Run;
            let phase = TAU * p.frequency * t;
            let leg_amp = if run { 0.35 + 0.08 * p.speed } else { 0.3 + 0.15 * p.speed };
            let arm_amp = if run { 0.55 } else { 0.35 };
            let knee = if run { 0.9 } else { 0.45 };
            let elbow = if run { 1.2 } else { 0.25 };
            gait_overlay(&mut fp.local, phase, leg_amp, arm_amp, knee, elbow);
            fp.planar = (0.0, p.speed * t);
            let bob = if run { 0.04 } else { 0.022 };
            fp.root_y = rest_h - bob + bob * (2.0 * phase).cos().abs();
        }
        MotionKind::Turn => {
            let phase = TAU * p.frequency * t;
            gait_overlay(&mut fp.local, phase, 0.28, 0.25, 0.4, 0.25);
            // constant yaw rate; root advances along the instantaneous facing
            let yaw_rate = p.turn / p.duration_s;
            fp.yaw = yaw_rate * t;
            // integrate an arc analytically: x(t) = v/w (1-cos wt), z(t) = v/w sin wt
            if yaw_rate.abs() > 1e-6 {
                let r = p.speed / yaw_rate;
                fp.planar = (r * (1.0 - (yaw_rate * t).cos()), r * (yaw_rate * t).sin());
            } else {
                fp.planar = (0.0, p.speed * t);
            }
            fp.root_y = rest_h - 0.015 + 0.015 * (2.0 * phase).cos();
        }
        MotionKind::Wave => {
            wave_overlay(&mut fp.local, t, p.frequency, p.amplitude, phase0);
            // slight torso sway, well under the static-filter threshold for the body
            fp.local[SPINE1] = geom::rot_z(0.03 * (TAU * 0.4 * t + phase0).sin());
        }
        MotionKind::Jump => {
            let cycle = 1.0 / p.frequency;
            let u = (t / cycle).fract();
            let (dip, height) = (0.16, p.amplitude);
            // crouch, launch, flight, recover
            let (dy, crouch) = if u < 0.3 {
                let c = 0.5 - 0.5 * (TAU * u / 0.6).cos();
                (-dip * c, c)
            } else if u < 0.42 {
                let c = (0.42 - u) / 0.12;
                (-dip * c, c)
            } else if u < 0.78 {
                let v = (u - 0.42) / 0.36;
                (height * 4.0 * v * (1.0 - v), 0.0)
            } else {
                let c = 0.5 - 0.5 * (TAU * (1.0 - u) / 0.44).cos();
                (-0.5 * dip * c, c)
            };
            fp.root_y = rest_h + dy;
            let bend = 1.1 * crouch;
            fp.local[L_KNEE] = geom::rot_x(bend);
            fp.local[R_KNEE] = geom::rot_x(bend);
            fp.local[L_HIP] = geom::rot_x(-0.6 * bend);
            fp.local[R_HIP] = geom::rot_x(-0.6 * bend);
            // arms swing up through the flight
            let up = if (0.3..0.78).contains(&u) { 1.4 } else { 0.3 };
            fp.local[L_SHOULDER] = geom::rot_z(0.35 + up * 0.8);
            fp.local[R_SHOULDER] = geom::rot_z(-0.35 - up * 0.8);
        }
        MotionKind::Squat => {
            let c = 0.5 - 0.5 * (TAU * p.frequency * t + phase0).cos();
            fp.root_y = rest_h - p.amplitude * c;
            let bend = (p.amplitude / 0.3) * 1.2 * c;
            fp.local[L_KNEE] = geom::rot_x(bend);
            fp.local[R_KNEE] = geom::rot_x(bend);
            fp.local[L_HIP] = geom::rot_x(-0.7 * bend);
            fp.local[R_HIP] = geom::rot_x(-0.7 * bend);
            // arms raise forward on the way down
            fp.local[L_SHOULDER] = geom::rot_y(-1.2 * c);
            fp.local[R_SHOULDER] = geom::rot_y(1.2 * c);
        }
        MotionKind::Idle => {
            // sway relative to the t=0 value keeps frame 0 at the canonical origin
            let s = (TAU * 0.25 * t + phase0).sin() - phase0.sin();
            fp.planar = (0.004 * s, 0.0);
            fp.local[SPINE1] = geom::rot_x(0.012 * (TAU * 0.2 * t).sin());
            fp.local[L_SHOULDER] = geom::rot_x(0.02 * s);
            fp.local[R_SHOULDER] = geom::rot_x(-0.02 * s);
        }
        MotionKind::WalkWave => {
            let phase = TAU * (1.6 + 0.3 * p.speed) * t;
            gait_overlay(&mut fp.local, phase, 0.3 + 0.12 * p.speed, 0.3, 0.45, 0.25);
            wave_overlay(&mut fp.local, t, p.frequency, 0.45, phase0);
            fp.planar = (0.0, p.speed * t);
            fp.root_y = rest_h - 0.02 + 0.02 * (2.0 * phase).cos().abs();
        }
    }
    fp
}

/// Analytic kinematics for one sample plus a truthful caption. Deterministic
/// given `(kind, params, seed)`.
pub fn generate_motion(kind: MotionKind, params: &MotionParams, seed: u64, skel: &Skeleton, fps: f32) -> (GlobalPose, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f7469);
    let phase0 = rng.random_range(-0.4..0.4f32);
    let template = rng.random_range(0..TEMPLATES_PER_FAMILY);
    let n = skel.joint_count();
    let rest_h = skel.rest_root_height();
    let frames = (params.duration_s * fps).round() as usize;
    let mut positions = Vec::with_capacity(frames);
    let mut yaw = Vec::with_capacity(frames);
    let mut local_rot = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f32 / fps;
        let fp = frame_for(kind, params, t, phase0, n, rest_h);
        let root = [fp.planar.0, fp.root_y, fp.planar.1];
        positions.push(skel.forward_kinematics(root, &geom::yaw_matrix(fp.yaw), &fp.local));
        yaw.push(fp.yaw);
        local_rot.push(fp.local);
    }
    let pose = GlobalPose { fps, positions, yaw, local_rot };
    let caption = caption_for(kind, params, template);
    (pose, caption)
}

const TEMPLATES_PER_FAMILY: usize = 5;

fn walk_pace(speed: f32) -> &'static str {
    if speed < 1.1 {
        "slowly"
    } else if speed < 1.4 {
        "at a steady pace"
    } else {
        "briskly"
    }
}

fn run_pace(speed: f32) -> &'static str {
    if speed < 2.7 {
        "at a jogging pace"
    } else if speed < 3.2 {
        "quickly"
    } else {
        "at a full sprint"
    }
}

fn turn_dir(turn: f32) -> &'static str {
    if turn > 0.0 {
        "left"
    } else {
        "right"
    }
}

fn turn_extent(turn: f32) -> &'static str {
    if turn.abs() < 2.0 {
        "partway"
    } else {
        "all the way around"
    }
}

fn wave_style(freq: f32) -> &'static str {
    if freq < 2.2 {
        "calmly"
    } else {
        "energetically"
    }
}

fn squat_style(freq: f32) -> &'static str {
    if freq < 0.55 {
        "slow"
    } else {
        "quick"
    }
}

/// Caption text for a family/parameter/template triple.
pub fn caption_for(kind: MotionKind, p: &MotionParams, template: usize) -> String {
    match kind {
        MotionKind::Walk => {
            let pace = walk_pace(p.speed);
            match template % TEMPLATES_PER_FAMILY {
                0 => format!("a person walks forward {pace}"),
                1 => format!("someone walks straight ahead {pace}"),
                2 => format!("walking {pace}, a person moves forward"),
                3 => format!("a person advances {pace} with a steady gait"),
                _ => format!("a figure walks ahead {pace}"),
            }
        }
        MotionKind::Run => {
            let pace = run_pace(p.speed);
            match template % TEMPLATES_PER_FAMILY {
                0 => format!("a person runs forward {pace}"),
                1 => format!("someone runs straight ahead {pace}"),
                2 => format!("running {pace}, a person dashes forward"),
                3 => format!("a person sprints onward {pace}"),
                _ => format!("a figure runs ahead {pace}"),
            }
        }
        MotionKind::Turn => {
            let dir = turn_dir(p.turn);
            let ext = turn_extent(p.turn);
            match template % TEMPLATES_PER_FAMILY {
                0 => format!("a person walks while turning {dir} {ext}"),
                1 => format!("someone turns {dir} {ext} while stepping"),
                2 => format!("stepping slowly, a person turns {dir} {ext}"),
                3 => format!("a person curves {dir} {ext} as they walk"),
                _ => format!("a figure walks a curve to the {dir} {ext}"),
            }
        }
        MotionKind::Wave => {
            let style = wave_style(p.frequency);
            match template % TEMPLATES_PER_FAMILY {
                0 => format!("a person stands and waves one hand {style}"),
                1 => format!("someone waves their raised hand {style}"),
                2 => format!("standing still, a person waves {style}"),
                3 => format!("a person greets by waving {style}"),
                _ => format!("a figure waves an arm {style} overhead"),
            }
        }
        MotionKind::Jump => match template % TEMPLATES_PER_FAMILY {
            0 => "a person jumps straight up repeatedly".to_string(),
            1 => "someone does vertical jumps in place".to_string(),
            2 => "a person crouches and leaps upward again and again".to_string(),
            3 => "jumping on the spot, a person bounces up".to_string(),
            _ => "a figure springs up off the ground repeatedly".to_string(),
        },
        MotionKind::Squat => {
            let style = squat_style(p.frequency);
            match template % TEMPLATES_PER_FAMILY {
                0 => format!("a person does {style} squats in place"),
                1 => format!("someone performs {style} squats"),
                2 => format!("a person repeatedly squats at a {style} tempo"),
                3 => format!("doing {style} squats, a person bends their knees"),
                _ => format!("a figure lowers into {style} squats"),
            }
        }
        MotionKind::Idle => match template % TEMPLATES_PER_FAMILY {
            0 => "a person stands still and relaxed".to_string(),
            1 => "someone idles in place barely moving".to_string(),
            2 => "a person stands quietly without moving".to_string(),
            3 => "standing at rest, a person stays put".to_string(),
            _ => "a figure remains still on the spot".to_string(),
        },
        MotionKind::WalkWave => {
            let style = wave_style(p.frequency);
            match template % TEMPLATES_PER_FAMILY {
                0 => format!("a person walks forward while waving {style}"),
                1 => format!("someone waves {style} as they walk ahead"),
                2 => format!("walking forward, a person waves a hand {style}"),
                3 => format!("a person strolls ahead waving {style}"),
                _ => format!("a figure walks on while waving {style}"),
            }
        }
    }
}

/// Kinematic features the oracle reads off a pose.
#[derive(Debug, Clone, Copy)]
pub struct PoseFeatures {
    pub mean_root_speed: f32,
    pub net_yaw: f32,
    pub max_ee_speed: f32,
    pub root_rise: f32,
    pub root_dip: f32,
    pub wrist_raised_frac: f32,
}

pub fn pose_features(pose: &GlobalPose, skel: &Skeleton) -> PoseFeatures {
    let f = pose.frames();
    let fps = pose.fps;
    let rest = skel.rest_root_height();
    let mut speed_acc = 0.0f32;
    let mut max_ee = 0.0f32;
    let mut rise = f32::MIN;
    let mut dip = f32::MAX;
    let mut raised = 0usize;
    for fi in 0..f {
        let root_y = pose.positions[fi][0][1];
        rise = rise.max(root_y - rest);
        dip = dip.min(root_y - rest);
        let lw = pose.positions[fi][L_WRIST];
        let rw = pose.positions[fi][R_WRIST];
        let ls = pose.positions[fi][L_SHOULDER];
        let rs = pose.positions[fi][R_SHOULDER];
        if lw[1] > ls[1] + 0.05 || rw[1] > rs[1] + 0.05 {
            raised += 1;
        }
        if fi > 0 {
            let (x0, z0) = pose.root_planar(fi - 1);
            let (x1, z1) = pose.root_planar(fi);
            speed_acc += ((x1 - x0).powi(2) + (z1 - z0).powi(2)).sqrt() * fps;
            for &e in &skel.end_effectors {
                let d = geom::norm(geom::sub(pose.positions[fi][e], pose.positions[fi - 1][e]));
                max_ee = max_ee.max(d * fps);
            }
        }
    }
    PoseFeatures {
        mean_root_speed: speed_acc / (f - 1).max(1) as f32,
        net_yaw: (pose.yaw[f - 1] - pose.yaw[0]).abs(),
        max_ee_speed: max_ee,
        root_rise: rise,
        root_dip: -dip.min(0.0),
        wrist_raised_frac: raised as f32 / f as f32,
    }
}

/// Decision rule from kinematic features to the best-matching family.
/// Ground-truth motions classify back to their own family; generated motions
/// are scored against the prompt's family.
pub fn classify(pose: &GlobalPose, skel: &Skeleton) -> MotionKind {
    let ft = pose_features(pose, skel);
    let waving = ft.wrist_raised_frac > 0.5;
    if ft.max_ee_speed < 0.05 {
        MotionKind::Idle
    } else if ft.mean_root_speed > 1.9 {
        MotionKind::Run
    } else if ft.net_yaw > 0.9 {
        MotionKind::Turn
    } else if ft.root_rise > 0.08 {
        MotionKind::Jump
    } else if ft.root_dip > 0.10 && ft.mean_root_speed < 0.3 {
        MotionKind::Squat
    } else if ft.mean_root_speed > 0.45 {
        if waving {
            MotionKind::WalkWave
        } else {
            MotionKind::Walk
        }
    } else if waving {
        MotionKind::Wave
    } else {
        MotionKind::Idle
    }
}

/// True when every end-effector stays below 5 cm/s for the whole sequence;
/// such under-expressive sequences are dropped for stage-3 data.
pub fn is_static(pose: &GlobalPose, skel: &Skeleton) -> bool {
    pose_features(pose, skel).max_ee_speed < 0.05
}
