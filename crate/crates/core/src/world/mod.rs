//! Synthetic manipulation world: a two-link planar arm with a parallel
//! gripper pushing around a few rigid objects on a unit-square table, seen by
//! one wrist camera and two fixed external cameras.
//!
//! All state is kept on the f32 grid, so episodes stored as f32 replay
//! bit-exactly.

mod dataset;
mod policy;
mod render;

pub use dataset::{generate_dataset, generate_episode, load_dataset, save_dataset, Dataset, Episode};
pub use policy::ScriptedPolicy;
pub use render::{render_views, Camera, ViewSet, LABEL_BACKGROUND, LABEL_OBJECT, LABEL_ROBOT};

use std::f64::consts::PI;

use crate::error::{config_err, Result};

/// Number of camera views.
pub const VIEWS: usize = 3;
/// Width of an action row.
pub const ACTION_DIM: usize = 7;

pub const BASE: (f64, f64) = (0.5, 0.0);
pub const LINK1: f64 = 0.5;
pub const LINK2: f64 = 0.45;
const MIN_REACH: f64 = 0.12;
const MAX_REACH: f64 = 0.93;
const EE_LO: f64 = 0.05;
const EE_HI: f64 = 0.95;
/// Largest end-effector to object-centre distance at which closing grasps.
pub const GRASP_RADIUS: f64 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// 3 for RGB, 1 for luminance.
    pub channels: usize,
    pub n_objects: usize,
    /// Per-step bound on |dx| and |dy| of an action.
    pub max_translation: f64,
    /// Per-step bound on |dθ|.
    pub max_rotation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { height: 32, width: 32, channels: 3, n_objects: 2, max_translation: 0.1, max_rotation: 0.2 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(config_err!("images must be at least 8×8, got {}×{}", self.height, self.width));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(config_err!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.n_objects > 8 {
            return Err(config_err!("at most 8 objects are supported, got {}", self.n_objects));
        }
        if !(self.max_translation > 0.0 && self.max_rotation >= 0.0) {
            return Err(config_err!("action bounds must be positive"));
        }
        Ok(())
    }

    /// Length of the flat f32 encoding of a [`SceneState`].
    pub fn state_len(&self) -> usize {
        8 + 4 * self.n_objects
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Bar,
}

impl Shape {
    pub fn from_index(i: usize) -> Shape {
        match i % 3 {
            0 => Shape::Disc,
            1 => Shape::Square,
            _ => Shape::Bar,
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub shape: Shape,
}

/// Where a held object sits in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grasp {
    pub object: usize,
    pub offset: (f64, f64),
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub joints: [f64; 2],
    pub wrist: f64,
    pub gripper_closed: bool,
    pub grasp: Option<Grasp>,
    pub objects: Vec<ObjectPose>,
}

/// End-effector pose in scene coordinates plus gripper state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub closed: bool,
}

/// One control step: planar end-effector displacement, wrist rotation and a
/// gripper command (+1 close, −1 open, 0 keep), padded to seven entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn new(dx: f64, dy: f64, dtheta: f64, grip: f64) -> Self {
        let mut a = [0.0; ACTION_DIM];
        a[0] = dx;
        a[1] = dy;
        a[2] = dtheta;
        a[3] = grip;
        for v in &mut a {
            *v = f32r(*v);
        }
        Action(a)
    }
    pub fn zero() -> Self {
        Action([0.0; ACTION_DIM])
    }
    pub fn dx(&self) -> f64 {
        self.0[0]
    }
    pub fn dy(&self) -> f64 {
        self.0[1]
    }
    pub fn dtheta(&self) -> f64 {
        self.0[2]
    }
    pub fn grip(&self) -> f64 {
        self.0[3]
    }
}

#[inline]
pub(crate) fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub(crate) fn rotate(v: (f64, f64), a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * v.0 - s * v.1, s * v.0 + c * v.1)
}

pub fn forward_kinematics(joints: [f64; 2]) -> ((f64, f64), (f64, f64)) {
    let elbow = (BASE.0 + LINK1 * joints[0].cos(), BASE.1 + LINK1 * joints[0].sin());
    let a = joints[0] + joints[1];
    (elbow, (elbow.0 + LINK2 * a.cos(), elbow.1 + LINK2 * a.sin()))
}

/// Joint angles reaching `target`, elbow bent to the right.
pub fn inverse_kinematics(target: (f64, f64)) -> [f64; 2] {
    let (x, y) = (target.0 - BASE.0, target.1 - BASE.1);
    let r2 = x * x + y * y;
    let c2 = ((r2 - LINK1 * LINK1 - LINK2 * LINK2) / (2.0 * LINK1 * LINK2)).clamp(-1.0, 1.0);
    let q2 = -c2.acos();
    let q1 = y.atan2(x) - (LINK2 * q2.sin()).atan2(LINK1 + LINK2 * q2.cos());
    [wrap_angle(q1), wrap_angle(q2)]
}

/// Pulls a target into the table box and the arm's reachable annulus.
pub fn clamp_target(p: (f64, f64)) -> (f64, f64) {
    let mut q = (p.0.clamp(EE_LO, EE_HI), p.1.clamp(EE_LO, EE_HI));
    let (dx, dy) = (q.0 - BASE.0, q.1 - BASE.1);
    let r = (dx * dx + dy * dy).sqrt();
    if r > MAX_REACH || r < MIN_REACH {
        let s = r.clamp(MIN_REACH, MAX_REACH) / r.max(1e-12);
        q = (BASE.0 + dx * s, BASE.1 + dy * s);
    }
    q
}

impl SceneState {
    pub fn ee(&self) -> (f64, f64) {
        forward_kinematics(self.joints).1
    }

    pub fn ee_pose(&self) -> EePose {
        let (x, y) = self.ee();
        EePose { x, y, theta: self.wrist, closed: self.gripper_closed }
    }

    /// State with the arm at `ee` and objects as given, gripper open.
    pub fn new(ee: (f64, f64), wrist: f64, objects: Vec<ObjectPose>) -> Self {
        let mut s = SceneState {
            joints: inverse_kinematics(clamp_target(ee)),
            wrist: wrap_angle(wrist),
            gripper_closed: false,
            grasp: None,
            objects,
        };
        s.round();
        s
    }

    fn round(&mut self) {
        self.joints = [f32r(self.joints[0]), f32r(self.joints[1])];
        self.wrist = f32r(self.wrist);
        if let Some(g) = &mut self.grasp {
            g.offset = (f32r(g.offset.0), f32r(g.offset.1));
            g.theta = f32r(g.theta);
        }
        for o in &mut self.objects {
            o.x = f32r(o.x);
            o.y = f32r(o.y);
            o.theta = f32r(o.theta);
        }
    }

    pub fn encode(&self, out: &mut Vec<f32>) {
        out.extend([self.joints[0], self.joints[1], self.wrist].map(|v| v as f32));
        out.push(self.gripper_closed as u8 as f32);
        match self.grasp {
            Some(g) => out.extend([g.object as f32, g.offset.0 as f32, g.offset.1 as f32, g.theta as f32]),
            None => out.extend([-1.0, 0.0, 0.0, 0.0]),
        }
        for o in &self.objects {
            out.extend([o.x as f32, o.y as f32, o.theta as f32, o.shape.index() as f32]);
        }
    }

    pub fn decode(v: &[f32], n_objects: usize) -> Option<Self> {
        if v.len() != 8 + 4 * n_objects {
            return None;
        }
        let g = v[4];
        let grasp = if g < 0.0 {
            None
        } else {
            let object = g as usize;
            if object >= n_objects {
                return None;
            }
            Some(Grasp { object, offset: (v[5] as f64, v[6] as f64), theta: v[7] as f64 })
        };
        let objects = (0..n_objects)
            .map(|i| {
                let o = &v[8 + 4 * i..12 + 4 * i];
                ObjectPose { x: o[0] as f64, y: o[1] as f64, theta: o[2] as f64, shape: Shape::from_index(o[3] as usize) }
            })
            .collect();
        Some(SceneState {
            joints: [v[0] as f64, v[1] as f64],
            wrist: v[2] as f64,
            gripper_closed: v[3] != 0.0,
            grasp,
            objects,
        })
    }
}

/// Kinematic update. The end effector moves by the clamped displacement
/// (projected back into the reachable set), the wrist turns, the gripper
/// follows its command, and a grasped object moves rigidly with the gripper.
pub fn step_dynamics(config: &WorldConfig, state: &SceneState, action: &Action) -> SceneState {
    let mut next = state.clone();
    let t = config.max_translation;
    let dx = action.dx().clamp(-t, t);
    let dy = action.dy().clamp(-t, t);
    let dth = action.dtheta().clamp(-config.max_rotation, config.max_rotation);

    if dx != 0.0 || dy != 0.0 {
        let ee = state.ee();
        next.joints = inverse_kinematics(clamp_target((ee.0 + dx, ee.1 + dy)));
    }
    if dth != 0.0 {
        next.wrist = wrap_angle(state.wrist + dth);
    }
    next.round();

    let grip = action.grip();
    if grip > 0.5 && !state.gripper_closed {
        next.gripper_closed = true;
        let ee = next.ee();
        let nearest = next
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, (o.x - ee.0).hypot(o.y - ee.1)))
            .filter(|&(_, d)| d <= GRASP_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = nearest {
            let o = next.objects[i];
            next.grasp = Some(Grasp {
                object: i,
                offset: rotate((o.x - ee.0, o.y - ee.1), -next.wrist),
                theta: wrap_angle(o.theta - next.wrist),
            });
        }
    } else if grip < -0.5 && state.gripper_closed {
        next.gripper_closed = false;
        next.grasp = None;
    }

    if let Some(g) = next.grasp {
        let moved = next.joints != state.joints || next.wrist != state.wrist || state.grasp.is_none();
        if moved {
            let ee = next.ee();
            let off = rotate(g.offset, next.wrist);
            let o = &mut next.objects[g.object];
            o.x = (ee.0 + off.0).clamp(0.0, 1.0);
            o.y = (ee.1 + off.1).clamp(0.0, 1.0);
            o.theta = wrap_angle(next.wrist + g.theta);
        }
    }
    next.round();
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneState {
        SceneState::new(
            (0.4, 0.5),
            0.3,
            vec![
                ObjectPose { x: 0.4, y: 0.52, theta: 0.1, shape: Shape::Disc },
                ObjectPose { x: 0.7, y: 0.7, theta: -0.4, shape: Shape::Bar },
            ],
        )
    }

    #[test]
    fn kinematics_round_trip() {
        for &p in &[(0.5, 0.5), (0.2, 0.8), (0.8, 0.3), (0.3, 0.2)] {
            let (_, ee) = forward_kinematics(inverse_kinematics(p));
            assert!((ee.0 - p.0).abs() < 1e-12 && (ee.1 - p.1).abs() < 1e-12, "{p:?} -> {ee:?}");
        }
    }

    #[test]
    fn zero_action_keeps_state() {
        let cfg = WorldConfig::default();
        let mut s = scene();
        assert_eq!(step_dynamics(&cfg, &s, &Action::zero()), s);
        s = step_dynamics(&cfg, &s, &Action::new(0.0, 0.0, 0.0, 1.0));
        assert!(s.grasp.is_some());
        assert_eq!(step_dynamics(&cfg, &s, &Action::zero()), s);
    }

    #[test]
    fn translation_moves_end_effector() {
        let cfg = WorldConfig::default();
        let s = scene();
        let n = step_dynamics(&cfg, &s, &Action::new(0.1, 0.0, 0.0, 0.0));
        let (a, b) = (s.ee(), n.ee());
        assert!((b.0 - a.0 - 0.1).abs() < 1e-6 && (b.1 - a.1).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_targets_are_clamped() {
        let cfg = WorldConfig::default();
        let mut s = scene();
        for _ in 0..40 {
            s = step_dynamics(&cfg, &s, &Action::new(0.1, 0.1, 0.0, 0.0));
        }
        let ee = s.ee();
        assert!(ee.0 <= EE_HI + 1e-6 && ee.1 <= EE_HI + 1e-6);
        assert!(((ee.0 - BASE.0).hypot(ee.1 - BASE.1)) <= MAX_REACH + 1e-6);
    }

    #[test]
    fn grasped_object_follows_rigidly() {
        let cfg = WorldConfig::default();
        let mut s = step_dynamics(&cfg, &scene(), &Action::new(0.0, 0.0, 0.0, 1.0));
        let g = s.grasp.unwrap();
        assert_eq!(g.object, 0);
        let ee0 = s.ee();
        let rel0 = (s.objects[0].x - ee0.0, s.objects[0].y - ee0.1);
        for _ in 0..5 {
            s = step_dynamics(&cfg, &s, &Action::new(0.03, -0.02, 0.0, 0.0));
            let ee = s.ee();
            let rel = (s.objects[0].x - ee.0, s.objects[0].y - ee.1);
            assert!((rel.0 - rel0.0).abs() < 1e-6 && (rel.1 - rel0.1).abs() < 1e-6);
        }
        let other = s.objects[1];
        s = step_dynamics(&cfg, &s, &Action::new(0.0, 0.0, 0.5, 0.0));
        let ee = s.ee();
        let off = rotate(g.offset, s.wrist);
        assert!((s.objects[0].x - ee.0 - off.0).abs() < 1e-6 && (s.objects[0].y - ee.1 - off.1).abs() < 1e-6);
        assert_eq!(s.objects[1], other);
        s = step_dynamics(&cfg, &s, &Action::new(0.0, 0.0, 0.0, -1.0));
        assert!(s.grasp.is_none() && !s.gripper_closed);
        let before = s.objects[0];
        s = step_dynamics(&cfg, &s, &Action::new(0.05, 0.0, 0.0, 0.0));
        assert_eq!(s.objects[0], before);
    }

    #[test]
    fn closing_away_from_objects_grasps_nothing() {
        let cfg = WorldConfig::default();
        let s = SceneState::new((0.2, 0.3), 0.0, scene().objects);
        let n = step_dynamics(&cfg, &s, &Action::new(0.0, 0.0, 0.0, 1.0));
        assert!(n.gripper_closed && n.grasp.is_none());
    }

    #[test]
    fn state_encoding_round_trips() {
        let cfg = WorldConfig::default();
        let s = step_dynamics(&cfg, &scene(), &Action::new(0.0, 0.0, 0.0, 1.0));
        let mut v = Vec::new();
        s.encode(&mut v);
        assert_eq!(v.len(), cfg.state_len());
        assert_eq!(SceneState::decode(&v, 2).unwrap(), s);
    }
}
