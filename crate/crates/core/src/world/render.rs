//! Rasterization of a scene into the three camera views.
//!
//! Every pixel is classified by sampling its centre, so masks are exact: a
//! pixel is robot if any arm part covers the centre, otherwise object if any
//! object does, otherwise background.

use std::f64::consts::FRAC_PI_2;

use super::{forward_kinematics, rotate, SceneState, Shape, WorldConfig, BASE, VIEWS};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_OBJECT: u8 = 1;
pub const LABEL_ROBOT: u8 = 2;

const LINK_HALF_WIDTH: f64 = 0.028;
const PALM_HALF: f64 = 0.03;
const FINGER_HALF: (f64, f64) = (0.036, 0.012);
const FINGER_OPEN: f64 = 0.058;
const FINGER_CLOSED: f64 = 0.04;
const WRIST_ZOOM: f64 = 2.5;

/// Rendered frames for all views of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    /// `[view][channel][y][x]`, values in [0, 1].
    pub frames: Vec<f32>,
    /// `[view][y][x]`, one of the `LABEL_*` values.
    pub labels: Vec<u8>,
}

impl ViewSet {
    pub fn frame(&self, view: usize, config: &WorldConfig) -> &[f32] {
        let n = config.channels * config.height * config.width;
        &self.frames[view * n..(view + 1) * n]
    }

    pub fn labels_of(&self, view: usize, config: &WorldConfig) -> &[u8] {
        let n = config.height * config.width;
        &self.labels[view * n..(view + 1) * n]
    }

    pub fn object_mask(&self, view: usize, config: &WorldConfig) -> Vec<bool> {
        self.labels_of(view, config).iter().map(|&l| l == LABEL_OBJECT).collect()
    }

    pub fn robot_mask(&self, view: usize, config: &WorldConfig) -> Vec<bool> {
        self.labels_of(view, config).iter().map(|&l| l == LABEL_ROBOT).collect()
    }
}

/// Orthographic camera looking down at the table: image centre at `center`,
/// image axes rotated by `angle`, `zoom` image widths per scene unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub center: (f64, f64),
    pub angle: f64,
    pub zoom: f64,
}

impl Camera {
    /// Camera for `view` (0 wrist, 1 top-down, 2 side-rotated) given the gripper position.
    pub fn for_view(view: usize, ee: (f64, f64)) -> Camera {
        match view {
            0 => Camera { center: ee, angle: 0.0, zoom: WRIST_ZOOM },
            1 => Camera { center: (0.5, 0.5), angle: 0.0, zoom: 1.0 },
            _ => Camera { center: (0.5, 0.55), angle: FRAC_PI_2, zoom: 1.15 },
        }
    }

    /// Scene point seen at fractional pixel position `(u, v)`.
    pub fn to_scene(&self, u: f64, v: f64, height: usize, width: usize) -> (f64, f64) {
        let su = u / width as f64 - 0.5;
        let sv = 0.5 - v / height as f64;
        let d = rotate((su / self.zoom, sv / self.zoom), self.angle);
        (self.center.0 + d.0, self.center.1 + d.1)
    }

    /// Fractional pixel position of a scene point.
    pub fn to_pixel(&self, p: (f64, f64), height: usize, width: usize) -> (f64, f64) {
        let d = rotate((p.0 - self.center.0, p.1 - self.center.1), -self.angle);
        ((d.0 * self.zoom + 0.5) * width as f64, (0.5 - d.1 * self.zoom) * height as f64)
    }
}

fn shape_color(shape: Shape) -> [f64; 3] {
    match shape {
        Shape::Disc => [0.85, 0.22, 0.2],
        Shape::Square => [0.2, 0.7, 0.3],
        Shape::Bar => [0.2, 0.35, 0.85],
    }
}

const LINK_COLOR: [f64; 3] = [0.25, 0.25, 0.3];
const GRIPPER_COLOR: [f64; 3] = [0.95, 0.8, 0.2];

fn background(p: (f64, f64)) -> [f64; 3] {
    if (0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1) {
        [0.62 + 0.12 * (p.0 - 0.5), 0.56, 0.46 - 0.1 * (p.1 - 0.5)]
    } else {
        [0.15, 0.15, 0.18]
    }
}

fn inside_shape(shape: Shape, local: (f64, f64)) -> bool {
    match shape {
        Shape::Disc => local.0 * local.0 + local.1 * local.1 <= 0.08 * 0.08,
        Shape::Square => local.0.abs() <= 0.07 && local.1.abs() <= 0.07,
        Shape::Bar => local.0.abs() <= 0.12 && local.1.abs() <= 0.04,
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / (abx * abx + aby * aby).max(1e-18)).clamp(0.0, 1.0);
    (p.0 - a.0 - t * abx).hypot(p.1 - a.1 - t * aby)
}

struct Arm {
    elbow: (f64, f64),
    ee: (f64, f64),
    wrist: f64,
    finger: f64,
}

impl Arm {
    fn color_at(&self, p: (f64, f64)) -> Option<[f64; 3]> {
        let local = rotate((p.0 - self.ee.0, p.1 - self.ee.1), -self.wrist);
        if local.0.abs() <= PALM_HALF && local.1.abs() <= PALM_HALF {
            return Some(GRIPPER_COLOR);
        }
        for side in [-1.0, 1.0] {
            let (fx, fy) = (local.0, local.1 - side * self.finger);
            if fx.abs() <= FINGER_HALF.0 && fy.abs() <= FINGER_HALF.1 {
                return Some(GRIPPER_COLOR);
            }
        }
        if segment_distance(p, BASE, self.elbow) <= LINK_HALF_WIDTH || segment_distance(p, self.elbow, self.ee) <= LINK_HALF_WIDTH {
            return Some(LINK_COLOR);
        }
        None
    }
}

/// Renders all three views of `state`.
pub fn render_views(config: &WorldConfig, state: &SceneState) -> ViewSet {
    let (h, w, c) = (config.height, config.width, config.channels);
    let (elbow, ee) = forward_kinematics(state.joints);
    let arm = Arm { elbow, ee, wrist: state.wrist, finger: if state.gripper_closed { FINGER_CLOSED } else { FINGER_OPEN } };
    let objects: Vec<_> = state.objects.iter().map(|o| (o, shape_color(o.shape))).collect();
    let mut frames = vec![0f32; VIEWS * c * h * w];
    let mut labels = vec![LABEL_BACKGROUND; VIEWS * h * w];
    for view in 0..VIEWS {
        let cam = Camera::for_view(view, ee);
        for y in 0..h {
            for x in 0..w {
                let p = cam.to_scene(x as f64 + 0.5, y as f64 + 0.5, h, w);
                let (color, label) = if let Some(col) = arm.color_at(p) {
                    (col, LABEL_ROBOT)
                } else if let Some(col) = objects.iter().rev().find_map(|(o, col)| {
                    inside_shape(o.shape, rotate((p.0 - o.x, p.1 - o.y), -o.theta)).then_some(*col)
                }) {
                    (col, LABEL_OBJECT)
                } else {
                    (background(p), LABEL_BACKGROUND)
                };
                let px = y * w + x;
                labels[view * h * w + px] = label;
                if c == 3 {
                    for ch in 0..3 {
                        frames[(view * 3 + ch) * h * w + px] = color[ch] as f32;
                    }
                } else {
                    frames[view * h * w + px] = ((color[0] + color[1] + color[2]) / 3.0) as f32;
                }
            }
        }
    }
    ViewSet { frames, labels }
}
