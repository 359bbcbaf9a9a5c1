//! Scripted data-collection policy: smooth pick-and-place cycles.

use rand::Rng as _;

use super::{clamp_target, Action, ObjectPose, SceneState, Shape, WorldConfig};
use crate::rng::Rng;

const SPEED: f64 = 0.04;
const ARRIVE: f64 = 0.008;
const REGION_X: (f64, f64) = (0.15, 0.85);
const REGION_Y: (f64, f64) = (0.3, 0.85);

#[derive(Debug, Clone, Copy)]
enum Phase {
    Approach { object: usize },
    Carry { target: (f64, f64), spin: f64 },
    Wander { target: (f64, f64) },
}

/// Picks an object, carries it somewhere else while turning the wrist, drops
/// it, then usually picks it up again or moves to another object.
pub struct ScriptedPolicy {
    rng: Rng,
    phase: Phase,
}

fn random_point(rng: &mut Rng) -> (f64, f64) {
    (rng.random_range(REGION_X.0..REGION_X.1), rng.random_range(REGION_Y.0..REGION_Y.1))
}

fn step_towards(from: (f64, f64), to: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let d = dx.hypot(dy);
    if d < 1e-12 {
        return (0.0, 0.0);
    }
    let s = (0.5 * d).clamp(ARRIVE.min(d), SPEED) / d;
    (dx * s, dy * s)
}

impl ScriptedPolicy {
    pub fn new(mut rng: Rng, n_objects: usize) -> Self {
        let phase = if n_objects == 0 {
            Phase::Wander { target: random_point(&mut rng) }
        } else {
            Phase::Approach { object: rng.random_range(0..n_objects) }
        };
        ScriptedPolicy { rng, phase }
    }

    /// Random initial scene: objects spread over the working region, arm somewhere reachable.
    pub fn initial_state(&mut self, config: &WorldConfig) -> SceneState {
        let mut objects: Vec<ObjectPose> = Vec::new();
        while objects.len() < config.n_objects {
            let p = random_point(&mut self.rng);
            let theta = self.rng.random_range(-1.5..1.5);
            if objects.iter().all(|o| (o.x - p.0).hypot(o.y - p.1) > 0.18) {
                let shape = Shape::from_index(self.rng.random_range(0..3));
                objects.push(ObjectPose { x: p.0, y: p.1, theta, shape });
            }
        }
        let ee = random_point(&mut self.rng);
        let wrist = self.rng.random_range(-1.0..1.0);
        SceneState::new(ee, wrist, objects)
    }

    pub fn act(&mut self, state: &SceneState) -> Action {
        let ee = state.ee();
        let n = state.objects.len();
        match self.phase {
            Phase::Approach { object } => {
                let o = state.objects[object];
                let (dx, dy) = step_towards(ee, (o.x, o.y));
                if (o.x - ee.0).hypot(o.y - ee.1) <= ARRIVE {
                    let mut target = random_point(&mut self.rng);
                    while (target.0 - ee.0).hypot(target.1 - ee.1) < 0.3 {
                        target = random_point(&mut self.rng);
                    }
                    let spin = self.rng.random_range(-0.08..0.08);
                    self.phase = Phase::Carry { target: clamp_target(target), spin };
                    return Action::new(0.0, 0.0, 0.0, 1.0);
                }
                Action::new(dx, dy, 0.0, if state.gripper_closed { -1.0 } else { 0.0 })
            }
            Phase::Carry { target, spin } => {
                if (target.0 - ee.0).hypot(target.1 - ee.1) <= ARRIVE {
                    self.phase = match self.rng.random_range(0..10) {
                        0..=4 => Phase::Approach { object: state.grasp.map_or(0, |g| g.object) },
                        5..=7 if n > 0 => Phase::Approach { object: self.rng.random_range(0..n) },
                        _ => Phase::Wander { target: random_point(&mut self.rng) },
                    };
                    return Action::new(0.0, 0.0, 0.0, -1.0);
                }
                let (dx, dy) = step_towards(ee, target);
                Action::new(dx, dy, spin, 0.0)
            }
            Phase::Wander { target } => {
                if (target.0 - ee.0).hypot(target.1 - ee.1) <= ARRIVE {
                    self.phase = if n > 0 {
                        Phase::Approach { object: self.rng.random_range(0..n) }
                    } else {
                        Phase::Wander { target: random_point(&mut self.rng) }
                    };
                }
                let (dx, dy) = step_towards(ee, target);
                Action::new(dx, dy, 0.0, 0.0)
            }
        }
    }
}
