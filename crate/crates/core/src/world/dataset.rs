//! Episode generation and the `PWDS` dataset file.
//!
//! Layout: magic, `u32` version, `u32` episode count, the world block
//! (`u32` height, width, channels, object count; `f64` translation and rotation
//! bounds), then per episode a header (`u32` T, views, channels, height, width)
//! followed by `(T+1)` f32 frame sets, `(T+1)` u8 label maps, `T` f32 action
//! rows and `(T+1)` f32 state vectors.

use std::path::Path;

use rayon::prelude::*;

use super::{render_views, step_dynamics, Action, SceneState, ScriptedPolicy, ViewSet, WorldConfig, ACTION_DIM, VIEWS};
use crate::binio::{write_atomic, Reader, Writer};
use crate::error::{domain_err, Result};
use crate::rng::{derive_rng, streams};

const MAGIC: &[u8; 4] = b"PWDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Vec<SceneState>,
    pub actions: Vec<Action>,
    pub views: Vec<ViewSet>,
}

impl Episode {
    /// Number of actions (one less than the number of observations).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub episodes: Vec<Episode>,
}

/// Rolls the scripted policy for `steps` actions from a random initial scene.
pub fn generate_episode(config: &WorldConfig, steps: usize, seed: u64, index: u64) -> Episode {
    let mut policy = ScriptedPolicy::new(derive_rng(seed, streams::DATASET, index), config.n_objects);
    let mut state = policy.initial_state(config);
    let mut states = vec![state.clone()];
    let mut actions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = policy.act(&state);
        state = step_dynamics(config, &state, &a);
        actions.push(a);
        states.push(state.clone());
    }
    let views = states.iter().map(|s| render_views(config, s)).collect();
    Episode { states, actions, views }
}

/// Generates `n_episodes` episodes; episode `i` depends only on `(seed, i)`.
pub fn generate_dataset(config: &WorldConfig, n_episodes: usize, steps: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if n_episodes < 1 || steps < 1 {
        return Err(domain_err!("need at least one episode of at least one step"));
    }
    let episodes = (0..n_episodes as u64).into_par_iter().map(|i| generate_episode(config, steps, seed, i)).collect();
    Ok(Dataset { config: config.clone(), episodes })
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let c = &ds.config;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.len_u32(ds.episodes.len())?;
    for v in [c.height, c.width, c.channels, c.n_objects] {
        w.len_u32(v)?;
    }
    w.f64(c.max_translation);
    w.f64(c.max_rotation);
    let mut state_buf = Vec::new();
    for ep in &ds.episodes {
        for v in [ep.len(), VIEWS, c.channels, c.height, c.width] {
            w.len_u32(v)?;
        }
        for vs in &ep.views {
            vs.frames.iter().for_each(|&x| w.f32(x));
        }
        for vs in &ep.views {
            w.bytes(&vs.labels);
        }
        for a in &ep.actions {
            a.0.iter().for_each(|&x| w.f32(x as f32));
        }
        for s in &ep.states {
            state_buf.clear();
            s.encode(&mut state_buf);
            state_buf.iter().for_each(|&x| w.f32(x));
        }
    }
    Ok(w.buf)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported dataset version {version}")));
    }
    let count = r.u32()? as usize;
    let config = WorldConfig {
        height: r.u32()? as usize,
        width: r.u32()? as usize,
        channels: r.u32()? as usize,
        n_objects: r.u32()? as usize,
        max_translation: r.f64()?,
        max_rotation: r.f64()?,
    };
    config.validate().map_err(|e| r.err(e.to_string()))?;
    let (h, wd, ch) = (config.height, config.width, config.channels);
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for e in 0..count {
        let t = r.u32()? as usize;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims != [VIEWS, ch, h, wd] {
            return Err(r.err(format!("episode {e} has dims {dims:?}, file declares {:?}", [VIEWS, ch, h, wd])));
        }
        let frame_len = VIEWS * ch * h * wd;
        let mut frames = Vec::with_capacity(t + 1);
        for _ in 0..=t {
            frames.push(r.f32s(frame_len)?.into_iter().map(|v| v as f32).collect::<Vec<f32>>());
        }
        let mut views = Vec::with_capacity(t + 1);
        for f in frames {
            let labels = r.take(VIEWS * h * wd)?.to_vec();
            if labels.iter().any(|&l| l > 2) {
                return Err(r.err(format!("episode {e} has an invalid mask label")));
            }
            views.push(ViewSet { frames: f, labels });
        }
        let mut actions = Vec::with_capacity(t);
        for _ in 0..t {
            let row = r.f32s(ACTION_DIM)?;
            actions.push(Action(row.try_into().expect("row length")));
        }
        let mut states = Vec::with_capacity(t + 1);
        for _ in 0..=t {
            let v: Vec<f32> = r.f32s(config.state_len())?.into_iter().map(|x| x as f32).collect();
            states.push(SceneState::decode(&v, config.n_objects).ok_or_else(|| r.err(format!("episode {e} has a malformed state")))?);
        }
        episodes.push(Episode { states, actions, views });
    }
    r.finish()?;
    Ok(Dataset { config, episodes })
}
