//! Deterministic toy multi-material particle physics.
//!
//! This is the ground-truth oracle and data generator: quasi-static
//! position-based dynamics, fixed iteration counts, no hidden randomness
//! in stepping. A scene is an observable [`ParticleSet`] plus hidden
//! state (rigid-body pose, rope rest lengths, cloth spring topology,
//! granular radii). Same seed, same spec — bitwise identical episodes.
//!
//! Task roster: a pusher driving a rigid box (`box_push`), a pusher
//! against a rope (`rope`) or a granular pile (`granular`), a gripper
//! dragging a cloth (` cloth`), a gripper lifting a cloth with granular
//! material riding on top (`cloth_gather`), and two grippers sweeping
//! granular material with a rope held at both ends (`rope_sweep`).

mod io;
mod physics;
mod scene;
mod trajectory;

pub use io::{load_dataset, read_target_csv, save_dataset, write_target_csv};
pub use scene::create_scene;

use crate::model::{Material, ModelError, ParticleSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of end-effector particles (points sampled on the tool surface).
pub const EE_POINTS: usize = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("scene capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("episode horizon must be at least 2, got {0}")]
    HorizonTooShort(usize),
    #[error("dataset i/o failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset file: {0}")]
    BadDataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    BoxPush,
    Rope,
    Granular,
    Cloth,
    ClothGather,
    RopeSweep,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::BoxPush,
        TaskId::Rope,
        TaskId::Granular,
        TaskId::Cloth,
        TaskId::ClothGather,
        TaskId::RopeSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::BoxPush => "box_push",
            TaskId::Rope => "rope",
            TaskId::Granular => "granular",
            TaskId::Cloth => "cloth",
            TaskId::ClothGather => "cloth_gather",
            TaskId::RopeSweep => "rope_sweep",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        TaskId::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            TaskId::BoxPush => 0,
            TaskId::Rope => 1,
            TaskId::Granular => 2,
            TaskId::Cloth => 3,
            TaskId::ClothGather => 4,
            TaskId::RopeSweep => 5,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<TaskId> {
        TaskId::ALL.iter().copied().find(|t| t.code() == c)
    }
}

/// Object particle counts per material class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaterialCounts {
    pub rigid: usize,
    pub granular: usize,
    pub rope: usize,
    pub cloth: usize,
}

impl MaterialCounts {
    pub fn total(&self) -> usize {
        self.rigid + self.granular + self.rope + self.cloth
    }
}

/// Axis-aligned workspace box in meters; the floor is z = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center_xy(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - 1e-12 && p[i] <= self.max[i] + 1e-12)
    }
}

/// Tool geometry. The pusher is a vertical cylinder; grippers are pinch
/// clusters that attach to deformables rather than colliding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Effector {
    Pusher { radius: f64 },
    Gripper { jaw_gap: f64 },
    DualGripper { jaw_gap: f64 },
}

impl Effector {
    /// Number of independently commanded tool groups.
    pub fn groups(&self) -> usize {
        match self {
            Effector::DualGripper { .. } => 2,
            _ => 1,
        }
    }

    pub fn contact_radius(&self) -> f64 {
        match self {
            Effector::Pusher { radius } => *radius,
            Effector::Gripper { jaw_gap } | Effector::DualGripper { jaw_gap } => *jaw_gap,
        }
    }
}

/// Material dimensions used when scenes are created.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub box_size: [f64; 3],
    pub granular_radius: f64,
    pub rope_rest_len: f64,
    pub cloth_spacing: f64,
    pub cloth_cols: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub task: TaskId,
    pub counts: MaterialCounts,
    pub workspace: Workspace,
    pub friction: f64,
    pub dt: f64,
    pub effector: Effector,
    pub geometry: Geometry,
    /// Maximum end-effector speed in m/s; per-step displacement is
    /// bounded by `max_ee_speed * dt`.
    pub max_ee_speed: f64,
    pub pbd_iterations: usize,
}

impl TaskSpec {
    /// Desk-scale defaults per task (0.7 m x 0.55 m workspace).
    pub fn preset(task: TaskId) -> TaskSpec {
        let workspace = Workspace {
            min: [0.0, 0.0, 0.0],
            max: [0.70, 0.55, 0.40],
        };
        let geometry = Geometry {
            box_size: [0.10, 0.08, 0.05],
            granular_radius: 0.008,
            rope_rest_len: 0.015,
            cloth_spacing: 0.02,
            cloth_cols: 6,
        };
        let base = TaskSpec {
            task,
            counts: MaterialCounts::default(),
            workspace,
            friction: 0.3,
            dt: 0.05,
            effector: Effector::Pusher { radius: 0.012 },
            geometry,
            max_ee_speed: 0.4,
            pbd_iterations: 8,
        };
        match task {
            TaskId::BoxPush => TaskSpec {
                counts: MaterialCounts {
                    rigid: 32,
                    ..Default::default()
                },
                ..base
            },
            TaskId::Rope => TaskSpec {
                counts: MaterialCounts {
                    rope: 32,
                    ..Default::default()
                },
                ..base
            },
            TaskId::Granular => TaskSpec {
                counts: MaterialCounts {
                    granular: 32,
                    ..Default::default()
                },
                ..base
            },
            TaskId::Cloth => TaskSpec {
                counts: MaterialCounts {
                    cloth: 36,
                    ..Default::default()
                },
                effector: Effector::Gripper { jaw_gap: 0.02 },
                ..base
            },
            TaskId::ClothGather => TaskSpec {
                counts: MaterialCounts {
                    cloth: 36,
                    granular: 12,
                    ..Default::default()
                },
                effector: Effector::Gripper { jaw_gap: 0.02 },
                ..base
            },
            TaskId::RopeSweep => TaskSpec {
                counts: MaterialCounts {
                    rope: 24,
                    granular: 12,
                    ..Default::default()
                },
                effector: Effector::DualGripper { jaw_gap: 0.02 },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::InvalidSpec(format!("dt must be positive, got {}", self.dt)));
        }
        if self.counts.total() == 0 {
            return Err(SimError::InvalidSpec("no object particles requested".into()));
        }
        let ext = self.workspace.extent();
        if ext.iter().any(|&e| !(e > 0.0)) {
            return Err(SimError::InvalidSpec(format!(
                "degenerate workspace extent {:?}",
                ext
            )));
        }
        if !(self.max_ee_speed > 0.0) || self.pbd_iterations == 0 {
            return Err(SimError::InvalidSpec(
                "max_ee_speed and pbd_iterations must be positive".into(),
            ));
        }
        let g = &self.geometry;
        if !(g.granular_radius > 0.0)
            || !(g.rope_rest_len > 0.0)
            || !(g.cloth_spacing > 0.0)
            || g.box_size.iter().any(|&s| !(s > 0.0))
        {
            return Err(SimError::InvalidSpec("non-positive geometry dimension".into()));
        }
        let needed: &[(usize, &str)] = match self.task {
            TaskId::BoxPush => &[(1, "rigid")],
            TaskId::Rope => &[(2, "rope")],
            TaskId::Granular => &[(1, "granular")],
            TaskId::Cloth => &[(4, "cloth")],
            TaskId::ClothGather => &[(4, "cloth"), (1, "granular")],
            TaskId::RopeSweep => &[(2, "rope"), (1, "granular")],
        };
        for &(min_count, name) in needed {
            let have = match name {
                "rigid" => self.counts.rigid,
                "granular" => self.counts.granular,
                "rope" => self.counts.rope,
                "cloth" => self.counts.cloth,
                _ => unreachable!(),
            };
            if have < min_count {
                return Err(SimError::InvalidSpec(format!(
                    "{} requires at least {} {} particles, got {}",
                    self.task.as_str(),
                    min_count,
                    name,
                    have
                )));
            }
        }
        if self.counts.cloth > 0 {
            if g.cloth_cols < 2 || self.counts.cloth % g.cloth_cols != 0 || self.counts.cloth / g.cloth_cols < 2 {
                return Err(SimError::InvalidSpec(format!(
                    "cloth count {} does not form a grid with {} columns",
                    self.counts.cloth, g.cloth_cols
                )));
            }
        }
        match (self.task, self.effector) {
            (TaskId::BoxPush | TaskId::Rope | TaskId::Granular, Effector::Pusher { .. }) => {}
            (TaskId::Cloth | TaskId::ClothGather, Effector::Gripper { .. }) => {}
            (TaskId::RopeSweep, Effector::DualGripper { .. }) => {}
            (t, e) => {
                return Err(SimError::InvalidSpec(format!(
                    "effector {:?} does not fit task {}",
                    e,
                    t.as_str()
                )))
            }
        }
        Ok(())
    }

    pub fn n_obj(&self) -> usize {
        self.counts.total()
    }

    pub fn m_ee(&self) -> usize {
        EE_POINTS
    }

    /// Degrees of freedom of one planner action: planar for pushers,
    /// spatial for grippers, two planar groups for the dual gripper.
    pub fn action_dims(&self) -> usize {
        match self.effector {
            Effector::Pusher { .. } => 2,
            Effector::Gripper { .. } => 3,
            Effector::DualGripper { .. } => 4,
        }
    }

    /// Expand an action vector into one displacement row per effector
    /// point (all points of a tool group move rigidly).
    pub fn action_to_ee_motion(&self, action: &[f64]) -> Result<Vec<[f64; 3]>, SimError> {
        if action.len() != self.action_dims() {
            return Err(SimError::InvalidAction(format!(
                "action has {} dims, expected {}",
                action.len(),
                self.action_dims()
            )));
        }
        let rows = match self.effector {
            Effector::Pusher { .. } => vec![[action[0], action[1], 0.0]; EE_POINTS],
            Effector::Gripper { .. } => vec![[action[0], action[1], action[2]]; EE_POINTS],
            Effector::DualGripper { .. } => {
                let half = EE_POINTS / 2;
                let mut rows = vec![[action[0], action[1], 0.0]; half];
                rows.extend(vec![[action[2], action[3], 0.0]; half]);
                rows
            }
        };
        Ok(rows)
    }

    pub(crate) fn max_step_displacement(&self) -> f64 {
        self.max_ee_speed * self.dt
    }
}

/// Observable scene plus the hidden simulator state that restores the
/// material constraints after every step.
#[derive(Clone, Debug)]
pub struct SceneState {
    pub particles: ParticleSet,
    pub(crate) hidden: scene::Hidden,
}

impl SceneState {
    /// Material layout: contiguous index ranges per material, effector last.
    pub fn material_range(&self, m: Material) -> std::ops::Range<usize> {
        self.hidden.range(m)
    }

    pub fn ee_range(&self) -> std::ops::Range<usize> {
        self.hidden.ee.clone()
    }

    /// Planar pose (center xy, heading) of the rigid body, if present.
    pub fn rigid_pose(&self) -> Option<([f64; 2], f64)> {
        self.hidden.box_body.as_ref().map(|b| (b.center, b.theta))
    }
}

/// Advance one timestep: the effector moves kinematically by `ee_motion`
/// (one row per effector point), materials respond quasi-statically, and
/// all scene constraints are re-projected.
pub fn step(scene: &SceneState, ee_motion: &[[f64; 3]], spec: &TaskSpec) -> Result<SceneState, SimError> {
    physics::step(scene, ee_motion, spec)
}

/// A recorded trajectory. Frame `t` stores the particle state after `t`
/// steps; its effector motion rows hold the pose delta that produced the
/// frame (zero at frame 0), and object motion rows are always zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<ParticleSet>,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.frames.len()
    }

    /// Commanded end-effector positions over `[t+1, t+steps]`, the
    /// trajectory slice a model rollout starting at frame `t` consumes.
    pub fn ee_trajectory(&self, start: usize, steps: usize) -> Vec<Vec<[f64; 3]>> {
        (start + 1..=start + steps)
            .map(|t| self.frames[t].ee_positions())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn n_obj(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.frames[0].n_obj())
    }

    pub fn n_ee(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.frames[0].n_ee())
    }
}

/// Derive a stream seed for episode `index` (splitmix64 over the base).
pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Roll one episode of `horizon` frames under a random smooth,
/// task-appropriate effector trajectory.
pub fn generate_episode(spec: &TaskSpec, horizon: usize, seed: u64) -> Result<Episode, SimError> {
    spec.validate()?;
    if horizon < 2 {
        return Err(SimError::HorizonTooShort(horizon));
    }
    let mut scene = create_scene(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut sampler = trajectory::Sampler::new(spec, &scene, &mut rng);
    let mut frames = Vec::with_capacity(horizon);
    frames.push(scene.particles.clone());
    for _ in 1..horizon {
        let deltas = sampler.next_deltas(spec, &scene, &mut rng);
        scene = step(&scene, &deltas, spec)?;
        frames.push(scene.particles.clone());
    }
    Ok(Episode { frames })
}

/// Generate a dataset of independent episodes; fully determined by
/// `(spec, episodes, horizon, seed)`.
pub fn generate_dataset(
    spec: &TaskSpec,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset, SimError> {
    if episodes == 0 {
        return Err(SimError::InvalidSpec("need at least one episode".into()));
    }
    let eps = (0..episodes)
        .map(|e| generate_episode(spec, horizon, derive_seed(seed, e as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        spec: *spec,
        episodes: eps,
    })
}
