//! Set-transformer dynamics over particles.
//!
//! Each particle contributes one token: position (3), material one-hot (4,
//! all-zero for end-effector points), and motion (3) are concatenated and
//! projected to the embedding width. A stack of pre-norm multi-head
//! self-attention layers mixes the set — no positional encodings, spatial
//! structure enters only through the coordinate features — and a shared
//! decoder reads a displacement per particle. Predicted positions are the
//! residual update `x + dx`; end-effector rows are then overwritten with
//! the commanded kinematics, since the effector is an input, not a
//! prediction target.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{LayerParams, MlpParams, ModelParams};

use crate::autodiff::{AutodiffError, Tape, ValueId};
use crate::metrics::{MetricsError, PointSet};
use crate::tensor::Tensor;
use thiserror::Error;

pub const FEATURE_DIM: usize = 10; // position 3 + material 4 + motion 3
pub const MATERIAL_KINDS: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid particle set: {0}")]
    InvalidParticleSet(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("end-effector trajectory has {have} steps, need {need}")]
    TrajectoryTooShort { have: usize, need: usize },
    #[error("checkpoint i/o failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Material classes carried as one-hot features. End-effector particles
/// have no material (their one-hot row is all zeros).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Material {
    Rigid,
    Granular,
    Rope,
    Cloth,
}

impl Material {
    pub const ALL: [Material; 4] = [Material::Rigid, Material::Granular, Material::Rope, Material::Cloth];

    pub fn code(self) -> u8 {
        match self {
            Material::Rigid => 0,
            Material::Granular => 1,
            Material::Rope => 2,
            Material::Cloth => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Material> {
        match code {
            0 => Some(Material::Rigid),
            1 => Some(Material::Granular),
            2 => Some(Material::Rope),
            3 => Some(Material::Cloth),
            _ => None,
        }
    }

    pub fn one_hot(self) -> [f64; MATERIAL_KINDS] {
        let mut row = [0.0; MATERIAL_KINDS];
        row[self.code() as usize] = 1.0;
        row
    }
}

/// Byte code used in file formats; end-effector particles are `4`.
pub const EE_CODE: u8 = 4;

/// One observed scene: object and end-effector particles with positions,
/// material codes, and per-step motion.
///
/// The `motion` rows of object particles are always zero. For a frame
/// recorded by the simulator, the end-effector motion is the pose delta
/// that produced the frame; when a set is fed to [`forward`], the
/// end-effector motion is the commanded delta for the step about to be
/// predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    positions: Vec<[f64; 3]>,
    kinds: Vec<Option<Material>>,
    motion: Vec<[f64; 3]>,
}

impl ParticleSet {
    pub fn new(
        positions: Vec<[f64; 3]>,
        kinds: Vec<Option<Material>>,
        motion: Vec<[f64; 3]>,
    ) -> Result<Self, ModelError> {
        if positions.len() != kinds.len() || positions.len() != motion.len() {
            return Err(ModelError::InvalidParticleSet(format!(
                "field lengths differ: {} positions, {} kinds, {} motion",
                positions.len(),
                kinds.len(),
                motion.len()
            )));
        }
        let n_ee = kinds.iter().filter(|k| k.is_none()).count();
        let n_obj = kinds.len() - n_ee;
        if n_obj == 0 || n_ee == 0 {
            return Err(ModelError::InvalidParticleSet(format!(
                "need at least one object and one end-effector particle, got {} / {}",
                n_obj, n_ee
            )));
        }
        for (i, p) in positions.iter().chain(motion.iter()).enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(ModelError::InvalidParticleSet(format!(
                    "non-finite coordinate at row {}",
                    i % positions.len()
                )));
            }
        }
        for (i, (k, m)) in kinds.iter().zip(motion.iter()).enumerate() {
            if k.is_some() && *m != [0.0; 3] {
                return Err(ModelError::InvalidParticleSet(format!(
                    "object particle {} carries nonzero motion",
                    i
                )));
            }
        }
        Ok(ParticleSet { positions, kinds, motion })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least two particles by construction
    }

    pub fn n_obj(&self) -> usize {
        self.kinds.iter().filter(|k| k.is_some()).count()
    }

    pub fn n_ee(&self) -> usize {
        self.kinds.iter().filter(|k| k.is_none()).count()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn motion(&self) -> &[[f64; 3]] {
        &self.motion
    }

    pub fn kinds(&self) -> &[Option<Material>] {
        &self.kinds
    }

    pub fn is_ee(&self, i: usize) -> bool {
        self.kinds[i].is_none()
    }

    pub fn object_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kinds[i].is_some()).collect()
    }

    pub fn ee_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.kinds[i].is_none()).collect()
    }

    /// Object particle positions as a point set (the loss target view).
    pub fn object_points(&self) -> PointSet {
        let pts: Vec<[f64; 3]> = self
            .positions
            .iter()
            .zip(self.kinds.iter())
            .filter(|(_, k)| k.is_some())
            .map(|(&p, _)| p)
            .collect();
        PointSet::new(pts).expect("particle set has at least one object particle")
    }

    /// End-effector positions in index order.
    pub fn ee_positions(&self) -> Vec<[f64; 3]> {
        self.ee_indices().iter().map(|&i| self.positions[i]).collect()
    }

    /// End-effector motion rows in index order.
    pub fn ee_motion(&self) -> Vec<[f64; 3]> {
        self.ee_indices().iter().map(|&i| self.motion[i]).collect()
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.positions)
    }

    pub fn material_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * MATERIAL_KINDS);
        for k in &self.kinds {
            match k {
                Some(m) => data.extend_from_slice(&m.one_hot()),
                None => data.extend_from_slice(&[0.0; MATERIAL_KINDS]),
            }
        }
        Tensor::new(&[self.len(), MATERIAL_KINDS], data)
    }

    pub fn motion_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.motion)
    }

    /// Per-particle features `[position | material | motion]`.
    pub fn feature_tensor(&self) -> Tensor {
        let n = self.len();
        let mut data = Vec::with_capacity(n * FEATURE_DIM);
        let mat = self.material_tensor();
        for i in 0..n {
            data.extend_from_slice(&self.positions[i]);
            data.extend_from_slice(mat.row(i));
            data.extend_from_slice(&self.motion[i]);
        }
        Tensor::new(&[n, FEATURE_DIM], data)
    }

    /// Same kinds, new positions and motion.
    pub fn with_state(&self, positions: Vec<[f64; 3]>, motion: Vec<[f64; 3]>) -> Result<Self, ModelError> {
        ParticleSet::new(positions, self.kinds.clone(), motion)
    }
}

/// Architecture hyperparameters. Only the layer count is pinned by the
/// design (3); the rest are desk-scale defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 3,
            num_heads: 4,
            ff_hidden: 128,
            decoder_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ff_hidden == 0
            || self.decoder_hidden == 0
        {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Row-stochastic attention matrices captured during one transition:
/// `maps[layer][head]` is (N+M) x (N+M), rows are queries.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub maps: Vec<Vec<Tensor>>,
}

impl AttentionMap {
    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn num_heads(&self) -> usize {
        self.maps.first().map_or(0, |l| l.len())
    }
}

/// Handles to one set of parameters loaded on a tape, in block order.
pub struct BoundParams {
    ids: Vec<ValueId>,
    config: ModelConfig,
}

impl BoundParams {
    pub fn flat(&self) -> &[ValueId] {
        &self.ids
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn proj(&self) -> &[ValueId] {
        &self.ids[0..4]
    }

    fn layer(&self, l: usize) -> &[ValueId] {
        &self.ids[4 + l * params::LAYER_BLOCKS..4 + (l + 1) * params::LAYER_BLOCKS]
    }

    fn dec(&self) -> &[ValueId] {
        let start = 4 + self.config.num_layers * params::LAYER_BLOCKS;
        &self.ids[start..start + 4]
    }
}

fn mlp_on_tape(
    tape: &mut Tape,
    x: ValueId,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
) -> Result<ValueId, AutodiffError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(h, w2)?;
    tape.add_bias(y, b2)
}

pub(crate) fn embed_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    features: ValueId,
) -> Result<ValueId, AutodiffError> {
    let p = bound.proj();
    mlp_on_tape(tape, features, p[0], p[1], p[2], p[3])
}

fn attention_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    l: &[ValueId],
    x: ValueId,
    capture: Option<&mut Vec<Tensor>>,
) -> Result<ValueId, AutodiffError> {
    let cfg = bound.config;
    let (heads, hd) = (cfg.num_heads, cfg.head_dim());
    // layer block layout: [ln1 g/b, wq, bq, wk, bk, wv, bv, wo, bo, ln2 g/b, ff w1/b1/w2/b2]
    let q = tape.matmul(x, l[2])?;
    let q = tape.add_bias(q, l[3])?;
    let k = tape.matmul(x, l[4])?;
    let k = tape.add_bias(k, l[5])?;
    let v = tape.matmul(x, l[6])?;
    let v = tape.add_bias(v, l[7])?;

    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut captured = capture;
    for h in 0..heads {
        let (s, e) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_last(scores)?;
        if let Some(cap) = captured.as_deref_mut() {
            cap.push(tape.value(attn).clone());
        }
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_last(&head_outs)?;
    let o = tape.matmul(merged, l[8])?;
    tape.add_bias(o, l[9])
}

pub(crate) fn transition_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    z: ValueId,
    mut capture: Option<&mut AttentionMap>,
) -> Result<ValueId, AutodiffError> {
    let mut x = z;
    for li in 0..bound.config.num_layers {
        let l = bound.layer(li).to_vec();
        let normed = tape.layer_norm(x, l[0], l[1])?;
        let mut head_cap = capture.as_deref_mut().map(|_| Vec::new());
        let attn = attention_on_tape(tape, bound, &l, normed, head_cap.as_mut())?;
        if let (Some(map), Some(cap)) = (capture.as_deref_mut(), head_cap) {
            map.maps.push(cap);
        }
        x = tape.add(x, attn)?;
        let normed2 = tape.layer_norm(x, l[10], l[11])?;
        let ff = mlp_on_tape(tape, normed2, l[12], l[13], l[14], l[15])?;
        x = tape.add(x, ff)?;
    }
    Ok(x)
}

pub(crate) fn decode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    z: ValueId,
) -> Result<ValueId, AutodiffError> {
    let d = bound.dec();
    mlp_on_tape(tape, z, d[0], d[1], d[2], d[3])
}

/// Options that alter what the model sees during autoregressive rollout.
#[derive(Clone, Copy, Debug, Default)]
pub struct RolloutOptions {
    /// Feed each particle's previous predicted displacement back as its
    /// motion input. Off by default: object motion input stays zero and
    /// only effector rows carry commanded deltas.
    pub object_motion_feedback: bool,
}

/// One autoregressive rollout recorded on a tape. Returns the full-set
/// position value for each of `steps` predictions.
///
/// `ee_trajectory[j]` holds the commanded absolute end-effector positions
/// (in [`ParticleSet::ee_indices`] order) after step `j + 1`.
pub(crate) fn rollout_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    initial: &ParticleSet,
    ee_trajectory: &[Vec<[f64; 3]>],
    steps: usize,
    opts: RolloutOptions,
    mut capture_first: Option<&mut AttentionMap>,
) -> Result<Vec<ValueId>, ModelError> {
    if steps == 0 {
        return Err(ModelError::InvalidConfig("rollout needs at least one step".into()));
    }
    if ee_trajectory.len() < steps {
        return Err(ModelError::TrajectoryTooShort {
            have: ee_trajectory.len(),
            need: steps,
        });
    }
    let n = initial.len();
    let ee_idx = initial.ee_indices();
    for (j, pose) in ee_trajectory.iter().take(steps).enumerate() {
        if pose.len() != ee_idx.len() {
            return Err(ModelError::Shape(format!(
                "trajectory step {} has {} effector rows, expected {}",
                j,
                pose.len(),
                ee_idx.len()
            )));
        }
    }

    let materials = tape.constant(initial.material_tensor());
    let mut pos = tape.constant(initial.positions_tensor());
    let mut prev_ee: Vec<[f64; 3]> = initial.ee_positions();
    let mut prev_delta: Option<ValueId> = None;
    let mut out = Vec::with_capacity(steps);

    for j in 0..steps {
        let commanded = &ee_trajectory[j];
        let ee_delta: Vec<[f64; 3]> = commanded
            .iter()
            .zip(prev_ee.iter())
            .map(|(c, p)| [c[0] - p[0], c[1] - p[1], c[2] - p[2]])
            .collect();
        let delta_rows = Tensor::from_rows(&ee_delta);

        let motion = match (opts.object_motion_feedback, prev_delta) {
            (true, Some(d)) => tape.overwrite_rows(d, &ee_idx, &delta_rows)?,
            _ => {
                let mut m = Tensor::zeros(&[n, 3]);
                for (k, &i) in ee_idx.iter().enumerate() {
                    let row = &mut m.data_mut()[i * 3..(i + 1) * 3];
                    row.copy_from_slice(&ee_delta[k]);
                }
                tape.constant(m)
            }
        };

        let feats = tape.concat_last(&[pos, materials, motion])?;
        let z = embed_on_tape(tape, bound, feats)?;
        let z_next = transition_on_tape(
            tape,
            bound,
            z,
            if j == 0 { capture_first.as_deref_mut() } else { None },
        )?;
        let delta = decode_on_tape(tape, bound, z_next)?;
        let free = tape.add(pos, delta)?;
        let next = tape.overwrite_rows(free, &ee_idx, &Tensor::from_rows(commanded))?;

        out.push(next);
        pos = next;
        prev_delta = Some(delta);
        prev_ee = commanded.clone();
    }
    Ok(out)
}

/// Latent embedding of every particle (the projector applied row-wise).
pub fn embed_particles(state: &ParticleSet, params: &ModelParams) -> Result<Tensor, ModelError> {
    params.config.validate()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let feats = tape.constant(state.feature_tensor());
    let z = embed_on_tape(&mut tape, &bound, feats)?;
    Ok(tape.value(z).clone())
}

/// The attention stack applied to a set of embeddings.
pub fn dynamics_transition(
    z: &Tensor,
    params: &ModelParams,
    capture_attention: bool,
) -> Result<(Tensor, Option<AttentionMap>), ModelError> {
    params.config.validate()?;
    if z.rank() != 2 || z.shape()[1] != params.config.embed_dim {
        return Err(ModelError::Shape(format!(
            "embeddings must be (n x {}), got {:?}",
            params.config.embed_dim,
            z.shape()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zin = tape.constant(z.clone());
    let mut attn = AttentionMap { maps: Vec::new() };
    let out = transition_on_tape(
        &mut tape,
        &bound,
        zin,
        if capture_attention { Some(&mut attn) } else { None },
    )?;
    Ok((
        tape.value(out).clone(),
        if capture_attention { Some(attn) } else { None },
    ))
}

/// The shared displacement decoder applied to each embedding row.
pub fn predict_displacements(z_next: &Tensor, params: &ModelParams) -> Result<Tensor, ModelError> {
    params.config.validate()?;
    if z_next.rank() != 2 || z_next.shape()[1] != params.config.embed_dim {
        return Err(ModelError::Shape(format!(
            "embeddings must be (n x {}), got {:?}",
            params.config.embed_dim,
            z_next.shape()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zin = tape.constant(z_next.clone());
    let out = decode_on_tape(&mut tape, &bound, zin)?;
    Ok(tape.value(out).clone())
}

fn forward_impl(
    state: &ParticleSet,
    params: &ModelParams,
    capture: bool,
) -> Result<(ParticleSet, Option<AttentionMap>), ModelError> {
    params.config.validate()?;
    // the state's effector motion is the commanded delta for this step
    let command: Vec<[f64; 3]> = state
        .ee_indices()
        .iter()
        .map(|&i| {
            let p = state.positions()[i];
            let m = state.motion()[i];
            [p[0] + m[0], p[1] + m[1], p[2] + m[2]]
        })
        .collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut attn = AttentionMap { maps: Vec::new() };
    let out = rollout_on_tape(
        &mut tape,
        &bound,
        state,
        &[command],
        1,
        RolloutOptions::default(),
        if capture { Some(&mut attn) } else { None },
    )?;
    let positions = tape.value(out[0]).to_rows3();
    let mut motion = vec![[0.0; 3]; state.len()];
    for &i in &state.ee_indices() {
        motion[i] = state.motion()[i];
    }
    let next = state.with_state(positions, motion)?;
    Ok((next, if capture { Some(attn) } else { None }))
}

/// One-step prediction. Object rows receive the decoded residual update;
/// end-effector rows land exactly on the commanded pose
/// (current position + commanded motion).
pub fn forward(state: &ParticleSet, params: &ModelParams) -> Result<ParticleSet, ModelError> {
    forward_impl(state, params, false).map(|(s, _)| s)
}

/// [`forward`] plus the attention maps of every layer and head.
pub fn forward_with_attention(
    state: &ParticleSet,
    params: &ModelParams,
) -> Result<(ParticleSet, AttentionMap), ModelError> {
    forward_impl(state, params, true).map(|(s, a)| (s, a.expect("attention requested")))
}

/// Autoregressive rollout: each prediction feeds the next step.
pub fn rollout(
    initial: &ParticleSet,
    ee_trajectory: &[Vec<[f64; 3]>],
    params: &ModelParams,
    steps: usize,
) -> Result<Vec<ParticleSet>, ModelError> {
    rollout_with_options(initial, ee_trajectory, params, steps, RolloutOptions::default())
}

pub fn rollout_with_options(
    initial: &ParticleSet,
    ee_trajectory: &[Vec<[f64; 3]>],
    params: &ModelParams,
    steps: usize,
    opts: RolloutOptions,
) -> Result<Vec<ParticleSet>, ModelError> {
    params.config.validate()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let ids = rollout_on_tape(&mut tape, &bound, initial, ee_trajectory, steps, opts, None)?;
    let ee_idx = initial.ee_indices();
    let mut prev_ee = initial.ee_positions();
    let mut out = Vec::with_capacity(steps);
    for (j, id) in ids.iter().enumerate() {
        let positions = tape.value(*id).to_rows3();
        let mut motion = vec![[0.0; 3]; initial.len()];
        for (k, &i) in ee_idx.iter().enumerate() {
            let c = ee_trajectory[j][k];
            motion[i] = [c[0] - prev_ee[k][0], c[1] - prev_ee[k][1], c[2] - prev_ee[k][2]];
        }
        out.push(initial.with_state(positions, motion)?);
        prev_ee = ee_trajectory[j].clone();
    }
    Ok(out)
}
