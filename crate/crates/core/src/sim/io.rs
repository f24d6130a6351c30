//! Binary episode/dataset files and the target point-set CSV.
//!
//! Dataset layout: 8-byte magic, u32 version, the task spec echo, u32
//! episode count; per episode a u32 horizon, u32 object and effector
//! counts, one material code byte per particle, then per frame the
//! positions and motions as little-endian 64-bit floats. Round-trips are
//! bit exact.

use super::{
    Dataset, Effector, Episode, Geometry, MaterialCounts, SimError, TaskId, TaskSpec, Workspace,
    EE_POINTS,
};
use crate::metrics::PointSet;
use crate::model::{Material, ParticleSet, EE_CODE};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"PWMDATA\0";
pub const DATASET_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> SimError {
    SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_spec(out: &mut Vec<u8>, spec: &TaskSpec) {
    out.push(spec.task.code());
    put_u32(out, spec.counts.rigid);
    put_u32(out, spec.counts.granular);
    put_u32(out, spec.counts.rope);
    put_u32(out, spec.counts.cloth);
    for v in spec.workspace.min.iter().chain(spec.workspace.max.iter()) {
        put_f64(out, *v);
    }
    put_f64(out, spec.friction);
    put_f64(out, spec.dt);
    let (kind, param) = match spec.effector {
        Effector::Pusher { radius } => (0u8, radius),
        Effector::Gripper { jaw_gap } => (1u8, jaw_gap),
        Effector::DualGripper { jaw_gap } => (2u8, jaw_gap),
    };
    out.push(kind);
    put_f64(out, param);
    for v in spec.geometry.box_size {
        put_f64(out, v);
    }
    put_f64(out, spec.geometry.granular_radius);
    put_f64(out, spec.geometry.rope_rest_len);
    put_f64(out, spec.geometry.cloth_spacing);
    put_u32(out, spec.geometry.cloth_cols);
    put_f64(out, spec.max_ee_speed);
    put_u32(out, spec.pbd_iterations);
}

/// Serialize a dataset to bytes.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    encode_spec(&mut out, &ds.spec);
    put_u32(&mut out, ds.episodes.len());
    for ep in &ds.episodes {
        let first = &ep.frames[0];
        put_u32(&mut out, ep.frames.len());
        put_u32(&mut out, first.n_obj());
        put_u32(&mut out, first.n_ee());
        for k in first.kinds() {
            out.push(k.map_or(EE_CODE, Material::code));
        }
        for frame in &ep.frames {
            for p in frame.positions() {
                for &c in p {
                    put_f64(&mut out, c);
                }
            }
            for m in frame.motion() {
                for &c in m {
                    put_f64(&mut out, c);
                }
            }
        }
    }
    out
}

/// Write a dataset atomically (temp file, then rename).
pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), SimError> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds);
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SimError> {
        if self.pos + n > self.buf.len() {
            return Err(SimError::BadDataset("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SimError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SimError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SimError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<[f64; 3], SimError> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}

fn decode_spec(cur: &mut Cursor) -> Result<TaskSpec, SimError> {
    let task = TaskId::from_code(cur.u8()?)
        .ok_or_else(|| SimError::BadDataset("unknown task code".into()))?;
    let counts = MaterialCounts {
        rigid: cur.u32()? as usize,
        granular: cur.u32()? as usize,
        rope: cur.u32()? as usize,
        cloth: cur.u32()? as usize,
    };
    let workspace = Workspace {
        min: cur.vec3()?,
        max: cur.vec3()?,
    };
    let friction = cur.f64()?;
    let dt = cur.f64()?;
    let kind = cur.u8()?;
    let param = cur.f64()?;
    let effector = match kind {
        0 => Effector::Pusher { radius: param },
        1 => Effector::Gripper { jaw_gap: param },
        2 => Effector::DualGripper { jaw_gap: param },
        _ => return Err(SimError::BadDataset("unknown effector code".into())),
    };
    let geometry = Geometry {
        box_size: cur.vec3()?,
        granular_radius: cur.f64()?,
        rope_rest_len: cur.f64()?,
        cloth_spacing: cur.f64()?,
        cloth_cols: cur.u32()? as usize,
    };
    let max_ee_speed = cur.f64()?;
    let pbd_iterations = cur.u32()? as usize;
    Ok(TaskSpec {
        task,
        counts,
        workspace,
        friction,
        dt,
        effector,
        geometry,
        max_ee_speed,
        pbd_iterations,
    })
}

/// Parse a dataset from bytes.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, SimError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != DATASET_MAGIC {
        return Err(SimError::BadDataset("bad magic string".into()));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(SimError::BadDataset(format!("unsupported version {}", version)));
    }
    let spec = decode_spec(&mut cur)?;
    let n_eps = cur.u32()? as usize;
    let mut episodes = Vec::with_capacity(n_eps);
    for _ in 0..n_eps {
        let horizon = cur.u32()? as usize;
        let n_obj = cur.u32()? as usize;
        let n_ee = cur.u32()? as usize;
        if n_ee != EE_POINTS {
            return Err(SimError::BadDataset(format!(
                "expected {} effector points, file says {}",
                EE_POINTS, n_ee
            )));
        }
        let total = n_obj + n_ee;
        let mut kinds = Vec::with_capacity(total);
        for _ in 0..total {
            let code = cur.u8()?;
            kinds.push(if code == EE_CODE {
                None
            } else {
                Some(
                    Material::from_code(code)
                        .ok_or_else(|| SimError::BadDataset(format!("unknown material code {}", code)))?,
                )
            });
        }
        let mut frames = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mut positions = Vec::with_capacity(total);
            for _ in 0..total {
                positions.push(cur.vec3()?);
            }
            let mut motion = Vec::with_capacity(total);
            for _ in 0..total {
                motion.push(cur.vec3()?);
            }
            frames.push(ParticleSet::new(positions, kinds.clone(), motion)?);
        }
        episodes.push(Episode { frames });
    }
    if cur.pos != bytes.len() {
        return Err(SimError::BadDataset("trailing bytes".into()));
    }
    Ok(Dataset { spec, episodes })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SimError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    decode_dataset(&bytes)
}

/// Target point sets for planning travel as plain CSV: one `x,y,z` row
/// per point, `#` comments allowed.
pub fn read_target_csv(path: impl AsRef<Path>) -> Result<PointSet, SimError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(SimError::BadDataset(format!(
                "{}:{}: expected x,y,z",
                path.display(),
                lineno + 1
            )));
        }
        let mut p = [0.0; 3];
        for (k, c) in cols.iter().enumerate() {
            p[k] = c.parse::<f64>().map_err(|_| {
                SimError::BadDataset(format!("{}:{}: bad number `{}`", path.display(), lineno + 1, c))
            })?;
        }
        points.push(p);
    }
    PointSet::new(points).map_err(|e| SimError::BadDataset(e.to_string()))
}

pub fn write_target_csv(path: impl AsRef<Path>, points: &PointSet) -> Result<(), SimError> {
    let path = path.as_ref();
    let mut text = String::from("# target object point set: x,y,z per row\n");
    for p in points.points() {
        text.push_str(&format!("{:.17},{:.17},{:.17}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
