//! Scene construction: seeded initial layouts and the hidden state the
//! stepper needs to restore material constraints.

use super::{Effector, MaterialCounts, SimError, SceneState, TaskId, TaskSpec, EE_POINTS};
use crate::model::{Material, ParticleSet};
use crate::vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

pub(crate) const PUSHER_Z: f64 = 0.02;
pub(crate) const ROPE_Z: f64 = 0.004;
/// Contact radius of one rope particle.
pub(crate) const ROPE_CONTACT_R: f64 = 0.006;
pub(crate) const GRIPPER_PIN_DROP: f64 = 0.0;

#[derive(Clone, Debug)]
pub(crate) struct BoxBody {
    pub center: [f64; 2],
    pub theta: f64,
    pub half: [f64; 2],
    /// Body-frame xy plus fixed height per sampled surface point.
    pub local: Vec<[f64; 3]>,
    /// Characteristic friction radius squared of the support patch.
    pub rho2: f64,
}

impl BoxBody {
    pub fn world_positions(&self) -> Vec<[f64; 3]> {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        self.local
            .iter()
            .map(|l| {
                [
                    self.center[0] + c * l[0] - s * l[1],
                    self.center[1] + s * l[0] + c * l[1],
                    l[2],
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ClothTopo {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    /// Distance constraints as (local i, local j, rest length).
    pub springs: Vec<(usize, usize, f64)>,
    /// (local cloth vertex, effector group, offset from group centroid).
    pub pins: Vec<(usize, usize, [f64; 3])>,
}

#[derive(Clone, Debug)]
pub(crate) struct RopeInfo {
    pub rest_len: f64,
    /// (local rope vertex, effector group, offset from group centroid).
    pub pins: Vec<(usize, usize, [f64; 3])>,
}

#[derive(Clone, Debug)]
pub(crate) struct Hidden {
    pub rigid: Range<usize>,
    pub granular: Range<usize>,
    pub rope: Range<usize>,
    pub cloth: Range<usize>,
    pub ee: Range<usize>,
    pub box_body: Option<BoxBody>,
    pub rope_info: Option<RopeInfo>,
    pub cloth_topo: Option<ClothTopo>,
    pub granular_radius: f64,
    /// Per-disk creep speed on the cloth. Fabric motion feeds it, rest
    /// decays it, which keeps passive settling dissipative.
    pub slide_speed: Vec<f64>,
    /// Per-vertex fabric speed, same role: pin motion feeds it, rest
    /// decays it.
    pub cloth_speed: Vec<f64>,
}

impl Hidden {
    pub fn range(&self, m: Material) -> Range<usize> {
        match m {
            Material::Rigid => self.rigid.clone(),
            Material::Granular => self.granular.clone(),
            Material::Rope => self.rope.clone(),
            Material::Cloth => self.cloth.clone(),
        }
    }

    /// Index rows of one effector group within the full particle list.
    pub fn ee_group_rows(&self, effector: &Effector, group: usize) -> Range<usize> {
        let per = EE_POINTS / effector.groups();
        self.ee.start + group * per..self.ee.start + (group + 1) * per
    }
}

fn layout_ranges(counts: &MaterialCounts) -> (Range<usize>, Range<usize>, Range<usize>, Range<usize>, Range<usize>) {
    let r0 = 0..counts.rigid;
    let g0 = r0.end..r0.end + counts.granular;
    let p0 = g0.end..g0.end + counts.rope;
    let c0 = p0.end..p0.end + counts.cloth;
    let e0 = c0.end..c0.end + EE_POINTS;
    (r0, g0, p0, c0, e0)
}

/// Farthest-point downsampling; starts from the point nearest the
/// centroid so the selection is deterministic.
pub(crate) fn farthest_point_sample(dense: &[[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    assert!(n <= dense.len(), "cannot sample {} from {}", n, dense.len());
    let centroid = dense.iter().fold([0.0; 3], |acc, p| vec3::add(acc, *p));
    let centroid = vec3::scale(centroid, 1.0 / dense.len() as f64);
    let mut chosen = Vec::with_capacity(n);
    let mut best = 0;
    for (i, p) in dense.iter().enumerate() {
        if vec3::dist_sq(*p, centroid) < vec3::dist_sq(dense[best], centroid) {
            best = i;
        }
    }
    chosen.push(best);
    let mut min_dist: Vec<f64> = dense.iter().map(|p| vec3::dist_sq(*p, dense[best])).collect();
    while chosen.len() < n {
        let mut far = 0;
        for i in 0..dense.len() {
            if min_dist[i] > min_dist[far] {
                far = i;
            }
        }
        chosen.push(far);
        for i in 0..dense.len() {
            let d = vec3::dist_sq(dense[i], dense[far]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    chosen.into_iter().map(|i| dense[i]).collect()
}

fn dense_box_surface(size: [f64; 3]) -> Vec<[f64; 3]> {
    let (hw, hl, h) = (size[0] / 2.0, size[1] / 2.0, size[2]);
    let mut pts = Vec::new();
    let steps = 9;
    for i in 0..steps {
        for j in 0..steps {
            let x = -hw + size[0] * i as f64 / (steps - 1) as f64;
            let y = -hl + size[1] * j as f64 / (steps - 1) as f64;
            pts.push([x, y, h]);
        }
    }
    let vsteps = 4;
    for i in 0..steps {
        for k in 0..vsteps {
            let x = -hw + size[0] * i as f64 / (steps - 1) as f64;
            let z = h * (k + 1) as f64 / vsteps as f64;
            pts.push([x, -hl, z]);
            pts.push([x, hl, z]);
        }
    }
    for j in 1..steps - 1 {
        for k in 0..vsteps {
            let y = -hl + size[1] * j as f64 / (steps - 1) as f64;
            let z = h * (k + 1) as f64 / vsteps as f64;
            pts.push([-hw, y, z]);
            pts.push([hw, y, z]);
        }
    }
    pts
}

fn pusher_points(center: [f64; 2], radius: f64) -> Vec<[f64; 3]> {
    (0..EE_POINTS)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / EE_POINTS as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin(), PUSHER_Z]
        })
        .collect()
}

fn gripper_points(center: [f64; 3], jaw_gap: f64, count: usize) -> Vec<[f64; 3]> {
    let heights = count / 2;
    let mut pts = Vec::with_capacity(count);
    for side in [-1.0, 1.0] {
        for k in 0..heights {
            pts.push([
                center[0] + side * jaw_gap / 2.0,
                center[1],
                center[2] + 0.005 * k as f64,
            ]);
        }
    }
    pts
}

/// Reproducible initial configuration; the same seed gives a bitwise
/// identical scene.
pub fn create_scene(spec: &TaskSpec, seed: u64) -> Result<SceneState, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);

    let counts = spec.counts;
    let (rigid_r, gran_r, rope_r, cloth_r, ee_r) = layout_ranges(&counts);
    let total = ee_r.end;
    let mut positions = vec![[0.0f64; 3]; total];
    let mut kinds: Vec<Option<Material>> = Vec::with_capacity(total);
    kinds.extend(std::iter::repeat(Some(Material::Rigid)).take(counts.rigid));
    kinds.extend(std::iter::repeat(Some(Material::Granular)).take(counts.granular));
    kinds.extend(std::iter::repeat(Some(Material::Rope)).take(counts.rope));
    kinds.extend(std::iter::repeat(Some(Material::Cloth)).take(counts.cloth));
    kinds.extend(std::iter::repeat(None).take(EE_POINTS));

    let ws = spec.workspace;
    let center = ws.center_xy();
    let geom = spec.geometry;

    let mut box_body = None;
    if counts.rigid > 0 {
        let size = geom.box_size;
        let ex = ws.extent();
        if size[0] >= ex[0] / 2.0 || size[1] >= ex[1] / 2.0 {
            return Err(SimError::Capacity(format!(
                "box {:?} too large for workspace {:?}",
                size, ex
            )));
        }
        let dense = dense_box_surface(size);
        if counts.rigid > dense.len() {
            return Err(SimError::Capacity(format!(
                "{} rigid particles exceed the {}-point surface sampling",
                counts.rigid,
                dense.len()
            )));
        }
        let local = farthest_point_sample(&dense, counts.rigid);
        let bc = [
            center[0] + rng.gen_range(-0.05..0.05),
            center[1] + rng.gen_range(-0.05..0.05),
        ];
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let half = [size[0] / 2.0, size[1] / 2.0];
        let body = BoxBody {
            center: bc,
            theta,
            half,
            local,
            rho2: (half[0] * half[0] + half[1] * half[1]) / 3.0,
        };
        positions[rigid_r.clone()].copy_from_slice(&body.world_positions());
        box_body = Some(body);
    }

    let mut rope_info = None;
    if counts.rope > 0 {
        let n = counts.rope;
        let rest = geom.rope_rest_len;
        let ex = ws.extent();
        let diag = (ex[0] * ex[0] + ex[1] * ex[1]).sqrt();
        if rest * (n - 1) as f64 > 1.5 * diag {
            return Err(SimError::Capacity(format!(
                "rope of length {:.3} m cannot fit the workspace",
                rest * (n - 1) as f64
            )));
        }
        let margin = 0.06;
        let mut p = [
            rng.gen_range(ws.min[0] + margin..ws.max[0] - margin),
            rng.gen_range(ws.min[1] + margin..ws.max[1] - margin),
        ];
        let mut dir = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        for i in 0..n {
            positions[rope_r.start + i] = [p[0], p[1], ROPE_Z];
            if i + 1 < n {
                dir += rng.gen_range(-0.25..0.25);
                let mut q = [p[0] + rest * dir.cos(), p[1] + rest * dir.sin()];
                // bounce the heading off the margins
                for axis in 0..2 {
                    if q[axis] < ws.min[axis] + margin || q[axis] > ws.max[axis] - margin {
                        dir = if axis == 0 {
                            std::f64::consts::PI - dir
                        } else {
                            -dir
                        };
                        q = [p[0] + rest * dir.cos(), p[1] + rest * dir.sin()];
                    }
                }
                p = q;
            }
        }
        rope_info = Some(RopeInfo {
            rest_len: rest,
            pins: Vec::new(),
        });
    }

    let mut cloth_topo = None;
    if counts.cloth > 0 {
        let cols = geom.cloth_cols;
        let rows = counts.cloth / cols;
        let s = geom.cloth_spacing;
        let (w, l) = ((cols - 1) as f64 * s, (rows - 1) as f64 * s);
        let ex = ws.extent();
        if w > ex[0] - 0.1 || l > ex[1] - 0.1 {
            return Err(SimError::Capacity(format!(
                "cloth {:.2} x {:.2} m too large for the workspace",
                w, l
            )));
        }
        let ox = center[0] - w / 2.0 + rng.gen_range(-0.03..0.03);
        let oy = center[1] - l / 2.0 + rng.gen_range(-0.03..0.03);
        for r in 0..rows {
            for c in 0..cols {
                positions[cloth_r.start + r * cols + c] = [ox + c as f64 * s, oy + r as f64 * s, 0.0];
            }
        }
        let mut springs = Vec::new();
        let idx = |r: usize, c: usize| r * cols + c;
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    springs.push((idx(r, c), idx(r, c + 1), s));
                }
                if r + 1 < rows {
                    springs.push((idx(r, c), idx(r + 1, c), s));
                }
                if r + 1 < rows && c + 1 < cols {
                    let diag = s * std::f64::consts::SQRT_2;
                    springs.push((idx(r, c), idx(r + 1, c + 1), diag));
                    springs.push((idx(r, c + 1), idx(r + 1, c), diag));
                }
            }
        }
        cloth_topo = Some(ClothTopo {
            rows,
            cols,
            spacing: s,
            springs,
            pins: Vec::new(),
        });
    }

    if counts.granular > 0 {
        let r = geom.granular_radius;
        // spawn region: on the cloth, beside the rope midpoint, or a
        // central cluster, depending on the task
        let (cx, cy, region) = match spec.task {
            TaskId::ClothGather => {
                let topo = cloth_topo.as_ref().unwrap();
                let (w, l) = (
                    (topo.cols - 1) as f64 * topo.spacing,
                    (topo.rows - 1) as f64 * topo.spacing,
                );
                let base = positions[cloth_r.start];
                (base[0] + w / 2.0, base[1] + l / 2.0, (w / 2.0 - r).min(l / 2.0 - r))
            }
            TaskId::RopeSweep => {
                let mid = positions[rope_r.start + counts.rope / 2];
                let ang = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let d = 0.07;
                (
                    (mid[0] + d * ang.cos()).clamp(ws.min[0] + 0.08, ws.max[0] - 0.08),
                    (mid[1] + d * ang.sin()).clamp(ws.min[1] + 0.08, ws.max[1] - 0.08),
                    0.05,
                )
            }
            _ => (center[0], center[1], 0.085),
        };
        let area_needed = counts.granular as f64 * (2.0 * r) * (2.0 * r);
        let area_have = std::f64::consts::PI * region * region;
        if area_needed > 0.7 * area_have {
            return Err(SimError::Capacity(format!(
                "{} granular disks of radius {} exceed the spawn region",
                counts.granular, r
            )));
        }
        let rope_clear = |p: [f64; 2]| -> bool {
            if counts.rope == 0 {
                return true;
            }
            for i in rope_r.start..rope_r.end - 1 {
                let (a, b) = (positions[i], positions[i + 1]);
                let ab = [b[0] - a[0], b[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                let t = if len2 < 1e-18 {
                    0.0
                } else {
                    (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
                };
                let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
                if vec3::norm_xy([p[0] - q[0], p[1] - q[1]]) < r + ROPE_CONTACT_R + 0.004 {
                    return false;
                }
            }
            true
        };
        let mut placed: Vec<[f64; 2]> = Vec::with_capacity(counts.granular);
        let mut attempts = 0;
        while placed.len() < counts.granular {
            attempts += 1;
            if attempts > 20_000 {
                return Err(SimError::Capacity("granular packing did not converge".into()));
            }
            let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let rr = region * rng.gen_range(0.0f64..1.0).sqrt();
            let p = [cx + rr * a.cos(), cy + rr * a.sin()];
            if rope_clear(p)
                && placed
                    .iter()
                    .all(|q| vec3::norm_xy([p[0] - q[0], p[1] - q[1]]) >= 2.0 * r + 1e-4)
            {
                placed.push(p);
            }
        }
        let base_z = match spec.task {
            // resting on the cloth surface (cloth starts flat at z = 0)
            TaskId::ClothGather => r,
            _ => r,
        };
        for (i, p) in placed.iter().enumerate() {
            positions[gran_r.start + i] = [p[0], p[1], base_z];
        }
    }

    // effector placement
    let obj_centroid_xy = {
        let n_obj = counts.total();
        let mut acc = [0.0, 0.0];
        for p in positions.iter().take(n_obj) {
            acc[0] += p[0];
            acc[1] += p[1];
        }
        [acc[0] / n_obj as f64, acc[1] / n_obj as f64]
    };

    let ee_positions: Vec<[f64; 3]> = match spec.effector {
        Effector::Pusher { radius } => {
            let mut chosen = None;
            for _ in 0..64 {
                let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let d = rng.gen_range(0.09..0.15);
                let c = [
                    (obj_centroid_xy[0] + d * a.cos()).clamp(ws.min[0] + 0.04, ws.max[0] - 0.04),
                    (obj_centroid_xy[1] + d * a.sin()).clamp(ws.min[1] + 0.04, ws.max[1] - 0.04),
                ];
                let clear = positions[..counts.total()]
                    .iter()
                    .all(|p| vec3::norm_xy([p[0] - c[0], p[1] - c[1]]) > radius + 0.04);
                if clear {
                    chosen = Some(c);
                    break;
                }
            }
            let c = chosen.ok_or_else(|| SimError::Capacity("no free pusher start position".into()))?;
            pusher_points(c, radius)
        }
        Effector::Gripper { jaw_gap } => {
            // grasp a cloth vertex: a corner for dragging, a central
            // vertex for gathering
            let topo = cloth_topo.as_ref().expect("gripper tasks have cloth");
            let local = match spec.task {
                TaskId::ClothGather => {
                    let r = topo.rows / 2 + rng.gen_range(0..2).min(topo.rows - 1 - topo.rows / 2);
                    let c = topo.cols / 2 + rng.gen_range(0..2).min(topo.cols - 1 - topo.cols / 2);
                    r * topo.cols + c
                }
                _ => {
                    let corners = [
                        0,
                        topo.cols - 1,
                        (topo.rows - 1) * topo.cols,
                        topo.rows * topo.cols - 1,
                    ];
                    corners[rng.gen_range(0..4)]
                }
            };
            let grasp = positions[cloth_r.start + local];
            let pts = gripper_points([grasp[0], grasp[1], grasp[2] + GRIPPER_PIN_DROP], jaw_gap, EE_POINTS);
            let centroid = ee_centroid(&pts);
            let offset = vec3::sub(grasp, centroid);
            cloth_topo.as_mut().unwrap().pins.push((local, 0, offset));
            pts
        }
        Effector::DualGripper { jaw_gap } => {
            let info = rope_info.as_mut().expect("dual gripper tasks have rope");
            let first = positions[rope_r.start];
            let last = positions[rope_r.end - 1];
            let per = EE_POINTS / 2;
            let mut pts = gripper_points(first, jaw_gap, per);
            pts.extend(gripper_points(last, jaw_gap, per));
            let c0 = ee_centroid(&pts[..per]);
            let c1 = ee_centroid(&pts[per..]);
            info.pins.push((0, 0, vec3::sub(first, c0)));
            info.pins.push((counts.rope - 1, 1, vec3::sub(last, c1)));
            pts
        }
    };
    positions[ee_r.clone()].copy_from_slice(&ee_positions);

    let particles = ParticleSet::new(positions, kinds, vec![[0.0; 3]; total])?;
    Ok(SceneState {
        particles,
        hidden: Hidden {
            rigid: rigid_r,
            granular: gran_r.clone(),
            rope: rope_r,
            cloth: cloth_r.clone(),
            ee: ee_r,
            box_body,
            rope_info,
            cloth_topo,
            granular_radius: geom.granular_radius,
            slide_speed: vec![0.0; gran_r.len()],
            cloth_speed: vec![0.0; cloth_r.len()],
        },
    })
}

pub(crate) fn ee_centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for p in points {
        acc = vec3::add(acc, *p);
    }
    vec3::scale(acc, 1.0 / points.len() as f64)
}
