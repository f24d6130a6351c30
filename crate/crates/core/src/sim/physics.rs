//! Quasi-static stepping: kinematic effector motion followed by
//! position-based constraint restoration per material.
//!
//! No velocities are carried between steps; materials move only while
//! pushed, pulled by pins, or relaxing under the gravity bias (cloth) and
//! slope sliding (granular). This keeps the oracle deterministic and
//! passively dissipative.

use super::scene::{ee_centroid, Hidden, ROPE_CONTACT_R, ROPE_Z};
use super::{Effector, SceneState, SimError, TaskId, TaskSpec, EE_POINTS};
use crate::model::ParticleSet;
use crate::vec3;

const GRAVITY: f64 = 9.81;
/// Relative segment-length error the rope projection drives to. Far
/// below the 1% scene invariant: a rope left at a loose tolerance keeps
/// creeping toward it across steps and stirs whatever it touches.
const ROPE_PROJECT_TOL: f64 = 1e-7;
const EXTRA_PROJECT_PASSES: usize = 56;
const ROPE_MAX_PASSES: usize = 4000;
/// Per-step caps on granular support-following and sliding, so support
/// transitions stay smooth and dissipation monotone.
const GRANULAR_MAX_DROP: f64 = 0.02;
const GRANULAR_MAX_SLIDE: f64 = 0.012;

pub(crate) fn step(
    scene: &SceneState,
    ee_motion: &[[f64; 3]],
    spec: &TaskSpec,
) -> Result<SceneState, SimError> {
    if ee_motion.len() != EE_POINTS {
        return Err(SimError::InvalidAction(format!(
            "expected {} effector motion rows, got {}",
            EE_POINTS,
            ee_motion.len()
        )));
    }
    let max_step = spec.max_step_displacement() + 1e-12;
    for (i, row) in ee_motion.iter().enumerate() {
        if !row.iter().all(|c| c.is_finite()) {
            return Err(SimError::InvalidAction(format!("non-finite motion row {}", i)));
        }
        let speed = vec3::norm(*row);
        if speed > max_step {
            return Err(SimError::InvalidAction(format!(
                "motion row {} moves {:.4} m, above the {:.4} m per-step limit",
                i,
                speed,
                spec.max_step_displacement()
            )));
        }
    }

    let hidden = &scene.hidden;
    let old_positions = scene.particles.positions().to_vec();
    let mut pos = old_positions.clone();

    for (k, i) in hidden.ee.clone().enumerate() {
        pos[i] = vec3::add(pos[i], ee_motion[k]);
        if pos[i][2] < 0.0 {
            return Err(SimError::InvalidAction(format!(
                "motion row {} drives the effector below the floor (z = {:.4})",
                k, pos[i][2]
            )));
        }
    }

    let mut box_body = hidden.box_body.clone();
    if let (Some(body), Effector::Pusher { radius }) = (box_body.as_mut(), spec.effector) {
        let pusher = pusher_center(&pos, hidden);
        resolve_box_pusher(body, pusher, radius, spec);
        let world = body.world_positions();
        pos[hidden.rigid.clone()].copy_from_slice(&world);
    }

    if hidden.rope_info.is_some() {
        step_rope(&mut pos, hidden, spec);
    }

    let mut cloth_speed = hidden.cloth_speed.clone();
    let mut cloth_activity = 0.0;
    if hidden.cloth_topo.is_some() {
        cloth_activity = step_cloth(&mut pos, hidden, &mut cloth_speed, spec);
    }

    let mut slide_speed = hidden.slide_speed.clone();
    if !hidden.granular.is_empty() {
        step_granular(&mut pos, &old_positions, hidden, &mut slide_speed, cloth_activity, spec);
    }

    let total = pos.len();
    let mut motion = vec![[0.0; 3]; total];
    for i in hidden.ee.clone() {
        motion[i] = vec3::sub(pos[i], old_positions[i]);
    }
    let particles = ParticleSet::new(pos, scene.particles.kinds().to_vec(), motion)?;
    Ok(SceneState {
        particles,
        hidden: Hidden {
            box_body,
            slide_speed,
            cloth_speed,
            ..hidden.clone()
        },
    })
}

fn pusher_center(pos: &[[f64; 3]], hidden: &Hidden) -> [f64; 2] {
    let pts: Vec<[f64; 3]> = hidden.ee.clone().map(|i| pos[i]).collect();
    let c = ee_centroid(&pts);
    [c[0], c[1]]
}

// --- rigid ---------------------------------------------------------------

struct Contact {
    penetration: f64,
    /// Unit direction the box must move, in world coordinates.
    normal: [f64; 2],
    /// Contact point on the box boundary, world coordinates.
    point: [f64; 2],
}

fn circle_obb_contact(pusher: [f64; 2], radius: f64, body: &super::scene::BoxBody) -> Option<Contact> {
    let (c, s) = (body.theta.cos(), body.theta.sin());
    let rel = [pusher[0] - body.center[0], pusher[1] - body.center[1]];
    // into the box frame
    let q = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]];
    let clamped = [
        q[0].clamp(-body.half[0], body.half[0]),
        q[1].clamp(-body.half[1], body.half[1]),
    ];
    let to_world = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
    if q != clamped {
        // pusher center outside the rectangle
        let d = [q[0] - clamped[0], q[1] - clamped[1]];
        let dist = vec3::norm_xy(d);
        let pen = radius - dist;
        if pen <= 0.0 {
            return None;
        }
        let n_local = [-d[0] / dist, -d[1] / dist];
        Some(Contact {
            penetration: pen,
            normal: to_world(n_local),
            point: {
                let w = to_world(clamped);
                [body.center[0] + w[0], body.center[1] + w[1]]
            },
        })
    } else {
        // pusher center inside: exit through the nearest face
        let depths = [
            body.half[0] - q[0], // +x face
            q[0] + body.half[0], // -x face
            body.half[1] - q[1], // +y face
            q[1] + body.half[1], // -y face
        ];
        let (face, &depth) = depths
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let (n_local, face_point) = match face {
            0 => ([-1.0, 0.0], [body.half[0], q[1]]),
            1 => ([1.0, 0.0], [-body.half[0], q[1]]),
            2 => ([0.0, -1.0], [q[0], body.half[1]]),
            _ => ([0.0, 1.0], [q[0], -body.half[1]]),
        };
        Some(Contact {
            penetration: depth + radius,
            normal: to_world(n_local),
            point: {
                let w = to_world(face_point);
                [body.center[0] + w[0], body.center[1] + w[1]]
            },
        })
    }
}

/// Quasi-static planar pushing: penetration is removed by a mix of
/// translation and rotation about the support patch, with the split set
/// by the contact lever arm against the friction radius `rho`.
fn resolve_box_pusher(
    body: &mut super::scene::BoxBody,
    pusher: [f64; 2],
    radius: f64,
    spec: &TaskSpec,
) {
    for _ in 0..spec.pbd_iterations + EXTRA_PROJECT_PASSES {
        let contact = match circle_obb_contact(pusher, radius, body) {
            Some(c) if c.penetration > 1e-12 => c,
            _ => break,
        };
        let r = [
            contact.point[0] - body.center[0],
            contact.point[1] - body.center[1],
        ];
        let s = [
            contact.normal[0] * contact.penetration,
            contact.normal[1] * contact.penetration,
        ];
        let denom = body.rho2 + r[0] * r[0] + r[1] * r[1];
        let dtheta = vec3::cross_z(r, s) / denom;
        let f = body.rho2 / denom;
        body.center[0] += s[0] * f;
        body.center[1] += s[1] * f;
        body.theta += dtheta;
    }
    // any residual penetration goes to pure translation
    if let Some(c) = circle_obb_contact(pusher, radius, body) {
        if c.penetration > 0.0 {
            body.center[0] += c.normal[0] * c.penetration;
            body.center[1] += c.normal[1] * c.penetration;
        }
    }
    // keep the box inside the workspace
    let (cos, sin) = (body.theta.cos(), body.theta.sin());
    let ex = (body.half[0] * cos).abs() + (body.half[1] * sin).abs();
    let ey = (body.half[0] * sin).abs() + (body.half[1] * cos).abs();
    let ws = spec.workspace;
    body.center[0] = body.center[0].clamp(ws.min[0] + ex, ws.max[0] - ex);
    body.center[1] = body.center[1].clamp(ws.min[1] + ey, ws.max[1] - ey);
}

// --- rope ----------------------------------------------------------------

fn pin_targets(
    pos: &[[f64; 3]],
    hidden: &Hidden,
    spec: &TaskSpec,
    pins: &[(usize, usize, [f64; 3])],
) -> Vec<(usize, [f64; 3])> {
    pins.iter()
        .map(|&(local, group, offset)| {
            let rows = hidden.ee_group_rows(&spec.effector, group);
            let pts: Vec<[f64; 3]> = rows.map(|i| pos[i]).collect();
            let mut target = vec3::add(ee_centroid(&pts), offset);
            if target[2] < 0.0 {
                target[2] = 0.0;
            }
            (local, target)
        })
        .collect()
}

fn step_rope(pos: &mut [[f64; 3]], hidden: &Hidden, spec: &TaskSpec) {
    let info = hidden.rope_info.as_ref().unwrap();
    let range = hidden.rope.clone();
    let n = range.len();
    let rest = info.rest_len;

    let mut targets = pin_targets(pos, hidden, spec, &info.pins);
    // a taut rope slips in the grippers rather than stretching
    if targets.len() == 2 {
        let total = rest * (n - 1) as f64;
        let (a, b) = (targets[0].1, targets[1].1);
        let d = vec3::dist(a, b);
        let cap = 0.95 * total;
        if d > cap {
            let mid = vec3::scale(vec3::add(a, b), 0.5);
            let dir = vec3::scale(vec3::sub(a, b), 1.0 / d);
            targets[0].1 = vec3::add(mid, vec3::scale(dir, cap / 2.0));
            targets[1].1 = vec3::sub(mid, vec3::scale(dir, cap / 2.0));
        }
    }
    for &(local, target) in &targets {
        pos[range.start + local] = target;
    }
    let pinned: Vec<bool> = {
        let mut v = vec![false; n];
        for &(local, _) in &targets {
            v[local] = true;
        }
        v
    };

    // pusher sweeps free rope particles aside
    if let Effector::Pusher { radius } = spec.effector {
        let pc = pusher_center(pos, hidden);
        for i in 0..n {
            if !pinned[i] {
                push_disk_out(&mut pos[range.start + i], pc, radius + ROPE_CONTACT_R);
            }
        }
    }

    for pass in 0..ROPE_MAX_PASSES {
        let mut worst: f64 = 0.0;
        for i in 0..n - 1 {
            let (a, b) = (range.start + i, range.start + i + 1);
            let d = vec3::dist(pos[a], pos[b]);
            if d < 1e-12 {
                continue;
            }
            worst = worst.max((d - rest).abs() / rest);
            let corr = vec3::scale(vec3::sub(pos[b], pos[a]), (d - rest) / d);
            match (pinned[i], pinned[i + 1]) {
                (false, false) => {
                    pos[a] = vec3::add(pos[a], vec3::scale(corr, 0.5));
                    pos[b] = vec3::sub(pos[b], vec3::scale(corr, 0.5));
                }
                (false, true) => pos[a] = vec3::add(pos[a], corr),
                (true, false) => pos[b] = vec3::sub(pos[b], corr),
                (true, true) => {}
            }
        }
        if pass + 1 >= spec.pbd_iterations && worst <= ROPE_PROJECT_TOL {
            break;
        }
    }

    // the rope stays planar; free particles ride at their rest height
    for i in 0..n {
        if !pinned[i] {
            pos[range.start + i][2] = ROPE_Z;
        } else if pos[range.start + i][2] < 0.0 {
            pos[range.start + i][2] = 0.0;
        }
    }
}

// --- cloth ---------------------------------------------------------------

/// Returns the largest vertex displacement (fabric activity).
fn step_cloth(pos: &mut [[f64; 3]], hidden: &Hidden, cloth_speed: &mut [f64], spec: &TaskSpec) -> f64 {
    let topo = hidden.cloth_topo.as_ref().unwrap();
    let range = hidden.cloth.clone();
    let n = range.len();

    let targets = pin_targets(pos, hidden, spec, &topo.pins);
    let mut pin_activity: f64 = 0.0;
    for &(local, target) in &targets {
        pin_activity = pin_activity.max(vec3::dist(pos[range.start + local], target));
        pos[range.start + local] = target;
    }
    let pinned: Vec<bool> = {
        let mut v = vec![false; n];
        for &(local, _) in &targets {
            v[local] = true;
        }
        v
    };

    // overdamped gravity bias, then constraint projection. The sink is
    // split over substeps so it never outruns what the projection can
    // restore; otherwise a hanging cloth sustains a limit cycle.
    let before: Vec<[f64; 3]> = pos[range.clone()].to_vec();
    const SUBSTEPS: usize = 4;
    let sink = GRAVITY * spec.dt * spec.dt / SUBSTEPS as f64;
    for _ in 0..SUBSTEPS {
        for i in 0..n {
            if !pinned[i] {
                pos[range.start + i][2] = (pos[range.start + i][2] - sink).max(0.0);
            }
        }
        for _ in 0..spec.pbd_iterations {
            for &(li, lj, rest) in &topo.springs {
                let (a, b) = (range.start + li, range.start + lj);
                let d = vec3::dist(pos[a], pos[b]);
                if d < 1e-12 {
                    continue;
                }
                let corr = vec3::scale(vec3::sub(pos[b], pos[a]), (d - rest) / d);
                match (pinned[li], pinned[lj]) {
                    (false, false) => {
                        pos[a] = vec3::add(pos[a], vec3::scale(corr, 0.5));
                        pos[b] = vec3::sub(pos[b], vec3::scale(corr, 0.5));
                    }
                    (false, true) => pos[a] = vec3::add(pos[a], corr),
                    (true, false) => pos[b] = vec3::sub(pos[b], corr),
                    (true, true) => {}
                }
            }
            for i in 0..n {
                if !pinned[i] && pos[range.start + i][2] < 0.0 {
                    pos[range.start + i][2] = 0.0;
                }
            }
        }
    }
    // under-relax toward the projected state, then clip each vertex to
    // its motion budget: budgets relax from actual usage and are fed by
    // pin motion, so a frozen scene settles monotonically instead of
    // accelerating when slack releases
    let mut activity: f64 = 0.0;
    for i in 0..n {
        if !pinned[i] {
            let (a, b) = (before[i], pos[range.start + i]);
            let mut d = vec3::scale(vec3::sub(b, a), 0.85);
            let budget = (0.9 * cloth_speed[i]).max(1.5 * pin_activity);
            let norm = vec3::norm(d);
            if norm > budget {
                d = vec3::scale(d, budget / norm.max(1e-300));
            }
            pos[range.start + i] = vec3::add(a, d);
            if pos[range.start + i][2] < 0.0 {
                pos[range.start + i][2] = 0.0;
            }
        }
        let moved = vec3::dist(before[i], pos[range.start + i]);
        cloth_speed[i] = moved;
        activity = activity.max(moved);
    }
    activity
}

// --- granular ------------------------------------------------------------

fn push_disk_out(p: &mut [f64; 3], center: [f64; 2], clearance: f64) {
    let d = [p[0] - center[0], p[1] - center[1]];
    let dist = vec3::norm_xy(d);
    if dist >= clearance {
        return;
    }
    if dist < 1e-12 {
        p[0] = center[0] + clearance;
        return;
    }
    let f = clearance / dist;
    p[0] = center[0] + d[0] * f;
    p[1] = center[1] + d[1] * f;
}

fn closest_on_segment_xy(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> [f64; 2] {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 < 1e-18 {
        return [a[0], a[1]];
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * ab[0], a[1] + t * ab[1]]
}

fn step_granular(
    pos: &mut [[f64; 3]],
    old: &[[f64; 3]],
    hidden: &Hidden,
    slide_speed: &mut [f64],
    cloth_activity: f64,
    spec: &TaskSpec,
) {
    let range = hidden.granular.clone();
    let r = hidden.granular_radius;

    // support height and downhill creep on the cloth (cloth_gather).
    // Creep is powered by fabric motion and decays geometrically at
    // rest, so a frozen scene settles monotonically.
    if let Some(topo) = hidden.cloth_topo.as_ref() {
        let cloth = hidden.cloth.clone();
        for (k, gi) in range.clone().enumerate() {
            let g = pos[gi];
            let mut nearest = (f64::INFINITY, 0usize);
            let mut lowest: Option<(f64, usize)> = None;
            let mut wsum = 0.0;
            let mut wz = 0.0;
            let radius = 2.0 * topo.spacing;
            for ci in cloth.clone() {
                let d = vec3::norm_xy([g[0] - pos[ci][0], g[1] - pos[ci][1]]);
                if d < nearest.0 {
                    nearest = (d, ci);
                }
                if d < radius {
                    let w = (1.0 - d / radius) * (1.0 - d / radius);
                    wsum += w;
                    wz += w * pos[ci][2];
                }
                if d < 1.6 * topo.spacing {
                    let z = pos[ci][2];
                    if lowest.map_or(true, |(lz, _)| z < lz) {
                        lowest = Some((z, ci));
                    }
                }
            }
            let steep = lowest.map_or(0.0, |(low_z, _)| {
                (pos[nearest.1][2] - low_z) / topo.spacing
            });

            // support: weighted cloth height, blended to the floor past
            // the cloth edge; continuous in the disk position so the
            // follower never jumps
            let support = {
                let cz = if wsum > 1e-12 { wz / wsum } else { 0.0 };
                let d = nearest.0;
                if d <= 1.5 * topo.spacing {
                    cz
                } else if d >= 2.5 * topo.spacing {
                    0.0
                } else {
                    cz * (2.5 - d / topo.spacing)
                }
            };
            let target_z = (support + r).max(r);

            // desired motion: downhill creep plus the support gap
            let mut want = [0.0, 0.0, target_z - old[gi][2]];
            if steep > spec.friction {
                if let Some((_, low_i)) = lowest {
                    let dir = [pos[low_i][0] - g[0], pos[low_i][1] - g[1]];
                    let len = vec3::norm_xy(dir);
                    if len > 1e-9 {
                        let creep = (0.5 * (steep - spec.friction) * topo.spacing).min(GRANULAR_MAX_SLIDE);
                        want[0] = dir[0] / len * creep;
                        want[1] = dir[1] / len * creep;
                    }
                }
            }

            // the motion budget relaxes from last step's actual motion
            // and never exceeds the fabric's own pace, so frozen scenes
            // settle monotonically
            let budget = (0.9 * slide_speed[k]).max(0.8 * cloth_activity).min(GRANULAR_MAX_DROP);
            let need = vec3::norm(want);
            let mut moved = if need > budget && need > 1e-12 {
                vec3::scale(want, budget / need)
            } else {
                want
            };
            // stop at contact with other disks rather than shoving them;
            // piles form without injecting motion
            let mut t = 1.0;
            let mut clear = false;
            for _ in 0..26 {
                let cand = vec3::add(old[gi], vec3::scale(moved, t));
                let blocked = range.clone().any(|gj| {
                    gj != gi
                        && vec3::norm_xy([cand[0] - pos[gj][0], cand[1] - pos[gj][1]])
                            < 2.0 * r - 1e-9
                });
                if !blocked {
                    clear = true;
                    break;
                }
                t *= 0.5;
            }
            if !clear {
                moved = [0.0; 3];
            } else if t < 1.0 {
                moved = vec3::scale(moved, t);
            }
            pos[gi] = vec3::add(old[gi], moved);
            slide_speed[k] = vec3::norm(moved);
        }
    }

    // joint projection: rope sweeping, pusher contact, disk-disk
    // separation, and wall clamps relax together until feasible, so no
    // pair of constraints keeps fighting across steps
    let ws = spec.workspace;
    let rope = hidden.rope_info.as_ref().map(|_| hidden.rope.clone());
    let pusher = match (spec.effector, spec.task) {
        (Effector::Pusher { radius }, TaskId::Granular) => Some((pusher_center(pos, hidden), radius)),
        _ => None,
    };
    for _ in 0..128 {
        let mut worst: f64 = 0.0;
        if let Some(rope) = rope.clone() {
            for gi in range.clone() {
                for si in rope.start..rope.end - 1 {
                    let q = closest_on_segment_xy(pos[gi], pos[si], pos[si + 1]);
                    let before = [pos[gi][0], pos[gi][1]];
                    push_disk_out(&mut pos[gi], q, r + ROPE_CONTACT_R);
                    worst = worst.max(vec3::norm_xy([pos[gi][0] - before[0], pos[gi][1] - before[1]]));
                }
            }
        }
        if let Some((pc, radius)) = pusher {
            for gi in range.clone() {
                let before = [pos[gi][0], pos[gi][1]];
                push_disk_out(&mut pos[gi], pc, radius + r);
                worst = worst.max(vec3::norm_xy([pos[gi][0] - before[0], pos[gi][1] - before[1]]));
            }
        }
        let idx: Vec<usize> = range.clone().collect();
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                let d = vec3::norm_xy([pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]]);
                let overlap = 2.0 * r - d;
                if overlap <= 0.0 {
                    continue;
                }
                worst = worst.max(overlap);
                if d < 1e-12 {
                    pos[i][0] += r;
                    pos[j][0] -= r;
                    continue;
                }
                let dir = [(pos[i][0] - pos[j][0]) / d, (pos[i][1] - pos[j][1]) / d];
                let half = overlap / 2.0;
                pos[i][0] += dir[0] * half;
                pos[i][1] += dir[1] * half;
                pos[j][0] -= dir[0] * half;
                pos[j][1] -= dir[1] * half;
            }
        }
        for &i in &idx {
            pos[i][0] = pos[i][0].clamp(ws.min[0] + r, ws.max[0] - r);
            pos[i][1] = pos[i][1].clamp(ws.min[1] + r, ws.max[1] - r);
            if pos[i][2] < r {
                pos[i][2] = r;
            }
        }
        if worst <= 1e-7 {
            break;
        }
    }
}
