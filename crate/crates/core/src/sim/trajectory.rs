//! Random smooth effector trajectories for data collection.
//!
//! Pushers chase re-sampled targets around the object centroid so
//! episodes stay contact-rich; grippers wander (cloth), cycle lift
//! phases (cloth_gather), or sweep jointly toward the granular pile
//! (rope_sweep). All motion is low-pass filtered and clamped to the
//! per-step speed limit.

use super::scene::ee_centroid;
use super::{Effector, SceneState, TaskId, TaskSpec, EE_POINTS};
use crate::vec3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) struct Sampler {
    kind: Kind,
}

enum Kind {
    Pusher {
        v: [f64; 2],
        target: [f64; 2],
        countdown: usize,
    },
    Wander {
        v: [f64; 3],
        countdown: usize,
        heading: f64,
    },
    LiftCycle {
        v: [f64; 3],
        phase: Phase,
        phase_left: usize,
        top: f64,
    },
    DualSweep {
        v: [[f64; 2]; 2],
        heading: f64,
        countdown: usize,
    },
}

enum Phase {
    Lift,
    Hold,
    Lower,
}

fn object_centroid_xy(scene: &SceneState) -> [f64; 2] {
    let pts: Vec<[f64; 3]> = scene
        .particles
        .object_indices()
        .iter()
        .map(|&i| scene.particles.positions()[i])
        .collect();
    let c = ee_centroid(&pts);
    [c[0], c[1]]
}

fn granular_centroid_xy(scene: &SceneState) -> [f64; 2] {
    let range = scene.hidden.granular.clone();
    let pts: Vec<[f64; 3]> = range.map(|i| scene.particles.positions()[i]).collect();
    let c = ee_centroid(&pts);
    [c[0], c[1]]
}

fn ee_group_centroid(scene: &SceneState, spec: &TaskSpec, group: usize) -> [f64; 3] {
    let rows = scene.hidden.ee_group_rows(&spec.effector, group);
    let pts: Vec<[f64; 3]> = rows.map(|i| scene.particles.positions()[i]).collect();
    ee_centroid(&pts)
}

impl Sampler {
    pub fn new(spec: &TaskSpec, scene: &SceneState, rng: &mut ChaCha8Rng) -> Self {
        let kind = match (spec.task, spec.effector) {
            (TaskId::ClothGather, _) => Kind::LiftCycle {
                v: [0.0; 3],
                phase: Phase::Lift,
                phase_left: 0,
                top: rng.gen_range(0.08..0.16),
            },
            (TaskId::Cloth, _) => Kind::Wander {
                v: [0.0; 3],
                countdown: 0,
                heading: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            },
            (_, Effector::DualGripper { .. }) => Kind::DualSweep {
                v: [[0.0; 2]; 2],
                heading: 0.0,
                countdown: 0,
            },
            _ => Kind::Pusher {
                v: [0.0; 2],
                target: object_centroid_xy(scene),
                countdown: 0,
            },
        };
        Sampler { kind }
    }

    /// One displacement row per effector point, speed-clamped.
    pub fn next_deltas(
        &mut self,
        spec: &TaskSpec,
        scene: &SceneState,
        rng: &mut ChaCha8Rng,
    ) -> Vec<[f64; 3]> {
        let cap = spec.max_step_displacement();
        let ws = spec.workspace;
        match &mut self.kind {
            Kind::Pusher { v, target, countdown } => {
                let ee = ee_group_centroid(scene, spec, 0);
                if *countdown == 0 || vec3::norm_xy([target[0] - ee[0], target[1] - ee[1]]) < 0.02 {
                    let c = object_centroid_xy(scene);
                    let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let d = rng.gen_range(0.0..0.07);
                    *target = [
                        (c[0] + d * a.cos()).clamp(ws.min[0] + 0.04, ws.max[0] - 0.04),
                        (c[1] + d * a.sin()).clamp(ws.min[1] + 0.04, ws.max[1] - 0.04),
                    ];
                    *countdown = rng.gen_range(8..18);
                }
                *countdown -= 1;
                let dir = {
                    let d = [target[0] - ee[0], target[1] - ee[1]];
                    let n = vec3::norm_xy(d);
                    if n < 1e-9 {
                        [0.0, 0.0]
                    } else {
                        [d[0] / n, d[1] / n]
                    }
                };
                let noise = [rng.gen_range(-0.2..0.2) * cap, rng.gen_range(-0.2..0.2) * cap];
                v[0] = 0.7 * v[0] + 0.3 * (dir[0] * 0.85 * cap + noise[0]);
                v[1] = 0.7 * v[1] + 0.3 * (dir[1] * 0.85 * cap + noise[1]);
                let delta = clamp_xy(bounce_xy(*v, ee, ws), cap);
                *v = delta;
                vec![[delta[0], delta[1], 0.0]; EE_POINTS]
            }
            Kind::Wander { v, countdown, heading } => {
                let ee = ee_group_centroid(scene, spec, 0);
                if *countdown == 0 {
                    *heading += rng.gen_range(-1.2..1.2);
                    *countdown = rng.gen_range(6..14);
                }
                *countdown -= 1;
                let speed = 0.7 * cap;
                v[0] = 0.7 * v[0] + 0.3 * (heading.cos() * speed + rng.gen_range(-0.15..0.15) * cap);
                v[1] = 0.7 * v[1] + 0.3 * (heading.sin() * speed + rng.gen_range(-0.15..0.15) * cap);
                v[2] = 0.0;
                let xy = clamp_xy(bounce_xy([v[0], v[1]], ee, ws), cap);
                v[0] = xy[0];
                v[1] = xy[1];
                vec![[xy[0], xy[1], 0.0]; EE_POINTS]
            }
            Kind::LiftCycle { v, phase, phase_left, top } => {
                let ee = ee_group_centroid(scene, spec, 0);
                let vz_target = match phase {
                    Phase::Lift => {
                        if ee[2] >= *top {
                            *phase = Phase::Hold;
                            *phase_left = rng.gen_range(5..12);
                        }
                        0.6 * cap
                    }
                    Phase::Hold => {
                        if *phase_left == 0 {
                            *phase = Phase::Lower;
                        } else {
                            *phase_left -= 1;
                        }
                        0.0
                    }
                    Phase::Lower => {
                        if ee[2] <= 0.015 {
                            *phase = Phase::Lift;
                            *top = rng.gen_range(0.08..0.16);
                        }
                        -0.5 * cap
                    }
                };
                v[0] = 0.7 * v[0] + 0.3 * rng.gen_range(-0.35..0.35) * cap;
                v[1] = 0.7 * v[1] + 0.3 * rng.gen_range(-0.35..0.35) * cap;
                v[2] = 0.7 * v[2] + 0.3 * vz_target;
                // split the speed budget: xy within 0.8 cap, z within
                // 0.6 cap, so the total stays inside the per-step limit
                let xy = clamp_xy(bounce_xy([v[0], v[1]], ee, ws), 0.8 * cap);
                let mut vz = v[2].clamp(-0.6 * cap, 0.6 * cap);
                // the lowest gripper point rides 0.0075 below the centroid
                if ee[2] + vz < 0.0095 {
                    vz = (0.0095 - ee[2]).min(0.6 * cap);
                }
                if ee[2] + vz > ws.max[2] - 0.05 {
                    vz = 0.0;
                }
                let delta = [xy[0], xy[1], vz];
                *v = delta;
                vec![delta; EE_POINTS]
            }
            Kind::DualSweep { v, heading, countdown } => {
                let c0 = ee_group_centroid(scene, spec, 0);
                let c1 = ee_group_centroid(scene, spec, 1);
                if *countdown == 0 {
                    let gran = granular_centroid_xy(scene);
                    let mid = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0];
                    let d = [gran[0] - mid[0], gran[1] - mid[1]];
                    let base = d[1].atan2(d[0]);
                    *heading = base + rng.gen_range(-0.5..0.5);
                    *countdown = rng.gen_range(10..20);
                }
                *countdown -= 1;
                let speed = 0.7 * cap;
                let mut deltas = [[0.0f64; 2]; 2];
                for (g, vel) in v.iter_mut().enumerate() {
                    let ee = if g == 0 { c0 } else { c1 };
                    vel[0] = 0.7 * vel[0]
                        + 0.3 * (heading.cos() * speed + rng.gen_range(-0.2..0.2) * cap);
                    vel[1] = 0.7 * vel[1]
                        + 0.3 * (heading.sin() * speed + rng.gen_range(-0.2..0.2) * cap);
                    deltas[g] = bounce_xy(*vel, ee, ws);
                }
                // keep the rope from being pulled taut or bunched
                if let Some(info) = scene.hidden.rope_info.as_ref() {
                    let total = info.rest_len * (scene.hidden.rope.len() - 1) as f64;
                    let na = [c0[0] + deltas[0][0], c0[1] + deltas[0][1]];
                    let nb = [c1[0] + deltas[1][0], c1[1] + deltas[1][1]];
                    let sep = vec3::norm_xy([na[0] - nb[0], na[1] - nb[1]]);
                    let unit = if sep > 1e-9 {
                        [(na[0] - nb[0]) / sep, (na[1] - nb[1]) / sep]
                    } else {
                        [1.0, 0.0]
                    };
                    let (lo, hi) = (0.35 * total, 0.85 * total);
                    let adjust = if sep > hi {
                        (sep - hi) / 2.0
                    } else if sep < lo {
                        (sep - lo) / 2.0
                    } else {
                        0.0
                    };
                    deltas[0][0] -= unit[0] * adjust;
                    deltas[0][1] -= unit[1] * adjust;
                    deltas[1][0] += unit[0] * adjust;
                    deltas[1][1] += unit[1] * adjust;
                }
                let d0 = clamp_xy(deltas[0], cap);
                let d1 = clamp_xy(deltas[1], cap);
                v[0] = d0;
                v[1] = d1;
                let half = EE_POINTS / 2;
                let mut rows = vec![[d0[0], d0[1], 0.0]; half];
                rows.extend(vec![[d1[0], d1[1], 0.0]; half]);
                rows
            }
        }
    }
}

fn clamp_xy(v: [f64; 2], cap: f64) -> [f64; 2] {
    let n = vec3::norm_xy(v);
    if n > cap {
        [v[0] * cap / n, v[1] * cap / n]
    } else {
        v
    }
}

/// Reflect velocity components that would leave the workspace margin.
fn bounce_xy(mut v: [f64; 2], ee: [f64; 3], ws: super::Workspace) -> [f64; 2] {
    for axis in 0..2 {
        let next = ee[axis] + v[axis];
        if next < ws.min[axis] + 0.03 || next > ws.max[axis] - 0.03 {
            v[axis] = -v[axis];
        }
    }
    v
}
