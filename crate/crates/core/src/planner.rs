//! Local, collision-aware motion between observation epochs.
//!
//! Everything here runs in a single drone's own odometry frame and uses only
//! what that drone can sense: relative vectors to the drones it currently sees
//! and the obstacles within sensor range. Planning is planar; altitude is held.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::Obstacle;

const MAX_PUSH_ITERATIONS: usize = 10;
const MAX_DETOURS: usize = 3;
const DETOUR_INFLATION: f64 = 1.01;
/// Steps shorter than this are reported as a hold.
pub const MIN_STEP: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no obstacle-free position near the target")]
    NoValidPosition,
    #[error("no path found within {0} detours")]
    PathNotFound(usize),
    #[error("invalid planner parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    /// Minimum distance kept to every observed drone.
    pub d_safe: f64,
    /// Step cap as a fraction of the distance to the nearest observed drone.
    pub move_cap_ratio: f64,
    pub p_explore: f64,
    /// Obstacle inflation.
    pub clearance: f64,
    /// Step length when no drone is in view.
    pub max_step: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            d_safe: 1.0,
            move_cap_ratio: 0.4,
            p_explore: 0.15,
            clearance: 0.3,
            max_step: 1.0,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::InvalidParams(m.to_string()));
        if !(self.move_cap_ratio > 0.0 && self.move_cap_ratio < 0.5) {
            return bad("move_cap_ratio must lie in (0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.p_explore) {
            return bad("p_explore must lie in [0, 1]");
        }
        if !(self.d_safe >= 0.0 && self.clearance >= 0.0 && self.max_step > 0.0) {
            return bad("distances must be non-negative and max_step positive");
        }
        Ok(())
    }
}

/// What one drone knows when it plans.
pub struct PlanContext<'a> {
    pub self_position: Vector3<f64>,
    /// Latest detections as relative vectors, rotated into the own odometry
    /// frame.
    pub local_observations: Vec<Vector3<f64>>,
    pub obstacles: Vec<Obstacle>,
    pub rng: &'a mut ChaCha8Rng,
    pub params: PlannerParams,
}

/// Largest `s ∈ [0, len]` such that the segment `s' ∈ [0, s]` along `dir`
/// stays at least `d_safe` (planar) from every drone.
fn clip_step(dir: Vector2<f64>, len: f64, drones: &[Vector2<f64>], d_safe: f64) -> f64 {
    let mut s_max = len;
    for rel in drones {
        let along = dir.dot(rel);
        let perp2 = rel.norm_squared() - along * along;
        let reach2 = d_safe * d_safe - perp2;
        if reach2 <= 0.0 {
            continue;
        }
        let half = reach2.sqrt();
        let (enter, exit) = (along - half, along + half);
        if exit <= 0.0 {
            continue;
        }
        if enter < 0.0 {
            // already inside the safety disc: only retreat is allowed
            if along > 0.0 {
                return 0.0;
            }
            continue;
        }
        s_max = s_max.min(enter);
    }
    s_max.max(0.0)
}

/// Next target in the own frame, or the current position to hold.
pub fn select_target(ctx: &mut PlanContext) -> Vector3<f64> {
    let p = ctx.params;
    let start = ctx.self_position;
    let drones: Vec<Vector2<f64>> = ctx.local_observations.iter().map(|v| v.xy()).collect();
    let nearest = drones.iter().map(|d| d.norm()).fold(f64::INFINITY, f64::min);
    let cap = if drones.is_empty() {
        p.max_step
    } else {
        p.move_cap_ratio * nearest
    };
    let explore = drones.is_empty() || ctx.rng.random::<f64>() < p.p_explore;
    let (dir, len) = if explore {
        let phi = ctx.rng.random::<f64>() * TAU;
        (Vector2::new(phi.cos(), phi.sin()), cap)
    } else {
        let far = drones
            .iter()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("non-empty");
        let dist = far.norm();
        (far / dist, cap.min(dist - p.d_safe).max(0.0))
    };
    let step = clip_step(dir, len, &drones, p.d_safe);
    if step < MIN_STEP {
        return start;
    }
    start + Vector3::new(dir.x, dir.y, 0.0) * step
}

fn inflated(o: &Obstacle, clearance: f64) -> f64 {
    o.radius + clearance
}

/// Push `target` out of every inflated obstacle it falls into.
pub fn adjust_for_obstacles(
    self_position: &Vector3<f64>,
    target: &Vector3<f64>,
    obstacles: &[Obstacle],
    clearance: f64,
) -> Result<Vector3<f64>, PlannerError> {
    let mut t = *target;
    for _ in 0..=MAX_PUSH_ITERATIONS {
        let hit = obstacles.iter().find(|o| {
            (t.xy() - o.center_vec()).norm() < inflated(o, clearance) * (1.0 - 1e-12)
        });
        let Some(o) = hit else {
            return Ok(t);
        };
        let c = o.center_vec();
        let mut out = t.xy() - c;
        if out.norm() < 1e-12 {
            out = self_position.xy() - c;
        }
        if out.norm() < 1e-12 {
            out = Vector2::x();
        }
        let pushed = c + out.normalize() * inflated(o, clearance);
        t = Vector3::new(pushed.x, pushed.y, t.z);
    }
    Err(PlannerError::NoValidPosition)
}

/// Planar distance from `c` to the segment `a`–`b`.
fn segment_distance(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        ((c - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * s - c).norm()
}

fn blocking(
    a: Vector2<f64>,
    b: Vector2<f64>,
    obstacles: &[Obstacle],
    clearance: f64,
) -> Option<&Obstacle> {
    obstacles
        .iter()
        .find(|o| segment_distance(a, b, o.center_vec()) < inflated(o, clearance) * (1.0 - 1e-9))
}

fn line_intersection(
    a: Vector2<f64>,
    u: Vector2<f64>,
    b: Vector2<f64>,
    v: Vector2<f64>,
) -> Option<(f64, f64)> {
    let den = u.x * v.y - u.y * v.x;
    if den.abs() < 1e-12 {
        return None;
    }
    let d = b - a;
    Some(((d.x * v.y - d.y * v.x) / den, (d.x * u.y - d.y * u.x) / den))
}

fn rotate(v: Vector2<f64>, angle: f64) -> Vector2<f64> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Apex of the two tangent lines from `a` and `b` on each side of the circle.
fn tangent_apexes(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>, radius: f64) -> Vec<Vector2<f64>> {
    let (da, db) = ((c - a).norm(), (c - b).norm());
    let r = (radius * DETOUR_INFLATION).min(da.min(db) * (1.0 - 1e-9));
    let (alpha, beta) = ((r / da).asin(), (r / db).asin());
    let (ua, ub) = ((c - a) / da, (c - b) / db);
    [1.0, -1.0]
        .iter()
        .filter_map(|&side| {
            let u = rotate(ua, side * alpha);
            let v = rotate(ub, -side * beta);
            line_intersection(a, u, b, v)
                .filter(|&(s, t)| s > 0.0 && t > 0.0)
                .map(|(s, _)| a + u * s)
        })
        .collect()
}

/// Polyline from `start` to `target` around inflated obstacles.
pub fn plan_path(
    start: &Vector3<f64>,
    target: &Vector3<f64>,
    obstacles: &[Obstacle],
    clearance: f64,
) -> Result<Vec<Vector3<f64>>, PlannerError> {
    if (target - start).norm() < 1e-12 {
        return Ok(vec![*start]);
    }
    let z = target.z;
    let mut pts: Vec<Vector2<f64>> = vec![start.xy(), target.xy()];
    let mut detours = 0;
    loop {
        let hit = (0..pts.len() - 1).find_map(|k| {
            blocking(pts[k], pts[k + 1], obstacles, clearance).map(|o| (k, o))
        });
        let Some((k, o)) = hit else {
            break;
        };
        if detours == MAX_DETOURS {
            return Err(PlannerError::PathNotFound(MAX_DETOURS));
        }
        let (a, b) = (pts[k], pts[k + 1]);
        let apex = tangent_apexes(a, b, o.center_vec(), inflated(o, clearance))
            .into_iter()
            .filter(|w| {
                obstacles
                    .iter()
                    .all(|q| (w - q.center_vec()).norm() >= inflated(q, clearance))
            })
            .min_by(|w1, w2| {
                let l1 = (w1 - a).norm() + (b - w1).norm();
                let l2 = (w2 - a).norm() + (b - w2).norm();
                l1.total_cmp(&l2)
            })
            .ok_or(PlannerError::PathNotFound(detours))?;
        pts.insert(k + 1, apex);
        detours += 1;
    }
    let mut out: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::new(p.x, p.y, z)).collect();
    out[0] = *start;
    Ok(out)
}

/// Full per-drone plan: target, obstacle push, safety check, path. An empty
/// result means hold.
pub fn plan_move(ctx: &mut PlanContext) -> Result<Vec<Vector3<f64>>, PlannerError> {
    let start = ctx.self_position;
    let target = select_target(ctx);
    if (target - start).norm() < MIN_STEP {
        return Ok(Vec::new());
    }
    let target = adjust_for_obstacles(&start, &target, &ctx.obstacles, ctx.params.clearance)?;
    let path = plan_path(&start, &target, &ctx.obstacles, ctx.params.clearance)?;
    let safe = path.iter().skip(1).all(|w| {
        ctx.local_observations
            .iter()
            .all(|d| (w.xy() - (start.xy() + d.xy())).norm() >= ctx.params.d_safe)
    });
    if !safe {
        return Ok(Vec::new());
    }
    Ok(path.into_iter().skip(1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ctx<'a>(rng: &'a mut ChaCha8Rng, obs: Vec<Vector3<f64>>, params: PlannerParams) -> PlanContext<'a> {
        PlanContext {
            self_position: Vector3::new(1.0, -2.0, 1.5),
            local_observations: obs,
            obstacles: Vec::new(),
            rng,
            params,
        }
    }

    #[test]
    fn explores_when_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PlannerParams {
            p_explore: 1.0,
            ..PlannerParams::default()
        };
        let mut c = ctx(&mut rng, Vec::new(), params);
        let t = select_target(&mut c);
        let step = t - c.self_position;
        assert!((step.norm() - params.max_step).abs() < 1e-12);
        assert_eq!(step.z, 0.0);

        let mut again = ChaCha8Rng::seed_from_u64(3);
        let mut c2 = ctx(&mut again, Vec::new(), params);
        assert_eq!(select_target(&mut c2), t);
    }

    #[test]
    fn exploit_step_is_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PlannerParams {
            p_explore: 0.0,
            ..PlannerParams::default()
        };
        let obs = vec![Vector3::new(6.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.3)];
        let mut c = ctx(&mut rng, obs, params);
        let step = select_target(&mut c) - c.self_position;
        assert!(step.norm() <= 0.4 * 2.0 + 1e-12);
        assert!(step.norm() > 0.7);
        assert!(step.normalize().dot(&Vector3::x()) > 1.0 - 1e-12);
    }

    #[test]
    fn holds_when_crowded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PlannerParams {
            p_explore: 0.0,
            ..PlannerParams::default()
        };
        let eps = 1e-3;
        let obs = vec![
            Vector3::new(1.0 + eps, 0.0, 0.0),
            Vector3::new(0.0, -(1.0 + eps), 0.0),
        ];
        let mut c = ctx(&mut rng, obs, params);
        assert_eq!(select_target(&mut c), c.self_position);
    }

    #[test]
    fn obstacle_examples() {
        let me = Vector3::new(-3.0, 0.0, 1.0);
        let obs = [Obstacle {
            center: [0.0, 0.0],
            radius: 1.0,
        }];
        let free = Vector3::new(5.0, 5.0, 1.0);
        assert_eq!(adjust_for_obstacles(&me, &free, &obs, 0.2).unwrap(), free);

        let pushed = adjust_for_obstacles(&me, &Vector3::new(0.0, 0.0, 1.0), &obs, 0.2).unwrap();
        assert!((pushed - Vector3::new(-1.2, 0.0, 1.0)).norm() < 1e-12);

        // pushing out of either disc lands inside the other
        let overlapping = [
            Obstacle {
                center: [0.0, 0.0],
                radius: 1.5,
            },
            Obstacle {
                center: [2.0, 0.0],
                radius: 1.5,
            },
        ];
        assert_eq!(
            adjust_for_obstacles(&me, &Vector3::new(1.2, 0.0, 1.0), &overlapping, 0.2),
            Err(PlannerError::NoValidPosition)
        );
    }

    /// Independent clearance check: sample each segment densely.
    fn sampled_clear(path: &[Vector3<f64>], obstacles: &[Obstacle], clearance: f64) -> bool {
        path.windows(2).all(|w| {
            (0..=2000).all(|k| {
                let p = w[0] + (w[1] - w[0]) * (k as f64 / 2000.0);
                obstacles.iter().all(|o| {
                    let d = ((p.x - o.center[0]).powi(2) + (p.y - o.center[1]).powi(2)).sqrt();
                    d >= (o.radius + clearance) * (1.0 - 1e-6)
                })
            })
        })
    }

    #[test]
    fn path_examples() {
        let a = Vector3::new(0.0, 0.0, 1.0);
        let b = Vector3::new(4.0, 1.0, 1.0);
        assert_eq!(plan_path(&a, &b, &[], 0.3).unwrap(), vec![a, b]);
        assert_eq!(plan_path(&a, &a, &[], 0.3).unwrap(), vec![a]);

        let b = Vector3::new(6.0, 0.0, 1.0);
        let obs = [Obstacle {
            center: [3.0, 0.0],
            radius: 1.0,
        }];
        let path = plan_path(&a, &b, &obs, 0.3).unwrap();
        assert_eq!(path.len(), 3);
        assert_eq!(path[0], a);
        assert_eq!(path[2], b);
        assert!(sampled_clear(&path, &obs, 0.3));
        // the apex sits on a tangent from each end
        let r = 1.3 * DETOUR_INFLATION;
        let apex = path[1].xy();
        let c = Vector2::new(3.0, 0.0);
        assert!((segment_distance(a.xy(), apex, c) - r).abs() < 1e-9);
        assert!((segment_distance(apex, b.xy(), c) - r).abs() < 1e-9);
    }

    #[test]
    fn hopeless_path_is_reported() {
        let a = Vector3::new(0.0, 0.0, 1.0);
        let b = Vector3::new(20.0, 0.0, 1.0);
        // a wall of touching obstacles across the way
        let wall: Vec<Obstacle> = (-10..=10)
            .map(|k| Obstacle {
                center: [10.0, k as f64 * 1.5],
                radius: 1.0,
            })
            .collect();
        assert!(matches!(
            plan_path(&a, &b, &wall, 0.3),
            Err(PlannerError::PathNotFound(_))
        ));
    }

    #[test]
    fn params_validate() {
        assert!(PlannerParams::default().validate().is_ok());
        let bad = PlannerParams {
            move_cap_ratio: 0.5,
            ..PlannerParams::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn targets_are_safe_and_make_progress(
            seed in 0u64..1000,
            pts in proptest::collection::vec((-8.0f64..8.0, -8.0f64..8.0, -1.0f64..1.0), 1..6),
            p_explore in 0.0f64..1.0,
        ) {
            let obs: Vec<Vector3<f64>> = pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
            let params = PlannerParams { p_explore, ..PlannerParams::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = ctx(&mut rng, obs.clone(), params);
            let start = c.self_position;
            let t = select_target(&mut c);
            let step = t - start;
            let nearest = obs.iter().map(|v| v.xy().norm()).fold(f64::INFINITY, f64::min);
            prop_assert!(step.norm() <= params.move_cap_ratio * nearest + 1e-9);
            prop_assert_eq!(step.z, 0.0);
            if step.norm() > 0.0 {
                for d in &obs {
                    let before = d.xy().norm();
                    let after = (d.xy() - step.xy()).norm();
                    prop_assert!(after >= params.d_safe - 1e-9 || after >= before - 1e-9);
                }
            }
            if p_explore == 0.0 {
                let far = obs.iter().map(|v| v.xy().norm()).fold(0.0, f64::max);
                let far_v = obs.iter().find(|v| v.xy().norm() == far).unwrap();
                prop_assert!((far_v.xy() - step.xy()).norm() <= far + 1e-9);
            }
        }

        #[test]
        fn paths_clear_single_obstacles(
            ax in -6.0f64..-2.0, ay in -3.0f64..3.0,
            bx in 2.0f64..6.0, by in -3.0f64..3.0,
            cy in -1.0f64..1.0, radius in 0.3f64..1.2,
        ) {
            let a = Vector3::new(ax, ay, 1.0);
            let b = Vector3::new(bx, by, 1.0);
            let obs = [Obstacle { center: [0.0, cy], radius }];
            let path = plan_path(&a, &b, &obs, 0.3).unwrap();
            prop_assert!(path.len() <= 3);
            prop_assert!(sampled_clear(&path, &obs, 0.3));
            prop_assert_eq!(path[0], a);
            prop_assert_eq!(*path.last().unwrap(), b);
        }
    }
}
