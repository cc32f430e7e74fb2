//! Local solvers for the unrelaxed rotation problem, used as comparators.
//!
//! Both work directly on the yaw angles with drone 0 frozen at zero. With
//! `Q = L Lᵀ` the cost is `‖R L‖²_F`, so the Gauss–Newton matrix has the closed
//! form `H_il = tr(Q_li R(θ_l − θ_i))` and never needs the factor `L`.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::geometry::{Rotation2, YawVector};
use crate::sdp_rotation::QMatrix;

const MAX_ITERATIONS: usize = 100;
const STEP_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-9;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSolveReport {
    pub yaws: YawVector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
    /// Set when the normal equations were singular and a gradient step was
    /// taken instead (Gauss–Newton only).
    pub gradient_fallback: bool,
    /// Objective after every accepted step, starting from the initial value.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

const J: Matrix2<f64> = Matrix2::new(0.0, -1.0, 1.0, 0.0);

fn objective_angles(angles: &[f64], q: &QMatrix) -> f64 {
    let n = q.n;
    let mut f = 0.0;
    for i in 0..n {
        for j in 0..n {
            f += (q.block(i, j) * rot(angles[i] - angles[j])).trace();
        }
    }
    f
}

fn gradient_angles(angles: &[f64], q: &QMatrix) -> DVector<f64> {
    let n = q.n;
    DVector::from_fn(n, |i, _| {
        let mut g = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            g += (q.block(i, j) * rot(angles[i] - angles[j]) * J).trace();
        }
        2.0 * g
    })
}

/// Cost `tr(Q RᵀR)` and its gradient with respect to every yaw.
pub fn objective_and_jacobian(thetas: &YawVector, q: &QMatrix) -> (f64, DVector<f64>) {
    let angles = thetas.angles();
    (objective_angles(&angles, q), gradient_angles(&angles, q))
}

/// Gauss–Newton matrix over the free angles `1..N`.
fn gauss_newton_matrix(angles: &[f64], q: &QMatrix) -> DMatrix<f64> {
    let m = q.n - 1;
    DMatrix::from_fn(m, m, |a, b| {
        let (i, l) = (a + 1, b + 1);
        (q.block(l, i) * rot(angles[l] - angles[i])).trace()
    })
}

struct State {
    angles: Vec<f64>,
    f: f64,
    g_free: DVector<f64>,
}

impl State {
    fn new(angles: Vec<f64>, q: &QMatrix) -> Self {
        let f = objective_angles(&angles, q);
        let g = gradient_angles(&angles, q);
        Self {
            angles,
            f,
            g_free: g.rows(1, q.n - 1).into_owned(),
        }
    }

    fn stepped(&self, delta: &DVector<f64>) -> Vec<f64> {
        let mut a = self.angles.clone();
        for (k, d) in delta.iter().enumerate() {
            a[k + 1] += d;
        }
        a
    }
}

fn start(init: &YawVector) -> Vec<f64> {
    init.gauge_fixed().angles()
}

fn finish(
    state: State,
    iterations: usize,
    converged: bool,
    fallback: bool,
    t0: Instant,
    trace: Vec<f64>,
) -> LocalSolveReport {
    LocalSolveReport {
        yaws: YawVector {
            yaws: state.angles.iter().map(|&t| Rotation2::new(t)).collect(),
        },
        objective: state.f,
        iterations,
        converged,
        wall_time: t0.elapsed().as_secs_f64(),
        gradient_fallback: fallback,
        trace,
    }
}

/// Gauss–Newton with backtracking on the step length.
pub fn solve_gn(q: &QMatrix, init: &YawVector) -> LocalSolveReport {
    let t0 = Instant::now();
    assert_eq!(init.len(), q.n, "init length must match swarm size");
    let mut state = State::new(start(init), q);
    let mut trace = vec![state.f];
    let mut fallback = false;
    if q.n < 2 {
        return finish(state, 0, true, false, t0, trace);
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        if state.g_free.norm() < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let h = gauss_newton_matrix(&state.angles, q);
        let rhs = -0.5 * &state.g_free;
        let delta = match Cholesky::new(h.clone()) {
            Some(ch)
                if ch
                    .l()
                    .diagonal()
                    .iter()
                    .all(|&d| d > 1e-12 * (1.0 + h.trace())) =>
            {
                ch.solve(&rhs)
            }
            _ => {
                fallback = true;
                let curvature = (h.trace() / h.nrows() as f64).max(1e-12);
                rhs / curvature
            }
        };
        if delta.norm() < STEP_TOL {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = state.stepped(&(alpha * &delta));
            let f = objective_angles(&candidate, q);
            if f <= state.f {
                accepted = Some(candidate);
                break;
            }
            alpha *= 0.5;
            if alpha * delta.norm() < STEP_TOL {
                break;
            }
        }
        match accepted {
            Some(a) => {
                state = State::new(a, q);
                trace.push(state.f);
            }
            None => {
                // no descent left at machine precision
                converged = true;
                break;
            }
        }
    }
    finish(state, iterations, converged, fallback, t0, trace)
}

/// Levenberg–Marquardt with multiplicative damping updates.
pub fn solve_lm(q: &QMatrix, init: &YawVector) -> LocalSolveReport {
    let t0 = Instant::now();
    assert_eq!(init.len(), q.n, "init length must match swarm size");
    let mut state = State::new(start(init), q);
    let mut trace = vec![state.f];
    if q.n < 2 {
        return finish(state, 0, true, false, t0, trace);
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    let mut h = gauss_newton_matrix(&state.angles, q);
    while iterations < MAX_ITERATIONS {
        if state.g_free.norm() < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let floor = 1e-12 * (1.0 + h.diagonal().max());
        let mut damped = h.clone();
        for k in 0..damped.nrows() {
            damped[(k, k)] += lambda * h[(k, k)].max(floor);
        }
        let rhs = -0.5 * &state.g_free;
        let delta = match Cholesky::new(damped) {
            Some(ch) => ch.solve(&rhs),
            None => {
                lambda *= 10.0;
                continue;
            }
        };
        if delta.norm() < STEP_TOL {
            converged = true;
            break;
        }
        let candidate = state.stepped(&delta);
        let f = objective_angles(&candidate, q);
        if f < state.f {
            state = State::new(candidate, q);
            trace.push(state.f);
            h = gauss_newton_matrix(&state.angles, q);
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            lambda *= 10.0;
        }
    }
    finish(state, iterations, converged, false, t0, trace)
}
