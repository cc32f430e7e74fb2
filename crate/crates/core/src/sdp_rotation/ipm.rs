//! Dense primal-dual interior point method for
//!
//! ```text
//!   min ⟨C, X⟩  s.t.  X_ii = I₂ for every 2x2 diagonal block,  X ⪰ 0
//! ```
//!
//! Each block contributes three scalar equalities (two diagonal entries and
//! the off-diagonal one). Search directions use Nesterov–Todd scaling with
//! a Mehrotra predictor-corrector. The scaling matrix is factored as
//! `W = G Gᵀ` with `G = L V D^{-1/2}`, where `X = L Lᵀ`, `S = R Rᵀ` and
//! `Rᵀ L = U D Vᵀ`; in that frame both iterates become the diagonal `D`, so
//! the symmetrized complementarity equation reduces to an elementwise
//! Lyapunov solve. Directions are computed entirely in the scaled frame.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmSettings {
    pub max_iterations: usize,
    /// Bound on relative primal residual, dual residual and gap.
    pub tolerance: f64,
    /// Looser bound accepted when progress stalls at machine precision.
    pub accept_tolerance: f64,
    /// Extra iterations spent shrinking the gap once `tolerance` is met.
    pub polish_iterations: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-8,
            accept_tolerance: 1e-7,
            polish_iterations: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpmSolution {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub s: DMatrix<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone)]
pub enum IpmFailure {
    /// Iteration cap hit; carries the best iterate.
    IterationLimit(Box<IpmSolution>),
    /// Progress stalled or a factorization broke down before reaching the
    /// acceptance bound; carries the best iterate.
    Numerical(Box<IpmSolution>),
}

/// One scalar constraint `X[p][q] = rhs` (symmetrized when `p != q`).
#[derive(Debug, Clone, Copy)]
struct Entry {
    p: usize,
    q: usize,
    rhs: f64,
}

fn block_constraints(n_blocks: usize) -> Vec<Entry> {
    (0..n_blocks)
        .flat_map(|b| {
            let (p, q) = (2 * b, 2 * b + 1);
            [
                Entry { p, q: p, rhs: 1.0 },
                Entry { p: q, q, rhs: 1.0 },
                Entry { p, q, rhs: 0.0 },
            ]
        })
        .collect()
}

fn apply_a(cons: &[Entry], x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(cons.len(), cons.iter().map(|c| x[(c.p, c.q)]))
}

fn apply_a_adjoint(cons: &[Entry], y: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (c, &v) in cons.iter().zip(y.iter()) {
        if c.p == c.q {
            m[(c.p, c.p)] += v;
        } else {
            m[(c.p, c.q)] += 0.5 * v;
            m[(c.q, c.p)] += 0.5 * v;
        }
    }
    m
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Largest step keeping `diag(d) + α Δ` positive semidefinite.
fn max_step(d: &DVector<f64>, delta: &DMatrix<f64>) -> f64 {
    let inv_sqrt = d.map(|v| 1.0 / v.sqrt());
    let mut m = DMatrix::from_fn(delta.nrows(), delta.ncols(), |i, j| {
        inv_sqrt[i] * delta[(i, j)] * inv_sqrt[j]
    });
    symmetrize(&mut m);
    let lmin = m.symmetric_eigenvalues().min();
    if lmin < 0.0 {
        -1.0 / lmin
    } else {
        f64::INFINITY
    }
}

/// NT scaling `G` with `Gᵀ S G = G⁻¹ X G⁻ᵀ = diag(d)`, plus the triangular
/// factor of the scaled constraint operator used for the normal equations.
struct Scaling {
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    d: DVector<f64>,
    r: DMatrix<f64>,
}

impl Scaling {
    fn scale_dual(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.g.transpose() * m * &self.g;
        symmetrize(&mut out);
        out
    }

    fn unscale_primal(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.g * m * self.g.transpose();
        symmetrize(&mut out);
        out
    }

    fn unscale_dual(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.g_inv.transpose() * m * &self.g_inv;
        symmetrize(&mut out);
        out
    }
}

fn nt_scaling(cons: &[Entry], x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<Scaling> {
    let cx = Cholesky::new(x.clone())?;
    let cs = Cholesky::new(s.clone())?;
    let lx = cx.l();
    let ls = cs.l();
    let svd = (ls.transpose() * &lx).svd(true, true);
    let v = svd.v_t?.transpose();
    let d = svd.singular_values;
    if d.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return None;
    }
    let n = x.nrows();
    let lx_inv = lx.solve_lower_triangular(&DMatrix::identity(n, n))?;
    let inv_sqrt = d.map(|v| 1.0 / v.sqrt());
    let sqrt = d.map(f64::sqrt);
    // G = Lx V D^{-1/2};  G⁻¹ = D^{1/2} Vᵀ Lx⁻¹
    let g = &lx * &v * DMatrix::from_diagonal(&inv_sqrt);
    let g_inv = DMatrix::from_diagonal(&sqrt) * v.transpose() * lx_inv;

    // columns are vec(Gᵀ A_a G); the normal matrix is their Gram matrix, so a
    // QR factor avoids squaring its condition number
    let mut basis = DMatrix::zeros(n * n, cons.len());
    for (a, c) in cons.iter().enumerate() {
        let (gp, gq) = (g.row(c.p), g.row(c.q));
        for j in 0..n {
            for i in 0..n {
                basis[(i + n * j, a)] = 0.5 * (gp[i] * gq[j] + gq[i] * gp[j]);
            }
        }
    }
    let r = basis.qr().r();
    let rmax = r.diagonal().amax();
    if r.diagonal()
        .iter()
        .any(|v| v.is_nan() || v.abs() <= 1e-14 * rmax)
    {
        return None;
    }
    Some(Scaling { g, g_inv, d, r })
}

struct Direction {
    dx: DMatrix<f64>,
    dy: DVector<f64>,
    ds: DMatrix<f64>,
}

/// Solve, in the scaled frame, `A ΔX = rp`, `A*Δy + ΔS = Rd`, `ΔX + ΔS = T`.
fn solve_newton(
    cons: &[Entry],
    scaling: &Scaling,
    rp: &DVector<f64>,
    rd: &DMatrix<f64>,
    t: &DMatrix<f64>,
) -> Option<Direction> {
    let n = t.nrows();
    let u = t - rd;
    let h = rp - apply_a(cons, &scaling.unscale_primal(&u));
    let z = scaling.r.tr_solve_upper_triangular(&h)?;
    let dy = scaling.r.solve_upper_triangular(&z)?;
    let ds = rd - scaling.scale_dual(&apply_a_adjoint(cons, &dy, n));
    let dx = t - &ds;
    Some(Direction { dx, dy, ds })
}

/// `T` with `D T + T D = rhs`.
fn lyapunov(d: &DVector<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[(i, j)] / (d[i] + d[j]))
}

pub fn solve(c: &DMatrix<f64>, settings: &IpmSettings) -> Result<IpmSolution, IpmFailure> {
    let n = c.nrows();
    assert!(
        n.is_multiple_of(2) && c.ncols() == n,
        "cost must be square with even size"
    );
    let cons = block_constraints(n / 2);
    let b = DVector::from_iterator(cons.len(), cons.iter().map(|c| c.rhs));

    let scale = c.norm().max(f64::MIN_POSITIVE);
    let mut cost = c / scale;
    symmetrize(&mut cost);

    let mut x = DMatrix::<f64>::identity(n, n);
    let shift = cost.norm() + 1.0;
    let mut y = DVector::from_iterator(
        cons.len(),
        cons.iter().map(|c| if c.p == c.q { -shift } else { 0.0 }),
    );
    let mut s = &cost - apply_a_adjoint(&cons, &y, n);
    symmetrize(&mut s);

    let b_norm = b.norm();
    let c_norm = cost.norm();
    let mut best: Option<IpmSolution> = None;
    let mut converged: Option<IpmSolution> = None;
    let mut polished = 0;
    let mut stalled = 0;
    let mut lowest_xs = f64::INFINITY;
    let mut iter = 0;
    let outcome = loop {
        let rp = &b - apply_a(&cons, &x);
        let mut rd = &cost - &s - apply_a_adjoint(&cons, &y, n);
        symmetrize(&mut rd);
        let pobj = inner(&cost, &x);
        let dobj = b.dot(&y);
        let xs = inner(&x, &s);
        let pres = rp.norm() / (1.0 + b_norm);
        let dres = rd.norm() / (1.0 + c_norm);
        // gap measured in the caller's units
        let gap = scale * xs.max((pobj - dobj).abs()) / (1.0 + scale * pobj.abs().max(dobj.abs()));

        let current = IpmSolution {
            x: x.clone(),
            y: &y * scale,
            s: &s * scale,
            primal_objective: pobj * scale,
            dual_objective: dobj * scale,
            iterations: iter,
            primal_residual: pres,
            dual_residual: dres,
            relative_gap: gap,
        };
        if pres <= settings.tolerance && dres <= settings.tolerance && gap <= settings.tolerance {
            if converged.as_ref().is_none_or(|b| gap < b.relative_gap) {
                converged = Some(current.clone());
            }
            polished += 1;
            if polished > settings.polish_iterations || gap <= 1e-3 * settings.tolerance {
                break Outcome::Converged;
            }
        }
        stalled = if xs < 0.5 * lowest_xs { 0 } else { stalled + 1 };
        lowest_xs = lowest_xs.min(xs);
        if best.as_ref().is_none_or(|b| gap < b.relative_gap) {
            best = Some(current);
        }
        if iter >= settings.max_iterations {
            break Outcome::Limit;
        }
        if stalled >= STALL_ITERATIONS {
            break Outcome::Breakdown;
        }
        iter += 1;

        let mu = xs / n as f64;
        let Some(scaling) = nt_scaling(&cons, &x, &s) else {
            break Outcome::Breakdown;
        };
        let rd_t = scaling.scale_dual(&rd);
        let d = &scaling.d;

        let Some(pred) = solve_newton(&cons, &scaling, &rp, &rd_t, &-DMatrix::from_diagonal(d))
        else {
            break Outcome::Breakdown;
        };
        let ap = max_step(d, &pred.dx).min(1.0);
        let ad = max_step(d, &pred.ds).min(1.0);
        let dd = DMatrix::from_diagonal(d);
        let mu_aff = inner(&(&dd + ap * &pred.dx), &(&dd + ad * &pred.ds)) / n as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let mut rhs = -(&pred.dx * &pred.ds + &pred.ds * &pred.dx);
        for i in 0..n {
            rhs[(i, i)] += 2.0 * sigma * mu - 2.0 * d[i] * d[i];
        }
        let Some(dir) = solve_newton(&cons, &scaling, &rp, &rd_t, &lyapunov(d, &rhs)) else {
            break Outcome::Breakdown;
        };

        let gamma = 0.9 + 0.09 * ap.min(ad);
        let ap = (gamma * max_step(d, &dir.dx)).min(1.0);
        let ad = (gamma * max_step(d, &dir.ds)).min(1.0);
        if !(ap > 0.0 && ad > 0.0) {
            break Outcome::Breakdown;
        }
        let dir = Direction {
            dx: scaling.unscale_primal(&dir.dx),
            dy: dir.dy,
            ds: scaling.unscale_dual(&dir.ds),
        };
        x += ap * &dir.dx;
        y += ad * &dir.dy;
        s += ad * &dir.ds;
        symmetrize(&mut x);
        symmetrize(&mut s);
    };

    if let Some(sol) = converged {
        return Ok(sol);
    }
    let best = Box::new(best.expect("at least one iterate evaluated"));
    // Near machine precision the iterates stop improving before the strict
    // tolerance; the best iterate is accepted if it meets the looser bound.
    let acceptable = best.primal_residual <= settings.accept_tolerance
        && best.dual_residual <= settings.accept_tolerance
        && best.relative_gap <= settings.accept_tolerance;
    match outcome {
        _ if acceptable => Ok(*best),
        Outcome::Converged => unreachable!("converged iterate is returned above"),
        Outcome::Limit => Err(IpmFailure::IterationLimit(best)),
        Outcome::Breakdown => Err(IpmFailure::Numerical(best)),
    }
}

const STALL_ITERATIONS: usize = 4;

enum Outcome {
    Converged,
    Limit,
    Breakdown,
}
