//! Projections and a small dense QP solver for the safe-copy subproblems.
//!
//! The general solver is a dual active-set method in the style of Goldfarb and
//! Idnani. It starts from the unconstrained (equality-constrained) minimizer
//! and adds the most violated inequality until none remain. Instances here
//! have at most a few dozen variables, so each step solves its KKT system
//! directly with an LU factorization.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGENERATE_EPS: f64 = 1e-12;

/// Linear constraint `normal . p >= offset` in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub normal: Vector2<f64>,
    pub offset: f64,
}

impl HalfPlane {
    pub fn slack(&self, p: &Vector2<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Supporting half-plane of the disc keep-out `|p - c| >= radius`, taken at `p_nominal`.
pub fn linearize_keepout(p_nominal: &Vector2<f64>, center: &Vector2<f64>, radius: f64) -> Result<HalfPlane> {
    let d = p_nominal - center;
    let n = d.norm();
    if !n.is_finite() || !radius.is_finite() {
        return Err(Error::NonFinite("keep-out linearization"));
    }
    if n < DEGENERATE_EPS {
        return Err(Error::DegenerateLinearization);
    }
    let normal = d / n;
    Ok(HalfPlane {
        normal,
        offset: radius + normal.dot(center),
    })
}

/// Linearized keep-in `|p - c| <= radius` along the direction of `p_nominal`.
pub fn linearize_keepin(p_nominal: &Vector2<f64>, center: &Vector2<f64>, radius: f64) -> Result<HalfPlane> {
    let out = linearize_keepout(p_nominal, center, radius)?;
    Ok(HalfPlane {
        normal: -out.normal,
        offset: -out.offset,
    })
}

/// Elementwise clamp.
pub fn project_box(v: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| x.clamp(l, h))
        .collect()
}

/// Row of a linear constraint: `coeffs . x >= rhs` (or `=` for equalities).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: DVector<f64>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(coeffs: DVector<f64>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    fn slack(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.dot(x) - self.rhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    /// False when the constraints could not be met and a least-violation point was returned.
    pub feasible: bool,
    pub iterations: usize,
}

/// Minimizes `0.5 x'Hx + g'x` subject to equality and inequality rows.
///
/// `h` must be symmetric positive definite. If the constraints are
/// inconsistent the rows are softened with quadratic slack penalties and the
/// result is flagged infeasible.
pub fn solve_qp(h: &DMatrix<f64>, g: &DVector<f64>, eq: &[LinearRow], ineq: &[LinearRow]) -> Result<QpSolution> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::LengthMismatch {
            what: "QP Hessian",
            expected: n,
            got: h.nrows(),
        });
    }
    for row in eq.iter().chain(ineq) {
        if row.coeffs.len() != n {
            return Err(Error::LengthMismatch {
                what: "QP constraint row",
                expected: n,
                got: row.coeffs.len(),
            });
        }
        if !row.rhs.is_finite() || row.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("QP constraint"));
        }
    }
    if h.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("QP objective"));
    }

    match dual_active_set(h, g, eq, ineq) {
        Ok(sol) => Ok(sol),
        Err(Infeasible) => {
            log::debug!("QP infeasible, falling back to least-violation solve");
            least_violation(h, g, eq, ineq)
        }
    }
}

struct Infeasible;

fn objective(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

/// Solves `[H -N; N' 0] [dx; du] = [r1; r2]` for the active normals `N`.
fn kkt_solve(
    h: &DMatrix<f64>,
    normals: &[&DVector<f64>],
    r1: &DVector<f64>,
    r2: &[f64],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = normals.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (j, a) in normals.iter().enumerate() {
        for i in 0..n {
            k[(i, n + j)] = -a[i];
            k[(n + j, i)] = a[i];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(r1);
    for (j, v) in r2.iter().enumerate() {
        rhs[n + j] = *v;
    }
    let sol = k.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

fn dual_active_set(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq: &[LinearRow],
    ineq: &[LinearRow],
) -> std::result::Result<QpSolution, Infeasible> {
    let n = g.len();
    let scale = h.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * (1.0 + g.amax()).max(1.0);

    // active set entries index into eq (first) then ineq
    let mut active: Vec<usize> = (0..eq.len()).collect();
    let row = |idx: usize| -> &LinearRow {
        if idx < eq.len() {
            &eq[idx]
        } else {
            &ineq[idx - eq.len()]
        }
    };

    let normals: Vec<&DVector<f64>> = eq.iter().map(|r| &r.coeffs).collect();
    let rhs: Vec<f64> = eq.iter().map(|r| r.rhs).collect();
    let (mut x, u) = kkt_solve(h, &normals, &(-g), &rhs).ok_or(Infeasible)?;
    let mut mult: Vec<f64> = u.iter().copied().collect();

    let max_iter = 10 * (n + eq.len() + ineq.len()) + 20;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Infeasible);
        }
        // most violated inactive inequality
        let mut worst: Option<(usize, f64)> = None;
        for (j, r) in ineq.iter().enumerate() {
            let idx = eq.len() + j;
            if active.contains(&idx) {
                continue;
            }
            let s = r.slack(&x) / r.coeffs.norm().max(DEGENERATE_EPS);
            if s < -tol && worst.is_none_or(|(_, w)| s < w) {
                worst = Some((idx, s));
            }
        }
        let Some((p, _)) = worst else {
            break;
        };
        let a_p = &row(p).coeffs;
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Infeasible);
            }
            let normals: Vec<&DVector<f64>> = active.iter().map(|&i| &row(i).coeffs).collect();
            let (dx, du) = kkt_solve(h, &normals, a_p, &vec![0.0; active.len()]).ok_or(Infeasible)?;
            let curv = a_p.dot(&dx);
            let primal_step = curv > 1e-13 * a_p.norm_squared() / scale;

            // largest dual step before an active inequality multiplier reaches zero
            let mut t2 = f64::INFINITY;
            let mut drop_at = None;
            for (pos, &idx) in active.iter().enumerate() {
                if idx < eq.len() {
                    continue;
                }
                if du[pos] < 0.0 {
                    let t = -mult[pos] / du[pos];
                    if t < t2 {
                        t2 = t;
                        drop_at = Some(pos);
                    }
                }
            }

            let slack = row(p).slack(&x);
            let t1 = if primal_step { -slack / curv } else { f64::INFINITY };
            if !primal_step && drop_at.is_none() {
                return Err(Infeasible);
            }
            if t1 <= t2 {
                x += &dx * t1;
                for (pos, m) in mult.iter_mut().enumerate() {
                    *m += t1 * du[pos];
                }
                u_p += t1;
                active.push(p);
                mult.push(u_p);
                break;
            }
            let t = t2.max(0.0);
            if primal_step {
                x += &dx * t;
            }
            for (pos, m) in mult.iter_mut().enumerate() {
                *m += t * du[pos];
            }
            u_p += t;
            let pos = drop_at.expect("dual step bounded by a drop");
            active.remove(pos);
            mult.remove(pos);
        }
    }

    let mut eq_multipliers = vec![0.0; eq.len()];
    let mut ineq_multipliers = vec![0.0; ineq.len()];
    for (pos, &idx) in active.iter().enumerate() {
        if idx < eq.len() {
            eq_multipliers[idx] = mult[pos];
        } else {
            ineq_multipliers[idx - eq.len()] = mult[pos].max(0.0);
        }
    }
    Ok(QpSolution {
        objective: objective(h, g, &x),
        x,
        eq_multipliers,
        ineq_multipliers,
        feasible: true,
        iterations,
    })
}

/// Softens every row with a penalized slack; always feasible.
fn least_violation(h: &DMatrix<f64>, g: &DVector<f64>, eq: &[LinearRow], ineq: &[LinearRow]) -> Result<QpSolution> {
    let n = g.len();
    let rows: Vec<&LinearRow> = eq.iter().chain(ineq).collect();
    // equalities become two one-sided rows, each with its own slack
    let mut soft: Vec<LinearRow> = Vec::new();
    let ns = eq.len() * 2 + ineq.len();
    let dim = n + ns;
    let weight = 1e6 * h.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut hs = DMatrix::zeros(dim, dim);
    hs.view_mut((0, 0), (n, n)).copy_from(h);
    for j in 0..ns {
        hs[(n + j, n + j)] = weight;
    }
    let mut gs = DVector::zeros(dim);
    gs.rows_mut(0, n).copy_from(g);
    let mut slot = n;
    for (i, r) in rows.iter().enumerate() {
        let signs: &[f64] = if i < eq.len() { &[1.0, -1.0] } else { &[1.0] };
        for &sg in signs {
            let mut c = DVector::zeros(dim);
            c.rows_mut(0, n).copy_from(&(&r.coeffs * sg));
            c[slot] = 1.0;
            soft.push(LinearRow::new(c, sg * r.rhs));
            slot += 1;
        }
    }
    let sol = dual_active_set(&hs, &gs, &[], &soft).map_err(|_| Error::SolverFailure {
        step: 0,
        what: "least-violation QP",
    })?;
    let x = sol.x.rows(0, n).into_owned();
    Ok(QpSolution {
        objective: objective(h, g, &x),
        x,
        eq_multipliers: vec![0.0; eq.len()],
        ineq_multipliers: vec![0.0; ineq.len()],
        feasible: false,
        iterations: sol.iterations,
    })
}

/// Quadratic attraction `weight/2 |v - target|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPoint {
    pub target: Vector3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedScalar {
    pub target: f64,
    pub weight: f64,
}

/// Constraint on the position blocks of one instant of the augmented stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SafeConstraint {
    /// Applies to the self block.
    Own(HalfPlane),
    /// `normal . (p_self - p_block) >= offset`.
    Pair { block: usize, plane: HalfPlane },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackSolution<T> {
    pub stack: Vec<T>,
    pub infeasible: bool,
}

/// One instant of the state safe-copy subproblem.
///
/// Block 0 of `stack` is the agent itself and carries both the `own`
/// attraction and its stack attraction. Headings are unconstrained and solved
/// in closed form; positions go through the QP.
pub fn solve_state_safe(
    own: &WeightedPoint,
    stack: &[WeightedPoint],
    constraints: &[SafeConstraint],
) -> Result<StackSolution<Vector3<f64>>> {
    let b = stack.len();
    if b == 0 {
        return Err(Error::LengthMismatch {
            what: "state stack",
            expected: 1,
            got: 0,
        });
    }
    if !(own.weight > 0.0) || stack.iter().any(|s| !(s.weight > 0.0)) {
        return Err(Error::InvalidParams("safe-copy weights must be > 0".into()));
    }

    let mut out: Vec<Vector3<f64>> = stack.iter().map(|s| s.target).collect();
    let w0 = own.weight + stack[0].weight;
    out[0] = (own.target * own.weight + stack[0].target * stack[0].weight) / w0;
    if constraints.is_empty() {
        return Ok(StackSolution {
            stack: out,
            infeasible: false,
        });
    }

    let n = 2 * b;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for blk in 0..b {
        let (w, c) = if blk == 0 {
            (w0, out[0])
        } else {
            (stack[blk].weight, stack[blk].target)
        };
        for d in 0..2 {
            h[(2 * blk + d, 2 * blk + d)] = w;
            g[2 * blk + d] = -w * c[d];
        }
    }
    let mut rows = Vec::with_capacity(constraints.len());
    for c in constraints {
        let mut coeffs = DVector::zeros(n);
        let plane = match *c {
            SafeConstraint::Own(plane) => {
                coeffs[0] = plane.normal.x;
                coeffs[1] = plane.normal.y;
                plane
            }
            SafeConstraint::Pair { block, plane } => {
                if block == 0 || block >= b {
                    return Err(Error::InvalidParams(format!("pair constraint on block {block}")));
                }
                coeffs[0] = plane.normal.x;
                coeffs[1] = plane.normal.y;
                coeffs[2 * block] = -plane.normal.x;
                coeffs[2 * block + 1] = -plane.normal.y;
                plane
            }
        };
        rows.push(LinearRow::new(coeffs, plane.offset));
    }
    let sol = solve_qp(&h, &g, &[], &rows)?;
    for (blk, v) in out.iter_mut().enumerate() {
        v.x = sol.x[2 * blk];
        v.y = sol.x[2 * blk + 1];
    }
    Ok(StackSolution {
        stack: out,
        infeasible: !sol.feasible,
    })
}

/// Arrival-time relations between an agent and its neighbors.
///
/// Each row of `matrix_a` has `+1` at the self column and `-1` at one
/// neighbor column, and constrains `|a . t - t_delta| <= relax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSequenceSpec {
    pub matrix_a: Vec<Vec<f64>>,
    pub t_delta: Vec<f64>,
    pub relax: Vec<f64>,
}

impl TimeSequenceSpec {
    /// Rows `t_self - t_neighbor = delta` for the given (column, delta) pairs.
    pub fn from_pairs(n_blocks: usize, pairs: &[(usize, f64)], relax: f64) -> Self {
        let mut matrix_a = Vec::with_capacity(pairs.len());
        for &(col, _) in pairs {
            let mut r = vec![0.0; n_blocks];
            r[0] = 1.0;
            r[col] = -1.0;
            matrix_a.push(r);
        }
        Self {
            matrix_a,
            t_delta: pairs.iter().map(|p| p.1).collect(),
            relax: vec![relax; pairs.len()],
        }
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.t_delta.len() != self.matrix_a.len() || self.relax.len() != self.matrix_a.len() {
            return Err(Error::LengthMismatch {
                what: "time sequence rows",
                expected: self.matrix_a.len(),
                got: self.t_delta.len().min(self.relax.len()),
            });
        }
        for r in &self.matrix_a {
            if r.len() != n_blocks {
                return Err(Error::LengthMismatch {
                    what: "time sequence columns",
                    expected: n_blocks,
                    got: r.len(),
                });
            }
            if r.iter().sum::<f64>().abs() > 1e-12 {
                return Err(Error::InvalidParams("time sequence row must sum to zero".into()));
            }
        }
        if self.relax.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::InvalidParams("time sequence relaxation must be >= 0".into()));
        }
        Ok(())
    }
}

/// The time safe-copy subproblem over the stack of arrival times.
pub fn solve_time_safe(
    own: &WeightedScalar,
    stack: &[WeightedScalar],
    seq: Option<&TimeSequenceSpec>,
    bounds: (f64, f64),
) -> Result<StackSolution<f64>> {
    let b = stack.len();
    if b == 0 {
        return Err(Error::LengthMismatch {
            what: "time stack",
            expected: 1,
            got: 0,
        });
    }
    if !(own.weight > 0.0) || stack.iter().any(|s| !(s.weight > 0.0)) {
        return Err(Error::InvalidParams("safe-copy weights must be > 0".into()));
    }
    let mut h = DMatrix::zeros(b, b);
    let mut g = DVector::zeros(b);
    h[(0, 0)] = own.weight + stack[0].weight;
    g[0] = -(own.weight * own.target + stack[0].weight * stack[0].target);
    for j in 1..b {
        h[(j, j)] = stack[j].weight;
        g[j] = -stack[j].weight * stack[j].target;
    }

    let mut eq = Vec::new();
    let mut ineq = Vec::new();
    let unit = |j: usize, s: f64| {
        let mut c = DVector::zeros(b);
        c[j] = s;
        c
    };
    ineq.push(LinearRow::new(unit(0, 1.0), bounds.0));
    ineq.push(LinearRow::new(unit(0, -1.0), -bounds.1));
    if let Some(seq) = seq {
        seq.validate(b)?;
        for ((a, &d), &e) in seq.matrix_a.iter().zip(&seq.t_delta).zip(&seq.relax) {
            let c = DVector::from_column_slice(a);
            if e == 0.0 {
                eq.push(LinearRow::new(c, d));
            } else {
                ineq.push(LinearRow::new(c.clone(), d - e));
                ineq.push(LinearRow::new(-c, -(d + e)));
            }
        }
    }
    let sol = solve_qp(&h, &g, &eq, &ineq)?;
    Ok(StackSolution {
        stack: sol.x.iter().copied().collect(),
        infeasible: !sol.feasible,
    })
}
