//! Structured convex QP solver for multi-stage optimal control problems.
//!
//! Problem form, over stages `i = 0..N` with stage variables
//! `z_i = (x_i, w_i)` (state and "input" block; the input block may carry
//! extra variables such as constraint slacks):
//!
//! ```text
//! minimize   sum_i  1/2 z_i' H_i z_i + g_i' z_i
//! subject to x_0 given (parameter, not a decision variable)
//!            x_{i+1} = A_i x_i + B_i w_i + c_i        i = 0..N-1
//!            C_i z_i >= d_i                           i = 0..N
//!            E x_N = e                                (optional)
//! ```
//!
//! The solver is a Mehrotra predictor-corrector primal-dual interior-point
//! method. Each Newton system is reduced by eliminating the inequality
//! duals and slacks, which leaves an equality-constrained QP whose
//! stage-block Hessian `H_i + C_i' W C_i` is factorized by a backward
//! Riccati sweep; the terminal equality is handled by carrying a second
//! (homogeneous) right-hand-side stream whose multiplier is fixed by the
//! terminal condition afterwards. One factorization per iteration serves
//! both the predictor and corrector solves. Cost per iteration is linear
//! in the horizon length.
//!
//! The solver is deterministic: identical inputs produce bitwise-identical
//! iterates and outputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error("problem contains non-finite data")]
    NonFinite,
    #[error("problem must have at least one stage")]
    Empty,
    #[error("could not write solver trace: {0}")]
    Io(#[from] std::io::Error),
}

/// One stage of the multi-stage QP. Dimension conventions: `nx` states,
/// `nw` stage inputs, `ni` inequality rows; `h` and `g` are over
/// `z = [x; w]`; `a, b, c` map to the *next* stage's state and are empty
/// on the last stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpStage {
    pub nx: usize,
    pub nw: usize,
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Inequalities `cmat [x; w] >= d`.
    pub cmat: DMatrix<f64>,
    pub d: DVector<f64>,
}

/// Full multi-stage QP with fixed initial state and optional terminal
/// equality `E x_N = e`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpData {
    pub x0: DVector<f64>,
    pub stages: Vec<QpStage>,
    pub terminal: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl QpData {
    /// Structural validation of all dimensions.
    pub fn validate(&self) -> Result<(), QpError> {
        if self.stages.is_empty() {
            return Err(QpError::Empty);
        }
        let n = self.stages.len() - 1;
        if self.stages[0].nx != self.x0.len() {
            return Err(QpError::Dimensions("x0 vs stage 0".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let nz = st.nx + st.nw;
            let ni = st.d.len();
            if st.h.nrows() != nz || st.h.ncols() != nz || st.g.len() != nz {
                return Err(QpError::Dimensions(format!("cost at stage {i}")));
            }
            if st.cmat.nrows() != ni || st.cmat.ncols() != nz {
                return Err(QpError::Dimensions(format!("inequalities at stage {i}")));
            }
            if i < n {
                let nxn = self.stages[i + 1].nx;
                if st.a.nrows() != nxn
                    || st.a.ncols() != st.nx
                    || st.b.nrows() != nxn
                    || st.b.ncols() != st.nw
                    || st.c.len() != nxn
                {
                    return Err(QpError::Dimensions(format!("dynamics at stage {i}")));
                }
            }
            let finite = st.h.iter().all(|v| v.is_finite())
                && st.g.iter().all(|v| v.is_finite())
                && st.cmat.iter().all(|v| v.is_finite())
                && st.d.iter().all(|v| v.is_finite())
                && (i == n
                    || st.a.iter().all(|v| v.is_finite())
                        && st.b.iter().all(|v| v.is_finite())
                        && st.c.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(QpError::NonFinite);
            }
        }
        if let Some((e_mat, e_vec)) = &self.terminal {
            let nxn = self.stages[n].nx;
            if e_mat.ncols() != nxn || e_mat.nrows() != e_vec.len() {
                return Err(QpError::Dimensions("terminal equality".into()));
            }
        }
        Ok(())
    }

    /// Objective value for given stage trajectories.
    pub fn objective(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let mut acc = 0.0;
        for (i, st) in self.stages.iter().enumerate() {
            let mut z = DVector::zeros(st.nx + st.nw);
            z.rows_mut(0, st.nx).copy_from(&states[i]);
            z.rows_mut(st.nx, st.nw).copy_from(&inputs[i]);
            acc += 0.5 * (&z.transpose() * &st.h * &z)[(0, 0)] + st.g.dot(&z);
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    /// All KKT residuals below tolerance.
    Optimal,
    /// Iteration limit hit; the best iterate found is returned.
    MaxIterations,
    /// Factorization failed or iterates diverged; best iterate returned.
    NumericalFailure,
}

/// Infinity norms of the four KKT residual groups.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub equality: f64,
    pub inequality: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.inequality)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Convergence threshold on all KKT residual infinity norms.
    pub kkt_tol: f64,
    /// Interior-point iteration limit.
    pub max_iter: usize,
    /// Levenberg regularization added to the input-block Riccati pivot.
    pub reg: f64,
    /// Optional per-iteration trace written as CSV.
    pub trace_csv: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 100,
            reg: 1e-9,
            trace_csv: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    /// States per stage; entry 0 is the fixed parameter `x0`.
    pub states: Vec<DVector<f64>>,
    /// Input blocks per stage.
    pub inputs: Vec<DVector<f64>>,
    /// Duals of the dynamics rows (one per transition).
    pub eq_duals: Vec<DVector<f64>>,
    /// Dual of the terminal equality (empty if absent).
    pub terminal_dual: DVector<f64>,
    /// Nonnegative duals of the inequality rows, per stage.
    pub ineq_duals: Vec<DVector<f64>>,
    /// Inequality slack values `C z - d`, per stage.
    pub slacks: Vec<DVector<f64>>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// Wall-clock solve time in seconds.
    pub solve_time: f64,
}

/// Internal per-stage data with the fixed `x0` folded into stage 0
/// (whose state dimension becomes 0) and blocks pre-split.
struct IStage {
    nx: usize,
    nw: usize,
    ni: usize,
    hxx: DMatrix<f64>,
    hxw: DMatrix<f64>,
    hww: DMatrix<f64>,
    gx: DVector<f64>,
    gw: DVector<f64>,
    cx: DMatrix<f64>,
    cw: DMatrix<f64>,
    d: DVector<f64>,
    // Dynamics to the next stage (empty at the last stage).
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    cvec: DVector<f64>,
}

struct Factorization {
    /// Cholesky factor of the input-block pivot, per stage.
    chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    fxw: Vec<DMatrix<f64>>,
    /// Riccati cost-to-go matrices, indexed by stage.
    p: Vec<DMatrix<f64>>,
    /// Homogeneous (terminal-multiplier) stream: cost-to-go vectors per
    /// stage and per terminal row, plus the forward sweep and the small
    /// terminal system `m_term`.
    pb: Vec<DMatrix<f64>>,
    dxb: Vec<DMatrix<f64>>,
    dwb: Vec<DMatrix<f64>>,
    m_term_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

struct Residuals {
    stat_x: Vec<DVector<f64>>,
    stat_w: Vec<DVector<f64>>,
    eq: Vec<DVector<f64>>,
    eq_term: DVector<f64>,
    ineq: Vec<DVector<f64>>,
    norms: KktResiduals,
}

struct Direction {
    dx: Vec<DVector<f64>>,
    dw: Vec<DVector<f64>>,
    dnu: Vec<DVector<f64>>,
    dnu_term: DVector<f64>,
    dlam: Vec<DVector<f64>>,
    dt: Vec<DVector<f64>>,
}

struct TraceRow {
    iter: usize,
    mu: f64,
    kkt: KktResiduals,
    sigma: f64,
    alpha_p: f64,
    alpha_d: f64,
}

/// Incumbent with the smallest max-KKT residual seen during a solve. On a
/// non-optimal exit the solver hands this back instead of the last iterate,
/// so one diverging late step cannot poison the returned point.
struct BestIterate {
    kkt: KktResiduals,
    x: Vec<DVector<f64>>,
    w: Vec<DVector<f64>>,
    nu: Vec<DVector<f64>>,
    nu_term: DVector<f64>,
    lam: Vec<DVector<f64>>,
}

/// Interior-point solver instance. Holds the configuration and scratch
/// state for one solve at a time; create one instance per thread for
/// concurrent solves.
pub struct QpSolver {
    pub config: SolverConfig,
}

impl QpSolver {
    pub fn new(config: SolverConfig) -> Self {
        Self { config }
    }

    pub fn solve(&mut self, qp: &QpData) -> Result<QpSolution, QpError> {
        qp.validate()?;
        let start = std::time::Instant::now();
        let stages = split_stages(qp);
        let n = stages.len() - 1;
        let (e_mat, e_vec) = match &qp.terminal {
            Some((m, v)) => (m.clone(), v.clone()),
            None => (
                DMatrix::zeros(0, stages[n].nx),
                DVector::zeros(0),
            ),
        };
        let ne = e_vec.len();
        let m_total: usize = stages.iter().map(|s| s.ni).sum();

        // Cold start: roll the affine dynamics forward with w = 0 so the
        // dynamics rows start feasible, then seed strictly interior
        // slack/dual pairs.
        let mut x: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        let mut w: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        x.push(DVector::zeros(stages[0].nx));
        for i in 0..=n {
            w.push(DVector::zeros(stages[i].nw));
            if i < n {
                x.push(&stages[i].a * &x[i] + &stages[i].cvec);
            }
        }
        let mut nu: Vec<DVector<f64>> = (0..n)
            .map(|i| DVector::zeros(stages[i + 1].nx))
            .collect();
        let mut nu_term = DVector::zeros(ne);
        let mut lam: Vec<DVector<f64>> = stages
            .iter()
            .map(|s| DVector::from_element(s.ni, 1.0))
            .collect();
        let mut t: Vec<DVector<f64>> = stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let viol = &s.cx * &x[i] + &s.cw * &w[i] - &s.d;
                DVector::from_iterator(s.ni, viol.iter().map(|v| v.abs().max(1.0)))
            })
            .collect();

        let mut status = QpStatus::MaxIterations;
        let mut iterations = 0;
        let mut trace: Vec<TraceRow> = Vec::new();
        let mut best: Option<BestIterate> = None;
        let mut kkt = KktResiduals {
            stationarity: f64::INFINITY,
            equality: f64::INFINITY,
            inequality: f64::INFINITY,
            complementarity: f64::INFINITY,
        };

        for iter in 0..self.config.max_iter {
            let res = residuals(&stages, &e_mat, &e_vec, &x, &w, &nu, &nu_term, &lam, &t);
            kkt = res.norms;
            if kkt.max().is_finite()
                && best.as_ref().map_or(true, |b| kkt.max() < b.kkt.max())
            {
                best = Some(BestIterate {
                    kkt,
                    x: x.clone(),
                    w: w.clone(),
                    nu: nu.clone(),
                    nu_term: nu_term.clone(),
                    lam: lam.clone(),
                });
            }
            let mu = if m_total > 0 {
                lam.iter()
                    .zip(&t)
                    .map(|(l, tt)| l.dot(tt))
                    .sum::<f64>()
                    / m_total as f64
            } else {
                0.0
            };
            if kkt.max() <= self.config.kkt_tol {
                status = QpStatus::Optimal;
                break;
            }
            if !kkt.max().is_finite() || mu > 1e14 {
                status = QpStatus::NumericalFailure;
                break;
            }
            iterations = iter + 1;

            let fact = match factorize(&stages, &e_mat, &lam, &t, self.config.reg) {
                Some(f) => f,
                None => {
                    status = QpStatus::NumericalFailure;
                    break;
                }
            };

            // Predictor: pure Newton direction (sigma = 0).
            let rcomp_aff: Vec<DVector<f64>> =
                lam.iter().zip(&t).map(|(l, tt)| l.component_mul(tt)).collect();
            let aff = solve_newton(&stages, &e_mat, &fact, &res, &lam, &t, &rcomp_aff);
            let (apa, ada) = step_lengths(&t, &lam, &aff);
            let mu_aff = if m_total > 0 {
                lam.iter()
                    .zip(&t)
                    .zip(aff.dlam.iter().zip(&aff.dt))
                    .map(|((l, tt), (dl, dt))| {
                        (l + dl * ada).dot(&(tt + dt * apa))
                    })
                    .sum::<f64>()
                    / m_total as f64
            } else {
                0.0
            };
            let sigma = if mu > 0.0 {
                ((mu_aff / mu).max(0.0).min(1.0)).powi(3)
            } else {
                0.0
            };

            // Corrector with Mehrotra's second-order term and centering.
            let rcomp_cor: Vec<DVector<f64>> = lam
                .iter()
                .zip(&t)
                .zip(aff.dlam.iter().zip(&aff.dt))
                .map(|((l, tt), (dl, dt))| {
                    let mut r = l.component_mul(tt) + dl.component_mul(dt);
                    r.add_scalar_mut(-sigma * mu);
                    r
                })
                .collect();
            let dir = solve_newton(&stages, &e_mat, &fact, &res, &lam, &t, &rcomp_cor);
            let (ap, ad) = step_lengths(&t, &lam, &dir);
            let ap = (0.995 * ap).min(1.0);
            let ad = (0.995 * ad).min(1.0);

            for i in 0..=n {
                x[i] += &dir.dx[i] * ap;
                w[i] += &dir.dw[i] * ap;
                t[i] += &dir.dt[i] * ap;
                lam[i] += &dir.dlam[i] * ad;
            }
            for i in 0..n {
                nu[i] += &dir.dnu[i] * ad;
            }
            nu_term += &dir.dnu_term * ad;

            let finite = x.iter().chain(&w).chain(&t).chain(&lam).chain(&nu)
                .all(|v| v.iter().all(|u| u.is_finite()))
                && nu_term.iter().all(|u| u.is_finite());
            if !finite {
                status = QpStatus::NumericalFailure;
                break;
            }

            if self.config.trace_csv.is_some() {
                trace.push(TraceRow {
                    iter,
                    mu,
                    kkt,
                    sigma,
                    alpha_p: ap,
                    alpha_d: ad,
                });
            }
        }

        if status == QpStatus::MaxIterations || status == QpStatus::Optimal {
            // Refresh residuals at the final iterate.
            let res = residuals(&stages, &e_mat, &e_vec, &x, &w, &nu, &nu_term, &lam, &t);
            kkt = res.norms;
            if kkt.max() <= self.config.kkt_tol {
                status = QpStatus::Optimal;
            }
        }
        if status != QpStatus::Optimal {
            if let Some(b) = best {
                if !kkt.max().is_finite() || b.kkt.max() < kkt.max() {
                    x = b.x;
                    w = b.w;
                    nu = b.nu;
                    nu_term = b.nu_term;
                    lam = b.lam;
                    kkt = b.kkt;
                }
            }
        }

        if let Some(path) = &self.config.trace_csv {
            let mut f = std::fs::File::create(path)?;
            writeln!(
                f,
                "iter,mu,r_stat,r_eq,r_ineq,r_comp,sigma,alpha_p,alpha_d"
            )?;
            for r in &trace {
                writeln!(
                    f,
                    "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                    r.iter,
                    r.mu,
                    r.kkt.stationarity,
                    r.kkt.equality,
                    r.kkt.inequality,
                    r.kkt.complementarity,
                    r.sigma,
                    r.alpha_p,
                    r.alpha_d
                )?;
            }
        }

        // Re-attach the fixed x0 as stage 0's state.
        let mut states = Vec::with_capacity(n + 1);
        states.push(qp.x0.clone());
        for xi in x.iter().skip(1) {
            states.push(xi.clone());
        }
        let slacks = stages
            .iter()
            .enumerate()
            .map(|(i, s)| &s.cx * &x[i] + &s.cw * &w[i] - &s.d)
            .collect();
        Ok(QpSolution {
            states,
            inputs: w,
            eq_duals: nu,
            terminal_dual: nu_term,
            ineq_duals: lam,
            slacks,
            status,
            iterations,
            kkt,
            solve_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Split the stage data into blocks, folding the fixed `x0` into stage 0
/// (cost gradient, inequality offsets and dynamics offset), whose state
/// dimension becomes zero.
fn split_stages(qp: &QpData) -> Vec<IStage> {
    let n = qp.stages.len() - 1;
    let mut out = Vec::with_capacity(n + 1);
    for (i, st) in qp.stages.iter().enumerate() {
        let (nx, nw) = (st.nx, st.nw);
        let hxx = st.h.view((0, 0), (nx, nx)).into_owned();
        let hxw = st.h.view((0, nx), (nx, nw)).into_owned();
        let hww = st.h.view((nx, nx), (nw, nw)).into_owned();
        let gx = st.g.rows(0, nx).into_owned();
        let gw = st.g.rows(nx, nw).into_owned();
        let cx = st.cmat.columns(0, nx).into_owned();
        let cw = st.cmat.columns(nx, nw).into_owned();
        let (a, b, cvec) = if i < n {
            (st.a.clone(), st.b.clone(), st.c.clone())
        } else {
            (
                DMatrix::zeros(0, nx),
                DMatrix::zeros(0, nw),
                DVector::zeros(0),
            )
        };
        if i == 0 {
            // Fold x0: the x block becomes a constant.
            out.push(IStage {
                nx: 0,
                nw,
                ni: st.d.len(),
                hxx: DMatrix::zeros(0, 0),
                hxw: DMatrix::zeros(0, nw),
                hww,
                gx: DVector::zeros(0),
                gw: gw + hxw.tr_mul(&qp.x0),
                cx: DMatrix::zeros(st.d.len(), 0),
                cw,
                d: &st.d - &cx * &qp.x0,
                a: DMatrix::zeros(a.nrows(), 0),
                b,
                cvec: if i < n { cvec + &a * &qp.x0 } else { cvec },
            });
        } else {
            out.push(IStage {
                nx,
                nw,
                ni: st.d.len(),
                hxx,
                hxw,
                hww,
                gx,
                gw,
                cx,
                cw,
                d: st.d.clone(),
                a,
                b,
                cvec,
            });
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn residuals(
    stages: &[IStage],
    e_mat: &DMatrix<f64>,
    e_vec: &DVector<f64>,
    x: &[DVector<f64>],
    w: &[DVector<f64>],
    nu: &[DVector<f64>],
    nu_term: &DVector<f64>,
    lam: &[DVector<f64>],
    t: &[DVector<f64>],
) -> Residuals {
    let n = stages.len() - 1;
    let mut stat_x = Vec::with_capacity(n + 1);
    let mut stat_w = Vec::with_capacity(n + 1);
    let mut eq = Vec::with_capacity(n);
    let mut ineq = Vec::with_capacity(n + 1);
    let (mut ns, mut neq, mut nin, mut nc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..=n {
        let s = &stages[i];
        let mut rx = &s.hxx * &x[i] + &s.hxw * &w[i] + &s.gx - s.cx.tr_mul(&lam[i]);
        let mut rw = s.hxw.tr_mul(&x[i]) + &s.hww * &w[i] + &s.gw - s.cw.tr_mul(&lam[i]);
        if i > 0 {
            rx -= &nu[i - 1];
        }
        if i < n {
            rx += s.a.tr_mul(&nu[i]);
            rw += s.b.tr_mul(&nu[i]);
        }
        if i == n {
            rx -= e_mat.tr_mul(nu_term);
        }
        ns = ns.max(rx.amax_weak()).max(rw.amax_weak());
        stat_x.push(rx);
        stat_w.push(rw);
        if i < n {
            let re = &x[i + 1] - &s.a * &x[i] - &s.b * &w[i] - &s.cvec;
            neq = neq.max(re.amax_weak());
            eq.push(re);
        }
        let ri = &s.cx * &x[i] + &s.cw * &w[i] - &s.d - &t[i];
        nin = nin.max(ri.amax_weak());
        ineq.push(ri);
        nc = nc.max(
            lam[i]
                .iter()
                .zip(t[i].iter())
                .map(|(l, tt)| (l * tt).abs())
                .fold(0.0, f64::max),
        );
    }
    let eq_term = e_mat * &x[n] - e_vec;
    neq = neq.max(eq_term.amax_weak());
    Residuals {
        stat_x,
        stat_w,
        eq,
        eq_term,
        ineq,
        norms: KktResiduals {
            stationarity: ns,
            equality: neq,
            inequality: nin,
            complementarity: nc,
        },
    }
}

/// `amax` that returns 0 for empty vectors instead of panicking.
trait AmaxWeak {
    fn amax_weak(&self) -> f64;
}
impl AmaxWeak for DVector<f64> {
    fn amax_weak(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Backward Riccati factorization of the reduced Newton system for the
/// current barrier weights `W = lam / t`, including the homogeneous
/// terminal-multiplier stream.
fn factorize(
    stages: &[IStage],
    e_mat: &DMatrix<f64>,
    lam: &[DVector<f64>],
    t: &[DVector<f64>],
    reg: f64,
) -> Option<Factorization> {
    let n = stages.len() - 1;
    let ne = e_mat.nrows();
    let mut chol = vec![None; n + 1];
    let mut fxw_all = vec![DMatrix::zeros(0, 0); n + 1];
    let mut p = vec![DMatrix::zeros(0, 0); n + 2];
    let mut pb = vec![DMatrix::zeros(0, 0); n + 2];
    let mut qbw_all = vec![DMatrix::zeros(0, 0); n + 1];

    for i in (0..=n).rev() {
        let s = &stages[i];
        // Barrier-weighted Hessian blocks.
        let wvec = DVector::from_iterator(
            s.ni,
            lam[i].iter().zip(t[i].iter()).map(|(l, tt)| l / tt),
        );
        let mut cxw = s.cx.clone();
        let mut cww = s.cw.clone();
        for j in 0..s.ni {
            let wj = wvec[j];
            cxw.row_mut(j).scale_mut(wj);
            cww.row_mut(j).scale_mut(wj);
        }
        let hbxx = &s.hxx + s.cx.tr_mul(&cxw);
        let hbxw = &s.hxw + s.cx.tr_mul(&cww);
        let hbww = &s.hww + s.cw.tr_mul(&cww);

        let (mut fxx, fxw, mut fww, qbx, qbw);
        if i == n {
            fxx = hbxx;
            fxw = hbxw;
            fww = hbww;
            qbx = e_mat.transpose();
            qbw = DMatrix::zeros(s.nw, ne);
        } else {
            let pn = &p[i + 1];
            let pa = pn * &s.a;
            let pbm = pn * &s.b;
            fxx = hbxx + s.a.tr_mul(&pa);
            fxw = hbxw + s.a.tr_mul(&pbm);
            fww = hbww + s.b.tr_mul(&pbm);
            qbx = s.a.tr_mul(&pb[i + 1]);
            qbw = s.b.tr_mul(&pb[i + 1]);
        }
        // Symmetrize and regularize the pivot; enlarge the shift if the
        // factorization fails.
        fww = (&fww + &fww.transpose()) * 0.5;
        let mut shift = reg;
        let c = loop {
            let mut fr = fww.clone();
            for j in 0..s.nw {
                fr[(j, j)] += shift;
            }
            if let Some(c) = nalgebra::Cholesky::new(fr) {
                break Some(c);
            }
            shift *= 100.0;
            if shift > 1.0 {
                break None;
            }
        }?;
        let gain = c.solve(&fxw.transpose()); // F_ww^{-1} F_xw'
        fxx -= &fxw * &gain;
        fxx = (&fxx + &fxx.transpose()) * 0.5;
        p[i] = fxx;
        pb[i] = &qbx - &fxw * &c.solve(&qbw);
        qbw_all[i] = qbw;
        fxw_all[i] = fxw;
        chol[i] = Some(c);
    }

    // Forward sweep of the homogeneous stream (one column per terminal row).
    let mut dxb = vec![DMatrix::zeros(0, 0); n + 1];
    let mut dwb = vec![DMatrix::zeros(0, 0); n + 1];
    let mut cur = DMatrix::zeros(stages[0].nx, ne);
    for i in 0..=n {
        dxb[i] = cur.clone();
        let rhs = fxw_all[i].tr_mul(&cur) + &qbw_all[i];
        dwb[i] = -chol[i].as_ref().unwrap().solve(&rhs);
        if i < stages.len() - 1 {
            cur = &stages[i].a * &dxb[i] + &stages[i].b * &dwb[i];
        }
    }
    let m_term_lu = if ne > 0 {
        let m = e_mat * &dxb[n];
        let lu = m.lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(lu)
    } else {
        None
    };

    Some(Factorization {
        chol: chol.into_iter().map(Option::unwrap).collect(),
        fxw: fxw_all,
        p,
        pb,
        dxb,
        dwb,
        m_term_lu,
    })
}

/// Solve the reduced Newton system for one right-hand side defined by the
/// complementarity target `rcomp` (predictor: `lam.*t`; corrector adds the
/// second-order term minus the centering offset).
#[allow(clippy::too_many_arguments)]
fn solve_newton(
    stages: &[IStage],
    e_mat: &DMatrix<f64>,
    fact: &Factorization,
    res: &Residuals,
    lam: &[DVector<f64>],
    t: &[DVector<f64>],
    rcomp: &[DVector<f64>],
) -> Direction {
    let n = stages.len() - 1;
    let ne = res.eq_term.len();

    // Reduced gradients r = r_stat + C' (rcomp ./ t + W .* r_ineq).
    let mut rbx = Vec::with_capacity(n + 1);
    let mut rbw = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = &stages[i];
        let svec = DVector::from_iterator(
            s.ni,
            rcomp[i]
                .iter()
                .zip(t[i].iter())
                .zip(lam[i].iter().zip(res.ineq[i].iter()))
                .map(|((rc, tt), (l, ri))| rc / tt + l / tt * ri),
        );
        rbx.push(&res.stat_x[i] + s.cx.tr_mul(&svec));
        rbw.push(&res.stat_w[i] + s.cw.tr_mul(&svec));
    }

    // Backward vector sweep (particular stream, with dynamics defects).
    let mut pa = vec![DVector::zeros(0); n + 2];
    let mut qwa = vec![DVector::zeros(0); n + 1];
    for i in (0..=n).rev() {
        let s = &stages[i];
        let (qx, qw);
        if i == n {
            qx = rbx[i].clone();
            qw = rbw[i].clone();
        } else {
            let rd = -&res.eq[i];
            let mu_hat = &fact.p[i + 1] * &rd + &pa[i + 1];
            qx = &rbx[i] + s.a.tr_mul(&mu_hat);
            qw = &rbw[i] + s.b.tr_mul(&mu_hat);
        }
        pa[i] = &qx - &fact.fxw[i] * &fact.chol[i].solve(&qw);
        qwa[i] = qw;
    }

    // Forward sweep of the particular stream.
    let mut dxa = vec![DVector::zeros(0); n + 1];
    let mut dwa = vec![DVector::zeros(0); n + 1];
    let mut cur = DVector::zeros(stages[0].nx);
    for i in 0..=n {
        dxa[i] = cur.clone();
        let rhs = fact.fxw[i].tr_mul(&cur) + &qwa[i];
        dwa[i] = -fact.chol[i].solve(&rhs);
        if i < n {
            cur = &stages[i].a * &dxa[i] + &stages[i].b * &dwa[i] - &res.eq[i];
        }
    }

    // Terminal multiplier y from E (dx_N^A + dxb_N y) = -r_eq_term, then
    // combine the particular and homogeneous streams.
    let y = if ne > 0 {
        let rhs = -&res.eq_term - e_mat * &dxa[n];
        fact.m_term_lu.as_ref().unwrap().solve(&rhs).unwrap()
    } else {
        DVector::zeros(0)
    };

    let mut dx = Vec::with_capacity(n + 1);
    let mut dw = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if ne > 0 {
            dx.push(&dxa[i] + &fact.dxb[i] * &y);
            dw.push(&dwa[i] + &fact.dwb[i] * &y);
        } else {
            dx.push(dxa[i].clone());
            dw.push(dwa[i].clone());
        }
    }

    // Costates of the equality-constrained subproblem are the dynamics
    // dual steps: dnu_i = P_{i+1} dx_{i+1} + pa_{i+1} + Pb_{i+1} y. The
    // terminal multiplier enters the stage-N stationarity as +E' y, which
    // is -E' dnu_term in the residual convention.
    let mut dnu = Vec::with_capacity(n);
    for i in 0..n {
        let mut theta = &fact.p[i + 1] * &dx[i + 1] + &pa[i + 1];
        if ne > 0 {
            theta += &fact.pb[i + 1] * &y;
        }
        dnu.push(theta);
    }
    let dnu_term = -y;

    // Recover the inequality-block steps.
    let mut dlam = Vec::with_capacity(n + 1);
    let mut dt = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = &stages[i];
        let dti = &s.cx * &dx[i] + &s.cw * &dw[i] + &res.ineq[i];
        let dli = DVector::from_iterator(
            s.ni,
            rcomp[i]
                .iter()
                .zip(lam[i].iter().zip(dti.iter().zip(t[i].iter())))
                .map(|(rc, (l, (dtj, tt)))| -(rc + l * dtj) / tt),
        );
        dlam.push(dli);
        dt.push(dti);
    }

    Direction {
        dx,
        dw,
        dnu,
        dnu_term,
        dlam,
        dt,
    }
}

fn step_lengths(t: &[DVector<f64>], lam: &[DVector<f64>], dir: &Direction) -> (f64, f64) {
    let mut ap = 1.0f64;
    let mut ad = 1.0f64;
    for i in 0..t.len() {
        for j in 0..t[i].len() {
            if dir.dt[i][j] < 0.0 {
                ap = ap.min(-t[i][j] / dir.dt[i][j]);
            }
            if dir.dlam[i][j] < 0.0 {
                ad = ad.min(-lam[i][j] / dir.dlam[i][j]);
            }
        }
    }
    (ap, ad)
}
