//! Optimal-control-problem assembly: turns a reference trajectory guess,
//! obstacle predictions and a stagewise shape schedule into the structured
//! QP solved at every controller step.
//!
//! The QP decision variables are deviations `(dx_i, du_i)` from the guess
//! plus one nonnegative slack per obstacle and stage. Stage layout:
//! `w_i = (du_i, sigma_i)` for `i < N` and `w_N = (sigma_N)`. The initial
//! deviation `dx_0` is the fixed QP parameter (zero, because the guess is
//! anchored at the measured state). The horizon ends with a full-stop
//! terminal equality `v_N = 0`, which anchors recursive feasibility
//! against constant-velocity obstacle predictions.
//!
//! Obstacle avoidance: the ego position is normalized into the obstacle
//! frame, `xi = A(theta) (p - P z)` with `A = diag(2/length, 2/width)`,
//! and the stage shape function is linearized there into a half-space,
//! relaxed by the stage slack. The per-stage shape comes from an
//! [`AlphaSchedule`]: either a smoothing homotopy (tight near, smooth far)
//! or a fixed shape for the baseline formulations.

use crate::qp::{QpData, QpStage};
use crate::shape::{alpha_from_width, ShapeError, ShapeKind, ShapeSpec};
use crate::vehicle::{
    discrete_jacobians, lateral_accel, lateral_accel_grad, rk4_step, Control, EgoState,
    ModelError, ModelParams,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("shape error: {0}")]
    Shape(#[from] ShapeError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("obstacle dimensions must be positive and finite")]
    BadObstacle,
    #[error("inconsistent horizon data: {0}")]
    Dimensions(String),
    #[error("schedule alphas must be non-increasing along the horizon")]
    NonMonotoneSchedule,
}

/// Rectangular obstacle dimensions (already inflated by ego size where
/// appropriate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleParams {
    pub length: f64,
    pub width: f64,
}

impl ObstacleParams {
    pub fn validate(&self) -> Result<(), OcpError> {
        if self.length > 0.0 && self.width > 0.0 && self.length.is_finite() && self.width.is_finite()
        {
            Ok(())
        } else {
            Err(OcpError::BadObstacle)
        }
    }
}

/// Surrounding-vehicle state in the same Frenet frame as the ego.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvState {
    pub s: f64,
    pub n: f64,
    pub beta: f64,
    pub v: f64,
    pub delta: f64,
}

/// Constant-velocity prediction of an SV over the horizon: `s` advances
/// by `v t_d` per stage, the lateral state is frozen.
pub fn predict_sv(z: &SvState, n_stages: usize, t_d: f64) -> Vec<SvState> {
    (0..=n_stages)
        .map(|i| SvState {
            s: z.s + z.v * t_d * i as f64,
            ..*z
        })
        .collect()
}

/// An obstacle: its current state plus (inflated) dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub state: SvState,
    pub params: ObstacleParams,
}

/// Normalize an ego position into an obstacle's scaled frame:
/// `xi = diag(2/length, 2/width) (p - (z_s, z_n))`.
pub fn normalize_to_obstacle(p: [f64; 2], z: &SvState, theta: &ObstacleParams) -> [f64; 2] {
    [
        2.0 * (p[0] - z.s) / theta.length,
        2.0 * (p[1] - z.n) / theta.width,
    ]
}

/// Stagewise shape schedule: one `(alpha, width)` pair per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaSchedule {
    kind: ShapeKind,
    alphas: Vec<f64>,
    widths: Vec<f64>,
}

impl AlphaSchedule {
    /// Smoothing homotopy: stage widths interpolate linearly from
    /// `d_bar_0` (stage 0, tight) to `d_bar_n` (stage N, smooth), and each
    /// stage's alpha is calibrated so the shape's axis crossing sits at
    /// its width. Alphas must come out non-increasing along the horizon;
    /// this is what lets a time-shifted trajectory remain feasible.
    pub fn homotopy(
        kind: ShapeKind,
        d_bar_0: f64,
        d_bar_n: f64,
        n_stages: usize,
    ) -> Result<Self, OcpError> {
        let mut alphas = Vec::with_capacity(n_stages + 1);
        let mut widths = Vec::with_capacity(n_stages + 1);
        for i in 0..=n_stages {
            let d = d_bar_0 + (i as f64 / n_stages as f64) * (d_bar_n - d_bar_0);
            widths.push(d);
            alphas.push(alpha_from_width(kind, d)?);
        }
        if alphas.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(OcpError::NonMonotoneSchedule);
        }
        Ok(Self {
            kind,
            alphas,
            widths,
        })
    }

    /// Fixed p-norm baseline (p in {2, 4, 6}); constant over the horizon.
    /// The obstacle axes are scaled by `2^(1/p)` at constraint-build time
    /// so the shape's boundary passes through the box corners (the shape
    /// then matches the scaled-norm member at alpha = p).
    pub fn fixed_p_norm(p: f64, n_stages: usize) -> Result<Self, OcpError> {
        let spec = ShapeSpec::new(ShapeKind::FixedPNorm, p)?;
        let _ = spec;
        Ok(Self {
            kind: ShapeKind::FixedPNorm,
            alphas: vec![p; n_stages + 1],
            widths: vec![2f64.powf(1.0 / p); n_stages + 1],
        })
    }

    /// Product-of-ReLU baseline; constant over the horizon.
    pub fn relu2(n_stages: usize) -> Self {
        Self {
            kind: ShapeKind::Relu2,
            alphas: vec![0.0; n_stages + 1],
            widths: vec![1.0; n_stages + 1],
        }
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alpha_at(&self, i: usize) -> f64 {
        self.alphas[i]
    }

    pub fn width_at(&self, i: usize) -> f64 {
        self.widths[i]
    }

    pub fn shape_at(&self, i: usize) -> Result<ShapeSpec<f64>, ShapeError> {
        ShapeSpec::new(self.kind, self.alphas[i])
    }

    /// Multiplier applied to the obstacle half-axes when building
    /// constraints (corner-circumscribing scaling for the fixed p-norm).
    pub fn axis_scale(&self) -> f64 {
        match self.kind {
            ShapeKind::FixedPNorm => 2f64.powf(1.0 / self.alphas[0]),
            _ => 1.0,
        }
    }
}

/// Stagewise smoothing schedule for a homotopy family (named free-function
/// form of [`AlphaSchedule::homotopy`]).
pub fn schedule_alpha(
    kind: ShapeKind,
    d_bar_0: f64,
    d_bar_n: f64,
    n_stages: usize,
) -> Result<AlphaSchedule, OcpError> {
    AlphaSchedule::homotopy(kind, d_bar_0, d_bar_n, n_stages)
}

/// A state/input trajectory over the horizon: `N + 1` states, `N` inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<EgoState<f64>>,
    pub inputs: Vec<Control<f64>>,
}

/// Horizon, weights and bounds of the tracking OCP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpConfig {
    /// Horizon length N (stages 0..N). Default 70.
    pub n_stages: usize,
    /// Stage duration (s). Default 0.1.
    pub t_d: f64,
    /// Stage state weights on (s, n, beta, v, delta).
    /// Default (0, 5, 1, 10, 10); the `n` weight is the scenario's
    /// lane-keeping weight.
    pub q: [f64; 5],
    /// Terminal state weights. Default equal to `q`.
    pub q_n: [f64; 5],
    /// Input weights on (F_d, r). Default (1e-6, 10).
    pub r: [f64; 2],
    /// L1 slack penalty. Default 1e4 (exact-penalty scale).
    pub slack_l1: f64,
    /// Small quadratic slack penalty added for solver conditioning.
    /// Default 1.0; keeps the L1 behavior (the linear term dominates near
    /// zero) while bounding Newton steps in the slack coordinates.
    pub slack_l2: f64,
    /// Reference speed (m/s).
    pub v_set: f64,
    /// Lateral corridor half-width: |n| <= n_lim.
    pub n_lim: f64,
    /// Heading-mismatch bound: |beta| <= beta_max. The Frenet projection
    /// and the model linearization are only meaningful well below pi/2;
    /// without this box the Gauss-Newton step can spin the predicted
    /// heading through the singularity at near-standstill stages where
    /// the steering channel has almost no linearized authority.
    pub beta_max: f64,
    pub params: ModelParams<f64>,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            n_stages: 70,
            t_d: 0.1,
            q: [0.0, 5.0, 1.0, 10.0, 10.0],
            q_n: [0.0, 5.0, 1.0, 10.0, 10.0],
            r: [1e-6, 10.0],
            slack_l1: 1e4,
            slack_l2: 1.0,
            v_set: 10.0,
            n_lim: 4.05,
            beta_max: 1.2,
            params: ModelParams::default(),
        }
    }
}

impl OcpConfig {
    /// Set the lane-keeping weight (the `n` entry of both `q` and `q_n`).
    pub fn with_lane_weight(mut self, w_n: f64) -> Self {
        self.q[1] = w_n;
        self.q_n[1] = w_n;
        self
    }
}

/// Build the stage-structured QP linearized at `guess`.
///
/// `svs` carries one prediction per obstacle, each of length `N + 1`.
/// `kappa_fn` is the path curvature lookup `s -> (kappa, dkappa/ds)`.
pub fn build_qp(
    guess: &Trajectory,
    cfg: &OcpConfig,
    schedule: &AlphaSchedule,
    svs: &[SvPrediction],
    kappa_fn: impl Fn(f64) -> (f64, f64),
) -> Result<QpData, OcpError> {
    let n = cfg.n_stages;
    if guess.states.len() != n + 1 || guess.inputs.len() != n {
        return Err(OcpError::Dimensions(format!(
            "guess has {} states / {} inputs for N = {n}",
            guess.states.len(),
            guess.inputs.len()
        )));
    }
    if schedule.len() != n + 1 {
        return Err(OcpError::Dimensions("schedule length".into()));
    }
    for sv in svs {
        if sv.states.len() != n + 1 {
            return Err(OcpError::Dimensions("sv prediction length".into()));
        }
        sv.params.validate()?;
    }
    let m = svs.len();
    let p = &cfg.params;
    let s0 = guess.states[0].s;
    let scale = schedule.axis_scale();

    let mut stages = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let xi = &guess.states[i];
        let last = i == n;
        let nu = if last { 0 } else { 2 };
        let nw = nu + m;
        let nz = 5 + nw;

        // Quadratic cost: deviation weights plus slack penalties; linear
        // term re-centers the deviation cost on the reference.
        let weights = if last { &cfg.q_n } else { &cfg.q };
        let mut h = DMatrix::zeros(nz, nz);
        let mut g = DVector::zeros(nz);
        let xref = [
            s0 + cfg.v_set * cfg.t_d * i as f64,
            0.0,
            0.0,
            cfg.v_set,
            0.0,
        ];
        let xa = xi.to_array();
        for j in 0..5 {
            h[(j, j)] = weights[j];
            g[j] = weights[j] * (xa[j] - xref[j]);
        }
        if !last {
            let ui = guess.inputs[i].to_array();
            for j in 0..2 {
                h[(5 + j, 5 + j)] = cfg.r[j];
                g[5 + j] = cfg.r[j] * ui[j];
            }
        }
        for k in 0..m {
            h[(5 + nu + k, 5 + nu + k)] = cfg.slack_l2;
            g[5 + nu + k] = cfg.slack_l1;
        }

        // Inequality rows (C z >= d).
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        if i > 0 {
            // State box: lateral corridor, speed range, steering angle.
            // The terminal stage pins v through the equality constraint,
            // so its speed box rows would duplicate it exactly (v = 0 on
            // the v >= 0 boundary) and leave the dual degenerate.
            rows.push((vec![(1, -1.0)], xi.n - cfg.n_lim)); // n <= n_lim
            rows.push((vec![(1, 1.0)], -cfg.n_lim - xi.n)); // n >= -n_lim
            rows.push((vec![(2, -1.0)], xi.beta - cfg.beta_max)); // beta <= beta_max
            rows.push((vec![(2, 1.0)], -cfg.beta_max - xi.beta)); // beta >= -beta_max
            if !last {
                rows.push((vec![(3, -1.0)], xi.v - p.v_max)); // v <= v_max
                rows.push((vec![(3, 1.0)], -xi.v)); // v >= 0
            }
            rows.push((vec![(4, -1.0)], xi.delta - p.delta_max));
            rows.push((vec![(4, 1.0)], -p.delta_max - xi.delta));
            // Lateral acceleration, linearized.
            let a_lat = lateral_accel(xi, p);
            let ga = lateral_accel_grad(xi, p);
            let neg: Vec<(usize, f64)> = (0..5).map(|j| (j, -ga[j])).collect();
            let pos: Vec<(usize, f64)> = (0..5).map(|j| (j, ga[j])).collect();
            rows.push((neg, a_lat - p.a_lat_max));
            rows.push((pos, -p.a_lat_max - a_lat));
        }
        if !last {
            let ui = guess.inputs[i].to_array();
            rows.push((vec![(5, -1.0)], ui[0] - p.f_d_max));
            rows.push((vec![(5, 1.0)], -p.f_d_max - ui[0]));
            rows.push((vec![(6, -1.0)], ui[1] - p.r_max));
            rows.push((vec![(6, 1.0)], -p.r_max - ui[1]));
        }
        for (k, sv) in svs.iter().enumerate() {
            let z = &sv.states[i];
            let theta_eff = ObstacleParams {
                length: sv.params.length * scale,
                width: sv.params.width * scale,
            };
            let mut xi_norm = normalize_to_obstacle([xi.s, xi.n], z, &theta_eff);
            // At the obstacle center every direction supports the level
            // set equally and the gradient is undefined; pick the lateral
            // one (toward the guess's side of the obstacle, left on a
            // tie), which is the direction an overtake resolves to.
            if xi_norm[0].hypot(xi_norm[1]) < 1e-9 {
                xi_norm = [0.0, if xi.n >= z.n { 1e-6 } else { -1e-6 }];
            }
            let spec = schedule.shape_at(i)?;
            let hs = spec.linearize(&xi_norm)?;
            // Row: normal . (xi_tilde + A dp) + sigma >= offset, with
            // dp = (ds, dn) and A the obstacle normalization.
            let cs = hs.normal[0] * 2.0 / theta_eff.length;
            let cn = hs.normal[1] * 2.0 / theta_eff.width;
            let base = hs.normal[0] * xi_norm[0] + hs.normal[1] * xi_norm[1];
            rows.push((
                vec![(0, cs), (1, cn), (5 + nu + k, 1.0)],
                hs.offset - base,
            ));
            // Slack nonnegativity.
            rows.push((vec![(5 + nu + k, 1.0)], 0.0));
        }

        let ni = rows.len();
        let mut cmat = DMatrix::zeros(ni, nz);
        let mut d = DVector::zeros(ni);
        for (r, (coefs, rhs)) in rows.into_iter().enumerate() {
            for (col, val) in coefs {
                cmat[(r, col)] = val;
            }
            d[r] = rhs;
        }

        // Dynamics linearization to the next stage.
        let (a, b, c) = if last {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DVector::zeros(0))
        } else {
            let u = &guess.inputs[i];
            let (ja, jb) = discrete_jacobians(xi, u, cfg.t_d, &kappa_fn, p)?;
            let next = rk4_step(xi, u, cfg.t_d, &kappa_fn, p)?;
            let defect = DVector::from_iterator(
                5,
                next.to_array()
                    .iter()
                    .zip(guess.states[i + 1].to_array())
                    .map(|(f, x1)| f - x1),
            );
            let mut am = DMatrix::zeros(5, 5);
            let mut bm = DMatrix::zeros(5, nw);
            for r in 0..5 {
                for cix in 0..5 {
                    am[(r, cix)] = ja[r][cix];
                }
                for cix in 0..2 {
                    bm[(r, cix)] = jb[r][cix];
                }
                // Slack columns do not enter the dynamics.
            }
            (am, bm, defect)
        };

        stages.push(QpStage {
            nx: 5,
            nw,
            h,
            g,
            a,
            b,
            c,
            cmat,
            d,
        });
    }

    // Terminal full stop: v_N = 0 in deviations means dv = -v_hat_N.
    let e_mat = DMatrix::from_row_slice(1, 5, &[0.0, 0.0, 0.0, 1.0, 0.0]);
    let e_vec = DVector::from_vec(vec![-guess.states[n].v]);

    Ok(QpData {
        x0: DVector::zeros(5),
        stages,
        terminal: Some((e_mat, e_vec)),
    })
}

/// Obstacle prediction over the horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvPrediction {
    pub states: Vec<SvState>,
    pub params: ObstacleParams,
}

impl SvPrediction {
    pub fn constant_velocity(ob: &Obstacle, n_stages: usize, t_d: f64) -> Self {
        Self {
            states: predict_sv(&ob.state, n_stages, t_d),
            params: ob.params,
        }
    }
}

/// Serialize a QP to JSON (diagnostic dump).
pub fn write_qp_json<W: std::io::Write>(qp: &QpData, w: W) -> serde_json::Result<()> {
    serde_json::to_writer(w, qp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::resistance;
    use approx::assert_relative_eq;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    fn rollout(x0: EgoState<f64>, n: usize, cfg: &OcpConfig) -> Trajectory {
        let mut states = vec![x0];
        let mut inputs = Vec::new();
        for i in 0..n {
            let u = Control {
                f_d: resistance(states[i].v, &cfg.params),
                r: 0.0,
            };
            inputs.push(u);
            states.push(rk4_step(&states[i], &u, cfg.t_d, |_| (0.0, 0.0), &cfg.params).unwrap());
        }
        Trajectory { states, inputs }
    }

    fn ego(s: f64, n: f64, v: f64) -> EgoState<f64> {
        EgoState {
            s,
            n,
            beta: 0.0,
            v,
            delta: 0.0,
        }
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        for kind in [ShapeKind::ScaledNorm, ShapeKind::LogSumExp, ShapeKind::Boltzmann] {
            let sch = schedule_alpha(kind, 1.005, SQRT2, 70).unwrap();
            assert_eq!(sch.len(), 71);
            for i in 0..70 {
                assert!(
                    sch.alpha_at(i) >= sch.alpha_at(i + 1) - 1e-12,
                    "{kind:?} alpha increased at {i}"
                );
            }
            assert_relative_eq!(sch.width_at(0), 1.005);
            assert_relative_eq!(sch.width_at(70), SQRT2);
        }
        // Frozen calibration endpoints (scaled norm: ln 2 / ln d).
        let sn = schedule_alpha(ShapeKind::ScaledNorm, 1.005, SQRT2, 70).unwrap();
        assert_relative_eq!(sn.alpha_at(0), 138.97572161069378, max_relative = 1e-9);
        assert_relative_eq!(sn.alpha_at(70), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn fixed_schedules() {
        let p4 = AlphaSchedule::fixed_p_norm(4.0, 10).unwrap();
        assert_eq!(p4.kind(), ShapeKind::FixedPNorm);
        assert_relative_eq!(p4.axis_scale(), 2f64.powf(0.25));
        assert!(AlphaSchedule::fixed_p_norm(3.0, 10).is_err());
        let r2 = AlphaSchedule::relu2(10);
        assert_eq!(r2.len(), 11);
        assert_relative_eq!(r2.axis_scale(), 1.0);
    }

    #[test]
    fn sv_prediction_is_constant_velocity() {
        let z = SvState {
            s: 50.0,
            n: 0.5,
            beta: 0.0,
            v: 3.0,
            delta: 0.0,
        };
        let pred = predict_sv(&z, 10, 0.1);
        assert_eq!(pred.len(), 11);
        assert_relative_eq!(pred[10].s, 53.0);
        assert_relative_eq!(pred[4].s, 51.2);
        assert_relative_eq!(pred[7].n, 0.5);
        assert_relative_eq!(pred[7].v, 3.0);
    }

    #[test]
    fn normalization_example() {
        let z = SvState {
            s: 50.0,
            n: 0.0,
            beta: 0.0,
            v: 0.0,
            delta: 0.0,
        };
        let th = ObstacleParams {
            length: 4.0,
            width: 2.0,
        };
        let xi = normalize_to_obstacle([52.0, 1.0], &z, &th);
        assert_relative_eq!(xi[0], 1.0);
        assert_relative_eq!(xi[1], 1.0);
    }

    #[test]
    fn qp_structure_matches_horizon() {
        let cfg = OcpConfig {
            n_stages: 12,
            ..Default::default()
        };
        let guess = rollout(ego(0.0, 0.0, 10.0), 12, &cfg);
        let sch = schedule_alpha(ShapeKind::ScaledNorm, 1.005, SQRT2, 12).unwrap();
        let ob = Obstacle {
            state: SvState {
                s: 60.0,
                n: 0.0,
                beta: 0.0,
                v: 2.0,
                delta: 0.0,
            },
            params: ObstacleParams {
                length: 9.0,
                width: 4.0,
            },
        };
        let svs = vec![SvPrediction::constant_velocity(&ob, 12, cfg.t_d)];
        let qp = build_qp(&guess, &cfg, &sch, &svs, |_| (0.0, 0.0)).unwrap();
        qp.validate().unwrap();
        assert_eq!(qp.stages.len(), 13);
        // Stage 0: only input box + obstacle + slack rows.
        assert_eq!(qp.stages[0].d.len(), 4 + 2);
        assert_eq!(qp.stages[0].nw, 3);
        // Middle stages: 8 box + 2 lat-accel + 4 input + 2 obstacle rows.
        assert_eq!(qp.stages[5].d.len(), 16);
        // Terminal: no input rows or input block, and no speed box (the
        // equality constraint pins v).
        assert_eq!(qp.stages[12].nw, 1);
        assert_eq!(qp.stages[12].d.len(), 10);
        let (e_mat, e_vec) = qp.terminal.as_ref().unwrap();
        assert_eq!(e_mat.nrows(), 1);
        assert_relative_eq!(e_vec[0], -guess.states[12].v);

        // The guess is an exact rollout, so the dynamics defects vanish.
        for i in 0..12 {
            assert!(qp.stages[i].c.amax() < 1e-12, "defect at stage {i}");
        }

        // Cost diagonal carries the configured weights.
        assert_relative_eq!(qp.stages[5].h[(1, 1)], 5.0);
        assert_relative_eq!(qp.stages[5].h[(5, 5)], 1e-6);
        assert_relative_eq!(qp.stages[5].h[(7, 7)], cfg.slack_l2);
        assert_relative_eq!(qp.stages[5].g[7], 1e4);
    }

    #[test]
    fn obstacle_row_blocks_straight_through() {
        // Guess drives straight through a static obstacle; the stage rows
        // at overlapping stages must demand lateral motion or slack: the
        // guess point itself must violate the un-slacked half-space.
        let cfg = OcpConfig {
            n_stages: 30,
            ..Default::default()
        };
        let guess = rollout(ego(40.0, 0.0, 10.0), 30, &cfg);
        let sch = schedule_alpha(ShapeKind::ScaledNorm, 1.005, SQRT2, 30).unwrap();
        let ob = Obstacle {
            state: SvState {
                s: 55.0,
                n: 0.0,
                beta: 0.0,
                v: 0.0,
                delta: 0.0,
            },
            params: ObstacleParams {
                length: 10.0,
                width: 4.0,
            },
        };
        let svs = vec![SvPrediction::constant_velocity(&ob, 30, cfg.t_d)];
        let qp = build_qp(&guess, &cfg, &sch, &svs, |_| (0.0, 0.0)).unwrap();
        // Stage where the guess is inside the obstacle: s = 55 at i = 15.
        let st = &qp.stages[15];
        let n_rows = st.d.len();
        // Obstacle row is the second-to-last (slack row is last). With
        // z = 0 (on the guess), sigma = 0: row value 0 >= d must FAIL.
        let viol = -st.d[n_rows - 2];
        assert!(
            viol < 0.0,
            "guess inside the obstacle should violate the linearized row"
        );
    }

    #[test]
    fn linearization_at_obstacle_center_is_lateral() {
        let cfg = OcpConfig {
            n_stages: 4,
            ..Default::default()
        };
        let guess = rollout(ego(50.0, 0.0, 0.0), 4, &cfg);
        let sch = schedule_alpha(ShapeKind::LogSumExp, 1.005, SQRT2, 4).unwrap();
        // Static obstacle exactly on top of the (stationary) guess: the
        // gradient has no limit there, so the row must fall back to the
        // lateral supporting direction (left of the obstacle on a tie).
        let ob = Obstacle {
            state: SvState {
                s: 50.0,
                n: 0.0,
                beta: 0.0,
                v: 0.0,
                delta: 0.0,
            },
            params: ObstacleParams {
                length: 8.0,
                width: 4.0,
            },
        };
        let svs = vec![SvPrediction::constant_velocity(&ob, 4, cfg.t_d)];
        let qp = build_qp(&guess, &cfg, &sch, &svs, |_| (0.0, 0.0)).unwrap();
        for (i, st) in qp.stages.iter().enumerate() {
            let r = st.d.len() - 2; // obstacle row (slack row is last)
            assert_eq!(
                st.cmat[(r, 0)],
                0.0,
                "stage {i}: no longitudinal push at the center"
            );
            assert!(
                st.cmat[(r, 1)] > 0.0,
                "stage {i}: lateral-left supporting normal"
            );
            // sigma = 0, dp = 0 must violate the row: the center is as
            // infeasible as it gets.
            assert!(-st.d[r] < 0.0, "stage {i}: row violated at the center");
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let cfg = OcpConfig {
            n_stages: 5,
            ..Default::default()
        };
        let guess = rollout(ego(0.0, 0.0, 10.0), 4, &cfg);
        let sch = schedule_alpha(ShapeKind::ScaledNorm, 1.005, SQRT2, 5).unwrap();
        assert!(matches!(
            build_qp(&guess, &cfg, &sch, &[], |_| (0.0, 0.0)),
            Err(OcpError::Dimensions(_))
        ));
    }

    #[test]
    fn qp_json_dump_round_trips() {
        let cfg = OcpConfig {
            n_stages: 3,
            ..Default::default()
        };
        let guess = rollout(ego(0.0, 0.0, 8.0), 3, &cfg);
        let sch = AlphaSchedule::relu2(3);
        let qp = build_qp(&guess, &cfg, &sch, &[], |_| (0.0, 0.0)).unwrap();
        let mut buf = Vec::new();
        write_qp_json(&qp, &mut buf).unwrap();
        let back: QpData = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back.stages.len(), 4);
        assert_eq!(back.stages[1].h, qp.stages[1].h);
    }

    #[test]
    fn homotopy_rejects_bad_widths() {
        assert!(schedule_alpha(ShapeKind::ScaledNorm, 0.9, SQRT2, 5).is_err());
        assert!(schedule_alpha(ShapeKind::Boltzmann, 1.005, 1.6, 5).is_err());
    }
}
