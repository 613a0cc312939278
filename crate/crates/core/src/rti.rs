//! Real-time-iteration controller: one linearization and one structured
//! QP solve per control period, warm-started by shifting the previous
//! solution.
//!
//! Per step: shift the trajectory guess one stage (appending a
//! force-balanced hold at the end — the terminal full stop makes the
//! appended stage a standstill), anchor stage 0 at the measured state,
//! linearize the OCP there, solve the QP, apply the full Newton step to
//! the guess, and return the first input. A non-optimal QP status is
//! reported but the iterate is still applied (degraded mode), matching
//! the real-time philosophy: the next period re-linearizes anyway.

use crate::ocp::{
    build_qp, AlphaSchedule, Obstacle, OcpConfig, OcpError, SvPrediction, Trajectory,
};
use crate::qp::{KktResiduals, QpError, QpStatus, QpSolver, SolverConfig};
use crate::shape::ShapeKind;
use crate::vehicle::{resistance, rk4_step, Control, EgoState, ModelError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RtiError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Telemetry for one controller step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepInfo {
    pub control: Control<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// QP wall-clock time in seconds.
    pub solve_time: f64,
    /// Largest obstacle slack in the accepted iterate.
    pub slack_max: f64,
}

/// Stagewise constraint margins of the time-shifted trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Per stage: minimum obstacle margin (shape value minus 1; >= 0 is
    /// feasible). Empty when there are no obstacles.
    pub obstacle_margins: Vec<f64>,
    /// Worst state-box violation over the shifted trajectory (>= 0 means
    /// some bound is violated by that amount).
    pub worst_box_violation: f64,
    pub feasible: bool,
}

pub struct RtiController {
    pub config: OcpConfig,
    pub schedule: AlphaSchedule,
    /// Current trajectory guess (linearization point / warm start).
    pub guess: Trajectory,
    solver: QpSolver,
    /// Telemetry of the most recent step.
    pub last: Option<StepInfo>,
}

/// Create a controller whose initial guess rolls the model forward from
/// `x0` under force-balanced inputs (constant speed, zero steering rate).
pub fn initialize(
    x0: EgoState<f64>,
    config: OcpConfig,
    schedule: AlphaSchedule,
    solver_config: SolverConfig,
    kappa_fn: impl Fn(f64) -> (f64, f64),
) -> Result<RtiController, RtiError> {
    let mut states = Vec::with_capacity(config.n_stages + 1);
    let mut inputs = Vec::with_capacity(config.n_stages);
    states.push(x0);
    for i in 0..config.n_stages {
        let u = Control {
            f_d: resistance(states[i].v, &config.params),
            r: 0.0,
        };
        inputs.push(u);
        states.push(rk4_step(&states[i], &u, config.t_d, &kappa_fn, &config.params)?);
    }
    Ok(RtiController {
        config,
        schedule,
        guess: Trajectory { states, inputs },
        solver: QpSolver::new(solver_config),
        last: None,
    })
}

impl RtiController {
    /// The time-shifted guess: stages move one slot earlier and the end
    /// is extended by holding the last state under force balance.
    fn shifted(
        &self,
        kappa_fn: impl Fn(f64) -> (f64, f64),
    ) -> Result<Trajectory, ModelError> {
        let n = self.config.n_stages;
        let mut states: Vec<EgoState<f64>> = self.guess.states[1..].to_vec();
        let mut inputs: Vec<Control<f64>> = self.guess.inputs[1..].to_vec();
        let hold = Control {
            f_d: resistance(states[n - 1].v, &self.config.params),
            r: 0.0,
        };
        states.push(rk4_step(
            &states[n - 1],
            &hold,
            self.config.t_d,
            &kappa_fn,
            &self.config.params,
        )?);
        inputs.push(hold);
        Ok(Trajectory { states, inputs })
    }

    /// One real-time iteration. Returns the input to apply now.
    pub fn step(
        &mut self,
        x_hat: EgoState<f64>,
        obstacles: &[Obstacle],
        kappa_fn: impl Fn(f64) -> (f64, f64),
    ) -> Result<StepInfo, RtiError> {
        let n = self.config.n_stages;
        let mut guess = self.shifted(&kappa_fn)?;
        guess.states[0] = x_hat;

        let svs: Vec<SvPrediction> = obstacles
            .iter()
            .map(|ob| SvPrediction::constant_velocity(ob, n, self.config.t_d))
            .collect();
        let qp = build_qp(&guess, &self.config, &self.schedule, &svs, &kappa_fn)?;
        let sol = self.solver.solve(&qp)?;

        // Full Newton step: apply the deviations to the guess.
        let m = obstacles.len();
        let mut slack_max = 0.0f64;
        for i in 0..=n {
            let xa = guess.states[i].to_array();
            let mut xn = xa;
            if i > 0 {
                for j in 0..5 {
                    xn[j] = xa[j] + sol.states[i][j];
                }
            }
            guess.states[i] = EgoState::from_array(xn);
            let nu = if i < n { 2 } else { 0 };
            if i < n {
                let ua = guess.inputs[i].to_array();
                guess.inputs[i] = Control {
                    f_d: ua[0] + sol.inputs[i][0],
                    r: ua[1] + sol.inputs[i][1],
                };
            }
            for k in 0..m {
                slack_max = slack_max.max(sol.inputs[i][nu + k]);
            }
        }
        self.guess = guess;

        let info = StepInfo {
            control: self.guess.inputs[0],
            status: sol.status,
            iterations: sol.iterations,
            kkt: sol.kkt,
            solve_time: sol.solve_time,
            slack_max,
        };
        self.last = Some(info.clone());
        Ok(info)
    }

    /// Evaluate the stage constraints on the time-shifted current guess
    /// against the obstacles' next predictions: stage `i` of the shifted
    /// trajectory is checked with stage `i`'s (tighter) shape. With a
    /// non-increasing alpha schedule and the terminal standstill this is
    /// the recursive-feasibility certificate of the scheme.
    pub fn check_recursive_feasibility(
        &self,
        obstacles: &[Obstacle],
        kappa_fn: impl Fn(f64) -> (f64, f64),
        tol: f64,
    ) -> Result<FeasibilityReport, RtiError> {
        let n = self.config.n_stages;
        let shifted = self.shifted(&kappa_fn)?;
        let scale = self.schedule.axis_scale();

        let mut obstacle_margins = Vec::with_capacity(if obstacles.is_empty() { 0 } else { n + 1 });
        let mut feasible = true;
        if !obstacles.is_empty() {
            // Obstacles advance one period before the shifted plan starts.
            let preds: Vec<SvPrediction> = obstacles
                .iter()
                .map(|ob| {
                    let mut next = *ob;
                    next.state.s += next.state.v * self.config.t_d;
                    SvPrediction::constant_velocity(&next, n, self.config.t_d)
                })
                .collect();
            for i in 0..=n {
                let spec = self.schedule.shape_at(i).map_err(OcpError::from)?;
                let x = &shifted.states[i];
                let mut worst = f64::INFINITY;
                for sv in &preds {
                    let theta_eff = crate::ocp::ObstacleParams {
                        length: sv.params.length * scale,
                        width: sv.params.width * scale,
                    };
                    let xi =
                        crate::ocp::normalize_to_obstacle([x.s, x.n], &sv.states[i], &theta_eff);
                    let margin = match self.schedule.kind() {
                        // Feasible outside: shape value >= 1.
                        ShapeKind::Relu2 => -spec.eval(&xi).map_err(OcpError::from)?,
                        _ => spec.eval(&xi).map_err(OcpError::from)? - 1.0,
                    };
                    worst = worst.min(margin);
                }
                obstacle_margins.push(worst);
                if worst < -tol {
                    feasible = false;
                }
            }
        }

        let p = &self.config.params;
        let mut worst_box = f64::NEG_INFINITY;
        for x in shifted.states.iter().skip(1) {
            worst_box = worst_box
                .max(x.n.abs() - self.config.n_lim)
                .max(-x.v)
                .max(x.v - p.v_max)
                .max(x.delta.abs() - p.delta_max)
                .max(x.beta.abs() - self.config.beta_max);
        }
        if worst_box > tol {
            feasible = false;
        }
        Ok(FeasibilityReport {
            obstacle_margins,
            worst_box_violation: worst_box,
            feasible,
        })
    }
}
