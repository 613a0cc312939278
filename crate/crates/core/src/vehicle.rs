//! Kinematic bicycle model in road-aligned (Frenet) coordinates.
//!
//! State `x = (s, n, beta, v, delta)`: arc-length progress, lateral offset,
//! heading mismatch, longitudinal speed, steering angle. Input
//! `u = (F_d, r)`: drive force and steering rate. Continuous dynamics
//!
//! ```text
//! s'     = v cos(beta) / (1 - n kappa(s))
//! n'     = v sin(beta)
//! beta'  = (v / l) tan(delta) - kappa(s) v cos(beta) / (1 - n kappa(s))
//! v'     = (F_d - F_res(v)) / m,   F_res(v) = c_air v^2 + c_roll tanh(v / 0.1)
//! delta' = r
//! ```
//!
//! discretized with a single RK4 step of length `t_d`. The curvature
//! lookup is passed as a closure `s -> (kappa, dkappa/ds)` so the module
//! stays independent of the path representation; the slope feeds the
//! analytic Jacobians. Everything is generic over the float type.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("prediction-model singularity: 1 - n kappa = {denom} at s = {s}")]
    Singularity { s: f64, denom: f64 },
    #[error("non-finite value in model evaluation")]
    NonFinite,
}

/// Ego vehicle state in Frenet coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState<T> {
    pub s: T,
    pub n: T,
    pub beta: T,
    pub v: T,
    pub delta: T,
}

impl<T: Float> EgoState<T> {
    pub fn to_array(self) -> [T; 5] {
        [self.s, self.n, self.beta, self.v, self.delta]
    }

    pub fn from_array(a: [T; 5]) -> Self {
        Self {
            s: a[0],
            n: a[1],
            beta: a[2],
            v: a[3],
            delta: a[4],
        }
    }
}

/// Control input: drive force (N) and steering rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control<T> {
    pub f_d: T,
    pub r: T,
}

impl<T: Float> Control<T> {
    pub fn to_array(self) -> [T; 2] {
        [self.f_d, self.r]
    }

    pub fn from_array(a: [T; 2]) -> Self {
        Self { f_d: a[0], r: a[1] }
    }
}

/// Model and bound parameters. The defaults describe a generic mid-size
/// passenger car; they are configurable placeholders, not a data sheet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    /// Wheelbase l (m). Default 2.9.
    pub wheelbase: T,
    /// Vehicle mass m (kg). Default 1160.
    pub mass: T,
    /// Quadratic air-resistance coefficient (N s^2/m^2). Default 0.7.
    pub c_air: T,
    /// Rolling-resistance magnitude (N). Default 120.
    pub c_roll: T,
    /// Steering-angle bound |delta| <= delta_max (rad). Default 0.35.
    pub delta_max: T,
    /// Speed bounds 0 <= v <= v_max (m/s). Default 40.
    pub v_max: T,
    /// Drive-force bound |F_d| <= f_d_max (N). Default 8000.
    pub f_d_max: T,
    /// Steering-rate bound |r| <= r_max (rad/s). Default 0.6.
    pub r_max: T,
    /// Lateral-acceleration bound |v^2 tan(delta)/l| <= a_lat_max (m/s^2).
    /// Default 8.
    pub a_lat_max: T,
}

fn c<T: Float>(x: f64) -> T {
    T::from(x).unwrap()
}

impl<T: Float> Default for ModelParams<T> {
    fn default() -> Self {
        Self {
            wheelbase: c(2.9),
            mass: c(1160.0),
            c_air: c(0.7),
            c_roll: c(120.0),
            delta_max: c(0.35),
            v_max: c(40.0),
            f_d_max: c(8000.0),
            r_max: c(0.6),
            a_lat_max: c(8.0),
        }
    }
}

/// Longitudinal resistance `F_res(v) = c_air v^2 + c_roll tanh(v/0.1)`.
/// The tanh smooths the sign-function rolling term near standstill.
pub fn resistance<T: Float>(v: T, p: &ModelParams<T>) -> T {
    p.c_air * v * v + p.c_roll * (v / c(0.1)).tanh()
}

fn d_resistance_dv<T: Float>(v: T, p: &ModelParams<T>) -> T {
    let sech2 = {
        let t = (v / c(0.1)).tanh();
        T::one() - t * t
    };
    c::<T>(2.0) * p.c_air * v + p.c_roll * sech2 / c(0.1)
}

/// Lateral acceleration `v^2 tan(delta) / l`.
pub fn lateral_accel<T: Float>(x: &EgoState<T>, p: &ModelParams<T>) -> T {
    x.v * x.v * x.delta.tan() / p.wheelbase
}

/// Gradient of [`lateral_accel`] with respect to the state.
pub fn lateral_accel_grad<T: Float>(x: &EgoState<T>, p: &ModelParams<T>) -> [T; 5] {
    let z = T::zero();
    let cos_d = x.delta.cos();
    [
        z,
        z,
        z,
        c::<T>(2.0) * x.v * x.delta.tan() / p.wheelbase,
        x.v * x.v / (p.wheelbase * cos_d * cos_d),
    ]
}

fn check_denom<T: Float>(x: &EgoState<T>, kappa: T) -> Result<T, ModelError> {
    let denom = T::one() - x.n * kappa;
    if denom.abs() < c(1e-6) {
        return Err(ModelError::Singularity {
            s: x.s.to_f64().unwrap_or(f64::NAN),
            denom: denom.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(denom)
}

/// Continuous-time right-hand side with curvature frozen at the given value.
pub fn ode_rhs<T: Float>(
    x: &EgoState<T>,
    u: &Control<T>,
    kappa: T,
    p: &ModelParams<T>,
) -> Result<[T; 5], ModelError> {
    let denom = check_denom(x, kappa)?;
    let s_dot = x.v * x.beta.cos() / denom;
    let out = [
        s_dot,
        x.v * x.beta.sin(),
        x.v * x.delta.tan() / p.wheelbase - kappa * s_dot,
        (u.f_d - resistance(x.v, p)) / p.mass,
        u.r,
    ];
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(ModelError::NonFinite)
    }
}

/// Jacobians of [`ode_rhs`] with respect to state and input. The state
/// Jacobian includes the chain-rule term through `kappa(s)` using the
/// provided slope `dkappa`.
fn ode_jacobians<T: Float>(
    x: &EgoState<T>,
    kappa: T,
    dkappa: T,
    p: &ModelParams<T>,
) -> Result<([[T; 5]; 5], [[T; 2]; 5]), ModelError> {
    let denom = check_denom(x, kappa)?;
    let z = T::zero();
    let (sb, cb) = (x.beta.sin(), x.beta.cos());
    let cos_d = x.delta.cos();
    let s_dot = x.v * cb / denom;

    // f1 = v cos(beta) / denom, denom = 1 - n kappa(s)
    let f1_s = s_dot * x.n * dkappa / denom;
    let f1_n = s_dot * kappa / denom;
    let f1_beta = -x.v * sb / denom;
    let f1_v = cb / denom;

    // f3 = v tan(delta)/l - kappa f1
    let f3_s = -(dkappa * s_dot + kappa * f1_s);
    let f3_n = -kappa * f1_n;
    let f3_beta = -kappa * f1_beta;
    let f3_v = x.delta.tan() / p.wheelbase - kappa * f1_v;
    let f3_delta = x.v / (p.wheelbase * cos_d * cos_d);

    let jx = [
        [f1_s, f1_n, f1_beta, f1_v, z],
        [z, z, x.v * cb, sb, z],
        [f3_s, f3_n, f3_beta, f3_v, f3_delta],
        [z, z, z, -d_resistance_dv(x.v, p) / p.mass, z],
        [z, z, z, z, z],
    ];
    let ju = [
        [z, z],
        [z, z],
        [z, z],
        [T::one() / p.mass, z],
        [z, T::one()],
    ];
    Ok((jx, ju))
}

fn add_scaled<T: Float>(x: &[T; 5], k: &[T; 5], h: T) -> [T; 5] {
    [
        x[0] + h * k[0],
        x[1] + h * k[1],
        x[2] + h * k[2],
        x[3] + h * k[3],
        x[4] + h * k[4],
    ]
}

/// One RK4 step of length `t_d`. Curvature is re-evaluated at each RK4
/// stage's own `s` via `kappa_fn: s -> (kappa, dkappa/ds)`.
pub fn rk4_step<T: Float>(
    x: &EgoState<T>,
    u: &Control<T>,
    t_d: T,
    kappa_fn: impl Fn(T) -> (T, T),
    p: &ModelParams<T>,
) -> Result<EgoState<T>, ModelError> {
    let half = t_d * c(0.5);
    let x0 = x.to_array();
    let eval = |xa: [T; 5]| -> Result<[T; 5], ModelError> {
        let st = EgoState::from_array(xa);
        ode_rhs(&st, u, kappa_fn(st.s).0, p)
    };
    let k1 = eval(x0)?;
    let k2 = eval(add_scaled(&x0, &k1, half))?;
    let k3 = eval(add_scaled(&x0, &k2, half))?;
    let k4 = eval(add_scaled(&x0, &k3, t_d))?;
    let sixth = t_d / c(6.0);
    let two = c::<T>(2.0);
    let mut out = x0;
    for i in 0..5 {
        out[i] = x0[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    Ok(EgoState::from_array(out))
}

fn mat_mul<T: Float, const C: usize>(a: &[[T; 5]; 5], b: &[[T; C]; 5]) -> [[T; C]; 5] {
    let mut out = [[T::zero(); C]; 5];
    for i in 0..5 {
        for k in 0..5 {
            let aik = a[i][k];
            for j in 0..C {
                out[i][j] = out[i][j] + aik * b[k][j];
            }
        }
    }
    out
}

/// Discrete Jacobians `(A, B)` of the RK4 map, propagated analytically
/// through the stages (including curvature dependence on `s`).
pub fn discrete_jacobians<T: Float>(
    x: &EgoState<T>,
    u: &Control<T>,
    t_d: T,
    kappa_fn: impl Fn(T) -> (T, T),
    p: &ModelParams<T>,
) -> Result<([[T; 5]; 5], [[T; 2]; 5]), ModelError> {
    let half = t_d * c(0.5);
    let x0 = x.to_array();
    let eval = |xa: [T; 5]| -> Result<([T; 5], [[T; 5]; 5], [[T; 2]; 5]), ModelError> {
        let st = EgoState::from_array(xa);
        let (kappa, dkappa) = kappa_fn(st.s);
        let f = ode_rhs(&st, u, kappa, p)?;
        let (jx, ju) = ode_jacobians(&st, kappa, dkappa, p)?;
        Ok((f, jx, ju))
    };

    let ident = {
        let mut m = [[T::zero(); 5]; 5];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        m
    };
    let mat_axpy = |m: &[[T; 5]; 5], h: T| -> [[T; 5]; 5] {
        // I + h m
        let mut out = ident;
        for i in 0..5 {
            for j in 0..5 {
                out[i][j] = out[i][j] + h * m[i][j];
            }
        }
        out
    };

    let (k1, jx1, ju1) = eval(x0)?;
    let m1 = jx1;
    let n1 = ju1;

    let (k2, jx2, ju2) = eval(add_scaled(&x0, &k1, half))?;
    let m2 = mat_mul(&jx2, &mat_axpy(&m1, half));
    let mut n2 = mat_mul(&jx2, &scale2(&n1, half));
    add2(&mut n2, &ju2);

    let (k3, jx3, ju3) = eval(add_scaled(&x0, &k2, half))?;
    let m3 = mat_mul(&jx3, &mat_axpy(&m2, half));
    let mut n3 = mat_mul(&jx3, &scale2(&n2, half));
    add2(&mut n3, &ju3);

    let (_k4, jx4, ju4) = eval(add_scaled(&x0, &k3, t_d))?;
    let m4 = mat_mul(&jx4, &mat_axpy(&m3, t_d));
    let mut n4 = mat_mul(&jx4, &scale2(&n3, t_d));
    add2(&mut n4, &ju4);

    let sixth = t_d / c(6.0);
    let two = c::<T>(2.0);
    let mut a = ident;
    let mut b = [[T::zero(); 2]; 5];
    for i in 0..5 {
        for j in 0..5 {
            a[i][j] = a[i][j] + sixth * (m1[i][j] + two * m2[i][j] + two * m3[i][j] + m4[i][j]);
        }
        for j in 0..2 {
            b[i][j] = sixth * (n1[i][j] + two * n2[i][j] + two * n3[i][j] + n4[i][j]);
        }
    }
    Ok((a, b))
}

fn scale2<T: Float>(m: &[[T; 2]; 5], h: T) -> [[T; 2]; 5] {
    let mut out = *m;
    for row in &mut out {
        for v in row.iter_mut() {
            *v = *v * h;
        }
    }
    out
}

fn add2<T: Float>(m: &mut [[T; 2]; 5], other: &[[T; 2]; 5]) {
    for i in 0..5 {
        for j in 0..2 {
            m[i][j] = m[i][j] + other[i][j];
        }
    }
}
