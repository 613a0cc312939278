//! Smooth over-approximations of the unit square used as obstacle
//! constraints.
//!
//! Obstacles are axis-aligned rectangles. After normalizing a position into
//! obstacle coordinates (see [`crate::ocp::normalize_to_obstacle`]) the
//! rectangle becomes the unit square `B = [-1,1]^n`, and "outside the
//! obstacle" reads `o(xi; alpha) >= 1` for a shape function `o` drawn from
//! one of three homotopy families:
//!
//! * `ScaledNorm`:  o(xi) = ((1/n) sum |xi_i|^alpha)^(1/alpha) = n^(-1/alpha) ||xi||_alpha
//! * `LogSumExp`:   o(xi) = eta(alpha) * ln( (1/2n) sum_i [e^(alpha xi_i) + e^(-alpha xi_i)] ),
//!                  eta(alpha) = 1 / ln(cosh(alpha))
//! * `Boltzmann`:   o(xi) = coth(alpha) * sum_i xi_i sinh(alpha xi_i) / sum_i cosh(alpha xi_i)
//!
//! All three are normalized so every corner of `B` lies exactly on the unit
//! level set, their level-1 sets contain `B` (over-approximation), and the
//! level-1 set shrinks onto `B` as `alpha` grows (tightening). Two further
//! kinds serve as benchmarks: `FixedPNorm` (a plain p-norm ellipsoid,
//! p in {2,4,6}) and `Relu2` (a product-of-squared-hinges soft penalty that
//! vanishes outside `B`).
//!
//! Everything here is careful about overflow and small-argument accuracy:
//! exponential sums are max-shifted, and `ln cosh` is evaluated through
//! `ln_1p` so that width calibration stays meaningful down to
//! `alpha ~ 1e-12` (the `d_bar -> sqrt(2)` end of the schedule, where the
//! LogSumExp/Boltzmann calibration root degenerates toward `alpha = 0`).

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shape family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    ScaledNorm,
    LogSumExp,
    Boltzmann,
    /// Benchmark: plain `||xi||_p` with fixed order p (no corner scaling).
    FixedPNorm,
    /// Benchmark: soft penalty `prod_i max(0, 1 - |xi_i|)^2`, constraint
    /// "penalty <= 0"; the parameter is unused.
    Relu2,
}

/// A shape family together with its tightening parameter.
///
/// Valid parameter ranges are enforced by [`ShapeSpec::new`]:
/// `ScaledNorm` needs `alpha >= 2`, `LogSumExp`/`Boltzmann` need
/// `alpha > 0`, `FixedPNorm` accepts the benchmark orders {2, 4, 6}, and
/// `Relu2` ignores the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec<T> {
    pub kind: ShapeKind,
    alpha: T,
}

/// Linearized shape constraint: membership reads `normal . xi >= offset`.
///
/// Produced by [`ShapeSpec::linearize`]; for the shape kinds this encodes
/// `o(xi_lin) + grad(xi_lin) . (xi - xi_lin) >= 1`. The normal is nonzero
/// whenever the linearization point is valid for the kind (for the norm
/// kinds that excludes the origin; `Relu2` yields a zero row at points
/// strictly outside the unit square, where its penalty is identically 0).
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace<T> {
    pub normal: Vec<T>,
    pub offset: T,
}

impl<T: Float> HalfSpace<T> {
    /// Value of `normal . xi - offset`; nonnegative inside the half-space.
    pub fn violation_margin(&self, xi: &[T]) -> T {
        let dot = self
            .normal
            .iter()
            .zip(xi)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        dot - self.offset
    }

    pub fn contains(&self, xi: &[T]) -> bool {
        self.violation_margin(xi) >= T::zero()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("alpha = {alpha} is outside the valid range for {kind:?}")]
    InvalidAlpha { kind: ShapeKind, alpha: f64 },
    #[error("input contains a non-finite component")]
    NonFinite,
    #[error("gradient of a norm-type shape is undefined at the origin")]
    GradientAtOrigin,
    #[error("width {0} is outside the calibratable range (1, sqrt(2)]")]
    WidthOutOfRange(f64),
    #[error("width calibration is not defined for {0:?}")]
    CalibrationUnsupported(ShapeKind),
    #[error("bisection bracket [{lo}, {hi}] does not enclose the calibration root")]
    BracketFailure { lo: f64, hi: f64 },
}

// ---------------------------------------------------------------------------
// numeric helpers

#[inline]
fn c<T: Float>(x: f64) -> T {
    T::from(x).unwrap()
}

#[inline]
fn check_finite<T: Float>(xi: &[T]) -> Result<(), ShapeError> {
    if xi.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ShapeError::NonFinite)
    }
}

#[inline]
fn max_abs<T: Float>(xi: &[T]) -> T {
    xi.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Sign with `sign(0) = 0` (unlike `Float::signum`).
#[inline]
fn sign0<T: Float>(x: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        x.signum()
    }
}

/// `ln(cosh(x))`, accurate in relative terms down to `x ~ 1e-300` and
/// overflow-free for any `x`.
///
/// Small branch: `ln cosh x = ln_1p(2 sinh^2(x/2))`. Large branch:
/// `ln cosh x = |x| - ln 2 + ln_1p(e^(-2|x|))`, which avoids evaluating
/// `sinh` near the overflow boundary. The naive form loses all relative
/// accuracy below `x ~ 1e-8`, which the width calibration relies on.
pub fn ln_cosh<T: Float>(x: T) -> T {
    let ax = x.abs();
    if ax <= T::one() {
        let s = (ax * c(0.5)).sinh();
        (c::<T>(2.0) * s * s).ln_1p()
    } else {
        ax - c::<T>(std::f64::consts::LN_2) + (-(ax + ax)).exp().ln_1p()
    }
}

/// Largest `alpha * |xi_i|` for which `cosh`/`sinh` sums are evaluated
/// directly; beyond it exponentials are max-shifted.
#[inline]
fn shift_threshold<T: Float>() -> T {
    T::max_value().ln() * c(0.4)
}

/// Stable `||xi||_p` via factoring out the max entry; `0` for `xi = 0`.
fn p_norm<T: Float>(xi: &[T], p: T) -> T {
    let m = max_abs(xi);
    if m == T::zero() {
        return T::zero();
    }
    let s = xi
        .iter()
        .fold(T::zero(), |acc, &x| acc + (x.abs() / m).powf(p));
    m * s.powf(T::one() / p)
}

fn validate_alpha<T: Float>(kind: ShapeKind, alpha: T) -> Result<(), ShapeError> {
    let ok = match kind {
        ShapeKind::ScaledNorm => alpha.is_finite() && alpha >= c(2.0),
        ShapeKind::LogSumExp | ShapeKind::Boltzmann => alpha.is_finite() && alpha > T::zero(),
        ShapeKind::FixedPNorm => [2.0, 4.0, 6.0]
            .iter()
            .any(|&p| (alpha - c(p)).abs() < c(1e-9)),
        ShapeKind::Relu2 => true,
    };
    if ok {
        Ok(())
    } else {
        Err(ShapeError::InvalidAlpha {
            kind,
            alpha: alpha.to_f64().unwrap_or(f64::NAN),
        })
    }
}

// ---------------------------------------------------------------------------
// kind-specific evaluation

/// `((1/n) sum |xi_i|^alpha)^(1/alpha)`, the power mean of order `alpha`.
pub fn eval_scaled_norm<T: Float>(xi: &[T], alpha: T) -> Result<T, ShapeError> {
    check_finite(xi)?;
    validate_alpha(ShapeKind::ScaledNorm, alpha)?;
    let n = c::<T>(xi.len() as f64);
    Ok(p_norm(xi, alpha) * (-n.ln() / alpha).exp())
}

/// `eta(alpha) * ln((1/2n) sum_i [e^(alpha xi_i) + e^(-alpha xi_i)])` with
/// `eta = 1/ln cosh(alpha)`; overflow-safe for any `alpha * xi`.
pub fn eval_log_sum_exp<T: Float>(xi: &[T], alpha: T) -> Result<T, ShapeError> {
    check_finite(xi)?;
    validate_alpha(ShapeKind::LogSumExp, alpha)?;
    let n = c::<T>(xi.len() as f64);
    let m = alpha * max_abs(xi);
    let num = if m <= T::one() {
        // ln((1/n) sum cosh(a xi)) through ln_1p keeps relative accuracy
        // when every a*xi is tiny (the calibration regime).
        let s = xi.iter().fold(T::zero(), |acc, &x| {
            let sh = (alpha * x * c(0.5)).sinh();
            acc + sh * sh
        });
        (c::<T>(2.0) * s / n).ln_1p()
    } else if m <= shift_threshold() {
        let s = xi
            .iter()
            .fold(T::zero(), |acc, &x| acc + (alpha * x).cosh());
        (s / n).ln()
    } else {
        let s = xi.iter().fold(T::zero(), |acc, &x| {
            acc + (alpha * x - m).exp() + (-alpha * x - m).exp()
        });
        m + (s / (c::<T>(2.0) * n)).ln()
    };
    Ok(num / ln_cosh(alpha))
}

/// `coth(alpha) * sum_i xi_i sinh(alpha xi_i) / sum_i cosh(alpha xi_i)`;
/// overflow-safe via max-shifting the numerator and denominator together.
pub fn eval_boltzmann<T: Float>(xi: &[T], alpha: T) -> Result<T, ShapeError> {
    check_finite(xi)?;
    validate_alpha(ShapeKind::Boltzmann, alpha)?;
    let m = alpha * max_abs(xi);
    let (u, w) = if m <= shift_threshold() {
        xi.iter().fold((T::zero(), T::zero()), |(u, w), &x| {
            (u + x * (alpha * x).sinh(), w + (alpha * x).cosh())
        })
    } else {
        // sinh/cosh scaled by e^(-m); the common factor cancels in u/w.
        xi.iter().fold((T::zero(), T::zero()), |(u, w), &x| {
            let ep = (alpha * x - m).exp();
            let en = (-alpha * x - m).exp();
            (u + x * (ep - en), w + ep + en)
        })
    };
    Ok(u / w / alpha.tanh())
}

/// Benchmark penalty `prod_i max(0, 1 - |xi_i|)^2`: positive inside the
/// unit square, identically zero outside.
pub fn eval_relu2<T: Float>(xi: &[T]) -> Result<T, ShapeError> {
    check_finite(xi)?;
    Ok(xi.iter().fold(T::one(), |acc, &x| {
        let h = (T::one() - x.abs()).max(T::zero());
        acc * h * h
    }))
}

// ---------------------------------------------------------------------------
// ShapeSpec: dispatch, gradients, linearization

impl<T: Float> ShapeSpec<T> {
    pub fn new(kind: ShapeKind, alpha: T) -> Result<Self, ShapeError> {
        validate_alpha(kind, alpha)?;
        Ok(Self { kind, alpha })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    /// Shape value at `xi`. For the three homotopies and `FixedPNorm` the
    /// constraint "outside the obstacle" reads `eval >= 1`; for `Relu2` it
    /// reads `eval <= 0`.
    pub fn eval(&self, xi: &[T]) -> Result<T, ShapeError> {
        match self.kind {
            ShapeKind::ScaledNorm => eval_scaled_norm(xi, self.alpha),
            ShapeKind::LogSumExp => eval_log_sum_exp(xi, self.alpha),
            ShapeKind::Boltzmann => eval_boltzmann(xi, self.alpha),
            ShapeKind::FixedPNorm => {
                check_finite(xi)?;
                Ok(p_norm(xi, self.alpha))
            }
            ShapeKind::Relu2 => eval_relu2(xi),
        }
    }

    /// Analytic gradient of [`eval`](Self::eval) with respect to `xi`.
    ///
    /// Errors with [`ShapeError::GradientAtOrigin`] for the norm kinds,
    /// whose gradient has no limit at `xi = 0`. The non-smooth points of
    /// `Relu2` (any `xi_i = 0` inside the square, or the square boundary)
    /// use the subgradient choice `sign(0) = 0`.
    pub fn grad(&self, xi: &[T]) -> Result<Vec<T>, ShapeError> {
        check_finite(xi)?;
        let a = self.alpha;
        match self.kind {
            ShapeKind::ScaledNorm | ShapeKind::FixedPNorm => {
                let norm = p_norm(xi, a);
                if norm == T::zero() {
                    return Err(ShapeError::GradientAtOrigin);
                }
                // d||xi||_a/dxi_j = (|xi_j|/||xi||_a)^(a-1) sign(xi_j),
                // times n^(-1/a) for the scaled variant.
                let scale = if self.kind == ShapeKind::ScaledNorm {
                    (-c::<T>(xi.len() as f64).ln() / a).exp()
                } else {
                    T::one()
                };
                Ok(xi
                    .iter()
                    .map(|&x| scale * (x.abs() / norm).powf(a - T::one()) * sign0(x))
                    .collect())
            }
            ShapeKind::LogSumExp => {
                let m = a * max_abs(xi);
                let (sinhs, denom) = if m <= shift_threshold() {
                    let sinhs: Vec<T> = xi.iter().map(|&x| (a * x).sinh()).collect();
                    let denom = xi
                        .iter()
                        .fold(T::zero(), |acc, &x| acc + (a * x).cosh());
                    (sinhs, denom)
                } else {
                    let sinhs: Vec<T> = xi
                        .iter()
                        .map(|&x| ((a * x - m).exp() - (-a * x - m).exp()) * c(0.5))
                        .collect();
                    let denom = xi.iter().fold(T::zero(), |acc, &x| {
                        acc + ((a * x - m).exp() + (-a * x - m).exp()) * c(0.5)
                    });
                    (sinhs, denom)
                };
                let eta = T::one() / ln_cosh(a);
                Ok(sinhs.iter().map(|&s| eta * a * s / denom).collect())
            }
            ShapeKind::Boltzmann => {
                // Quotient rule on o = coth(a) * u/w with
                // u = sum xi_i sinh(a xi_i), w = sum cosh(a xi_i).
                let m = a * max_abs(xi);
                let shift = if m <= shift_threshold() { T::zero() } else { m };
                let sinhs: Vec<T> = xi
                    .iter()
                    .map(|&x| ((a * x - shift).exp() - (-a * x - shift).exp()) * c(0.5))
                    .collect();
                let coshs: Vec<T> = xi
                    .iter()
                    .map(|&x| ((a * x - shift).exp() + (-a * x - shift).exp()) * c(0.5))
                    .collect();
                let u = xi
                    .iter()
                    .zip(&sinhs)
                    .fold(T::zero(), |acc, (&x, &s)| acc + x * s);
                let w = coshs.iter().fold(T::zero(), |acc, &ch| acc + ch);
                let coth = T::one() / a.tanh();
                Ok(xi
                    .iter()
                    .zip(sinhs.iter().zip(&coshs))
                    .map(|(&x, (&s, &ch))| coth * ((s + a * x * ch) * w - u * a * s) / (w * w))
                    .collect())
            }
            ShapeKind::Relu2 => {
                let h: Vec<T> = xi
                    .iter()
                    .map(|&x| (T::one() - x.abs()).max(T::zero()))
                    .collect();
                Ok((0..xi.len())
                    .map(|j| {
                        let rest = h
                            .iter()
                            .enumerate()
                            .filter(|&(i, _)| i != j)
                            .fold(T::one(), |acc, (_, &hi)| acc * hi * hi);
                        -c::<T>(2.0) * sign0(xi[j]) * h[j] * rest
                    })
                    .collect())
            }
        }
    }

    /// First-order model of the shape constraint at `xi_lin`, folded into
    /// `normal . xi >= offset` form.
    ///
    /// For the shape kinds this is `o(x~) + grad . (xi - x~) >= 1`; for
    /// `Relu2` the linearized penalty constraint `r(x~) + grad . (xi - x~)
    /// <= 0` is negated into the same `>=` convention. For `ScaledNorm`
    /// (positively homogeneous of degree 1) the linearization is exact
    /// along the ray `{gamma * xi_lin : gamma >= 0}`.
    pub fn linearize(&self, xi_lin: &[T]) -> Result<HalfSpace<T>, ShapeError> {
        let value = self.eval(xi_lin)?;
        let grad = self.grad(xi_lin)?;
        let g_dot_x = grad
            .iter()
            .zip(xi_lin)
            .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
        Ok(match self.kind {
            ShapeKind::Relu2 => HalfSpace {
                normal: grad.iter().map(|&g| -g).collect(),
                offset: value - g_dot_x,
            },
            _ => HalfSpace {
                normal: grad,
                offset: T::one() - value + g_dot_x,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// width calibration

/// Bisection bracket for [`alpha_from_width`]; covers `d_bar` down to
/// about 1.0005 on the upper end. The lower end is extended on demand
/// (see below) because the LogSumExp/Boltzmann roots fall below 1e-3 once
/// `d_bar` approaches `sqrt(2)`.
const BRACKET: (f64, f64) = (1e-3, 1e4);
const BRACKET_SCALED_NORM: (f64, f64) = (2.0, 1e4);
/// Hard floor for the extended lower bracket end. At `d_bar = sqrt(2)` the
/// LogSumExp/Boltzmann calibration equations have no positive root (the
/// shape value tends to `d_bar^2/2 = 1` from above as `alpha -> 0`), so the
/// solve accepts the floor once the residual is inside tolerance there.
const ALPHA_FLOOR: f64 = 1e-12;
/// Residual tolerance on `|o([0,..,0,d_bar]; alpha) - 1|`.
const CALIBRATION_TOL: f64 = 1e-10;

/// Solve `o([0, d_bar]; alpha) = 1` for `alpha`: the tightening parameter
/// at which the shape boundary crosses the coordinate axis at distance
/// `d_bar` from the obstacle center (in two dimensions).
///
/// `d_bar` must lie in `(1, sqrt(2)]`: 1 is the exact square, `sqrt(2)`
/// the circumscribed circle. Solved by bracketed bisection to a residual
/// of 1e-10; for `ScaledNorm` the closed form `alpha = ln 2 / ln d_bar`
/// agrees with the returned root to well below 1e-8.
pub fn alpha_from_width<T: Float>(kind: ShapeKind, d_bar: T) -> Result<T, ShapeError> {
    match kind {
        ShapeKind::FixedPNorm | ShapeKind::Relu2 => {
            return Err(ShapeError::CalibrationUnsupported(kind))
        }
        _ => {}
    }
    let sqrt2 = c::<T>(std::f64::consts::SQRT_2);
    if !d_bar.is_finite() || d_bar <= T::one() || d_bar > sqrt2 + c(1e-12) {
        return Err(ShapeError::WidthOutOfRange(
            d_bar.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let probe = [T::zero(), d_bar];
    let residual = |alpha: T| -> T {
        let spec = ShapeSpec { kind, alpha };
        spec.eval(&probe).expect("calibration probe is finite") - T::one()
    };

    let (lo0, hi0) = if kind == ShapeKind::ScaledNorm {
        BRACKET_SCALED_NORM
    } else {
        BRACKET
    };
    let (mut lo, hi) = (c::<T>(lo0), c::<T>(hi0));
    let tol = c::<T>(CALIBRATION_TOL);

    // The shape value is increasing in alpha on the probe, so the root is
    // unique where it exists. Check the endpoints first — this returns the
    // bracket edge exactly when the residual already vanishes there (e.g.
    // ScaledNorm at d_bar = sqrt(2) yields alpha = 2 exactly).
    let f_lo = residual(lo);
    if f_lo.abs() <= tol {
        return Ok(lo);
    }
    let f_hi = residual(hi);
    if f_hi.abs() <= tol {
        return Ok(hi);
    }
    if f_hi < T::zero() {
        return Err(ShapeError::BracketFailure { lo: lo0, hi: hi0 });
    }
    if f_lo > T::zero() {
        // Root below the nominal bracket: extend downward. Near
        // d_bar = sqrt(2) the residual stays positive all the way down and
        // merely decays ~ alpha^2; accept the floor once inside tolerance.
        let floor = c::<T>(ALPHA_FLOOR);
        loop {
            lo = lo * c(0.1);
            let f = residual(lo);
            if f.abs() <= tol {
                return Ok(lo);
            }
            if f < T::zero() {
                break;
            }
            if lo <= floor {
                return Err(ShapeError::BracketFailure {
                    lo: lo.to_f64().unwrap_or(0.0),
                    hi: hi0,
                });
            }
        }
    }

    let (mut lo, mut hi) = (lo, hi);
    loop {
        let mid = (lo + hi) * c(0.5);
        let f = residual(mid);
        if f < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= c::<T>(1e-12) * T::one().max(hi) {
            let root = (lo + hi) * c(0.5);
            return if residual(root).abs() <= tol {
                Ok(root)
            } else {
                Err(ShapeError::BracketFailure {
                    lo: lo.to_f64().unwrap_or(f64::NAN),
                    hi: hi.to_f64().unwrap_or(f64::NAN),
                })
            };
        }
    }
}

/// Closed-form ScaledNorm calibration in `n` dimensions:
/// `alpha = ln n / ln d_bar`.
pub fn scaled_norm_alpha_closed_form<T: Float>(d_bar: T, n: usize) -> T {
    c::<T>(n as f64).ln() / d_bar.ln()
}

// ---------------------------------------------------------------------------
// contour export

/// Write a `xi1,xi2,value` CSV grid of the shape over
/// `[lo, hi] x [lo, hi]` with `steps + 1` samples per axis, for external
/// level-set plotting.
pub fn write_contour_csv<W: std::io::Write>(
    spec: &ShapeSpec<f64>,
    lo: f64,
    hi: f64,
    steps: usize,
    out: W,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["xi1", "xi2", "value"])?;
    let d = (hi - lo) / steps as f64;
    for i in 0..=steps {
        for j in 0..=steps {
            let xi = [lo + d * i as f64, lo + d * j as f64];
            let v = spec.eval(&xi)?;
            w.write_record([
                format!("{}", xi[0]),
                format!("{}", xi[1]),
                format!("{v}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Reference values frozen from 50-digit arithmetic.
    const LSE_UNIT_AXIS_A1: f64 = 0.5538027433094571;
    const BM_UNIT_AXIS_A1: f64 = 0.6067761335170363;
    const SN_ALPHA_D110: f64 = 7.272540897341719;
    const SN_ALPHA_D1005: f64 = 138.97572161069378;
    const LSE_ALPHA_D110: f64 = 6.921611848961762;
    const LSE_ALPHA_D1005: f64 = 138.62943611198906;
    const BM_ALPHA_D110: f64 = 2.6828237714882542;
    const BM_ALPHA_D1005: f64 = 5.961496437899431;

    fn spec(kind: ShapeKind, alpha: f64) -> ShapeSpec<f64> {
        ShapeSpec::new(kind, alpha).unwrap()
    }

    #[test]
    fn scaled_norm_values() {
        assert_relative_eq!(
            eval_scaled_norm(&[1.0, 1.0], 4.0).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            eval_scaled_norm(&[std::f64::consts::SQRT_2, 0.0], 2.0).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            eval_scaled_norm(&[1.0, 0.0], 2.0).unwrap(),
            0.7071067811865476,
            max_relative = 1e-15
        );
    }

    #[test]
    fn log_sum_exp_values() {
        assert_eq!(eval_log_sum_exp(&[0.0, 0.0], 3.7).unwrap(), 0.0);
        assert_relative_eq!(
            eval_log_sum_exp(&[1.0, 1.0], 3.0).unwrap(),
            1.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            eval_log_sum_exp(&[1.0, 0.0], 1.0).unwrap(),
            LSE_UNIT_AXIS_A1,
            max_relative = 1e-14
        );
    }

    #[test]
    fn boltzmann_values() {
        assert_eq!(eval_boltzmann(&[0.0, 0.0], 1.3).unwrap(), 0.0);
        assert_relative_eq!(
            eval_boltzmann(&[1.0, 1.0], 2.0).unwrap(),
            1.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            eval_boltzmann(&[1.0, 0.0], 1.0).unwrap(),
            BM_UNIT_AXIS_A1,
            max_relative = 1e-14
        );
    }

    #[test]
    fn relu2_values() {
        assert_eq!(eval_relu2(&[2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(eval_relu2(&[0.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(
            eval_relu2(&[0.5, 0.5]).unwrap(),
            0.0625,
            max_relative = 1e-15
        );
    }

    #[test]
    fn dispatch_values() {
        assert_relative_eq!(
            spec(ShapeKind::FixedPNorm, 2.0).eval(&[1.0, 0.0]).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            spec(ShapeKind::ScaledNorm, 2.0).eval(&[1.0, 1.0]).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            spec(ShapeKind::Boltzmann, 5.0).eval(&[1.0, 1.0]).unwrap(),
            1.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ShapeSpec::new(ShapeKind::ScaledNorm, 1.5).is_err());
        assert!(ShapeSpec::new(ShapeKind::LogSumExp, 0.0).is_err());
        assert!(ShapeSpec::new(ShapeKind::Boltzmann, -1.0).is_err());
        assert!(ShapeSpec::new(ShapeKind::FixedPNorm, 3.0).is_err());
        assert!(ShapeSpec::new(ShapeKind::FixedPNorm, 4.0).is_ok());
        assert!(eval_scaled_norm(&[f64::NAN, 0.0], 2.0).is_err());
        assert!(eval_log_sum_exp(&[1.0, f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = spec(ShapeKind::ScaledNorm, 2.0).grad(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(g[0], 0.7071067811865476, max_relative = 1e-14);
        assert_eq!(g[1], 0.0);

        let g = spec(ShapeKind::ScaledNorm, 4.0).grad(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(g[0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(g[1], 0.5, max_relative = 1e-14);

        let g = spec(ShapeKind::LogSumExp, 1.0).grad(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);

        assert_eq!(
            spec(ShapeKind::ScaledNorm, 2.0).grad(&[0.0, 0.0]),
            Err(ShapeError::GradientAtOrigin)
        );
    }

    /// Central finite differences on a fixed grid of points with
    /// |xi_i| in [0.1, 3], all kinds, relative tolerance 1e-6.
    #[test]
    fn gradients_match_finite_differences() {
        let specs = [
            spec(ShapeKind::ScaledNorm, 2.0),
            spec(ShapeKind::ScaledNorm, 7.3),
            spec(ShapeKind::LogSumExp, 0.7),
            spec(ShapeKind::LogSumExp, 5.0),
            spec(ShapeKind::Boltzmann, 0.4),
            spec(ShapeKind::Boltzmann, 6.0),
            spec(ShapeKind::FixedPNorm, 4.0),
            spec(ShapeKind::Relu2, 0.0),
        ];
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for s in &specs {
            for _ in 0..200 {
                let xi: Vec<f64> = (0..2)
                    .map(|_| {
                        let mag = rng.gen_range(0.1..3.0);
                        if rng.gen_bool(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
                let g = s.grad(&xi).unwrap();
                for j in 0..2 {
                    let h = 1e-6;
                    let mut xp = xi.clone();
                    let mut xm = xi.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (s.eval(&xp).unwrap() - s.eval(&xm).unwrap()) / (2.0 * h);
                    // The floor keeps the comparison above central-difference
                    // roundoff (~1e-10 for O(1) values at h=1e-6) where the
                    // gradient itself is tiny.
                    let scale = fd.abs().max(g[j].abs()).max(1e-3);
                    assert!(
                        (g[j] - fd).abs() / scale < 1e-6,
                        "{:?} at {:?}: grad {} vs fd {}",
                        s.kind,
                        xi,
                        g[j],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn linearize_examples() {
        // ScaledNorm alpha=2 at [sqrt2, 0]: half-space xi_1 >= sqrt2.
        let hs = spec(ShapeKind::ScaledNorm, 2.0)
            .linearize(&[std::f64::consts::SQRT_2, 0.0])
            .unwrap();
        assert_relative_eq!(hs.normal[0], 0.7071067811865476, max_relative = 1e-12);
        assert_relative_eq!(hs.normal[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(hs.offset / hs.normal[0], std::f64::consts::SQRT_2, max_relative = 1e-12);
        assert!(hs.contains(&[1.5, 0.0]));
        assert!(!hs.contains(&[1.2, 0.0]));

        // Exactness along the ray for ScaledNorm (homogeneity):
        // o_lin(p) = normal.p - offset + 1 equals o(p) for p = gamma*xi.
        let s = spec(ShapeKind::ScaledNorm, 6.0);
        let xi = [1.7, -0.4];
        let hs = s.linearize(&xi).unwrap();
        for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let p = [xi[0] * gamma, xi[1] * gamma];
            let o_lin = hs.violation_margin(&p) + 1.0;
            assert_relative_eq!(o_lin, s.eval(&p).unwrap(), epsilon = 1e-10);
        }

        // LogSumExp at small alpha is strictly looser than ScaledNorm at
        // the same axis point.
        let xi = [1.3, 0.0];
        let lse = spec(ShapeKind::LogSumExp, 0.05).linearize(&xi).unwrap();
        let sn = spec(ShapeKind::ScaledNorm, 2.0).linearize(&xi).unwrap();
        // Compare the xi_1 at which each linearized bound crosses 1 along
        // the axis: bigger crossing = looser bound.
        let cross_lse = lse.offset / lse.normal[0];
        let cross_sn = sn.offset / sn.normal[0];
        assert!(
            cross_lse > cross_sn + 1e-6,
            "lse {cross_lse} vs sn {cross_sn}"
        );
    }

    #[test]
    fn relu2_linearize_is_outside_halfspace() {
        let s = spec(ShapeKind::Relu2, 0.0);
        // Inside the square the penalty is positive and pushes outward.
        let hs = s.linearize(&[0.5, 0.2]).unwrap();
        assert!(hs.normal[0] > 0.0);
        // Far outside: zero row, trivially satisfied with zero slack.
        let hs = s.linearize(&[2.5, 0.0]).unwrap();
        assert_eq!(hs.normal, vec![0.0, 0.0]);
        assert_eq!(hs.offset, 0.0);
        assert!(hs.contains(&[9.0, 9.0]));
    }

    #[test]
    fn calibration_values() {
        assert_eq!(
            alpha_from_width::<f64>(ShapeKind::ScaledNorm, std::f64::consts::SQRT_2).unwrap(),
            2.0
        );
        assert_relative_eq!(
            alpha_from_width::<f64>(ShapeKind::ScaledNorm, 1.1).unwrap(),
            SN_ALPHA_D110,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            alpha_from_width::<f64>(ShapeKind::ScaledNorm, 1.005).unwrap(),
            SN_ALPHA_D1005,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            alpha_from_width::<f64>(ShapeKind::LogSumExp, 1.1).unwrap(),
            LSE_ALPHA_D110,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            alpha_from_width::<f64>(ShapeKind::LogSumExp, 1.005).unwrap(),
            LSE_ALPHA_D1005,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            alpha_from_width::<f64>(ShapeKind::Boltzmann, 1.1).unwrap(),
            BM_ALPHA_D110,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            alpha_from_width::<f64>(ShapeKind::Boltzmann, 1.005).unwrap(),
            BM_ALPHA_D1005,
            max_relative = 1e-9
        );
    }

    #[test]
    fn calibration_residuals_and_degenerate_end() {
        // Every returned alpha satisfies the defining equation to 1e-10,
        // including the degenerate d_bar = sqrt(2) end for LogSumExp and
        // Boltzmann where the root collapses toward alpha = 0.
        for kind in [
            ShapeKind::ScaledNorm,
            ShapeKind::LogSumExp,
            ShapeKind::Boltzmann,
        ] {
            for d in [1.005, 1.1, 1.2, 1.3, std::f64::consts::SQRT_2] {
                let a = alpha_from_width::<f64>(kind, d).unwrap();
                let o = ShapeSpec::new(kind, a).unwrap().eval(&[0.0, d]).unwrap();
                assert!(
                    (o - 1.0).abs() <= 1e-10,
                    "{kind:?} d={d}: alpha={a} residual={}",
                    o - 1.0
                );
            }
        }
    }

    #[test]
    fn calibration_domain_errors() {
        assert!(matches!(
            alpha_from_width::<f64>(ShapeKind::ScaledNorm, 1.0),
            Err(ShapeError::WidthOutOfRange(_))
        ));
        assert!(matches!(
            alpha_from_width::<f64>(ShapeKind::ScaledNorm, 1.5),
            Err(ShapeError::WidthOutOfRange(_))
        ));
        assert!(matches!(
            alpha_from_width::<f64>(ShapeKind::FixedPNorm, 1.2),
            Err(ShapeError::CalibrationUnsupported(_))
        ));
        assert!(matches!(
            alpha_from_width::<f64>(ShapeKind::Relu2, 1.2),
            Err(ShapeError::CalibrationUnsupported(_))
        ));
    }

    #[test]
    fn overflow_safety() {
        // alpha = 139 with xi = [50, 50] overflows a naive implementation.
        let v = eval_log_sum_exp(&[50.0, 50.0], 139.0).unwrap();
        assert!(v.is_finite() && v > 49.0 && v < 51.0);
        let v = eval_boltzmann(&[50.0, 50.0], 139.0).unwrap();
        assert!(v.is_finite() && v > 49.0 && v < 51.0);
        let g = spec(ShapeKind::LogSumExp, 139.0).grad(&[50.0, 50.0]).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
        let g = spec(ShapeKind::Boltzmann, 139.0).grad(&[50.0, 50.0]).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn branch_boundaries_are_continuous() {
        // ln_cosh branch switch at |x| = 1.
        for x in [0.999_999_9, 1.0, 1.000_000_1] {
            assert_relative_eq!(ln_cosh(x), x.cosh().ln(), max_relative = 1e-13);
        }
        // LSE small/direct branch switch at alpha*max|xi| = 1.
        for eps in [-1e-9, 0.0, 1e-9] {
            let a = 0.5 + eps;
            let direct = ((2.0 * a).cosh() + 1.0) / 2.0;
            assert_relative_eq!(
                eval_log_sum_exp(&[2.0, 0.0], a).unwrap(),
                direct.ln() / ln_cosh(a),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn generic_over_f32_and_three_dimensions() {
        let v32 = eval_log_sum_exp(&[1.0f32, 0.0], 1.0).unwrap();
        assert!((v32 - LSE_UNIT_AXIS_A1 as f32).abs() < 1e-6);
        // Corners normalize to 1 in R^3 as well.
        for kindalpha in [
            (ShapeKind::ScaledNorm, 4.0),
            (ShapeKind::LogSumExp, 2.0),
            (ShapeKind::Boltzmann, 2.0),
        ] {
            let s = ShapeSpec::new(kindalpha.0, kindalpha.1).unwrap();
            let v: f64 = s.eval(&[1.0, -1.0, 1.0]).unwrap();
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn contour_export_roundtrip() {
        let s = spec(ShapeKind::Boltzmann, 1.0);
        let mut buf = Vec::new();
        write_contour_csv(&s, -2.0, 2.0, 4, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "xi1,xi2,value");
        assert_eq!(text.lines().count(), 1 + 5 * 5);
        // Center row evaluates to 0.
        assert!(text.lines().any(|l| l == "0,0,0"));
    }
}
