//! Road reference curves and the Cartesian/Frenet coordinate transforms.
//!
//! A road is described by a curvature profile `kappa(s)` over arc length.
//! [`build_path`] evaluates the heading `phi(s) = integral kappa` from the
//! profile's closed-form integral and the curve
//! `gamma(s) = integral [cos phi, sin phi]` with per-cell Gauss-Legendre
//! quadrature (split at curvature breakpoints, where the integrand loses
//! smoothness) on a uniform `ds` grid; queries interpolate linearly
//! between samples. The Frenet coordinates of a Cartesian pose are
//! `(s, n, beta)`: arc-length position of the closest curve point, signed
//! lateral offset along the left normal `e_n = [-sin phi, cos phi]`, and
//! heading mismatch `beta = phi_gamma - phi`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("curvature breakpoints must start at 0 and increase strictly")]
    InvalidBreakpoints,
    #[error("sample spacing must be positive and finite")]
    InvalidSpacing,
    #[error("arc length {s} outside the path domain [0, {len}]")]
    OutOfRange { s: f64, len: f64 },
    #[error("projection left the path domain (closest point at s = {s})")]
    ProjectionOutOfRange { s: f64 },
    #[error("projection Newton refinement did not converge")]
    ProjectionDiverged,
}

/// Piecewise-linear curvature over arc length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureProfile {
    breakpoints: Vec<f64>,
    kappa_values: Vec<f64>,
}

impl CurvatureProfile {
    pub fn new(breakpoints: Vec<f64>, kappa_values: Vec<f64>) -> Result<Self, PathError> {
        let ok = breakpoints.len() == kappa_values.len()
            && breakpoints.len() >= 2
            && breakpoints[0] == 0.0
            && breakpoints.windows(2).all(|w| w[1] > w[0])
            && breakpoints.iter().chain(&kappa_values).all(|x| x.is_finite());
        if !ok {
            return Err(PathError::InvalidBreakpoints);
        }
        Ok(Self {
            breakpoints,
            kappa_values,
        })
    }

    /// Constant-curvature profile of the given length.
    pub fn constant(kappa: f64, length: f64) -> Self {
        Self {
            breakpoints: vec![0.0, length],
            kappa_values: vec![kappa, kappa],
        }
    }

    pub fn length(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn kappa_values(&self) -> &[f64] {
        &self.kappa_values
    }

    /// Curvature at `s`, clamped to the profile ends outside the domain.
    pub fn kappa(&self, s: f64) -> f64 {
        self.lookup(s).0
    }

    /// `(kappa, dkappa/ds)` at `s`; the slope is 0 outside the domain and
    /// taken from the segment to the right at breakpoints.
    pub fn lookup(&self, s: f64) -> (f64, f64) {
        let bp = &self.breakpoints;
        if s <= bp[0] {
            return (self.kappa_values[0], 0.0);
        }
        if s >= *bp.last().unwrap() {
            return (*self.kappa_values.last().unwrap(), 0.0);
        }
        // partition_point returns the first breakpoint > s.
        let hi = bp.partition_point(|&b| b <= s);
        let (s0, s1) = (bp[hi - 1], bp[hi]);
        let (k0, k1) = (self.kappa_values[hi - 1], self.kappa_values[hi]);
        let slope = (k1 - k0) / (s1 - s0);
        (k0 + slope * (s - s0), slope)
    }

    /// Exact integral of the piecewise-linear curvature over `[0, s]`.
    pub fn integral(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let mut acc = 0.0;
        for (bw, kw) in self.breakpoints.windows(2).zip(self.kappa_values.windows(2)) {
            let (s0, s1, k0, k1) = (bw[0], bw[1], kw[0], kw[1]);
            if s <= s0 {
                break;
            }
            let e = s.min(s1);
            let ke = k0 + (k1 - k0) * (e - s0) / (s1 - s0);
            acc += 0.5 * (k0 + ke) * (e - s0);
        }
        acc
    }
}

/// A Cartesian vehicle pose: position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPose {
    pub position: [f64; 2],
    pub phi: f64,
}

/// A Frenet pose relative to a reference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetPose {
    pub s: f64,
    pub n: f64,
    pub beta: f64,
}

/// Reference curve sampled on a uniform arc-length grid (a single final
/// partial cell covers any remainder of the profile length).
#[derive(Debug, Clone)]
pub struct ReferencePath {
    profile: CurvatureProfile,
    ds: f64,
    /// Width of the last grid cell: `ds` when the profile length is a
    /// whole number of samples, otherwise the remainder.
    last_cell: f64,
    /// Road width in meters (lateral extent centered on the curve).
    pub width: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    phi: Vec<f64>,
}

/// Sample the reference curve from a curvature profile on a grid of step
/// `ds`. Headings come from the profile's exact curvature integral;
/// positions from 4-point Gauss-Legendre quadrature of
/// `[cos phi(s), sin phi(s)]` per cell, split at curvature breakpoints so
/// every quadrature panel sees a smooth integrand. Road width defaults to
/// 10 m and can be set on the returned value.
pub fn build_path(profile: CurvatureProfile, ds: f64) -> Result<ReferencePath, PathError> {
    let len = profile.length();
    if !(ds > 0.0) || !ds.is_finite() || ds > len {
        return Err(PathError::InvalidSpacing);
    }
    let n_full = (len / ds + 1e-9).floor() as usize;
    let rem = len - n_full as f64 * ds;
    let (n_cells, last_cell) = if rem > 1e-9 * len.max(1.0) {
        (n_full + 1, rem)
    } else {
        (n_full, ds)
    };
    let s_at = |i: usize| if i == n_cells { len } else { i as f64 * ds };

    // 4-point Gauss-Legendre nodes/weights on [-1, 1].
    const NODES: [f64; 4] = [
        -0.8611363115940526,
        -0.3399810435848563,
        0.3399810435848563,
        0.8611363115940526,
    ];
    const WEIGHTS: [f64; 4] = [
        0.34785484513745385,
        0.6521451548625461,
        0.6521451548625461,
        0.34785484513745385,
    ];
    let panel = |a: f64, b: f64| -> (f64, f64) {
        let (h, mid) = (0.5 * (b - a), 0.5 * (a + b));
        let mut acc = (0.0, 0.0);
        for (node, wt) in NODES.iter().zip(WEIGHTS) {
            let ph = profile.integral(mid + h * node);
            acc.0 += wt * h * ph.cos();
            acc.1 += wt * h * ph.sin();
        }
        acc
    };

    let mut x = Vec::with_capacity(n_cells + 1);
    let mut y = Vec::with_capacity(n_cells + 1);
    let mut phi = Vec::with_capacity(n_cells + 1);
    let (mut cx, mut cy) = (0.0f64, 0.0f64);
    x.push(cx);
    y.push(cy);
    phi.push(0.0);
    for i in 0..n_cells {
        let (a, b) = (s_at(i), s_at(i + 1));
        let mut lo = a;
        for &bp in profile.breakpoints() {
            if bp > a && bp < b {
                let (dx, dy) = panel(lo, bp);
                cx += dx;
                cy += dy;
                lo = bp;
            }
        }
        let (dx, dy) = panel(lo, b);
        cx += dx;
        cy += dy;
        x.push(cx);
        y.push(cy);
        phi.push(profile.integral(b));
    }
    Ok(ReferencePath {
        profile,
        ds,
        last_cell,
        width: 10.0,
        x,
        y,
        phi,
    })
}

impl ReferencePath {
    pub fn length(&self) -> f64 {
        (self.x.len() - 2) as f64 * self.ds + self.last_cell
    }

    /// Arc length of grid sample `i`.
    fn s_at(&self, i: usize) -> f64 {
        if i + 1 == self.x.len() {
            self.length()
        } else {
            i as f64 * self.ds
        }
    }

    pub fn ds(&self) -> f64 {
        self.ds
    }

    pub fn profile(&self) -> &CurvatureProfile {
        &self.profile
    }

    pub fn kappa(&self, s: f64) -> f64 {
        self.profile.kappa(s)
    }

    /// `(kappa, dkappa/ds)` lookup for prediction-model sensitivities.
    pub fn kappa_lookup(&self, s: f64) -> (f64, f64) {
        self.profile.lookup(s)
    }

    fn check_domain(&self, s: f64) -> Result<(), PathError> {
        if s >= 0.0 && s <= self.length() {
            Ok(())
        } else {
            Err(PathError::OutOfRange {
                s,
                len: self.length(),
            })
        }
    }

    /// Cell index, fractional offset, and cell width for `s`, clamped to
    /// the grid.
    fn locate(&self, s: f64) -> (usize, f64, f64) {
        let n_cells = self.x.len() - 1;
        let i = ((s / self.ds).floor().max(0.0) as usize).min(n_cells - 1);
        let w = if i + 1 == n_cells { self.last_cell } else { self.ds };
        let a = ((s - i as f64 * self.ds) / w).clamp(0.0, 1.0);
        (i, a, w)
    }

    /// Curve point `gamma(s)`.
    pub fn gamma(&self, s: f64) -> [f64; 2] {
        let (i, a, _) = self.locate(s);
        [
            self.x[i] + a * (self.x[i + 1] - self.x[i]),
            self.y[i] + a * (self.y[i + 1] - self.y[i]),
        ]
    }

    /// Curve heading `phi_gamma(s)`.
    pub fn phi_gamma(&self, s: f64) -> f64 {
        let (i, a, _) = self.locate(s);
        self.phi[i] + a * (self.phi[i + 1] - self.phi[i])
    }

    /// Unit left normal `e_n(s) = [-sin phi, cos phi]`.
    pub fn normal(&self, s: f64) -> [f64; 2] {
        let p = self.phi_gamma(s);
        [-p.sin(), p.cos()]
    }

    /// `p = gamma(s) + n e_n(s)`, `phi = phi_gamma(s) - beta`.
    pub fn frenet_to_cartesian(&self, fp: &FrenetPose) -> Result<CartesianPose, PathError> {
        self.check_domain(fp.s)?;
        let g = self.gamma(fp.s);
        let en = self.normal(fp.s);
        Ok(CartesianPose {
            position: [g[0] + fp.n * en[0], g[1] + fp.n * en[1]],
            phi: self.phi_gamma(fp.s) - fp.beta,
        })
    }

    /// Project a Cartesian pose onto the path: coarse grid search over the
    /// samples, then Newton refinement on the orthogonality condition
    /// `g(s) = (p - gamma(s)) . tau(s) = 0` with `tau = [cos phi, sin phi]`
    /// from the interpolated heading. Using the interpolated-heading
    /// tangent (rather than the polyline chord) makes the projection the
    /// exact inverse of [`frenet_to_cartesian`] on the sampled geometry.
    /// Ties in the grid search break toward the smallest `s`.
    pub fn cartesian_to_frenet(&self, pose: &CartesianPose) -> Result<FrenetPose, PathError> {
        let p = pose.position;
        // Coarse pass: closest sample (strict < keeps the smallest index on ties).
        let mut best = (0usize, f64::INFINITY);
        for i in 0..self.x.len() {
            let d2 = (p[0] - self.x[i]).powi(2) + (p[1] - self.y[i]).powi(2);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        let mut s = self.s_at(best.0);
        let len = self.length();
        // Newton on g(s) = (p - gamma(s)) . tau(s);
        // g'(s) = -gamma'(s) . tau(s) + (p - gamma(s)) . tau'(s).
        let mut converged = false;
        for _ in 0..50 {
            let (i, a, w) = self.locate(s);
            let gx = self.x[i] + a * (self.x[i + 1] - self.x[i]);
            let gy = self.y[i] + a * (self.y[i + 1] - self.y[i]);
            let phi = self.phi[i] + a * (self.phi[i + 1] - self.phi[i]);
            let dphi = (self.phi[i + 1] - self.phi[i]) / w;
            let (dgx, dgy) = (
                (self.x[i + 1] - self.x[i]) / w,
                (self.y[i + 1] - self.y[i]) / w,
            );
            let (tx, ty) = (phi.cos(), phi.sin());
            let (rx, ry) = (p[0] - gx, p[1] - gy);
            let g = rx * tx + ry * ty;
            let gp = -(dgx * tx + dgy * ty) + (rx * -ty + ry * tx) * dphi;
            if g.abs() <= 1e-10 {
                converged = true;
                break;
            }
            if gp.abs() < 1e-12 {
                break;
            }
            s = (s - g / gp).clamp(0.0, len);
        }
        if !converged {
            // Either a domain-boundary projection or a genuine failure.
            let (i, a, _) = self.locate(s);
            let phi = self.phi[i] + a * (self.phi[i + 1] - self.phi[i]);
            let g = (p[0] - self.gamma(s)[0]) * phi.cos() + (p[1] - self.gamma(s)[1]) * phi.sin();
            if (s <= 0.0 || s >= len) && g.abs() > 1e-10 {
                return Err(PathError::ProjectionOutOfRange { s });
            }
            if g.abs() > 1e-10 {
                return Err(PathError::ProjectionDiverged);
            }
        }
        let gp = self.gamma(s);
        let en = self.normal(s);
        Ok(FrenetPose {
            s,
            n: (p[0] - gp[0]) * en[0] + (p[1] - gp[1]) * en[1],
            beta: self.phi_gamma(s) - pose.phi,
        })
    }
}

/// Random road: piecewise-linear curvature with breakpoint magnitudes
/// uniform in `curvature_range`, independent random sign per breakpoint,
/// and breakpoint spacing uniform in `segment_length_range`. The last
/// breakpoint lands exactly on `total_length`.
pub fn random_road<R: Rng>(
    rng: &mut R,
    curvature_range: (f64, f64),
    segment_length_range: (f64, f64),
    total_length: f64,
) -> CurvatureProfile {
    let mut breakpoints = vec![0.0];
    let mut kappas = vec![draw_kappa(rng, curvature_range)];
    let mut s = 0.0;
    while s < total_length {
        s = (s + rng.gen_range(segment_length_range.0..=segment_length_range.1))
            .min(total_length);
        breakpoints.push(s);
        kappas.push(draw_kappa(rng, curvature_range));
    }
    CurvatureProfile {
        breakpoints,
        kappa_values: kappas,
    }
}

fn draw_kappa<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    let mag = rng.gen_range(range.0..=range.1);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Write `s,x,y,phi_gamma,kappa` CSV rows for every path sample.
pub fn write_path_csv<W: std::io::Write>(
    path: &ReferencePath,
    out: W,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "x", "y", "phi_gamma", "kappa"])?;
    for i in 0..path.x.len() {
        let s = path.s_at(i);
        w.write_record([
            format!("{s}"),
            format!("{}", path.x[i]),
            format!("{}", path.y[i]),
            format!("{}", path.phi[i]),
            format!("{}", path.kappa(s)),
        ])?;
    }
    w.flush()?;
    Ok(())
}
