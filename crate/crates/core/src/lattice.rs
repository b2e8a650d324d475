//! Quantization lattices `[A]_step`, covering queries and the precision
//! conditions that make a quantized model approximately bisimilar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sysmodel::{ModelError, StabilityCertificate};

/// Lattice membership tolerance, relative to the step.
pub const LATTICE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("certificate has no input gain; the digital construction needs one")]
    MissingGamma,
    #[error("no parameters exist for tau = {tau}: beta(eps, tau) = {beta} >= eps; need tau > {tau_min}")]
    Infeasible { tau: f64, beta: f64, tau_min: f64 },
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rect {
    bounds: Vec<(f64, f64)>,
}

impl Rect {
    pub fn new(bounds: Vec<(f64, f64)>) -> Rect {
        Rect { bounds }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn axes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.bounds.iter().copied()
    }

    pub fn axis(&self, i: usize) -> (f64, f64) {
        self.bounds[i]
    }

    pub fn degenerate_axis(&self) -> Option<(usize, f64, f64)> {
        self.bounds.iter().enumerate().find(|(_, (lo, hi))| !(lo < hi)).map(|(i, &(lo, hi))| (i, lo, hi))
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.bounds.len() && x.iter().zip(&self.bounds).all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }
}

/// Integer range `k_min..=k_max` of one lattice axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AxisRange {
    k_min: i64,
    k_max: i64,
}

impl AxisRange {
    fn len(&self) -> usize {
        if self.k_max < self.k_min {
            0
        } else {
            (self.k_max - self.k_min + 1) as usize
        }
    }
}

/// The points of `[rect]_step`, in lexicographic order (first axis slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrid {
    step: f64,
    axes: Vec<AxisRange>,
}

/// Enumerates `[rect]_step`. An empty result is legal; check
/// [`LatticeGrid::is_empty`].
pub fn lattice_points(rect: &Rect, step: f64) -> Result<LatticeGrid, ParamError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(ParamError::Invalid(format!("lattice step must be positive, got {step}")));
    }
    let axes = rect
        .axes()
        .map(|(lo, hi)| AxisRange {
            k_min: (lo / step - LATTICE_TOL).ceil() as i64,
            k_max: (hi / step + LATTICE_TOL).floor() as i64,
        })
        .collect();
    Ok(LatticeGrid { step, axes })
}

impl LatticeGrid {
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(AxisRange::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the point at `index`.
    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        self.point_into(index, &mut out);
        out
    }

    pub fn point_into(&self, mut index: usize, out: &mut [f64]) {
        for (i, axis) in self.axes.iter().enumerate().rev() {
            let len = axis.len();
            let k = axis.k_min + (index % len) as i64;
            index /= len;
            out[i] = k as f64 * self.step;
        }
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    /// Per-axis integer coordinates `(i - k_min)` of the point at `index`.
    fn offsets(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.axes.len()];
        for (i, axis) in self.axes.iter().enumerate().rev() {
            out[i] = index % axis.len();
            index /= axis.len();
        }
        out
    }

    /// Signed integer multipliers `k` of the point at `index`.
    pub fn multipliers(&self, index: usize) -> Vec<i64> {
        self.offsets(index).into_iter().zip(&self.axes).map(|(o, a)| a.k_min + o as i64).collect()
    }

    /// Calls `visit` with the index of every grid point `q` satisfying
    /// `|x - q|_inf <= radius` (with the lattice tolerance), in ascending
    /// index order.
    pub fn for_each_within(&self, x: &[f64], radius: f64, mut visit: impl FnMut(usize)) {
        let tol = LATTICE_TOL * self.step;
        let n = self.axes.len();
        // per-axis index windows, clipped to the grid
        let mut lo = [0usize; 8];
        let mut hi = [0usize; 8];
        let mut lo_v = Vec::new();
        let mut hi_v = Vec::new();
        let (lo, hi): (&mut [usize], &mut [usize]) = if n <= 8 {
            (&mut lo[..n], &mut hi[..n])
        } else {
            lo_v.resize(n, 0);
            hi_v.resize(n, 0);
            (&mut lo_v[..], &mut hi_v[..])
        };
        for (i, axis) in self.axes.iter().enumerate() {
            if axis.len() == 0 {
                return;
            }
            let mut k_lo = ((x[i] - radius) / self.step).floor() as i64 - 1;
            let mut k_hi = ((x[i] + radius) / self.step).ceil() as i64 + 1;
            while k_lo <= k_hi && (x[i] - k_lo as f64 * self.step).abs() > radius + tol {
                k_lo += 1;
            }
            while k_hi >= k_lo && (x[i] - k_hi as f64 * self.step).abs() > radius + tol {
                k_hi -= 1;
            }
            let k_lo = k_lo.max(axis.k_min);
            let k_hi = k_hi.min(axis.k_max);
            if k_lo > k_hi {
                return;
            }
            lo[i] = (k_lo - axis.k_min) as usize;
            hi[i] = (k_hi - axis.k_min) as usize;
        }
        let mut cur: Vec<usize> = lo.to_vec();
        loop {
            let mut index = 0usize;
            for (i, axis) in self.axes.iter().enumerate() {
                index = index * axis.len() + cur[i];
            }
            visit(index);
            let mut i = n;
            loop {
                if i == 0 {
                    return;
                }
                i -= 1;
                if cur[i] < hi[i] {
                    cur[i] += 1;
                    break;
                }
                cur[i] = lo[i];
            }
        }
    }
}

/// All points `q` of the unbounded lattice `step * Z^n` with
/// `|x - q|_inf <= step / 2`: one point, or up to `2^n` on ties.
pub fn nearest_points(x: &[f64], step: f64) -> Vec<Vec<f64>> {
    let tol = LATTICE_TOL * step;
    let per_axis: Vec<Vec<f64>> = x
        .iter()
        .map(|&v| {
            let k = (v / step).floor();
            [k, k + 1.0].into_iter().map(|k| k * step).filter(|q| (v - q).abs() <= step / 2.0 + tol).collect()
        })
        .collect();
    let mut out = vec![Vec::with_capacity(x.len())];
    for axis in per_axis {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&q| {
                    let mut p = prefix.clone();
                    p.push(q);
                    p
                })
            })
            .collect();
    }
    out
}

/// Sampling time, state and input quantization, precision, integration
/// error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbstractionParams {
    pub tau: f64,
    pub eta: f64,
    pub mu: f64,
    pub eps: f64,
    #[serde(default)]
    pub nu: f64,
}

impl AbstractionParams {
    /// Sign checks only.
    pub fn validate_signs(&self) -> Result<(), ParamError> {
        let AbstractionParams { tau, eta, mu, eps, nu } = *self;
        if !(tau > 0.0 && eta > 0.0 && mu > 0.0 && eps > 0.0 && nu >= 0.0) {
            return Err(ParamError::Invalid(format!(
                "need tau, eta, mu, eps > 0 and nu >= 0 (got tau={tau}, eta={eta}, mu={mu}, eps={eps}, nu={nu})"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        self.validate_signs()?;
        let AbstractionParams { eta, eps, nu, .. } = *self;
        if !(nu < eta / 2.0) {
            return Err(ParamError::Invalid(format!("nu = {nu} must be below eta/2 = {}", eta / 2.0)));
        }
        if !(eta / 2.0 < eps) {
            return Err(ParamError::Invalid(format!("eta/2 = {} must be below eps = {eps}", eta / 2.0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    pub holds: bool,
    pub lhs: f64,
    pub slack: f64,
}

impl ConditionReport {
    fn new(lhs: f64, eps: f64) -> ConditionReport {
        ConditionReport { holds: lhs <= eps, lhs, slack: eps - lhs }
    }
}

/// `beta(eps, tau) + gamma(mu) + eta/2 <= eps` (digital construction).
pub fn check_iss_condition(cert: &StabilityCertificate, p: &AbstractionParams) -> Result<ConditionReport, ParamError> {
    let gamma = cert.gamma.ok_or(ParamError::MissingGamma)?;
    let lhs = cert.beta.eval(p.eps, p.tau)? + gamma.eval(p.mu)? + p.eta / 2.0;
    Ok(ConditionReport::new(lhs, p.eps))
}

/// `beta(eps, tau) + mu + eta/2 <= eps` (asymptotic stability only).
pub fn check_gas_condition(cert: &StabilityCertificate, p: &AbstractionParams) -> Result<ConditionReport, ParamError> {
    let lhs = cert.beta.eval(p.eps, p.tau)? + p.mu + p.eta / 2.0;
    Ok(ConditionReport::new(lhs, p.eps))
}

/// Splits the residual `eps - beta(eps, tau)` evenly between the state
/// quantization term `eta/2` and the input term (`gamma(mu)`, or `mu` when
/// the certificate has no input gain).
pub fn suggest_params(cert: &StabilityCertificate, eps: f64, tau: f64) -> Result<AbstractionParams, ParamError> {
    if !(eps > 0.0 && tau > 0.0) {
        return Err(ParamError::Invalid(format!("need eps, tau > 0 (got {eps}, {tau})")));
    }
    let beta = cert.beta.eval(eps, tau)?;
    if !(beta < eps) {
        // c * exp(-lambda tau) * eps^p < eps  <=>  tau > ln(c eps^(p-1)) / lambda
        let b = cert.beta;
        let tau_min = ((b.c * eps.powf(b.p - 1.0)).ln() / b.lambda).max(0.0);
        return Err(ParamError::Infeasible { tau, beta, tau_min });
    }
    let residual = eps - beta;
    let mut eta = residual;
    let mu = match cert.gamma {
        Some(g) => g.inverse(residual / 2.0).unwrap_or(residual / 2.0),
        None => residual / 2.0,
    };
    let check = |eta: f64| -> Result<ConditionReport, ParamError> {
        let p = AbstractionParams { tau, eta, mu, eps, nu: 0.0 };
        match cert.gamma {
            Some(_) => check_iss_condition(cert, &p),
            None => check_gas_condition(cert, &p),
        }
    };
    // absorb rounding so the returned split passes its own check
    while !check(eta)?.holds {
        eta = eta.next_down();
    }
    Ok(AbstractionParams { tau, eta, mu, eps, nu: 0.0 })
}
