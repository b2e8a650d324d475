//! Control systems, incremental stability gains and Lyapunov certificates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, Expression};
use crate::lattice::Rect;

/// Tolerance used when checking that an input lies in the input box.
pub const INPUT_BOX_TOL: f64 = 1e-12;

/// Pass threshold for sampled Lyapunov checks.
pub const LYAP_TOL: f64 = 1e-7;

/// Central finite-difference step for Lyapunov gradients.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("input {u:?} lies outside the input box")]
    InputOutOfBox { u: Vec<f64> },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("certificate error: {0}")]
    Certificate(String),
}

/// `dx/dt = f(x, u)` with `u` ranging over a box and a bounded working region.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    n: usize,
    m: usize,
    field: Vec<Expression>,
    input_box: Rect,
    state_box: Rect,
}

impl ControlSystem {
    pub fn new(field: Vec<Expression>, input_box: Rect, state_box: Rect) -> Result<ControlSystem, ModelError> {
        let n = field.len();
        let m = input_box.dim();
        if n == 0 {
            return Err(ModelError::InvalidSystem("state dimension must be positive".into()));
        }
        if state_box.dim() != n {
            return Err(ModelError::InvalidSystem(format!(
                "state box has {} axes, vector field has {n} components",
                state_box.dim()
            )));
        }
        for (name, b) in [("input", &input_box), ("state", &state_box)] {
            if let Some((i, lo, hi)) = b.degenerate_axis() {
                return Err(ModelError::InvalidSystem(format!(
                    "{name} box axis {} is degenerate: [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        if !input_box.contains(&vec![0.0; m], 0.0) {
            return Err(ModelError::InvalidSystem("input box must contain the origin".into()));
        }
        for f in &field {
            f.bind(n, m)?;
            if f.references_y() {
                return Err(ModelError::InvalidSystem("vector field may not reference y-variables".into()));
            }
        }
        Ok(ControlSystem { n, m, field, input_box, state_box })
    }

    /// Parses each component of the vector field.
    pub fn parse(field: &[&str], input_box: Rect, state_box: Rect) -> Result<ControlSystem, ModelError> {
        let field = field.iter().map(|s| Expression::parse(s)).collect::<Result<Vec<_>, _>>()?;
        ControlSystem::new(field, input_box, state_box)
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn field(&self) -> &[Expression] {
        &self.field
    }

    pub fn input_box(&self) -> &Rect {
        &self.input_box
    }

    pub fn state_box(&self) -> &Rect {
        &self.state_box
    }

    /// Evaluates `f(x, u)`, checking `u` against the input box.
    pub fn eval_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.n {
            return Err(ModelError::Argument(format!("state has length {}, expected {}", x.len(), self.n)));
        }
        if u.len() != self.m {
            return Err(ModelError::Argument(format!("input has length {}, expected {}", u.len(), self.m)));
        }
        if !self.input_box.contains(u, INPUT_BOX_TOL) {
            return Err(ModelError::InputOutOfBox { u: u.to_vec() });
        }
        self.field.iter().map(|f| f.evaluate(x, u, None).map_err(ModelError::from)).collect()
    }

    /// Hot-path evaluation without any checks; non-finite values propagate.
    #[inline]
    pub fn eval_field_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.field) {
            *o = f.eval_unchecked(x, u, &[]);
        }
    }
}

/// `beta(r, s) = c * exp(-lambda * s) * r^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlGain {
    pub c: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub p: f64,
}

fn one() -> f64 {
    1.0
}

impl KlGain {
    pub fn new(c: f64, lambda: f64, p: f64) -> Result<KlGain, ModelError> {
        if !(c > 0.0 && lambda > 0.0 && p > 0.0) {
            return Err(ModelError::Argument(format!("KL gain needs c, lambda, p > 0 (got {c}, {lambda}, {p})")));
        }
        Ok(KlGain { c, lambda, p })
    }

    pub fn eval(&self, r: f64, s: f64) -> Result<f64, ModelError> {
        if r < 0.0 || s < 0.0 || r.is_nan() || s.is_nan() {
            return Err(ModelError::Argument(format!("beta({r}, {s}) needs r, s >= 0")));
        }
        Ok(self.c * (-self.lambda * s).exp() * r.powf(self.p))
    }
}

/// `gamma(r) = k * r^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinfGain {
    pub k: f64,
    #[serde(default = "one")]
    pub p: f64,
}

impl KinfGain {
    pub fn new(k: f64, p: f64) -> Result<KinfGain, ModelError> {
        if !(k >= 0.0 && p > 0.0) {
            return Err(ModelError::Argument(format!("K-infinity gain needs k >= 0, p > 0 (got {k}, {p})")));
        }
        Ok(KinfGain { k, p })
    }

    pub fn eval(&self, r: f64) -> Result<f64, ModelError> {
        if r < 0.0 || r.is_nan() {
            return Err(ModelError::Argument(format!("gamma({r}) needs r >= 0")));
        }
        Ok(self.k * r.powf(self.p))
    }

    /// Inverse on `[0, inf)`; `None` for the zero gain.
    pub fn inverse(&self, v: f64) -> Option<f64> {
        (self.k > 0.0 && v >= 0.0).then(|| (v / self.k).powf(1.0 / self.p))
    }
}

/// A `(beta, gamma)` pair; `gamma` absent means only incremental asymptotic
/// stability is certified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub beta: KlGain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<KinfGain>,
}

/// Incremental Lyapunov function `V(x, y)` with its comparison gains.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub v: Expression,
    pub alpha1: KinfGain,
    pub alpha2: KinfGain,
    pub rho: KinfGain,
    pub sigma: Option<KinfGain>,
    /// Measure `rho`'s argument with the Euclidean norm instead of the max norm.
    pub norm2: bool,
}

/// Uniform per-axis sampling density.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleGrid {
    pub per_axis: usize,
}

impl Default for SampleGrid {
    fn default() -> Self {
        SampleGrid { per_axis: 9 }
    }
}

impl SampleGrid {
    fn axis(&self, lo: f64, hi: f64) -> Vec<f64> {
        let k = self.per_axis.max(1);
        if k == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    }

    fn product(&self, bounds: &[(f64, f64)]) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = bounds.iter().map(|&(a, b)| self.axis(a, b)).collect();
        let mut out = vec![Vec::with_capacity(bounds.len())];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipationReport {
    pub pass: bool,
    pub samples: usize,
    pub max_violation: f64,
    pub worst_x: Vec<f64>,
    pub worst_y: Vec<f64>,
    pub worst_u: Vec<f64>,
    pub worst_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub pass: bool,
    pub samples: usize,
    pub max_violation: f64,
    pub worst_x: Vec<f64>,
    pub worst_y: Vec<f64>,
    /// Largest `k` with `k * r^p1 <= V` on every sample with `r > 0`.
    pub alpha1_k_max: f64,
    /// Smallest `k` with `V <= k * r^p2` on every sample with `r > 0`.
    pub alpha2_k_min: f64,
}

fn max_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn euclid_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_v(v: &Expression, n: usize) -> Result<(), ModelError> {
    v.bind(n, 0).map_err(|_| ModelError::Certificate(format!("V must only reference x1..x{n} and y1..y{n}")))
}

/// Samples `dV/dx f(x,u) + dV/dy f(y,v) <= -rho(|x-y|) + sigma(|u-v|)` over
/// the grid on `X x X x U x U`.
pub fn lyap_check_dissipation(
    sys: &ControlSystem,
    cert: &LyapunovCertificate,
    grid: SampleGrid,
) -> Result<DissipationReport, ModelError> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    check_v(&cert.v, n)?;
    let mut bounds = Vec::with_capacity(2 * n + 2 * m);
    bounds.extend(sys.state_box().axes());
    bounds.extend(sys.state_box().axes());
    bounds.extend(sys.input_box().axes());
    bounds.extend(sys.input_box().axes());

    let mut report = DissipationReport {
        pass: true,
        samples: 0,
        max_violation: f64::NEG_INFINITY,
        worst_x: vec![],
        worst_y: vec![],
        worst_u: vec![],
        worst_v: vec![],
    };
    let mut fx = vec![0.0; n];
    let mut fy = vec![0.0; n];
    let mut xp = vec![0.0; n];
    let mut yp = vec![0.0; n];
    for point in grid.product(&bounds) {
        let (x, rest) = point.split_at(n);
        let (y, rest) = rest.split_at(n);
        let (u, v) = rest.split_at(m);
        for (i, f) in sys.field().iter().enumerate() {
            fx[i] = f.evaluate(x, u, None)?;
            fy[i] = f.evaluate(y, v, None)?;
        }
        let mut vdot = 0.0;
        for i in 0..n {
            xp.copy_from_slice(x);
            xp[i] = x[i] + FD_STEP;
            let hi = cert.v.evaluate(&xp, &[], Some(y))?;
            xp[i] = x[i] - FD_STEP;
            let lo = cert.v.evaluate(&xp, &[], Some(y))?;
            vdot += (hi - lo) / (2.0 * FD_STEP) * fx[i];

            yp.copy_from_slice(y);
            yp[i] = y[i] + FD_STEP;
            let hi = cert.v.evaluate(x, &[], Some(&yp))?;
            yp[i] = y[i] - FD_STEP;
            let lo = cert.v.evaluate(x, &[], Some(&yp))?;
            vdot += (hi - lo) / (2.0 * FD_STEP) * fy[i];
        }
        let r = if cert.norm2 { euclid_diff(x, y) } else { max_norm_diff(x, y) };
        let w = max_norm_diff(u, v);
        let supply = match &cert.sigma {
            Some(s) => s.eval(w)?,
            None => 0.0,
        };
        let violation = vdot - (-cert.rho.eval(r)? + supply);
        report.samples += 1;
        if violation > report.max_violation {
            report.max_violation = violation;
            report.worst_x = x.to_vec();
            report.worst_y = y.to_vec();
            report.worst_u = u.to_vec();
            report.worst_v = v.to_vec();
        }
    }
    report.pass = report.max_violation <= LYAP_TOL;
    Ok(report)
}

/// Samples `alpha1(|x-y|) <= V(x,y) <= alpha2(|x-y|)` (max norm) over
/// `region x region`.
pub fn lyap_check_bounds(
    cert: &LyapunovCertificate,
    region: &Rect,
    grid: SampleGrid,
) -> Result<BoundsReport, ModelError> {
    let n = region.dim();
    check_v(&cert.v, n)?;
    let mut bounds = region.axes().collect::<Vec<_>>();
    bounds.extend(region.axes());
    let mut report = BoundsReport {
        pass: true,
        samples: 0,
        max_violation: f64::NEG_INFINITY,
        worst_x: vec![],
        worst_y: vec![],
        alpha1_k_max: f64::INFINITY,
        alpha2_k_min: 0.0,
    };
    for point in grid.product(&bounds) {
        let (x, y) = point.split_at(n);
        let value = cert.v.evaluate(x, &[], Some(y))?;
        let r = max_norm_diff(x, y);
        let violation = (cert.alpha1.eval(r)? - value).max(value - cert.alpha2.eval(r)?);
        report.samples += 1;
        if violation > report.max_violation {
            report.max_violation = violation;
            report.worst_x = x.to_vec();
            report.worst_y = y.to_vec();
        }
        if r > 0.0 {
            report.alpha1_k_max = report.alpha1_k_max.min(value / r.powf(cert.alpha1.p));
            report.alpha2_k_min = report.alpha2_k_min.max(value / r.powf(cert.alpha2.p));
        }
    }
    report.pass = report.max_violation <= LYAP_TOL;
    Ok(report)
}

/// Max absolute row sum.
pub fn matrix_inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Gains for `dx/dt = A x + B u` from samples of `|exp(A s)|` on `[0, s_max]`.
///
/// The decay envelope rate is read off the endpoint and `c` is raised until
/// the envelope dominates every sample. The input gain integrates the sampled
/// norms with the trapezoid rule and adds the envelope's tail beyond `s_max`.
pub fn linear_gains(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s_max: f64,
    samples: usize,
) -> Result<StabilityCertificate, ModelError> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(ModelError::Argument("A must be a non-empty square matrix".into()));
    }
    if b.nrows() != a.nrows() {
        return Err(ModelError::Argument("B must have as many rows as A".into()));
    }
    if !(s_max > 0.0) || samples < 2 {
        return Err(ModelError::Argument("need s_max > 0 and at least two samples".into()));
    }
    let h = s_max / (samples - 1) as f64;
    let norms: Vec<f64> = (0..samples).map(|i| matrix_inf_norm(&(a * (i as f64 * h)).exp())).collect();
    let end = norms[samples - 1];
    if !(end < 1.0) {
        return Err(ModelError::Certificate(format!(
            "A is not Hurwitz on the sampled horizon: |exp(A * {s_max})| = {end}"
        )));
    }
    let lambda = -end.ln() / s_max;
    let c = norms.iter().enumerate().map(|(i, nrm)| nrm * (lambda * i as f64 * h).exp()).fold(0.0, f64::max);
    let integral: f64 = norms.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
    let tail = c / lambda * (-lambda * s_max).exp();
    let k = matrix_inf_norm(b) * (integral + tail);
    Ok(StabilityCertificate { beta: KlGain::new(c, lambda, 1.0)?, gamma: Some(KinfGain::new(k, 1.0)?) })
}
