//! Fixed-step classic Runge-Kutta integration under constant inputs.

use thiserror::Error;

use crate::sysmodel::ControlSystem;

pub const DEFAULT_STEPS: usize = 100;

/// Multiplier applied to the Richardson error estimate by [`estimate_nu`].
pub const NU_SAFETY: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("integration diverged (non-finite state) at step {step}")]
    Divergence { step: usize },
    #[error("invalid integration request: {0}")]
    Invalid(String),
}

/// Scratch buffers for allocation-free stepping.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Rk4 {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    /// One step of size `h` in place.
    #[inline]
    pub fn step(&mut self, sys: &ControlSystem, x: &mut [f64], u: &[f64], h: f64) {
        let n = x.len();
        sys.eval_field_into(x, u, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        sys.eval_field_into(&self.tmp, u, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        sys.eval_field_into(&self.tmp, u, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        sys.eval_field_into(&self.tmp, u, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    /// Integrates `x` in place over `[0, tau]` with `steps` uniform steps.
    pub fn flow_in_place(
        &mut self,
        sys: &ControlSystem,
        x: &mut [f64],
        u: &[f64],
        tau: f64,
        steps: usize,
    ) -> Result<(), IntegrateError> {
        if steps == 0 {
            return Err(IntegrateError::Invalid("steps must be at least 1".into()));
        }
        if tau == 0.0 {
            return Ok(());
        }
        let h = tau / steps as f64;
        for step in 0..steps {
            self.step(sys, x, u, h);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(IntegrateError::Divergence { step });
            }
        }
        Ok(())
    }
}

/// State reached at time `tau` from `x0` under the constant input `u`.
pub fn flow(sys: &ControlSystem, x0: &[f64], u: &[f64], tau: f64, steps: usize) -> Result<Vec<f64>, IntegrateError> {
    check_request(sys, x0, u, tau)?;
    let mut x = x0.to_vec();
    Rk4::new(x.len()).flow_in_place(sys, &mut x, u, tau, steps)?;
    Ok(x)
}

/// Like [`flow`], also recording `substeps` equally spaced intermediate
/// states (the first entry is `x0`, the last the endpoint). `steps` is
/// rounded up to a multiple of `substeps` so samples fall on step
/// boundaries.
pub fn flow_sampled(
    sys: &ControlSystem,
    x0: &[f64],
    u: &[f64],
    tau: f64,
    steps: usize,
    substeps: usize,
) -> Result<Vec<Vec<f64>>, IntegrateError> {
    check_request(sys, x0, u, tau)?;
    if steps == 0 || substeps == 0 {
        return Err(IntegrateError::Invalid("steps and substeps must be at least 1".into()));
    }
    let per_sample = steps.div_ceil(substeps);
    let h = tau / (per_sample * substeps) as f64;
    let mut rk = Rk4::new(x0.len());
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(substeps + 1);
    out.push(x.clone());
    for s in 0..substeps {
        if tau > 0.0 {
            for k in 0..per_sample {
                rk.step(sys, &mut x, u, h);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(IntegrateError::Divergence { step: s * per_sample + k });
                }
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn check_request(sys: &ControlSystem, x0: &[f64], u: &[f64], tau: f64) -> Result<(), IntegrateError> {
    if x0.len() != sys.state_dim() || u.len() != sys.input_dim() {
        return Err(IntegrateError::Invalid(format!(
            "dimension mismatch: x0 has {}, u has {}, system is ({}, {})",
            x0.len(),
            u.len(),
            sys.state_dim(),
            sys.input_dim()
        )));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(IntegrateError::Invalid(format!("tau must be finite and non-negative, got {tau}")));
    }
    Ok(())
}

/// Raw step-halving error `|flow(steps) - flow(2 steps)|_inf * 16/15`,
/// maximized over all sample pairs.
pub fn richardson_error(
    sys: &ControlSystem,
    states: &[Vec<f64>],
    labels: &[Vec<f64>],
    tau: f64,
    steps: usize,
) -> Result<f64, IntegrateError> {
    if states.is_empty() || labels.is_empty() {
        return Err(IntegrateError::Invalid("need at least one state and one label".into()));
    }
    let mut worst: f64 = 0.0;
    for x0 in states {
        for u in labels {
            let coarse = flow(sys, x0, u, tau, steps)?;
            let fine = flow(sys, x0, u, tau, 2 * steps)?;
            let d = coarse.iter().zip(&fine).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(d);
        }
    }
    Ok(worst * 16.0 / 15.0)
}

/// Conservative integration-error budget: [`NU_SAFETY`] times the
/// Richardson estimate.
pub fn estimate_nu(
    sys: &ControlSystem,
    states: &[Vec<f64>],
    labels: &[Vec<f64>],
    tau: f64,
    steps: usize,
) -> Result<f64, IntegrateError> {
    Ok(NU_SAFETY * richardson_error(sys, states, labels, tau, steps)?)
}
