//! Symbolic models of digital control systems: states on `[X]_eta`, labels
//! on `[U]_mu`, and `q --l--> p` whenever the numerically integrated flow
//! from `q` under `l` lands within `eta/2 - nu` of `p`.

use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::integrate::{IntegrateError, Rk4, DEFAULT_STEPS};
use crate::lattice::{check_iss_condition, lattice_points, AbstractionParams, ParamError, LATTICE_TOL};
use crate::sysmodel::{ControlSystem, StabilityCertificate};
use crate::ts::{dist, TransitionSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbstractionError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("precision condition violated: lhs = {lhs} > eps = {eps} (use force to build anyway)")]
    ConditionViolated { lhs: f64, eps: f64 },
    #[error("no stability certificate supplied (use force to build anyway)")]
    MissingCertificate,
    #[error("the {0} lattice is empty")]
    EmptyLattice(&'static str),
    #[error("integration diverged from state {state} under label {label}: {source}")]
    Divergence { state: usize, label: usize, source: IntegrateError },
    #[error("system dimensions do not match the symbolic model")]
    DimensionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// RK4 steps per sampling interval.
    pub steps: usize,
    /// Build even if the precision condition fails or no certificate is given.
    pub force: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { steps: DEFAULT_STEPS, force: false }
    }
}

const CHUNK: usize = 2048;

/// Builds the symbolic model of `sys` for the given parameters.
///
/// Flows that leave the working box make their label blocking at that
/// state. All lattice points inside the closed acceptance ball become
/// successors, so boundary ties produce nondeterminism.
pub fn build(
    sys: &ControlSystem,
    cert: Option<&StabilityCertificate>,
    p: &AbstractionParams,
    opts: &BuildOptions,
) -> Result<TransitionSystem, AbstractionError> {
    p.validate_signs()?;
    if !opts.force {
        let cert = cert.ok_or(AbstractionError::MissingCertificate)?;
        let report = check_iss_condition(cert, p)?;
        if !report.holds {
            return Err(AbstractionError::ConditionViolated { lhs: report.lhs, eps: p.eps });
        }
    }
    p.validate()?;

    let t0 = Instant::now();
    let states = lattice_points(sys.state_box(), p.eta)?;
    let labels = lattice_points(sys.input_box(), p.mu)?;
    if states.is_empty() {
        return Err(AbstractionError::EmptyLattice("state"));
    }
    if labels.is_empty() {
        return Err(AbstractionError::EmptyLattice("input"));
    }
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let (nq, nl) = (states.len(), labels.len());
    let mut state_pts = vec![0.0; nq * n];
    for q in 0..nq {
        states.point_into(q, &mut state_pts[q * n..(q + 1) * n]);
    }
    let mut label_pts = vec![0.0; nl * m];
    for l in 0..nl {
        labels.point_into(l, &mut label_pts[l * m..(l + 1) * m]);
    }
    let lattice_time = t0.elapsed();

    let t1 = Instant::now();
    let radius = p.eta / 2.0 - p.nu;
    let box_tol = LATTICE_TOL * p.eta;
    let total = nq * nl;
    let chunks: Vec<(Vec<u32>, Vec<u32>)> =
        (0..total.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut rk = Rk4::new(n);
                let mut x = vec![0.0; n];
                let mut counts = Vec::with_capacity(CHUNK);
                let mut targets = Vec::with_capacity(CHUNK * 2);
                for k in c * CHUNK..((c + 1) * CHUNK).min(total) {
                    let (q, l) = (k / nl, k % nl);
                    x.copy_from_slice(&state_pts[q * n..(q + 1) * n]);
                    let u = &label_pts[l * m..(l + 1) * m];
                    rk.flow_in_place(sys, &mut x, u, p.tau, opts.steps)
                        .map_err(|source| AbstractionError::Divergence { state: q, label: l, source })?;
                    let before = targets.len();
                    if sys.state_box().contains(&x, box_tol) {
                        states.for_each_within(&x, radius, |i| targets.push(i as u32));
                    }
                    counts.push((targets.len() - before) as u32);
                }
                Ok((counts, targets))
            })
            .collect::<Result<_, AbstractionError>>()?;
    let integrate_time = t1.elapsed();

    let t2 = Instant::now();
    let mut offsets = Vec::with_capacity(total + 1);
    let mut targets = Vec::with_capacity(chunks.iter().map(|c| c.1.len()).sum());
    offsets.push(0usize);
    for (counts, chunk_targets) in chunks {
        let mut acc = targets.len();
        for c in counts {
            acc += c as usize;
            offsets.push(acc);
        }
        targets.extend(chunk_targets);
    }
    let ts = TransitionSystem::from_parts((nq, nl), (n, m), state_pts, label_pts, offsets, targets);
    info!(
        "abstraction: {nq} states, {nl} labels, {} transitions; lattice {:.3?}, integrate {:.3?}, merge {:.3?}",
        ts.num_transitions(),
        lattice_time,
        integrate_time,
        t2.elapsed()
    );
    Ok(ts)
}

/// Re-integrates every `(q, l)` pair and returns the transitions that do not
/// satisfy the acceptance-ball rule, plus rule-satisfying successors that
/// are missing.
pub fn recheck_transitions(
    sys: &ControlSystem,
    ts: &TransitionSystem,
    p: &AbstractionParams,
    steps: usize,
) -> Result<Vec<(usize, usize, usize)>, AbstractionError> {
    if ts.dim() != sys.state_dim() || ts.input_dim() != sys.input_dim() {
        return Err(AbstractionError::DimensionMismatch);
    }
    let radius = p.eta / 2.0 - p.nu;
    let tol = LATTICE_TOL * p.eta;
    let mut bad = Vec::new();
    let mut rk = Rk4::new(sys.state_dim());
    for q in 0..ts.num_states() {
        for l in 0..ts.num_labels() {
            let mut x = ts.output(q).to_vec();
            rk.flow_in_place(sys, &mut x, ts.label(l), p.tau, steps)
                .map_err(|source| AbstractionError::Divergence { state: q, label: l, source })?;
            let inside = sys.state_box().contains(&x, tol);
            let succ = ts.successors(q, l);
            for target in 0..ts.num_states() {
                let accepted = inside && dist(ts.output(target), &x) <= radius + tol;
                if accepted != succ.contains(&(target as u32)) {
                    bad.push((q, l, target));
                }
            }
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub init_samples: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Size of the evenly spaced label sub-grid tried at every round.
    pub label_samples: usize,
    pub steps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { init_samples: 50, horizon: 3, seed: 0, label_samples: 11, steps: DEFAULT_STEPS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationCondition {
    /// No abstract state within eps of the concrete one.
    Pairing,
    /// A concrete move has no abstract answer.
    ConcreteMove,
    /// An abstract move has no concrete answer under the same label.
    AbstractMove,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationViolation {
    pub run: usize,
    pub round: usize,
    pub condition: RelationCondition,
    pub x: Vec<f64>,
    pub state: Option<usize>,
    pub label: Option<usize>,
    pub successor: Option<usize>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub runs: usize,
    pub pairs_checked: usize,
    /// Runs cut short because every sampled label drives the state out of X.
    pub exits: usize,
    pub violation: Option<RelationViolation>,
}

/// Samples the relation `{(x, q) : |x - q| <= eps}` between the sampled
/// concrete system and `ts` along seeded random runs, checking the
/// bisimulation conditions in both directions at every round.
pub fn verify_relation_empirical(
    sys: &ControlSystem,
    ts: &TransitionSystem,
    p: &AbstractionParams,
    opts: &VerifyOptions,
) -> Result<VerifyReport, AbstractionError> {
    if ts.dim() != sys.state_dim() || ts.input_dim() != sys.input_dim() {
        return Err(AbstractionError::DimensionMismatch);
    }
    let n = sys.state_dim();
    let nl = ts.num_labels();
    let sub: Vec<usize> = match (opts.label_samples.max(1), nl) {
        (_, 0) => vec![],
        (1, _) => vec![nl / 2],
        (k, _) if k >= nl => (0..nl).collect(),
        (k, _) => {
            let mut v: Vec<usize> = (0..k).map(|i| i * (nl - 1) / (k - 1)).collect();
            v.dedup();
            v
        }
    };
    let post = ts.post_sets();
    let box_tol = LATTICE_TOL * p.eta;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rk = Rk4::new(n);
    let mut report = VerifyReport { pass: true, runs: 0, pairs_checked: 0, exits: 0, violation: None };

    for run in 0..opts.init_samples {
        report.runs += 1;
        let mut x: Vec<f64> = sys.state_box().axes().map(|(lo, hi)| rng.gen_range(lo..=hi)).collect();
        for round in 0..=opts.horizon {
            let paired: Vec<usize> = (0..ts.num_states()).filter(|&q| dist(&x, ts.output(q)) <= p.eps).collect();
            if paired.is_empty() {
                let d = ts.nearest_state(&x).map_or(f64::INFINITY, |q| dist(&x, ts.output(q)));
                report.violation = Some(RelationViolation {
                    run,
                    round,
                    condition: RelationCondition::Pairing,
                    x,
                    state: None,
                    label: None,
                    successor: None,
                    distance: d,
                });
                report.pass = false;
                return Ok(report);
            }
            report.pairs_checked += paired.len();
            if round == opts.horizon {
                break;
            }
            let mut next = Vec::with_capacity(sub.len());
            for &l in &sub {
                let mut y = x.clone();
                rk.flow_in_place(sys, &mut y, ts.label(l), p.tau, opts.steps)
                    .map_err(|source| AbstractionError::Divergence { state: usize::MAX, label: l, source })?;
                let stays = sys.state_box().contains(&y, box_tol);
                for &q in &paired {
                    if stays {
                        let best =
                            post[q].iter().map(|&s| dist(&y, ts.output(s as usize))).fold(f64::INFINITY, f64::min);
                        if best > p.eps {
                            report.violation = Some(RelationViolation {
                                run,
                                round,
                                condition: RelationCondition::ConcreteMove,
                                x,
                                state: Some(q),
                                label: Some(l),
                                successor: None,
                                distance: best,
                            });
                            report.pass = false;
                            return Ok(report);
                        }
                    }
                    for &s in ts.successors(q, l) {
                        let d = dist(&y, ts.output(s as usize));
                        if d > p.eps {
                            report.violation = Some(RelationViolation {
                                run,
                                round,
                                condition: RelationCondition::AbstractMove,
                                x,
                                state: Some(q),
                                label: Some(l),
                                successor: Some(s as usize),
                                distance: d,
                            });
                            report.pass = false;
                            return Ok(report);
                        }
                    }
                }
                if stays {
                    next.push(y);
                }
            }
            if next.is_empty() {
                report.exits += 1;
                break;
            }
            x = next.swap_remove(rng.gen_range(0..next.len()));
        }
    }
    Ok(report)
}
