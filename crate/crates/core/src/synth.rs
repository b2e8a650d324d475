//! Controller synthesis on symbolic models (reachability and sequences of
//! reachability legs) and closed-loop simulation on the concrete system.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{flow_sampled, IntegrateError, DEFAULT_STEPS};
use crate::sysmodel::ControlSystem;
use crate::ts::{dist, TransitionSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("leg {leg} is infeasible from state {state}")]
    Infeasible { leg: usize, state: usize },
    #[error("invalid specification: {0}")]
    Invalid(String),
    #[error("initial state {x0:?} is {distance} away from start state {start} (eps = {eps})")]
    StartTooFar { x0: Vec<f64>, start: usize, distance: f64, eps: f64 },
    #[error("simulation failed: {0}")]
    Integrate(#[from] IntegrateError),
}

/// States from which some label has a non-empty successor set contained in
/// `winning`, paired with the smallest such label.
pub fn controllable_pre(ts: &TransitionSystem, winning: &[bool]) -> Vec<Option<usize>> {
    (0..ts.num_states())
        .map(|q| {
            (0..ts.num_labels()).find(|&l| {
                let succ = ts.successors(q, l);
                !succ.is_empty() && succ.iter().all(|&p| winning[p as usize])
            })
        })
        .collect()
}

/// Attractor of a target set, optionally restricted to a safe set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReachSolution {
    pub winning: Vec<bool>,
    /// Label to apply outside the target; `None` on the target and on losing
    /// states.
    pub policy: Vec<Option<usize>>,
    /// Round in which the state joined the winning set (0 for targets).
    pub rank: Vec<Option<usize>>,
}

pub fn solve_reach(ts: &TransitionSystem, target: &[bool], safe: Option<&[bool]>) -> ReachSolution {
    let nq = ts.num_states();
    let mut winning = target.to_vec();
    let mut policy = vec![None; nq];
    let mut rank: Vec<Option<usize>> = target.iter().map(|&t| t.then_some(0)).collect();
    for round in 1.. {
        let pre = controllable_pre(ts, &winning);
        let mut grown = false;
        let mut next = winning.clone();
        for q in 0..nq {
            if winning[q] || safe.is_some_and(|s| !s[q]) {
                continue;
            }
            if let Some(l) = pre[q] {
                next[q] = true;
                policy[q] = Some(l);
                rank[q] = Some(round);
                grown = true;
            }
        }
        winning = next;
        if !grown {
            break;
        }
    }
    ReachSolution { winning, policy, rank }
}

/// Visit the legs in order, starting from `start`. State indices are
/// 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub legs: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safe: Option<Vec<usize>>,
    pub start: usize,
}

type Masks = (Vec<Vec<bool>>, Option<Vec<bool>>);

impl SequenceSpec {
    fn masks(&self, nq: usize) -> Result<Masks, SynthError> {
        let mask = |set: &[usize], what: &str| -> Result<Vec<bool>, SynthError> {
            let mut m = vec![false; nq];
            for &q in set {
                if q >= nq {
                    return Err(SynthError::Invalid(format!("{what} refers to state {q}, model has {nq}")));
                }
                m[q] = true;
            }
            Ok(m)
        };
        if self.start >= nq {
            return Err(SynthError::Invalid(format!("start state {} out of range ({nq} states)", self.start)));
        }
        let legs = self
            .legs
            .iter()
            .enumerate()
            .map(|(i, leg)| {
                if leg.is_empty() {
                    return Err(SynthError::Invalid(format!("leg {i} is empty")));
                }
                mask(leg, &format!("leg {i}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let safe = self.safe.as_deref().map(|s| mask(s, "safe set")).transpose()?;
        Ok((legs, safe))
    }
}

/// Memoryful controller: one reachability policy per leg.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Controller {
    pub targets: Vec<Vec<bool>>,
    pub legs: Vec<ReachSolution>,
}

impl Controller {
    /// Label for state `q` while pursuing `leg`; `None` once the leg's target
    /// is reached or if `q` is losing.
    pub fn label(&self, leg: usize, q: usize) -> Option<usize> {
        self.legs[leg].policy[q]
    }
}

/// A nominal abstract run satisfying the specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub start: usize,
    pub labels: Vec<usize>,
    /// Abstract states visited, starting with `start`; one more than labels.
    pub waypoints: Vec<usize>,
    /// Index into `waypoints` at which each leg completes.
    pub leg_ends: Vec<usize>,
}

pub fn synth_controller(ts: &TransitionSystem, spec: &SequenceSpec) -> Result<Controller, SynthError> {
    let (targets, safe) = spec.masks(ts.num_states())?;
    let legs = targets.iter().map(|t| solve_reach(ts, t, safe.as_deref())).collect();
    Ok(Controller { targets, legs })
}

/// Synthesizes the per-leg controllers and unrolls them along the nominal
/// run that always takes the smallest-index successor.
pub fn synth_sequence(ts: &TransitionSystem, spec: &SequenceSpec) -> Result<(Controller, Plan), SynthError> {
    let ctrl = synth_controller(ts, spec)?;
    let mut cur = spec.start;
    let mut plan = Plan { start: cur, labels: vec![], waypoints: vec![cur], leg_ends: vec![] };
    for (leg, sol) in ctrl.legs.iter().enumerate() {
        if !sol.winning[cur] {
            return Err(SynthError::Infeasible { leg, state: cur });
        }
        while !ctrl.targets[leg][cur] {
            let l = sol.policy[cur].expect("winning non-target states have a policy");
            cur = ts.successors(cur, l)[0] as usize;
            plan.labels.push(l);
            plan.waypoints.push(cur);
        }
        plan.leg_ends.push(plan.waypoints.len() - 1);
    }
    Ok((ctrl, plan))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub tau: f64,
    pub eps: f64,
    pub steps: usize,
    /// Recorded points per sampling interval.
    pub substeps: usize,
}

impl SimOptions {
    pub fn new(tau: f64, eps: f64) -> SimOptions {
        SimOptions { tau, eps, steps: DEFAULT_STEPS, substeps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Distance of the concrete state to the predicted abstract state at every
/// sampling instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TubeReport {
    pub pass: bool,
    pub eps: f64,
    pub max_deviation: f64,
    pub states: Vec<usize>,
    pub labels: Vec<usize>,
    pub deviations: Vec<f64>,
    /// First sampling instant whose deviation exceeds eps.
    pub first_violation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub trajectory: Vec<TrajectoryPoint>,
    pub tube: TubeReport,
}

impl SimResult {
    /// `t,x1..xn,u1..um` rows; the final row repeats the last input.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::new();
        let (n, m) = self.trajectory.first().map_or((0, 0), |p| (p.x.len(), p.u.len()));
        out.push('t');
        for i in 1..=n {
            write!(out, ",x{i}").unwrap();
        }
        for i in 1..=m {
            write!(out, ",u{i}").unwrap();
        }
        out.push('\n');
        for p in &self.trajectory {
            write!(out, "{:.16e}", p.t).unwrap();
            for v in p.x.iter().chain(&p.u) {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn check_start(ts: &TransitionSystem, x0: &[f64], start: usize, eps: f64) -> Result<(), SynthError> {
    if x0.len() != ts.dim() {
        return Err(SynthError::Invalid(format!("x0 has {} entries, model has dimension {}", x0.len(), ts.dim())));
    }
    if start >= ts.num_states() {
        return Err(SynthError::Invalid(format!("start state {start} out of range")));
    }
    let d = dist(x0, ts.output(start));
    if d > eps {
        return Err(SynthError::StartTooFar { x0: x0.to_vec(), start, distance: d, eps });
    }
    Ok(())
}

struct Recorder {
    trajectory: Vec<TrajectoryPoint>,
    deviations: Vec<f64>,
    first_violation: Option<usize>,
    eps: f64,
}

impl Recorder {
    fn interval(&mut self, k: usize, tau: f64, samples: &[Vec<f64>], u: &[f64]) {
        let sub = samples.len() - 1;
        for (j, x) in samples[..sub].iter().enumerate() {
            let t = tau * (k as f64 + j as f64 / sub as f64);
            self.trajectory.push(TrajectoryPoint { t, x: x.clone(), u: u.to_vec() });
        }
    }

    fn deviation(&mut self, d: f64) {
        if d > self.eps && self.first_violation.is_none() {
            self.first_violation = Some(self.deviations.len());
        }
        self.deviations.push(d);
    }

    fn finish(mut self, t: f64, x: Vec<f64>, u: Vec<f64>, states: Vec<usize>, labels: Vec<usize>) -> SimResult {
        self.trajectory.push(TrajectoryPoint { t, x, u });
        let max_deviation = self.deviations.iter().copied().fold(0.0, f64::max);
        SimResult {
            trajectory: self.trajectory,
            tube: TubeReport {
                pass: self.first_violation.is_none(),
                eps: self.eps,
                max_deviation,
                states,
                labels,
                deviations: self.deviations,
                first_violation: self.first_violation,
            },
        }
    }
}

/// Applies the plan's labels open loop from `x0` and measures
/// `|x(k tau) - H(waypoint_k)|` at every sampling instant.
pub fn simulate_closed_loop(
    sys: &ControlSystem,
    ts: &TransitionSystem,
    plan: &Plan,
    x0: &[f64],
    opts: &SimOptions,
) -> Result<SimResult, SynthError> {
    check_start(ts, x0, plan.start, opts.eps)?;
    if plan.waypoints.len() != plan.labels.len() + 1 {
        return Err(SynthError::Invalid("plan needs one more waypoint than labels".into()));
    }
    if let Some(&bad) = plan.labels.iter().find(|&&l| l >= ts.num_labels()) {
        return Err(SynthError::Invalid(format!("label {bad} out of range")));
    }
    if let Some(&bad) = plan.waypoints.iter().find(|&&q| q >= ts.num_states()) {
        return Err(SynthError::Invalid(format!("waypoint {bad} out of range")));
    }
    let mut rec = Recorder { trajectory: vec![], deviations: vec![], first_violation: None, eps: opts.eps };
    let mut x = x0.to_vec();
    rec.deviation(dist(&x, ts.output(plan.waypoints[0])));
    for (k, &l) in plan.labels.iter().enumerate() {
        let u = ts.label(l);
        let samples = flow_sampled(sys, &x, u, opts.tau, opts.steps, opts.substeps)?;
        rec.interval(k, opts.tau, &samples, u);
        x = samples.last().expect("flow_sampled returns at least two points").clone();
        rec.deviation(dist(&x, ts.output(plan.waypoints[k + 1])));
    }
    let last_u = plan.labels.last().map_or_else(|| vec![0.0; ts.input_dim()], |&l| ts.label(l).to_vec());
    let t_end = opts.tau * plan.labels.len() as f64;
    Ok(rec.finish(t_end, x, last_u, plan.waypoints.clone(), plan.labels.clone()))
}

/// Runs the controller in feedback: at every sampling instant the concrete
/// state is quantized to the nearest abstract state, which selects the
/// label. The deviation is measured against the nearest predicted
/// successor. Stops after the last leg or `max_steps` intervals.
pub fn simulate_feedback(
    sys: &ControlSystem,
    ts: &TransitionSystem,
    ctrl: &Controller,
    start: usize,
    x0: &[f64],
    opts: &SimOptions,
    max_steps: usize,
) -> Result<SimResult, SynthError> {
    check_start(ts, x0, start, opts.eps)?;
    let mut rec = Recorder { trajectory: vec![], deviations: vec![], first_violation: None, eps: opts.eps };
    let mut x = x0.to_vec();
    let mut q = start;
    let mut leg = 0;
    let mut states = vec![q];
    let mut labels = vec![];
    rec.deviation(dist(&x, ts.output(q)));
    let mut last_u = vec![0.0; ts.input_dim()];
    while labels.len() < max_steps {
        while leg < ctrl.legs.len() && ctrl.targets[leg][q] {
            leg += 1;
        }
        if leg == ctrl.legs.len() {
            break;
        }
        let Some(l) = ctrl.label(leg, q) else {
            return Err(SynthError::Infeasible { leg, state: q });
        };
        let u = ts.label(l);
        let k = labels.len();
        let samples = flow_sampled(sys, &x, u, opts.tau, opts.steps, opts.substeps)?;
        rec.interval(k, opts.tau, &samples, u);
        x = samples.last().expect("flow_sampled returns at least two points").clone();
        let d = ts.successors(q, l).iter().map(|&p| dist(&x, ts.output(p as usize))).fold(f64::INFINITY, f64::min);
        rec.deviation(d);
        q = ts.nearest_state(&x).expect("model has states");
        states.push(q);
        labels.push(l);
        last_u = u.to_vec();
    }
    let t_end = opts.tau * labels.len() as f64;
    Ok(rec.finish(t_end, x, last_u, states, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ts::tests::random_system;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // 0 -a-> 1 -a-> 2, 1 -b-> {0, 2}, 3 isolated
    fn line() -> TransitionSystem {
        TransitionSystem::new(
            (0..4).map(|i| vec![i as f64]).collect(),
            vec![vec![0.0], vec![1.0]],
            [(0, 0, 1), (1, 0, 2), (1, 1, 0), (1, 1, 2)],
        )
        .unwrap()
    }

    fn mask(nq: usize, set: &[usize]) -> Vec<bool> {
        (0..nq).map(|q| set.contains(&q)).collect()
    }

    #[test]
    fn reach_ranks_and_policy() {
        let sol = solve_reach(&line(), &mask(4, &[2]), None);
        assert_eq!(sol.winning, vec![true, true, true, false]);
        assert_eq!(sol.rank, vec![Some(2), Some(1), Some(0), None]);
        assert_eq!(sol.policy, vec![Some(0), Some(0), None, None]);
    }

    #[test]
    fn nondeterminism_must_be_covered() {
        let t = TransitionSystem::new(
            (0..3).map(|i| vec![i as f64]).collect(),
            vec![vec![0.0]],
            [(0, 0, 1), (0, 0, 2), (2, 0, 2)],
        )
        .unwrap();
        assert!(!solve_reach(&t, &mask(3, &[1]), None).winning[0]);
        assert!(solve_reach(&t, &mask(3, &[1, 2]), None).winning[0]);
    }

    #[test]
    fn safe_set_restricts() {
        let sol = solve_reach(&line(), &mask(4, &[2]), Some(&mask(4, &[0, 2, 3])));
        assert_eq!(sol.winning, vec![false, false, true, false]);
    }

    #[test]
    fn sequence_plan() {
        let spec = SequenceSpec { legs: vec![vec![1], vec![1], vec![2]], safe: None, start: 0 };
        let (_, plan) = synth_sequence(&line(), &spec).unwrap();
        assert_eq!(plan.labels, vec![0, 0]);
        assert_eq!(plan.waypoints, vec![0, 1, 2]);
        assert_eq!(plan.leg_ends, vec![1, 1, 2]);
    }

    #[test]
    fn infeasible_leg_named() {
        let spec = SequenceSpec { legs: vec![vec![2], vec![0]], safe: None, start: 0 };
        assert_eq!(synth_sequence(&line(), &spec).unwrap_err(), SynthError::Infeasible { leg: 1, state: 2 });
        let spec = SequenceSpec { legs: vec![vec![9]], safe: None, start: 0 };
        assert!(matches!(synth_sequence(&line(), &spec), Err(SynthError::Invalid(_))));
    }

    fn brute_force_win(ts: &TransitionSystem, target: &[bool], q: usize, depth: usize) -> bool {
        target[q]
            || depth > 0
                && (0..ts.num_labels()).any(|l| {
                    let s = ts.successors(q, l);
                    !s.is_empty() && s.iter().all(|&p| brute_force_win(ts, target, p as usize, depth - 1))
                })
    }

    fn all_runs_reach(ts: &TransitionSystem, sol: &ReachSolution, target: &[bool], q: usize, budget: usize) -> bool {
        if target[q] {
            return true;
        }
        let Some(l) = sol.policy[q] else { return false };
        budget > 0 && ts.successors(q, l).iter().all(|&p| all_runs_reach(ts, sol, target, p as usize, budget - 1))
    }

    proptest! {
        #[test]
        fn reach_is_sound_and_complete(seed in any::<u64>(), n in 1usize..6, bits in any::<u8>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts = random_system(&mut rng, n);
            let target: Vec<bool> = (0..n).map(|q| bits >> q & 1 == 1).collect();
            let sol = solve_reach(&ts, &target, None);
            for q in 0..n {
                prop_assert_eq!(sol.winning[q], brute_force_win(&ts, &target, q, n));
                if sol.winning[q] {
                    prop_assert!(all_runs_reach(&ts, &sol, &target, q, sol.rank[q].unwrap()));
                }
            }
        }
    }

    #[test]
    fn open_loop_tracks_plan() {
        use crate::lattice::Rect;
        let sys =
            ControlSystem::parse(&["-x1 + u1"], Rect::new(vec![(-1.0, 1.0)]), Rect::new(vec![(-2.0, 2.0)])).unwrap();
        let (tau, eps) = (2f64.ln(), 0.3);
        // with u = 0 each interval halves the state
        let ts = TransitionSystem::new(
            vec![vec![0.0], vec![0.5], vec![1.0]],
            vec![vec![0.0]],
            [(2, 0, 1), (1, 0, 0), (0, 0, 0)],
        )
        .unwrap();
        let plan = Plan { start: 2, labels: vec![0, 0], waypoints: vec![2, 1, 0], leg_ends: vec![2] };
        let res = simulate_closed_loop(&sys, &ts, &plan, &[1.1], &SimOptions::new(tau, eps)).unwrap();
        assert!(res.tube.pass);
        assert_eq!(res.tube.deviations.len(), 3);
        assert!((res.tube.deviations[1] - 0.05).abs() < 1e-6);
        assert_eq!(res.trajectory.len(), 2 * 20 + 1);
        let csv = res.trajectory_csv();
        assert!(csv.starts_with("t,x1,u1\n"));
        assert_eq!(csv.lines().count(), 42);
        let err = simulate_closed_loop(&sys, &ts, &plan, &[1.5], &SimOptions::new(tau, eps)).unwrap_err();
        assert!(matches!(err, SynthError::StartTooFar { .. }));

        let spec = SequenceSpec { legs: vec![vec![0]], safe: None, start: 2 };
        let ctrl = synth_controller(&ts, &spec).unwrap();
        let fb = simulate_feedback(&sys, &ts, &ctrl, 2, &[0.9], &SimOptions::new(tau, eps), 10).unwrap();
        assert!(fb.tube.pass);
        assert_eq!(fb.tube.states, vec![2, 1, 0]);
    }
}
