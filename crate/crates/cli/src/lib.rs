//! Batch front end for `symctl`: every subcommand reads one JSON config,
//! prints a canonical JSON report on stdout and writes artifacts under
//! `--out`.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use symctl::abstraction::{AbstractionError, VerifyOptions};
use symctl::json::to_canonical_string;
use symctl::lattice::{check_gas_condition, check_iss_condition, suggest_params};
use symctl::synth::{simulate_closed_loop, simulate_feedback, Controller, SimOptions, SimResult};
use symctl::sysmodel::{lyap_check_bounds, lyap_check_dissipation};
use symctl::ts::is_bisimilar;
use symctl::{
    build, greatest_bisim, synth_sequence, verify_relation_empirical, BuildOptions, Plan, SynthError, TransitionSystem,
};

pub use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    /// A check ran and failed.
    #[error("{message}")]
    Checked { kind: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Checked { .. } => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Checked { kind, .. } => kind,
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

impl From<AbstractionError> for CliError {
    fn from(e: AbstractionError) -> Self {
        let kind = match e {
            AbstractionError::ConditionViolated { .. } => "condition_violated",
            AbstractionError::MissingCertificate => return CliError::Config(e.to_string()),
            AbstractionError::Params(_) | AbstractionError::EmptyLattice(_) | AbstractionError::DimensionMismatch => {
                return CliError::Config(e.to_string())
            }
            AbstractionError::Divergence { .. } => "divergence",
        };
        CliError::Checked { kind, message: e.to_string() }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let kind = match e {
            SynthError::Infeasible { .. } => "infeasible",
            SynthError::Invalid(_) | SynthError::StartTooFar { .. } => return CliError::Config(e.to_string()),
            SynthError::Integrate(_) => "divergence",
        };
        CliError::Checked { kind, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "symctl", version, about = "Symbolic models and controllers for digital control systems")]
pub struct Cli {
    /// Cap on worker threads for the abstraction build.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Build even if the precision condition fails.
    #[arg(long)]
    pub force: bool,
    /// Use a prebuilt abstraction instead of building one.
    #[arg(long)]
    pub abstraction: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the precision condition and suggest parameters.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample-check the incremental Lyapunov certificate.
    Lyap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build the symbolic model.
    Abstract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a Graphviz file.
        #[arg(long)]
        dot: bool,
    },
    /// Greatest approximate bisimulation between two transition systems.
    Bisim {
        first: PathBuf,
        second: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the approximate bisimulation relation along concrete runs.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        label_samples: Option<usize>,
    },
    /// Synthesize a controller for the spec block.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the synthesized controller on the concrete system.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Plan written by `synth`; synthesized on the fly if absent.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-quantize the state at every sampling instant instead of
        /// replaying the plan open loop.
        #[arg(long)]
        feedback: bool,
        #[arg(long, default_value_t = 1000)]
        max_steps: usize,
    },
}

/// Result of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                Outcome { code, stdout: rendered, stderr: String::new() }
            } else {
                Outcome { code, stdout: String::new(), stderr: CliError::Usage(rendered).to_json() + "\n" }
            }
        }
    }
}

pub fn run(cli: Cli) -> Outcome {
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => Err(CliError::Usage(e.to_string())),
        },
        None => execute(cli.command),
    };
    match result {
        Ok(Report { pass, body }) => Outcome { code: if pass { 0 } else { 1 }, stdout: body, stderr: String::new() },
        Err(e) => Outcome { code: e.exit_code(), stdout: String::new(), stderr: e.to_json() + "\n" },
    }
}

struct Report {
    pass: bool,
    body: String,
}

impl Report {
    fn new(pass: bool, value: &impl Serialize) -> Result<Report, CliError> {
        Ok(Report { pass, body: canonical(value)? })
    }
}

fn canonical(value: &(impl Serialize + ?Sized)) -> Result<String, CliError> {
    to_canonical_string(value, true).map_err(|e| CliError::Io(e.to_string()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn load_ts(path: &Path) -> Result<TransitionSystem, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    TransitionSystem::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn abstraction(cfg: &Config, common: &Common) -> Result<TransitionSystem, CliError> {
    match &common.abstraction {
        Some(path) => {
            let ts = load_ts(path)?;
            if ts.dim() != cfg.system.n || ts.input_dim() != cfg.system.m {
                return Err(CliError::Config(format!("{} does not match the system dimensions", path.display())));
            }
            Ok(ts)
        }
        None => build_from(cfg, common.force),
    }
}

fn build_from(cfg: &Config, force: bool) -> Result<TransitionSystem, CliError> {
    let sys = cfg.system()?;
    let opts = BuildOptions { steps: cfg.params.steps, force };
    Ok(build(&sys, cfg.certificate.as_ref(), &cfg.abstraction_params(), &opts)?)
}

fn execute(command: Command) -> Result<Report, CliError> {
    match command {
        Command::Params { config } => params(&Config::load(&config)?),
        Command::Lyap { config } => lyap(&Config::load(&config)?),
        Command::Abstract { config, force, out, dot } => {
            let cfg = Config::load(&config)?;
            let ts = build_from(&cfg, force)?;
            let mut files = vec![];
            if let Some(dir) = &out {
                let text = ts.to_json().map_err(|e| CliError::Io(e.to_string()))?;
                files.push(write_file(dir, "abstraction.json", &text)?);
                if dot {
                    files.push(write_file(dir, "abstraction.dot", &ts.to_dot())?);
                }
            }
            Report::new(
                true,
                &json!({
                    "states": ts.num_states(),
                    "labels": ts.num_labels(),
                    "transitions": ts.num_transitions(),
                    "files": files,
                }),
            )
        }
        Command::Bisim { first, second, eps, out } => {
            if eps.is_nan() || eps < 0.0 {
                return Err(CliError::Usage(format!("--eps must be non-negative, got {eps}")));
            }
            let (t1, t2) = (load_ts(&first)?, load_ts(&second)?);
            let rel = greatest_bisim(&t1, &t2, eps).map_err(|e| CliError::Config(e.to_string()))?;
            let bisimilar = is_bisimilar(&t1, &t2, eps).map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(path) = &out {
                let text = rel.to_json().map_err(|e| CliError::Io(e.to_string()))?;
                std::fs::write(path, text)
                    .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
            }
            Report::new(bisimilar, &json!({ "bisimilar": bisimilar, "eps": eps, "pairs": rel.pairs.len() }))
        }
        Command::Verify { common, samples, horizon, seed, label_samples } => {
            let cfg = Config::load(&common.config)?;
            let ts = abstraction(&cfg, &common)?;
            let block = cfg.verify.clone().unwrap_or_default();
            let opts = VerifyOptions {
                init_samples: samples.unwrap_or(block.samples),
                horizon: horizon.unwrap_or(block.horizon),
                seed: seed.unwrap_or(block.seed),
                label_samples: label_samples.unwrap_or(block.label_samples),
                steps: cfg.params.steps,
            };
            let report = verify_relation_empirical(&cfg.system()?, &ts, &cfg.abstraction_params(), &opts)?;
            Report::new(report.pass, &report)
        }
        Command::Synth { common, out } => {
            let cfg = Config::load(&common.config)?;
            let spec = cfg.spec.as_ref().ok_or_else(|| CliError::Config("missing spec block".into()))?;
            let ts = abstraction(&cfg, &common)?;
            let (ctrl, plan) = synth_sequence(&ts, spec)?;
            let summary = plan_summary(&ts, &plan);
            if let Some(dir) = &out {
                write_file(dir, "controller.json", &canonical(&controller_doc(&ctrl))?)?;
                write_file(dir, "plan.json", &canonical(&plan)?)?;
            }
            Report::new(true, &summary)
        }
        Command::Simulate { common, plan, out, feedback, max_steps } => {
            let cfg = Config::load(&common.config)?;
            let sim_block = cfg.sim.as_ref().ok_or_else(|| CliError::Config("missing sim block".into()))?;
            let sys = cfg.system()?;
            let ts = abstraction(&cfg, &common)?;
            let mut opts = SimOptions::new(cfg.params.tau, cfg.params.eps);
            opts.steps = cfg.params.steps;
            opts.substeps = sim_block.substeps;
            let result: SimResult = if feedback {
                let spec = cfg.spec.as_ref().ok_or_else(|| CliError::Config("missing spec block".into()))?;
                let (ctrl, _) = synth_sequence(&ts, spec)?;
                simulate_feedback(&sys, &ts, &ctrl, spec.start, &sim_block.x0, &opts, max_steps)?
            } else {
                let plan = match &plan {
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                        serde_json::from_str::<Plan>(&text)
                            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                    }
                    None => {
                        let spec = cfg.spec.as_ref().ok_or_else(|| CliError::Config("missing spec block".into()))?;
                        synth_sequence(&ts, spec)?.1
                    }
                };
                simulate_closed_loop(&sys, &ts, &plan, &sim_block.x0, &opts)?
            };
            if let Some(dir) = &out {
                write_file(dir, "trajectory.csv", &result.trajectory_csv())?;
                write_file(dir, "tube.json", &canonical(&result.tube)?)?;
            }
            Report::new(result.tube.pass, &result.tube)
        }
    }
}

fn params(cfg: &Config) -> Result<Report, CliError> {
    let cert = cfg.certificate.as_ref().ok_or_else(|| CliError::Config("missing certificate block".into()))?;
    let p = cfg.abstraction_params();
    let cfgerr = |e: symctl::ParamError| CliError::Config(e.to_string());
    let gas = check_gas_condition(cert, &p).map_err(cfgerr)?;
    let iss = match cert.gamma {
        Some(_) => Some(check_iss_condition(cert, &p).map_err(cfgerr)?),
        None => None,
    };
    let suggested = match suggest_params(cert, p.eps, p.tau) {
        Ok(s) => json!(s),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let holds = iss.map_or(gas.holds, |r| r.holds);
    Report::new(holds, &json!({ "holds": holds, "iss": iss, "gas": gas, "suggested": suggested }))
}

fn lyap(cfg: &Config) -> Result<Report, CliError> {
    let sys = cfg.system()?;
    let (cert, grid) = cfg.lyapunov()?;
    let cfgerr = |e: symctl::ModelError| CliError::Config(e.to_string());
    let dissipation = lyap_check_dissipation(&sys, &cert, grid).map_err(cfgerr)?;
    let bounds = lyap_check_bounds(&cert, sys.state_box(), grid).map_err(cfgerr)?;
    let pass = dissipation.pass && bounds.pass;
    Report::new(pass, &json!({ "pass": pass, "dissipation": dissipation, "bounds": bounds }))
}

#[derive(Serialize)]
struct LegDoc {
    target: Vec<usize>,
    winning: Vec<usize>,
    policy: BTreeMap<usize, usize>,
}

#[derive(Serialize)]
struct ControllerDoc {
    legs: Vec<LegDoc>,
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
}

fn controller_doc(ctrl: &Controller) -> ControllerDoc {
    let legs = ctrl
        .legs
        .iter()
        .zip(&ctrl.targets)
        .map(|(sol, target)| LegDoc {
            target: indices(target),
            winning: indices(&sol.winning),
            policy: sol.policy.iter().enumerate().filter_map(|(q, l)| l.map(|l| (q, l))).collect(),
        })
        .collect();
    ControllerDoc { legs }
}

#[derive(Debug, Serialize)]
pub struct PlanSummary {
    pub start: usize,
    pub labels: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub waypoints: Vec<usize>,
    pub leg_ends: Vec<usize>,
}

pub fn plan_summary(ts: &TransitionSystem, plan: &Plan) -> PlanSummary {
    PlanSummary {
        start: plan.start,
        labels: plan.labels.clone(),
        inputs: plan.labels.iter().map(|&l| ts.label(l).to_vec()).collect(),
        waypoints: plan.waypoints.clone(),
        leg_ends: plan.leg_ends.clone(),
    }
}
