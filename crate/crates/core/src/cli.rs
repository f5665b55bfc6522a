//! Command-line frontend: `synthesize`, `simulate`, `certify`, `obstruct`.
//!
//! Exit codes: 0 pass, 1 usage or runtime error, 2 property failure.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::backstepping::{synthesize, BacksteppingError, StageKind, Synthesis, SynthesisParams};
use crate::certification::{check_ag, check_ugs, fit_envelope, iss_verdict, CertError, PlantGain, UgsBound, UgsReport};
use crate::comparison::{make_class_k, ComparisonFunction, GainKind};
use crate::config::{ConfigError, GainChoice, LoadedConfig, RunConfig, SimulateSection};
use crate::cover::AnnulusCover;
use crate::expr::{parse_dynamics, EvalPoint, Expr, ParseError};
use crate::obstruction::obstruction_check_with;
use crate::simulation::{run_ensemble, sample_ball, ClosedLoop, Controller, Ensemble, EnsembleSpec, SimError, Status};
use crate::system::{check_assumptions, AssumptionGrid, AssumptionReport, SystemSpec};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "GTF_ISS_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "gtf-iss", version, about = "Periodic ISS backstepping: synthesis, simulation, certification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the periodic feedback and write feedback, cover and report artifacts.
    Synthesize(CommonArgs),
    /// Simulate the closed loop and write trajectory CSVs plus an index.
    Simulate(CommonArgs),
    /// Check stability, asymptotic gain and the ISS verdict on a simulated ensemble.
    Certify(CommonArgs),
    /// Winding-number check of a static feedback on the unit circle.
    Obstruct(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Proceed even if the plant fails the assumption screen.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("plant fails the assumption screen (rerun with --force to proceed): {0}")]
    Assumptions(String),
    #[error("synthesis failed: {0}")]
    Synthesis(#[from] BacksteppingError),
    #[error("simulation failed: {0}")]
    Simulation(#[from] SimError),
    #[error("certification failed: {0}")]
    Certification(#[from] CertError),
    #[error("bad feedback expression: {0}")]
    Feedback(String),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Feedback(e.to_string())
    }
}

/// Whether the checked property held.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Fail => 2,
        }
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return 1;
    }
    match run(&cli) {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_workers() -> Result<(), CliError> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {value:?}")))?;
    // A pool built earlier in the same process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Synthesize(a) => cmd_synthesize(&Context::load(a)?),
        Command::Simulate(a) => cmd_simulate(&Context::load(a)?),
        Command::Certify(a) => cmd_certify(&Context::load(a)?),
        Command::Obstruct(a) => cmd_obstruct(&Context::load(a)?),
    }
}

/// A loaded config with the command-line overrides applied.
pub struct Context {
    pub loaded: LoadedConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
}

impl Context {
    pub fn load(args: &CommonArgs) -> Result<Self, CliError> {
        let loaded = RunConfig::load(&args.config)?;
        let seed = args.seed.unwrap_or(loaded.config.seed);
        let out = args.out.clone().unwrap_or_else(|| loaded.config.out.clone());
        Ok(Context { loaded, seed, out, force: args.force })
    }

    fn params(&self) -> &SynthesisParams {
        &self.loaded.config.synthesize
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        let werr = |source| CliError::Write { path: path.clone(), source };
        fs::create_dir_all(&self.out).map_err(|source| CliError::Write { path: self.out.clone(), source })?;
        let mut f = fs::File::create(&path).map_err(werr)?;
        f.write_all(bytes).map_err(werr)?;
        Ok(path)
    }

    fn screen(&self) -> Result<AssumptionReport, CliError> {
        let report = check_assumptions(&self.loaded.system, &AssumptionGrid::default());
        if !report.passed() && !self.force {
            return Err(CliError::Assumptions(serde_json::to_string(&report).expect("report serializes")));
        }
        Ok(report)
    }

    fn synthesize(&self) -> Result<Synthesis, CliError> {
        Ok(synthesize(Arc::new(self.loaded.system.clone()), self.params())?)
    }

    fn simulate_section(&self) -> Result<&SimulateSection, CliError> {
        self.loaded.config.simulate.as_ref().ok_or(CliError::Config(ConfigError::MissingSection("simulate")))
    }
}

#[derive(Debug, Serialize)]
struct ControlTable {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    /// `controls[i][j] = u(times[i], states[j])`.
    controls: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct FeedbackArtifact<'a> {
    system: &'a SystemSpec,
    period: f64,
    seed: u64,
    kinds: &'a [StageKind],
    gains: &'a [ComparisonFunction],
    local_radii: Vec<Option<f64>>,
    params: &'a SynthesisParams,
    table: ControlTable,
}

#[derive(Debug, Serialize)]
struct CoverArtifact<'a> {
    stage: usize,
    cover: &'a AnnulusCover,
}

#[derive(Debug, Serialize)]
struct StageSummary<'a> {
    stage: usize,
    kind: StageKind,
    local_radius: Option<f64>,
    passed: bool,
    report: &'a crate::certification::DissipationReport,
}

const TABLE_TIMES: usize = 8;
const TABLE_STATES: usize = 64;
const TABLE_RADIUS: f64 = 2.0;

pub fn cmd_synthesize(ctx: &Context) -> Result<Outcome, CliError> {
    let assumptions = ctx.screen()?;
    let syn = ctx.synthesize()?;
    let law = &syn.law;
    let period = law.period();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let star = ctx.loaded.system.x_star().to_vec();
    let states: Vec<Vec<f64>> = (0..TABLE_STATES)
        .map(|_| sample_ball(&mut rng, star.len(), TABLE_RADIUS).iter().zip(&star).map(|(a, b)| a + b).collect())
        .collect();
    let times: Vec<f64> = (0..TABLE_TIMES).map(|i| period * i as f64 / TABLE_TIMES as f64).collect();
    let controls = times.iter().map(|&t| states.iter().map(|x| law.control(t, x)).collect()).collect();
    let min_fraction = ctx.params().min_pass_fraction;
    let artifact = FeedbackArtifact {
        system: &ctx.loaded.spec,
        period,
        seed: ctx.seed,
        kinds: law.kinds(),
        gains: &syn.gains,
        local_radii: syn.stages.iter().map(|s| s.local_radius).collect(),
        params: ctx.params(),
        table: ControlTable { times, states, controls },
    };
    ctx.write_json("assumptions.json", &assumptions)?;
    ctx.write_json("feedback.json", &artifact)?;
    let covers: Vec<CoverArtifact> = syn
        .stages
        .iter()
        .filter_map(|s| s.cover.as_deref().map(|c| CoverArtifact { stage: s.stage, cover: c }))
        .collect();
    ctx.write_json("cover.json", &covers)?;
    let reports: Vec<StageSummary> = syn
        .stages
        .iter()
        .map(|s| StageSummary {
            stage: s.stage,
            kind: s.kind,
            local_radius: s.local_radius,
            passed: s.report.passed(min_fraction),
            report: &s.report,
        })
        .collect();
    ctx.write_json("reports.json", &reports)?;
    for r in &reports {
        println!(
            "stage {}: {:?}, pass fraction {:.6}, {}",
            r.stage,
            r.kind,
            r.report.pass_fraction,
            verdict_word(r.passed)
        );
    }
    Ok(Outcome::from_pass(syn.reports_pass(min_fraction)))
}

fn verdict_word(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

/// Static feedback `u(t, x)` given as an expression.
struct ExprController {
    expr: Expr,
    period: f64,
}

impl Controller for ExprController {
    fn control(&self, t: f64, x: &[f64]) -> f64 {
        self.expr.eval(&EvalPoint { t, period: self.period, state: x, control: 0.0 })
    }
}

fn parse_feedback(text: &str, n: usize, allow_time: bool) -> Result<Expr, CliError> {
    let expr = parse_dynamics(text)?;
    if expr.uses_control() {
        return Err(CliError::Feedback(format!("{text:?} refers to the control itself")));
    }
    if !allow_time && expr.uses_time() {
        return Err(CliError::Feedback(format!("{text:?} uses a time atom; a static feedback depends on x only")));
    }
    if expr.max_state_index() > n {
        return Err(CliError::Feedback(format!(
            "{text:?} refers to x{} but the plant has {n} states",
            expr.max_state_index()
        )));
    }
    Ok(expr)
}

enum LoopLaw {
    Synthesized(Box<Synthesis>),
    Expression(ExprController),
}

impl LoopLaw {
    fn controller(&self) -> &dyn Controller {
        match self {
            LoopLaw::Synthesized(s) => &s.law,
            LoopLaw::Expression(e) => e,
        }
    }
}

fn loop_law(ctx: &Context, section: &SimulateSection) -> Result<LoopLaw, CliError> {
    match &section.feedback {
        Some(text) => {
            let expr = parse_feedback(text, ctx.loaded.system.n(), true)?;
            Ok(LoopLaw::Expression(ExprController { expr, period: ctx.loaded.system.period() }))
        }
        None => {
            ctx.screen()?;
            Ok(LoopLaw::Synthesized(Box::new(ctx.synthesize()?)))
        }
    }
}

/// Runs the configured ensemble; returns the equilibrium and the runs.
fn ensemble_of(ctx: &Context, section: &SimulateSection, law: &LoopLaw) -> Result<(Vec<f64>, Ensemble), CliError> {
    let sys = &ctx.loaded.system;
    let (center, radius, count) = match &section.x0 {
        Some(x0) => (x0.clone(), 0.0, 1),
        None => (section.center.clone().unwrap_or_else(|| sys.x_star().to_vec()), section.radius, section.count),
    };
    if center.len() != sys.n() {
        return Err(CliError::Usage(format!("initial state has {} entries, the plant has {}", center.len(), sys.n())));
    }
    let spec = EnsembleSpec {
        radius,
        count,
        seed: ctx.seed,
        t0: section.t0,
        horizon: section.horizon,
        h: section.h,
        blowup_radius: section.blowup_radius,
        disturbance: section.disturbance.clone(),
    };
    let field = ClosedLoop { sys, controller: law.controller() };
    Ok((sys.x_star().to_vec(), run_ensemble(&field, &center, &spec)?))
}

#[derive(Debug, Serialize)]
struct RunIndex {
    run: usize,
    file: String,
    x0: Vec<f64>,
    #[serde(flatten)]
    status: Status,
    samples: usize,
    disturbance_linf: f64,
    final_norm: f64,
    max_norm: f64,
}

#[derive(Debug, Serialize)]
struct SimulationIndex {
    ensemble_id: String,
    seed: u64,
    feedback: String,
    runs: Vec<RunIndex>,
}

pub fn cmd_simulate(ctx: &Context) -> Result<Outcome, CliError> {
    let section = ctx.simulate_section()?;
    let law = loop_law(ctx, section)?;
    let (star, ensemble) = ensemble_of(ctx, section, &law)?;
    let mut runs = Vec::with_capacity(ensemble.runs.len());
    for (i, tr) in ensemble.runs.iter().enumerate() {
        let file = format!("run_{i:04}.csv");
        let mut bytes = Vec::new();
        tr.write_csv(&mut bytes).expect("writing to memory");
        ctx.write_bytes(&file, &bytes)?;
        let shifted = |x: &[f64]| x.iter().zip(&star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        runs.push(RunIndex {
            run: i,
            file,
            x0: tr.initial().to_vec(),
            status: tr.status,
            samples: tr.times.len(),
            disturbance_linf: tr.disturbance_linf,
            final_norm: shifted(tr.last()),
            max_norm: tr.states.iter().map(|x| shifted(x)).fold(0.0, f64::max),
        });
    }
    let feedback = section.feedback.clone().unwrap_or_else(|| "synthesized".into());
    let all_completed = runs.iter().all(|r| r.status == Status::Completed);
    let index = SimulationIndex { ensemble_id: ensemble.id.clone(), seed: ctx.seed, feedback, runs };
    ctx.write_json("index.json", &index)?;
    println!(
        "{} runs, {} completed",
        index.runs.len(),
        index.runs.iter().filter(|r| r.status == Status::Completed).count()
    );
    Ok(Outcome::from_pass(all_completed))
}

fn linear_gain(slope: f64) -> ComparisonFunction {
    make_class_k(&[(0.0, 0.0), (1.0, slope)], GainKind::Kinf, Some(slope)).expect("positive slope")
}

#[derive(Debug, Serialize)]
struct AgGainSummary {
    kind: GainChoice,
    /// Gain evaluated at each run's disturbance norm.
    at_runs: Vec<f64>,
}

pub fn cmd_certify(ctx: &Context) -> Result<Outcome, CliError> {
    let section = ctx.simulate_section()?;
    let cert = ctx.loaded.config.certify.as_ref().ok_or(CliError::Config(ConfigError::MissingSection("certify")))?;
    let law = loop_law(ctx, section)?;
    let (star, ensemble) = ensemble_of(ctx, section, &law)?;
    let ugs: UgsReport = match &cert.upsilon {
        GainChoice::Identity => {
            check_ugs(&ensemble, &star, UgsBound::Supplied(&ComparisonFunction::identity()), cert.tol_ugs)
        }
        GainChoice::Linear { slope } => {
            check_ugs(&ensemble, &star, UgsBound::Supplied(&linear_gain(*slope)), cert.tol_ugs)
        }
        GainChoice::Fit { strictness } => {
            check_ugs(&ensemble, &star, UgsBound::Fit { strictness: *strictness }, cert.tol_ugs)
        }
        GainChoice::Certified => {
            return Err(CliError::Usage("the certified gain applies to certify.gamma only".into()))
        }
    };
    let gamma: Box<dyn Fn(f64) -> f64> = match (&cert.gamma, &law) {
        (GainChoice::Identity, _) => Box::new(|s| s),
        (GainChoice::Linear { slope }, _) => {
            let slope = *slope;
            Box::new(move |s| slope * s)
        }
        (GainChoice::Fit { strictness }, _) => {
            let pairs: Vec<(f64, f64)> = ensemble
                .runs
                .iter()
                .filter(|r| r.completed())
                .map(|r| (r.disturbance_linf, tail_max(r, &star, cert.tail_fraction)))
                .collect();
            let g = fit_envelope(&pairs, *strictness);
            Box::new(move |s| g.eval(s))
        }
        (GainChoice::Certified, LoopLaw::Synthesized(syn)) => {
            let gain = PlantGain::new(&syn.law, syn.gamma_n().clone(), 64, 8);
            let syn = syn.clone();
            Box::new(move |s| gain.eval(&syn.law, s))
        }
        (GainChoice::Certified, LoopLaw::Expression(_)) => {
            return Err(CliError::Usage("the certified gain needs the synthesized feedback".into()));
        }
    };
    let ag = check_ag(&ensemble, &star, gamma.as_ref(), cert.tail_fraction, cert.tol_ag)?;
    let verdict = iss_verdict(&ugs, &ag)?;
    let gain_summary = AgGainSummary { kind: cert.gamma.clone(), at_runs: ag.runs.iter().map(|r| r.bound).collect() };
    ctx.write_json("ugs.json", &ugs)?;
    ctx.write_json("ag.json", &ag)?;
    ctx.write_json("ag_gain.json", &gain_summary)?;
    ctx.write_json("verdict.json", &verdict)?;
    println!("ugs {}, ag {}, iss {}", verdict_word(verdict.ugs), verdict_word(verdict.ag), verdict_word(verdict.iss));
    Ok(Outcome::from_pass(verdict.iss))
}

fn tail_max(run: &crate::simulation::Trajectory, star: &[f64], fraction: f64) -> f64 {
    let (t0, t1) = (run.times[0], *run.times.last().unwrap());
    let start = t1 - fraction * (t1 - t0);
    run.times
        .iter()
        .zip(&run.states)
        .filter(|(t, _)| **t >= start)
        .map(|(_, x)| x.iter().zip(star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

pub fn cmd_obstruct(ctx: &Context) -> Result<Outcome, CliError> {
    let section =
        ctx.loaded.config.obstruct.as_ref().ok_or(CliError::Config(ConfigError::MissingSection("obstruct")))?;
    if ctx.loaded.system.n() != 2 {
        return Err(CliError::Usage("the winding-number check needs a planar plant".into()));
    }
    let sys = &ctx.loaded.system;
    let drift = sys.f_expr(1);
    if drift.uses_time() {
        return Err(CliError::Usage("the winding-number check needs a time-invariant first row".into()));
    }
    let expr = parse_feedback(&section.feedback, 2, false)?;
    let period = sys.period();
    let first = |x: [f64; 2]| drift.eval(&EvalPoint { t: 0.0, period, state: &x, control: 0.0 });
    let u = |x: [f64; 2]| expr.eval(&EvalPoint { t: 0.0, period, state: &x, control: 0.0 });
    let report = obstruction_check_with(first, u, section.m);
    let path = ctx.write_json("obstruction.json", &report)?;
    println!(
        "{}",
        fs::read_to_string(&path).map_err(|source| CliError::Write { path: path.clone(), source })?.trim_end()
    );
    Ok(Outcome::Pass)
}
