//! Run configuration and the `cluster`, `plan`, `evaluate` and `export`
//! pipelines behind the `p2hh` binary.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | configuration error |
//! | 3 | infeasible or unbounded program |
//! | 4 | node, iteration or time limit reached |
//! | 5 | input file missing or unreadable |
//! | 6 | dimension mismatch |

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conic_solver::{
    export_cbf, import_cbf, solve_misocp, BranchBoundParams, BranchingRule, ConicSolution, NodeSelection, SolveStatus,
    SolverError, SolverParams,
};
use crate::electrolyser::{build_cell_region, CellParameters};
use crate::evaluate::{
    kpi_report, profit_distribution, AffinePolicySolution, EvaluateError, Prices, Replayer, ViolationReport,
};
use crate::ies_model::{build_instance, Capacity, ChpRegion, Flexibility, IesInstance, IesParameters, ModelError};
use crate::reformulate::{compile_program, Compilation, ModeKind, ReformulateError, ReformulationMode};
use crate::scenarios::{
    bootstrap_resample, cluster_representative_days, estimate_moments, forecast_errors, ingest_scenarios,
    read_demand_file, read_profiles_file, read_weights_file, RepresentativeDaySet, ScenarioError, ScenarioSet,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable holding the worker-thread count (default 1).
pub const THREADS_ENV: &str = "P2HH_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Internal,
    Config,
    Infeasible,
    Limit,
    Load,
    Dimension,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Internal => 1,
            ExitKind::Config => 2,
            ExitKind::Infeasible => 3,
            ExitKind::Limit => 4,
            ExitKind::Load => 5,
            ExitKind::Dimension => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind.code()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn config_error(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::new(ExitKind::Config, format!("invalid `{field}`: {message}"))
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { field, message } => config_error(&field, message),
            ModelError::Dimension(m) => CliError::new(ExitKind::Dimension, m),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let kind = match e {
            ScenarioError::Config(_) => ExitKind::Config,
            _ => ExitKind::Load,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ReformulateError> for CliError {
    fn from(e: ReformulateError) -> Self {
        let kind = match e {
            ReformulateError::Mode(_) | ReformulateError::BigM(_) => ExitKind::Config,
            _ => ExitKind::Internal,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        let kind = match e {
            SolverError::Io(_) | SolverError::Parse { .. } => ExitKind::Load,
            SolverError::Dimension { .. } => ExitKind::Dimension,
            _ => ExitKind::Internal,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<EvaluateError> for CliError {
    fn from(e: EvaluateError) -> Self {
        let kind = match e {
            EvaluateError::Dimension(_) => ExitKind::Dimension,
            EvaluateError::Config { .. } => ExitKind::Config,
            EvaluateError::Io(_) => ExitKind::Internal,
            _ => ExitKind::Load,
        };
        CliError::new(kind, e.to_string())
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(ExitKind::Internal, format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// `day,hour,electric_mw,heat_mw`, one block per representative day.
    pub demand: Option<PathBuf>,
    /// `day,weight`
    pub weights: Option<PathBuf>,
    /// Training wind scenarios `scenario,day,hour,plant,mw`.
    pub scenarios: Option<PathBuf>,
    /// Held-out scenarios for evaluation; defaults to bootstrapping the
    /// training set.
    pub test_scenarios: Option<PathBuf>,
    /// Yearly `day,hour,electric_mw,heat_mw,wind_mw` profiles for clustering.
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Drcc,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    /// Overrides `params.epsilon` when given.
    pub epsilon: Option<f64>,
    pub p2hh: bool,
    pub boiler: bool,
    pub output: PathBuf,
    pub export_cbf: bool,
    /// Representative days produced by `cluster`.
    pub clusters: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::Drcc,
            epsilon: None,
            p2hh: true,
            boiler: true,
            output: PathBuf::from("out"),
            export_cbf: false,
            clusters: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    MostFractional,
    FirstFractional,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub rel_gap: f64,
    pub abs_gap: f64,
    pub node_limit: usize,
    /// Seconds; runs with a time limit are not reproducible.
    pub time_limit: Option<f64>,
    pub branching: Branching,
    pub depth_first: bool,
    pub batch: usize,
    pub tolerance: f64,
    pub max_iter: u32,
}

impl Default for SolverSection {
    fn default() -> Self {
        let b = BranchBoundParams::default();
        Self {
            rel_gap: b.rel_gap,
            abs_gap: b.abs_gap,
            node_limit: b.node_limit,
            time_limit: None,
            branching: Branching::MostFractional,
            depth_first: false,
            batch: b.batch,
            tolerance: b.solver.tol,
            max_iter: b.solver.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub clustering: u64,
    pub branching: u64,
    pub bootstrap: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            clustering: 1,
            branching: 1,
            bootstrap: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub samples: usize,
    pub electricity_price: f64,
    pub heat_price: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let p = Prices::default();
        Self {
            samples: 1000,
            electricity_price: p.electricity,
            heat_price: p.heat,
        }
    }
}

fn default_chp() -> ChpRegion {
    ChpRegion::default()
}

/// Everything a run needs; relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub params: IesParameters,
    #[serde(default = "default_chp")]
    pub chp: ChpRegion,
    #[serde(default)]
    pub cell: CellParameters,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub epsilon: Option<f64>,
    pub p2hh: Option<bool>,
    pub boiler: Option<bool>,
    pub output: Option<PathBuf>,
    pub export_cbf: bool,
    pub samples: Option<usize>,
    pub bootstrap_seed: Option<u64>,
    pub branching_seed: Option<u64>,
    pub clustering_seed: Option<u64>,
    pub clusters: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::new(ExitKind::Config, format!("configuration: {}", e.message())))
    }

    /// Reads, resolves paths against the file's directory and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::new(ExitKind::Load, format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve(base);
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.inputs.demand);
        fix(&mut self.inputs.weights);
        fix(&mut self.inputs.scenarios);
        fix(&mut self.inputs.test_scenarios);
        fix(&mut self.inputs.profiles);
        if self.run.output.is_relative() {
            self.run.output = base.join(&self.run.output);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.run.mode = m;
        }
        if let Some(e) = o.epsilon {
            self.run.epsilon = Some(e);
        }
        if let Some(v) = o.p2hh {
            self.run.p2hh = v;
        }
        if let Some(v) = o.boiler {
            self.run.boiler = v;
        }
        if let Some(p) = &o.output {
            self.run.output = p.clone();
        }
        self.run.export_cbf |= o.export_cbf;
        if let Some(n) = o.samples {
            self.evaluate.samples = n;
        }
        if let Some(s) = o.bootstrap_seed {
            self.seeds.bootstrap = s;
        }
        if let Some(s) = o.branching_seed {
            self.seeds.branching = s;
        }
        if let Some(s) = o.clustering_seed {
            self.seeds.clustering = s;
        }
        if let Some(k) = o.clusters {
            self.run.clusters = k;
        }
        if let Some(e) = self.run.epsilon {
            self.params.epsilon = e;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.params.epsilon;
        if !(eps > 0.0 && eps < 1.0) {
            let field = if self.run.epsilon.is_some() {
                "run.epsilon"
            } else {
                "params.epsilon"
            };
            return Err(config_error(field, format!("must lie in (0, 1), got {eps}")));
        }
        if self.run.mode == Mode::Gaussian && eps >= 0.5 {
            return Err(config_error(
                "run.epsilon",
                format!("the Gaussian mode needs ε < 0.5, got {eps}"),
            ));
        }
        self.params.validate()?;
        self.chp.validate()?;
        if self.evaluate.samples == 0 {
            return Err(config_error("evaluate.samples", "must be positive"));
        }
        Prices {
            electricity: self.evaluate.electricity_price,
            heat: self.evaluate.heat_price,
        }
        .validate()?;
        if self.run.clusters == 0 {
            return Err(config_error("run.clusters", "must be positive"));
        }
        self.branch_bound().validate().map_err(|e| config_error("solver", e))?;
        Ok(())
    }

    pub fn mode(&self) -> ReformulationMode {
        let kind = match self.run.mode {
            Mode::Drcc => ModeKind::Drcc,
            Mode::Gaussian => ModeKind::Gaussian,
        };
        ReformulationMode {
            kind,
            epsilon: self.params.epsilon,
        }
    }

    pub fn flexibility(&self) -> Flexibility {
        Flexibility {
            p2hh: self.run.p2hh,
            boiler: self.run.boiler,
        }
    }

    pub fn branch_bound(&self) -> BranchBoundParams {
        let s = &self.solver;
        BranchBoundParams {
            rel_gap: s.rel_gap,
            abs_gap: s.abs_gap,
            node_limit: s.node_limit,
            time_limit: s.time_limit,
            branching: match s.branching {
                Branching::MostFractional => BranchingRule::MostFractional,
                Branching::FirstFractional => BranchingRule::FirstFractional,
                Branching::Random => BranchingRule::Random,
            },
            node_selection: if s.depth_first {
                NodeSelection::DepthFirst
            } else {
                NodeSelection::BestBound
            },
            seed: self.seeds.branching,
            batch: s.batch,
            solver: SolverParams {
                tol: s.tolerance,
                max_iter: s.max_iter,
                time_limit: None,
            },
            ..BranchBoundParams::default()
        }
    }

    /// SHA-256 of the effective configuration, output location excluded
    /// so that reruns elsewhere produce identical artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.output = PathBuf::new();
        c.run.export_cbf = false;
        let text = toml::to_string(&c).unwrap_or_default();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// First line of every artifact.
    pub fn provenance(&self, seed: u64) -> String {
        format!("# p2hh v{VERSION} config={} seed={seed}", self.hash())
    }

    fn input(&self, field: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| config_error(&format!("inputs.{field}"), "is required for this command"))?;
        if !p.exists() {
            return Err(CliError::new(
                ExitKind::Load,
                format!("inputs.{field}: {} does not exist", p.display()),
            ));
        }
        Ok(p)
    }

    pub fn training_scenarios(&self) -> Result<ScenarioSet> {
        Ok(ingest_scenarios(self.input("scenarios", &self.inputs.scenarios)?)?)
    }

    /// Builds the planning instance from the demand, weight and scenario files.
    pub fn instance(&self) -> Result<IesInstance> {
        let demand = read_demand_file(self.input("demand", &self.inputs.demand)?)?;
        let weights = read_weights_file(self.input("weights", &self.inputs.weights)?)?;
        let days = RepresentativeDaySet::from_demand(&demand, weights)?;
        let scenarios = self.training_scenarios()?;
        let moments = estimate_moments(&scenarios)?;
        let cell = build_cell_region(&self.cell).map_err(|e| config_error("cell", e))?;
        Ok(
            build_instance(self.params.clone(), self.chp.clone(), &self.cell, cell, days, moments)?
                .with_flexibility(self.flexibility()),
        )
    }
}

/// Worker threads from [`THREADS_ENV`]; 1 when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(config_error(
                THREADS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

/// Runs `f` on a pool sized by [`thread_count`].
pub fn with_threads<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CliError::new(ExitKind::Internal, e.to_string()))?;
    pool.install(f)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_artifact(path: &Path, header: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{header}").map_err(|e| io_error(path, e))?;
    body(&mut buf).map_err(|e| io_error(path, e))?;
    fs::write(path, buf).map_err(|e| io_error(path, e))
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

/// What `cluster` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub days: usize,
    pub wcss: f64,
    pub files: Vec<PathBuf>,
}

/// K-means representative days from yearly profiles.
pub fn cluster_command(config: &RunConfig) -> Result<ClusterOutcome> {
    let profiles = read_profiles_file(config.input("profiles", &config.inputs.profiles)?)?;
    let clustering = cluster_representative_days(&profiles, config.run.clusters, config.seeds.clustering)?;
    let out = &config.run.output;
    create_dir(out)?;
    let header = config.provenance(config.seeds.clustering);
    let demand = out.join("demand.csv");
    write_artifact(&demand, &header, |b| {
        clustering.days.write_demand_csv(b).map_err(csv_io)
    })?;
    let weights = out.join("weights.csv");
    write_artifact(&weights, &header, |b| {
        clustering.days.write_weights_csv(b).map_err(csv_io)
    })?;
    let wind = out.join("wind_profiles.csv");
    write_artifact(&wind, &header, |b| {
        writeln!(b, "day,hour,wind_mw")?;
        for (r, day) in clustering.wind.iter().enumerate() {
            for (t, v) in day.iter().enumerate() {
                writeln!(b, "{},{},{v:?}", r + 1, t + 1)?;
            }
        }
        Ok(())
    })?;
    let assignment = out.join("assignment.csv");
    write_artifact(&assignment, &header, |b| {
        writeln!(b, "source_day,cluster")?;
        for (d, c) in clustering.assignment.iter().enumerate() {
            writeln!(b, "{},{}", d + 1, c + 1)?;
        }
        Ok(())
    })?;
    Ok(ClusterOutcome {
        days: clustering.days.days(),
        wcss: clustering.wcss,
        files: vec![demand, weights, wind, assignment],
    })
}

/// What `plan` produced.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub solution: ConicSolution,
    pub policy: Option<AffinePolicySolution>,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

impl PlanOutcome {
    /// Exit classification of the solve.
    pub fn check(&self) -> Result<()> {
        match self.solution.status {
            SolveStatus::Optimal => Ok(()),
            SolveStatus::Infeasible | SolveStatus::Unbounded => Err(CliError::new(
                ExitKind::Infeasible,
                format!("program is {}", self.solution.status.name()),
            )),
            SolveStatus::IterLimit => Err(CliError::new(
                ExitKind::Limit,
                format!("limit reached: {}", self.solution.message),
            )),
        }
    }
}

fn dims_line(instance: &IesInstance) -> String {
    format!(
        "dims days={} hours={} plants={} bits={}",
        instance.days(),
        instance.hours(),
        instance.plants(),
        instance.params.bits
    )
}

fn summary(config: &RunConfig, instance: &IesInstance, c: &Compilation, sol: &ConicSolution) -> String {
    let mut s = String::new();
    let mode = match config.run.mode {
        Mode::Drcc => "drcc",
        Mode::Gaussian => "gaussian",
    };
    let _ = writeln!(s, "mode = \"{mode}\"");
    let _ = writeln!(s, "epsilon = {:?}", config.params.epsilon);
    let _ = writeln!(s, "safety_factor = {:?}", c.factor);
    let _ = writeln!(s, "p2hh = {}", config.run.p2hh);
    let _ = writeln!(s, "boiler = {}", config.run.boiler);
    let _ = writeln!(s, "status = \"{}\"", sol.status.name());
    let _ = writeln!(s, "annualized_cost = {:?}", sol.objective);
    let _ = writeln!(s, "bound = {:?}", sol.bound);
    let _ = writeln!(s, "gap = {:?}", sol.gap);
    let _ = writeln!(s, "nodes = {}", sol.nodes);
    let _ = writeln!(s, "variables = {}", c.program.variables.len());
    let _ = writeln!(s, "binaries = {}", c.program.binaries().len());
    if sol.status == SolveStatus::Optimal {
        let idx = c.program.variable_index();
        let get = |name: &str| idx.get(name).map_or(0.0, |&i| sol.x[i]);
        let _ = writeln!(s, "\n[capacities]");
        let _ = writeln!(s, "cells = {}", get("cap.cells").round());
        let _ = writeln!(s, "converter_mw = {:?}", get("cap.converter"));
        let _ = writeln!(s, "compressor_kg_per_h = {:?}", get("cap.compressor"));
        let _ = writeln!(s, "tank_kg = {:?}", get("cap.tank"));
        let _ = writeln!(s, "boiler_mw = {:?}", get("cap.boiler"));
        let _ = writeln!(
            s,
            "stack_mw = {:?}",
            get("cap.cells").round() * instance.cell.max_corner_power()
        );
    }
    s
}

/// Compile, solve and write audit, solution, summary and optional CBF.
pub fn plan_command(config: &RunConfig) -> Result<PlanOutcome> {
    let instance = config.instance()?;
    let compilation = compile_program(&instance, config.mode())?;
    let out = &config.run.output;
    create_dir(out)?;
    let header = config.provenance(config.seeds.branching);
    let mut files = Vec::new();

    let audit = out.join("audit.csv");
    write_artifact(&audit, &header, |b| compilation.audit.write_csv(b).map_err(csv_io))?;
    files.push(audit);
    if config.run.export_cbf {
        let cbf = out.join("program.cbf");
        export_cbf(&compilation.program, &cbf)?;
        files.push(cbf);
    }

    let solution = solve_misocp(&compilation.program, &config.branch_bound())?;
    let text = summary(config, &instance, &compilation, &solution);
    let summary_path = out.join("summary.toml");
    write_artifact(&summary_path, &header, |b| b.write_all(text.as_bytes()))?;
    files.push(summary_path);

    let mut policy = None;
    if solution.status == SolveStatus::Optimal {
        let p = AffinePolicySolution::from_vector(&instance, &solution.x)?;
        let path = out.join("solution.csv");
        write_artifact(&path, &header, |b| p.write_csv(b, &[dims_line(&instance)]))?;
        files.push(path);
        policy = Some(p);
    }
    Ok(PlanOutcome {
        solution,
        policy,
        summary: text,
        files,
    })
}

/// What `evaluate` produced.
#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub violation: ViolationReport,
    pub files: Vec<PathBuf>,
}

fn check_solution_dims(text: &str, instance: &IesInstance) -> Result<()> {
    let expected = dims_line(instance);
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# dims ") {
            if format!("dims {rest}") != expected {
                return Err(CliError::new(
                    ExitKind::Dimension,
                    format!("solution has `{}`, the instance `{expected}`", rest.trim()),
                ));
            }
        }
    }
    Ok(())
}

/// Replays a `plan` solution on held-out or bootstrapped scenarios.
pub fn evaluate_command(config: &RunConfig, solution_path: &Path) -> Result<EvaluateOutcome> {
    let instance = config.instance()?;
    let text = fs::read_to_string(solution_path)
        .map_err(|e| CliError::new(ExitKind::Load, format!("{}: {e}", solution_path.display())))?;
    check_solution_dims(&text, &instance)?;
    let policy = AffinePolicySolution::read_csv(&instance, text.as_bytes())?;

    let source = match &config.inputs.test_scenarios {
        Some(_) => ingest_scenarios(config.input("test_scenarios", &config.inputs.test_scenarios)?)?,
        None => config.training_scenarios()?,
    };
    let test = bootstrap_resample(&source, config.evaluate.samples, config.seeds.bootstrap)?;
    let errors = forecast_errors(&test, &instance.moments)?;
    let replayer = Replayer::new(&instance, &policy)?;
    let dispatches = replayer.replay_all(&errors)?;
    let violation = ViolationReport::from_dispatches(&dispatches, replayer.inequalities());
    let prices = Prices {
        electricity: config.evaluate.electricity_price,
        heat: config.evaluate.heat_price,
    };
    let profit = profit_distribution(&policy, &dispatches, prices, &instance)?;
    let kpi = kpi_report(&policy, &dispatches, &instance)?;

    let out = &config.run.output;
    create_dir(out)?;
    let header = config.provenance(config.seeds.bootstrap);
    let mut files = Vec::new();
    let mut emit = |name: &str, body: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
        let path = out.join(name);
        write_artifact(&path, &header, body)?;
        files.push(path);
        Ok(())
    };
    emit("evaluation.toml", &|b| {
        writeln!(b, "samples = {}", violation.samples)?;
        writeln!(b, "violated_samples = {}", violation.violated_samples)?;
        writeln!(b, "violation_fraction = {:?}", violation.fraction())?;
        writeln!(b, "inequalities = {}", violation.inequalities)?;
        writeln!(
            b,
            "max_temperature_deviation = {:?}",
            violation.max_temperature_deviation
        )?;
        writeln!(b, "max_tank_deviation = {:?}", violation.max_tank_deviation)?;
        writeln!(b, "cells = {}", policy.cells())?;
        writeln!(b, "boiler_mw = {:?}", policy.capacity(Capacity::Boiler))?;
        Ok(())
    })?;
    emit("violation_histogram.csv", &|b| {
        violation.write_histogram_csv(b).map_err(csv_io)
    })?;
    emit("kpi.csv", &|b| kpi.write_csv(b).map_err(csv_io))?;
    emit("chp_points.csv", &|b| kpi.write_chp_csv(b).map_err(csv_io))?;
    emit("temperature.csv", &|b| kpi.write_temperature_csv(b).map_err(csv_io))?;
    emit("profit.csv", &|b| profit.write_csv(b).map_err(csv_io))?;
    Ok(EvaluateOutcome { violation, files })
}

/// Writes the compiled program as CBF and checks that it parses back.
pub fn export_command(config: &RunConfig, path: Option<&Path>) -> Result<PathBuf> {
    let instance = config.instance()?;
    let compilation = compile_program(&instance, config.mode())?;
    create_dir(&config.run.output)?;
    let path = path.map_or_else(|| config.run.output.join("program.cbf"), Path::to_path_buf);
    export_cbf(&compilation.program, &path)?;
    let back = import_cbf(&path)?;
    if back.canonical() != compilation.program.canonical() {
        return Err(CliError::new(
            ExitKind::Internal,
            "exported CBF does not parse back identically",
        ));
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "[inputs]\ndemand = \"d.csv\"\nweights = \"w.csv\"\nscenarios = \"s.csv\"\n"
    }

    #[test]
    fn defaults_fill_every_section() {
        let c = RunConfig::parse(minimal()).unwrap();
        assert_eq!(c.run.mode, Mode::Drcc);
        assert!(c.run.p2hh && c.run.boiler);
        assert_eq!(c.evaluate.samples, 1000);
        assert_eq!(c.evaluate.electricity_price, 55.0);
        assert_eq!(c.evaluate.heat_price, 45.0);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(&format!("{}[run]\nmodes = \"drcc\"\n", minimal())).unwrap_err();
        assert_eq!(err.kind, ExitKind::Config);
    }

    #[test]
    fn zero_epsilon_names_the_field() {
        let c = RunConfig::parse(&format!("{}[run]\nepsilon = 0.0\n", minimal())).unwrap();
        let mut c = c;
        c.apply(&Overrides::default());
        let err = c.validate().unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.message.contains("run.epsilon"), "{}", err.message);
    }

    #[test]
    fn gaussian_mode_needs_small_epsilon() {
        let mut c = RunConfig::parse(minimal()).unwrap();
        c.apply(&Overrides {
            mode: Some(Mode::Gaussian),
            epsilon: Some(0.6),
            ..Overrides::default()
        });
        assert_eq!(c.validate().unwrap_err().kind, ExitKind::Config);
    }

    #[test]
    fn zero_samples_is_a_config_error() {
        let mut c = RunConfig::parse(minimal()).unwrap();
        c.apply(&Overrides {
            samples: Some(0),
            ..Overrides::default()
        });
        let err = c.validate().unwrap_err();
        assert_eq!(err.kind, ExitKind::Config);
        assert!(err.message.contains("evaluate.samples"));
    }

    #[test]
    fn hash_tracks_the_effective_configuration() {
        let a = RunConfig::parse(minimal()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.apply(&Overrides {
            boiler: Some(false),
            ..Overrides::default()
        });
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.apply(&Overrides {
            output: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        });
        assert_eq!(a.hash(), c.hash());
        assert!(a.provenance(7).starts_with(&format!("# p2hh v{VERSION} config=")));
        assert!(a.provenance(7).ends_with(" seed=7"));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let kinds = [
            ExitKind::Internal,
            ExitKind::Config,
            ExitKind::Infeasible,
            ExitKind::Limit,
            ExitKind::Load,
            ExitKind::Dimension,
        ];
        let mut codes: Vec<i32> = kinds.iter().map(|k| k.code()).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn thread_count_defaults_to_one() {
        if std::env::var(THREADS_ENV).is_err() {
            assert_eq!(thread_count().unwrap(), 1);
        }
    }
}
