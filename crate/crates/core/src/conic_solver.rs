//! Continuous conic solves, branch-and-bound over binaries and Conic
//! Benchmark Format (CBF) exchange.
//!
//! Continuous relaxations are solved with the Clarabel interior-point
//! method. Rotated cones `2uv ≥ ‖w‖²` are passed as the equivalent
//! second-order cone `‖(u − v, √2·w)‖ ≤ u + v`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{BufRead, Write};
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ies_model::Sense;
use crate::reformulate::{Affine, ConicProgram, LinearRow, ProductLink, RotatedCone, SocBlock, VarKind};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("point has {got} coordinates, program has {expected} variables")]
    Dimension { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("conic backend: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

impl SolveStatus {
    pub fn name(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "Optimal",
            SolveStatus::Infeasible => "Infeasible",
            SolveStatus::Unbounded => "Unbounded",
            SolveStatus::IterLimit => "IterLimit",
        }
    }
}

/// Interior-point settings for one continuous solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    /// Relative feasibility and gap tolerance.
    pub tol: f64,
    pub max_iter: u32,
    /// Seconds; `None` means unlimited.
    pub time_limit: Option<f64>,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            time_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// One multiplier per linear row.
    pub row_duals: Vec<f64>,
    /// One multiplier vector per second-order cone (rhs first).
    pub soc_duals: Vec<Vec<f64>>,
    /// Multipliers of the equivalent second-order form of each rotated cone.
    pub rotated_duals: Vec<Vec<f64>>,
    pub objective: f64,
    /// Dual objective for continuous solves, best bound after branching.
    pub bound: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `|objective − bound| / max(1, |objective|)`
    pub gap: f64,
    /// Farkas ray `z` for infeasible, improving direction `x` for unbounded.
    pub certificate: Option<Vec<f64>>,
    pub iterations: u32,
    pub nodes: usize,
    pub message: String,
}

impl ConicSolution {
    fn empty(status: SolveStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            x: Vec::new(),
            row_duals: Vec::new(),
            soc_duals: Vec::new(),
            rotated_duals: Vec::new(),
            objective: f64::NAN,
            bound: f64::NAN,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
            gap: f64::NAN,
            certificate: None,
            iterations: 0,
            nodes: 0,
            message: message.into(),
        }
    }

    /// Status record as `key=value` lines.
    pub fn status_record(&self) -> String {
        format!(
            "status={}\nobjective={}\nbound={}\ngap={}\nprimal_residual={}\ndual_residual={}\nnodes={}\niterations={}\nmessage={}\n",
            self.status.name(),
            self.objective,
            self.bound,
            self.gap,
            self.primal_residual,
            self.dual_residual,
            self.nodes,
            self.iterations,
            self.message
        )
    }
}

/// `min qᵀx s.t. b − Ax ∈ K` in the layout handed to the backend.
#[derive(Debug, Clone)]
pub struct StandardForm {
    pub n: usize,
    /// Triplets `(row, col, value)` of `A`.
    pub a: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub q: Vec<f64>,
    pub cones: Vec<ConeBlock>,
    /// First standard-form row of each linear row.
    pub linear_rows: Vec<usize>,
    pub soc_rows: Vec<usize>,
    pub rotated_rows: Vec<usize>,
    /// Objective divisor applied to `q`.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeBlock {
    Zero(usize),
    Nonnegative(usize),
    SecondOrder(usize),
}

struct Builder {
    a: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl Builder {
    /// Appends a row whose slack equals `g(x) = terms·x + constant`.
    fn push(&mut self, terms: &[(usize, f64)], constant: f64) -> usize {
        let row = self.b.len();
        for (j, c) in terms {
            self.a.push((row, *j, -c));
        }
        self.b.push(constant);
        row
    }
}

impl StandardForm {
    /// Lowers `program` with variable bounds replaced by `lower`/`upper`.
    pub fn build(program: &ConicProgram, lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::build_with_apex(program, lower, upper, &[])
    }

    /// As [`StandardForm::build`], with the second-order blocks flagged in
    /// `apex` pinned to the cone apex by equality rows.
    pub fn build_with_apex(program: &ConicProgram, lower: &[f64], upper: &[f64], apex: &[bool]) -> Result<Self> {
        program.validate().map_err(SolverError::Malformed)?;
        let pinned = |k: usize| apex.get(k).copied().unwrap_or(false);
        let n = program.variables.len();
        let mut bld = Builder {
            a: Vec::new(),
            b: Vec::new(),
        };
        let mut cones = Vec::new();
        let mut linear_rows = vec![0; program.linear.len()];

        let mut zero = 0;
        for (k, r) in program.linear.iter().enumerate() {
            if r.sense == Sense::Eq {
                linear_rows[k] = bld.push(&negated(&r.terms), r.rhs);
                zero += 1;
            }
        }
        // fixed variables as equalities keep the interior of the cone nonempty
        for j in 0..n {
            if lower[j] == upper[j] {
                bld.push(&[(j, -1.0)], lower[j]);
                zero += 1;
            }
        }
        let mut soc_rows = vec![0; program.socs.len()];
        for (k, c) in program.socs.iter().enumerate() {
            if pinned(k) {
                soc_rows[k] = bld.push(&c.rhs.terms, c.rhs.constant);
                for comp in &c.components {
                    bld.push(&comp.terms, comp.constant);
                }
                zero += 1 + c.components.len();
            }
        }
        if zero > 0 {
            cones.push(ConeBlock::Zero(zero));
        }
        let mut nonneg = 0;
        for (k, r) in program.linear.iter().enumerate() {
            match r.sense {
                Sense::Eq => continue,
                Sense::Le => linear_rows[k] = bld.push(&negated(&r.terms), r.rhs),
                Sense::Ge => linear_rows[k] = bld.push(&r.terms, -r.rhs),
            };
            nonneg += 1;
        }
        for j in 0..n {
            if lower[j] == upper[j] {
                continue;
            }
            if lower[j].is_finite() {
                bld.push(&[(j, 1.0)], -lower[j]);
                nonneg += 1;
            }
            if upper[j].is_finite() {
                bld.push(&[(j, -1.0)], upper[j]);
                nonneg += 1;
            }
        }
        if nonneg > 0 {
            cones.push(ConeBlock::Nonnegative(nonneg));
        }
        for (k, s) in program.socs.iter().enumerate() {
            if pinned(k) {
                continue;
            }
            soc_rows[k] = bld.push(&s.rhs.terms, s.rhs.constant);
            for c in &s.components {
                bld.push(&c.terms, c.constant);
            }
            cones.push(ConeBlock::SecondOrder(1 + s.components.len()));
        }
        let mut rotated_rows = Vec::with_capacity(program.rotated.len());
        let r2 = std::f64::consts::SQRT_2;
        for c in &program.rotated {
            let sum = Affine::new(
                c.u.terms.iter().chain(&c.v.terms).copied().collect(),
                c.u.constant + c.v.constant,
            );
            let diff = Affine::new(
                c.u.terms
                    .iter()
                    .copied()
                    .chain(c.v.terms.iter().map(|(i, v)| (*i, -v)))
                    .collect(),
                c.u.constant - c.v.constant,
            );
            rotated_rows.push(bld.push(&sum.terms, sum.constant));
            bld.push(&diff.terms, diff.constant);
            for w in &c.w {
                let w = w.scaled(r2);
                bld.push(&w.terms, w.constant);
            }
            cones.push(ConeBlock::SecondOrder(2 + c.w.len()));
        }
        let mut q = vec![0.0; n];
        for (i, c) in &program.objective.terms {
            q[*i] += c;
        }
        let scale = q.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        q.iter_mut().for_each(|c| *c /= scale);
        Ok(Self {
            n,
            a: bld.a,
            b: bld.b,
            q,
            cones,
            linear_rows,
            soc_rows,
            rotated_rows,
            scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.b.len()
    }

    /// `‖Aᵀz‖∞` and `bᵀz`; a primal infeasibility ray has the first near zero
    /// and the second negative.
    pub fn farkas(&self, z: &[f64]) -> (f64, f64) {
        let mut atz = vec![0.0; self.n];
        for (i, j, v) in &self.a {
            atz[*j] += v * z[*i];
        }
        let norm = atz.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bz = self.b.iter().zip(z).map(|(b, z)| b * z).sum();
        (norm, bz)
    }
}

fn negated(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    terms.iter().map(|(i, c)| (*i, -c)).collect()
}

fn bounds_of(program: &ConicProgram) -> (Vec<f64>, Vec<f64>) {
    (
        program.variables.iter().map(|v| v.lower).collect(),
        program.variables.iter().map(|v| v.upper).collect(),
    )
}

/// Solves the continuous relaxation (integrality ignored).
pub fn solve_continuous(program: &ConicProgram, params: &SolverParams) -> Result<ConicSolution> {
    let (lo, hi) = bounds_of(program);
    solve_with_bounds(program, &lo, &hi, params)
}

/// Continuous solve with overridden variable bounds.
///
/// Second-order blocks forced to their apex leave the feasible set without
/// interior, and the interior-point iterates then stall short of full
/// accuracy. When that happens the blocks found at the apex are pinned
/// there by equalities and the problem is solved again.
pub fn solve_with_bounds(
    program: &ConicProgram,
    lower: &[f64],
    upper: &[f64],
    params: &SolverParams,
) -> Result<ConicSolution> {
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return Ok(ConicSolution::empty(SolveStatus::Infeasible, "empty variable bounds"));
    }
    let mut best = backend_solve(program, lower, upper, params, &[])?;
    let mut apex = vec![false; program.socs.len()];
    for _ in 0..APEX_ROUNDS {
        if best.x.is_empty() || best.message == "Solved" {
            break;
        }
        let mut grown = false;
        for (k, at) in apex_blocks(program, &best.x).into_iter().enumerate() {
            if at && !apex[k] {
                apex[k] = true;
                grown = true;
            }
        }
        if !grown {
            break;
        }
        let next = backend_solve(program, lower, upper, params, &apex)?;
        if next.status != SolveStatus::Optimal {
            break;
        }
        best = next;
    }
    Ok(best)
}

/// Re-solves allowed while new apex blocks keep appearing.
const APEX_ROUNDS: usize = 3;

/// Largest value of a block's right-hand side and norm counted as the apex.
pub const APEX_TOLERANCE: f64 = 1e-5;

fn apex_blocks(program: &ConicProgram, x: &[f64]) -> Vec<bool> {
    program
        .socs
        .iter()
        .map(|b| b.rhs.eval(x).abs() <= APEX_TOLERANCE && b.norm(x) <= APEX_TOLERANCE)
        .collect()
}

fn backend_solve(
    program: &ConicProgram,
    lower: &[f64],
    upper: &[f64],
    params: &SolverParams,
    apex: &[bool],
) -> Result<ConicSolution> {
    let sf = StandardForm::build_with_apex(program, lower, upper, apex)?;
    let m = sf.rows();
    let n = sf.n;
    let (mut ii, mut jj, mut vv) = (
        Vec::with_capacity(sf.a.len()),
        Vec::with_capacity(sf.a.len()),
        Vec::with_capacity(sf.a.len()),
    );
    for (i, j, v) in &sf.a {
        ii.push(*i);
        jj.push(*j);
        vv.push(*v);
    }
    let a = CscMatrix::new_from_triplets(m, n, ii, jj, vv);
    let p = CscMatrix::zeros((n, n));
    let cones: Vec<SupportedConeT<f64>> = sf
        .cones
        .iter()
        .map(|c| match *c {
            ConeBlock::Zero(d) => SupportedConeT::ZeroConeT(d),
            ConeBlock::Nonnegative(d) => SupportedConeT::NonnegativeConeT(d),
            ConeBlock::SecondOrder(d) => SupportedConeT::SecondOrderConeT(d),
        })
        .collect();
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_feas(params.tol)
        .tol_gap_abs(params.tol)
        .tol_gap_rel(params.tol)
        .max_iter(params.max_iter)
        .time_limit(params.time_limit.unwrap_or(f64::INFINITY))
        .presolve_enable(false)
        .max_threads(1)
        .build()
        .map_err(|e| SolverError::Backend(format!("{e:?}")))?;
    let mut solver = DefaultSolver::new(&p, &sf.q, &a, &sf.b, &cones, settings)
        .map_err(|e| SolverError::Backend(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved if sol.r_prim.max(sol.r_dual) <= params.tol.sqrt() => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::IterLimit,
    };
    let constant = program.objective.constant;
    let mut out = ConicSolution::empty(status, format!("{:?}", sol.status));
    out.iterations = sol.iterations;
    out.primal_residual = sol.r_prim;
    out.dual_residual = sol.r_dual;
    match status {
        SolveStatus::Infeasible => {
            out.certificate = Some(sol.z.clone());
            out.objective = f64::INFINITY;
            out.bound = f64::INFINITY;
        }
        SolveStatus::Unbounded => {
            out.certificate = Some(sol.x.clone());
            out.objective = f64::NEG_INFINITY;
            out.bound = f64::NEG_INFINITY;
        }
        SolveStatus::Optimal | SolveStatus::IterLimit => {
            out.x = sol.x.clone();
            out.objective = program.objective.eval(&out.x);
            out.bound = sol.obj_val_dual * sf.scale + constant;
            out.gap = (out.objective - out.bound).abs() / out.objective.abs().max(1.0);
            out.row_duals = sf.linear_rows.iter().map(|r| sol.z[*r]).collect();
            let slices = |starts: &[usize], dims: Vec<usize>| -> Vec<Vec<f64>> {
                starts
                    .iter()
                    .zip(dims)
                    .map(|(s, d)| sol.z[*s..*s + d].to_vec())
                    .collect()
            };
            out.soc_duals = slices(
                &sf.soc_rows,
                program.socs.iter().map(|s| 1 + s.components.len()).collect(),
            );
            out.rotated_duals = slices(
                &sf.rotated_rows,
                program.rotated.iter().map(|c| 2 + c.w.len()).collect(),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchingRule {
    /// Binary closest to ½, ties by lowest index.
    MostFractional,
    /// Lowest-index fractional binary.
    FirstFractional,
    /// Uniform among fractional binaries, seeded per node.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeSelection {
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchBoundParams {
    pub rel_gap: f64,
    pub abs_gap: f64,
    pub node_limit: usize,
    /// Seconds; `None` means unlimited. A time limit makes the incumbent
    /// depend on machine speed.
    pub time_limit: Option<f64>,
    pub branching: BranchingRule,
    pub node_selection: NodeSelection,
    pub seed: u64,
    /// Nodes solved concurrently per round. Results are processed in the
    /// order the nodes were selected, so the outcome does not depend on
    /// the thread count.
    pub batch: usize,
    pub integrality_tol: f64,
    pub solver: SolverParams,
}

impl Default for BranchBoundParams {
    fn default() -> Self {
        Self {
            rel_gap: 1e-6,
            abs_gap: 1e-9,
            node_limit: 100_000,
            time_limit: None,
            branching: BranchingRule::MostFractional,
            node_selection: NodeSelection::BestBound,
            seed: 0,
            batch: 8,
            integrality_tol: 1e-6,
            solver: SolverParams::default(),
        }
    }
}

impl BranchBoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_gap >= 0.0 && self.abs_gap >= 0.0) {
            return Err(SolverError::Malformed("gaps must be nonnegative".into()));
        }
        if self.node_limit == 0 || self.batch == 0 || self.time_limit.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return Err(SolverError::Malformed("limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: usize,
    depth: usize,
    bound: f64,
    fixings: Vec<(usize, f64)>,
}

struct Ranked {
    key: (f64, usize),
    node: Node,
    rule: NodeSelection,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    // max-heap: the preferred node compares greatest
    fn cmp(&self, other: &Self) -> Ordering {
        match self.rule {
            NodeSelection::BestBound => other.key.0.total_cmp(&self.key.0).then(other.key.1.cmp(&self.key.1)),
            NodeSelection::DepthFirst => self
                .node
                .depth
                .cmp(&other.node.depth)
                .then(other.key.0.total_cmp(&self.key.0))
                .then(other.key.1.cmp(&self.key.1)),
        }
    }
}

fn node_bounds(base: &(Vec<f64>, Vec<f64>), fixings: &[(usize, f64)]) -> (Vec<f64>, Vec<f64>) {
    let (mut lo, mut hi) = base.clone();
    for (i, v) in fixings {
        lo[*i] = *v;
        hi[*i] = *v;
    }
    (lo, hi)
}

fn choose_branch(
    x: &[f64],
    binaries: &[usize],
    fixed: &[(usize, f64)],
    params: &BranchBoundParams,
    node_id: usize,
) -> Option<usize> {
    let fractional: Vec<(usize, f64)> = binaries
        .iter()
        .filter(|b| !fixed.iter().any(|(i, _)| i == *b))
        .map(|b| (*b, (x[*b] - x[*b].round()).abs()))
        .filter(|(_, f)| *f > params.integrality_tol)
        .collect();
    if fractional.is_empty() {
        return None;
    }
    match params.branching {
        BranchingRule::FirstFractional => fractional.first().map(|f| f.0),
        BranchingRule::MostFractional => fractional
            .iter()
            .fold(None::<(usize, f64)>, |best, &(i, f)| match best {
                Some((_, bf)) if bf >= f => best,
                _ => Some((i, f)),
            })
            .map(|b| b.0),
        BranchingRule::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(node_id as u64);
            Some(fractional[rng.random_range(0..fractional.len())].0)
        }
    }
}

struct Incumbent {
    objective: f64,
    x: Vec<f64>,
}

/// Branch-and-bound over the binaries of `program`.
pub fn solve_misocp(program: &ConicProgram, params: &BranchBoundParams) -> Result<ConicSolution> {
    params.validate()?;
    let start = Instant::now();
    let binaries = program.binaries();
    let base = bounds_of(program);
    let tol_for = |inc: f64| params.abs_gap.max(params.rel_gap * inc.abs());

    let mut heap = BinaryHeap::new();
    let mut next_id = 0usize;
    let mut push = |heap: &mut BinaryHeap<Ranked>, depth: usize, bound: f64, fixings: Vec<(usize, f64)>| {
        heap.push(Ranked {
            key: (bound, next_id),
            node: Node {
                id: next_id,
                depth,
                bound,
                fixings,
            },
            rule: params.node_selection,
        });
        next_id += 1;
    };
    push(&mut heap, 0, f64::NEG_INFINITY, Vec::new());

    let mut incumbent: Option<Incumbent> = None;
    let mut nodes = 0usize;
    let mut iterations = 0u32;
    let mut limited = false;
    let mut unbounded = false;
    let mut troubled = 0usize;
    let mut unresolved = 0usize;

    while !heap.is_empty() {
        if nodes >= params.node_limit || params.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() > t) {
            limited = true;
            break;
        }
        let mut batch = Vec::new();
        while batch.len() < params.batch.min(params.node_limit - nodes) {
            let Some(r) = heap.pop() else { break };
            if let Some(inc) = &incumbent {
                if r.node.bound >= inc.objective - tol_for(inc.objective) {
                    continue;
                }
            }
            batch.push(r.node);
        }
        if batch.is_empty() {
            continue;
        }
        let results: Vec<Result<ConicSolution>> = batch
            .par_iter()
            .map(|node| {
                let (lo, hi) = node_bounds(&base, &node.fixings);
                solve_with_bounds(program, &lo, &hi, &params.solver)
            })
            .collect();
        for (node, res) in batch.into_iter().zip(results) {
            nodes += 1;
            let sol = res?;
            iterations += sol.iterations;
            match sol.status {
                SolveStatus::Infeasible => continue,
                SolveStatus::Unbounded => {
                    unbounded = true;
                    break;
                }
                SolveStatus::IterLimit => troubled += 1,
                SolveStatus::Optimal => {}
            }
            // an inaccurate relaxation only inherits the parent bound
            let bound = if sol.status == SolveStatus::Optimal {
                sol.bound.min(sol.objective).max(node.bound)
            } else {
                node.bound
            };
            if let Some(inc) = &incumbent {
                if bound >= inc.objective - tol_for(inc.objective) {
                    continue;
                }
            }
            let branch = if sol.x.is_empty() {
                // no usable point: split on the first free binary
                match binaries.iter().find(|b| !node.fixings.iter().any(|(i, _)| i == *b)) {
                    Some(b) => Some(*b),
                    None => {
                        unresolved += 1;
                        continue;
                    }
                }
            } else {
                choose_branch(&sol.x, &binaries, &node.fixings, params, node.id)
            };
            match branch {
                None => {
                    // integral relaxation: fix the binaries and re-solve
                    let mut fixings = node.fixings.clone();
                    for b in &binaries {
                        if !fixings.iter().any(|(i, _)| i == b) {
                            fixings.push((*b, sol.x[*b].round()));
                        }
                    }
                    let first =
                        (fixings.len() == node.fixings.len() && sol.status == SolveStatus::Optimal).then_some(sol);
                    match solve_leaf(program, &base, &fixings, params, first)? {
                        Leaf::Infeasible => {}
                        Leaf::Unresolved => unresolved += 1,
                        Leaf::Feasible(objective, x) => {
                            if incumbent.as_ref().is_none_or(|inc| objective < inc.objective) {
                                incumbent = Some(Incumbent { objective, x });
                            }
                        }
                    }
                }
                Some(b) => {
                    for v in [0.0, 1.0] {
                        let mut f = node.fixings.clone();
                        f.push((b, v));
                        push(&mut heap, node.depth + 1, bound, f);
                    }
                }
            }
        }
        if unbounded {
            break;
        }
    }

    if unbounded {
        let mut out = ConicSolution::empty(SolveStatus::Unbounded, "relaxation unbounded");
        out.nodes = nodes;
        return Ok(out);
    }
    let mut notes = Vec::new();
    if troubled > 0 {
        notes.push(format!("{troubled} node relaxations solved to reduced accuracy"));
    }
    if unresolved > 0 {
        notes.push(format!("{unresolved} leaves could not be resolved"));
    }
    let open_bound = heap.iter().map(|r| r.node.bound).fold(f64::INFINITY, f64::min);
    let Some(inc) = incumbent else {
        let status = if limited || unresolved > 0 {
            SolveStatus::IterLimit
        } else {
            SolveStatus::Infeasible
        };
        notes.push(format!("no incumbent after {nodes} nodes"));
        let mut out = ConicSolution::empty(status, notes.join("; "));
        out.nodes = nodes;
        return Ok(out);
    };
    let x = polish(program, &inc.x, &binaries);
    let objective = program.objective.eval(&x);
    let bound = open_bound.min(objective);
    let status = if limited || unresolved > 0 {
        SolveStatus::IterLimit
    } else {
        SolveStatus::Optimal
    };
    let mut out = ConicSolution::empty(status, notes.join("; "));
    let report = verify_point(program, &x, params.solver.tol)?;
    out.primal_residual = report.max_violation();
    out.dual_residual = 0.0;
    out.x = x;
    out.objective = objective;
    out.bound = bound;
    out.gap = (objective - bound).abs() / objective.abs().max(1.0);
    out.nodes = nodes;
    out.iterations = iterations;
    Ok(out)
}

enum Leaf {
    Feasible(f64, Vec<f64>),
    Infeasible,
    Unresolved,
}

/// Solves the continuous problem left once every binary is fixed. A solve
/// that stalls is retried at reduced accuracy and its point accepted only
/// if it passes the feasibility check.
fn solve_leaf(
    program: &ConicProgram,
    base: &(Vec<f64>, Vec<f64>),
    fixings: &[(usize, f64)],
    params: &BranchBoundParams,
    known: Option<ConicSolution>,
) -> Result<Leaf> {
    let (lo, hi) = node_bounds(base, fixings);
    let accept = |sol: ConicSolution| {
        let mut x = sol.x;
        for (i, v) in fixings {
            x[*i] = *v;
        }
        Leaf::Feasible(program.objective.eval(&x), x)
    };
    let sol = match known {
        Some(sol) => sol,
        None => solve_with_bounds(program, &lo, &hi, &params.solver)?,
    };
    match sol.status {
        SolveStatus::Optimal => return Ok(accept(sol)),
        SolveStatus::Infeasible => return Ok(Leaf::Infeasible),
        _ => {}
    }
    let loose = SolverParams {
        tol: (params.solver.tol * 100.0).max(1e-7),
        max_iter: params.solver.max_iter * 2,
        ..params.solver
    };
    let retry = solve_with_bounds(program, &lo, &hi, &loose)?;
    match retry.status {
        SolveStatus::Infeasible => Ok(Leaf::Infeasible),
        _ if retry.x.is_empty() => Ok(Leaf::Unresolved),
        _ => {
            let Leaf::Feasible(obj, x) = accept(retry) else {
                unreachable!()
            };
            if verify_point(program, &x, REDUCED_ACCURACY)?.feasible {
                Ok(Leaf::Feasible(obj, x))
            } else {
                Ok(Leaf::Unresolved)
            }
        }
    }
}

/// Feasibility tolerance for points from stalled solves.
pub const REDUCED_ACCURACY: f64 = 1e-6;

/// Projection rounds, each holding the constraints the last one broke.
const POLISH_ROUNDS: usize = 12;

/// Relative violation above which polish holds a constraint in place.
const POLISH_SLACK: f64 = 1e-11;

/// Upper limit on iterative refinement steps in a projection.
const REFINEMENT_STEPS: usize = 50;

/// Residual, relative to the right-hand side, at which a projection counts.
const CONVERGED: f64 = 1e-11;

/// Size below which polish pins a cone block to its apex.
const POLISH_APEX: f64 = 1e-7;

type Row = (Vec<(usize, f64)>, f64);

/// Least-norm correction of the continuous coordinates so that equality
/// rows and product links hold to rounding precision. Binaries stay fixed.
/// Blocks at the cone apex are pinned there. Bounds, inequality rows and
/// cones broken by a projection are held in place and the projection is
/// repeated from the original point.
pub fn polish(program: &ConicProgram, x: &[f64], fixed: &[usize]) -> Vec<f64> {
    let n = program.variables.len();
    let mut frozen = vec![false; n];
    let mut start = x.to_vec();
    for i in fixed {
        frozen[*i] = true;
        start[*i] = start[*i].round();
    }
    for (i, v) in program.variables.iter().enumerate() {
        if v.lower == v.upper {
            frozen[i] = true;
            start[i] = v.lower;
        } else if !frozen[i] && (start[i] < v.lower || start[i] > v.upper) {
            frozen[i] = true;
            start[i] = start[i].clamp(v.lower, v.upper);
        }
    }
    // product pins first so dependent rows are dropped from the rest
    let mut base: Vec<Row> = Vec::new();
    for ProductLink { product, bit, cell } in &program.products {
        let z = start[*bit].round();
        if z == 0.0 {
            base.push((vec![(*product, 1.0)], 0.0));
        } else {
            base.push((vec![(*product, 1.0), (*cell, -z)], 0.0));
        }
    }
    base.extend(
        program
            .linear
            .iter()
            .filter(|r| r.sense == Sense::Eq)
            .map(|r| (r.terms.clone(), r.rhs)),
    );
    let apex: Vec<bool> = program
        .socs
        .iter()
        .map(|b| b.rhs.eval(&start).abs() <= POLISH_APEX && b.norm(&start) <= POLISH_APEX)
        .collect();
    for b in program.socs.iter().zip(&apex).filter(|(_, a)| **a).map(|(b, _)| b) {
        for a in std::iter::once(&b.rhs).chain(&b.components) {
            if !a.terms.is_empty() {
                base.push((a.terms.clone(), -a.constant));
            }
        }
    }
    let slack = |v: f64, scale: f64| v > POLISH_SLACK * scale.abs().max(1.0);
    let mut held_rows = vec![false; program.linear.len()];
    let mut held_socs = vec![false; program.socs.len()];
    let mut held_rotated = vec![false; program.rotated.len()];
    let mut best: Option<Vec<f64>> = None;
    for _ in 0..POLISH_ROUNDS {
        let mut rows = base.clone();
        for (r, _) in program.linear.iter().zip(&held_rows).filter(|(_, h)| **h) {
            rows.push((r.terms.clone(), r.rhs));
        }
        for (b, _) in program.socs.iter().zip(&held_socs).filter(|(_, h)| **h) {
            rows.extend(linearize_soc(b, &start));
        }
        for (c, _) in program.rotated.iter().zip(&held_rotated).filter(|(_, h)| **h) {
            rows.extend(linearize_rotated(c, &start));
        }
        let Some(y) = project(&start, &frozen, rows) else {
            break;
        };
        let mut grew = false;
        for (i, v) in program.variables.iter().enumerate() {
            if !frozen[i] && (slack(v.lower - y[i], v.lower) || slack(y[i] - v.upper, v.upper)) {
                frozen[i] = true;
                grew = true;
            }
        }
        for (k, r) in program.linear.iter().enumerate() {
            if r.sense != Sense::Eq && !held_rows[k] && slack(r.violation(&y), r.rhs) {
                held_rows[k] = true;
                grew = true;
            }
        }
        for (k, b) in program.socs.iter().enumerate() {
            if !apex[k] && !held_socs[k] && slack(b.violation(&y), b.rhs.eval(&y)) {
                held_socs[k] = true;
                grew = true;
            }
        }
        for (k, c) in program.rotated.iter().enumerate() {
            if !held_rotated[k] && slack(c.violation(&y), c.u.eval(&y) + c.v.eval(&y)) {
                held_rotated[k] = true;
                grew = true;
            }
        }
        best = Some(y);
        if !grew {
            break;
        }
    }
    let Some(mut y) = best else {
        return x.to_vec();
    };
    // round-off below the hold threshold
    for (v, var) in y.iter_mut().zip(&program.variables) {
        *v = v.clamp(var.lower, var.upper);
    }
    let worst = |p: &[f64]| {
        verify_point(program, p, REDUCED_ACCURACY)
            .map(|r| r.max_violation())
            .unwrap_or(f64::INFINITY)
    };
    if worst(&y) <= worst(x) {
        y
    } else {
        x.to_vec()
    }
}

/// First-order row keeping the slack of `‖c‖ ≤ rhs` as it is at `x`.
fn linearize_soc(b: &SocBlock, x: &[f64]) -> Option<Row> {
    let (r, norm) = (b.rhs.eval(x), b.norm(x));
    if norm <= 0.0 {
        return None;
    }
    let mut terms = b.rhs.terms.clone();
    let mut constant = b.rhs.constant;
    for a in &b.components {
        let w = a.eval(x) / norm;
        terms.extend(a.terms.iter().map(|(i, c)| (*i, -w * c)));
        constant -= w * a.constant;
    }
    Some((terms, (r - norm).max(0.0) - constant))
}

/// First-order row keeping `2uv − ‖w‖²` as it is at `x`.
fn linearize_rotated(c: &RotatedCone, x: &[f64]) -> Option<Row> {
    let (u, v) = (c.u.eval(x), c.v.eval(x));
    let w: Vec<f64> = c.w.iter().map(|a| a.eval(x)).collect();
    let mut terms: Vec<(usize, f64)> = Vec::new();
    terms.extend(c.u.terms.iter().map(|(i, k)| (*i, 2.0 * v * k)));
    terms.extend(c.v.terms.iter().map(|(i, k)| (*i, 2.0 * u * k)));
    for (a, wk) in c.w.iter().zip(&w) {
        terms.extend(a.terms.iter().map(|(i, k)| (*i, -2.0 * wk * k)));
    }
    if terms.is_empty() {
        return None;
    }
    let g = 2.0 * u * v - w.iter().map(|a| a * a).sum::<f64>();
    let at: f64 = terms.iter().map(|(i, k)| k * x[*i]).sum();
    Some((terms, at + g.max(0.0) - g))
}

/// Least-norm move of the free coordinates of `x` onto `rows`. `None` when
/// the system cannot be factored or the residual grows.
fn project(x: &[f64], frozen: &[bool], rows: Vec<Row>) -> Option<Vec<f64>> {
    let n = x.len();
    let mut x = x.to_vec();
    let free: Vec<usize> = (0..n).filter(|i| !frozen[*i]).collect();
    let mut col = vec![usize::MAX; n];
    for (k, i) in free.iter().enumerate() {
        col[*i] = k;
    }
    // move frozen columns to the right-hand side
    let mut sys: Vec<Row> = Vec::new();
    for (terms, rhs) in rows {
        let mut rhs = rhs;
        let mut free_terms = Vec::new();
        for (i, c) in terms {
            if frozen[i] {
                rhs -= c * x[i];
            } else {
                free_terms.push((col[i], c));
            }
        }
        if !free_terms.is_empty() {
            sys.push((free_terms, rhs));
        }
    }
    if sys.is_empty() || free.is_empty() {
        return Some(x);
    }
    let m = sys.len();
    let mut a = DMatrix::<f64>::zeros(m, free.len());
    let mut b = DVector::<f64>::zeros(m);
    for (r, (terms, rhs)) in sys.iter().enumerate() {
        for (c, v) in terms {
            a[(r, *c)] += v;
        }
        b[r] = *rhs;
    }
    let mut y = DVector::from_iterator(free.len(), free.iter().map(|i| x[*i]));
    let factor = DependentCholesky::new(&(&a * a.transpose()));
    // refinement while the residual keeps shrinking
    let initial = (&b - &a * &y).amax();
    let mut last = initial;
    for _ in 0..REFINEMENT_STEPS {
        let r = &b - &a * &y;
        if r.amax() <= 1e-15 * (1.0 + b.amax()) {
            break;
        }
        let step = a.transpose() * factor.solve(&r);
        let next = &y + &step;
        let size = (&b - &a * &next).amax();
        if size >= last {
            break;
        }
        y = next;
        last = size;
    }
    if last > CONVERGED * (1.0 + b.amax()) {
        return None;
    }
    for (k, i) in free.iter().enumerate() {
        x[*i] = y[k];
    }
    Some(x)
}

/// Cholesky factor of a positive semidefinite matrix that skips rows
/// linearly dependent on earlier ones. Solves treat skipped rows as zero.
struct DependentCholesky {
    rows: Vec<Vec<f64>>,
    independent: Vec<bool>,
}

impl DependentCholesky {
    /// Pivot below this fraction of the diagonal marks a dependent row.
    const PIVOT: f64 = 1e-9;

    fn new(k: &DMatrix<f64>) -> Self {
        let m = k.nrows();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut independent = vec![false; m];
        for i in 0..m {
            let mut row = vec![0.0; i + 1];
            for j in 0..i {
                if independent[j] {
                    let dot: f64 = row[..j].iter().zip(&rows[j][..j]).map(|(a, b)| a * b).sum();
                    row[j] = (k[(i, j)] - dot) / rows[j][j];
                }
            }
            let d = k[(i, i)] - row[..i].iter().map(|v| v * v).sum::<f64>();
            if k[(i, i)] > 0.0 && d > Self::PIVOT * k[(i, i)] {
                row[i] = d.sqrt();
                independent[i] = true;
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            rows.push(row);
        }
        Self { rows, independent }
    }

    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        let m = self.rows.len();
        let mut z = DVector::<f64>::zeros(m);
        for i in (0..m).filter(|i| self.independent[*i]) {
            let dot: f64 = self.rows[i][..i].iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            z[i] = (r[i] - dot) / self.rows[i][i];
        }
        for i in (0..m).rev().filter(|i| self.independent[*i]) {
            z[i] /= self.rows[i][i];
            let zi = z[i];
            for j in 0..i {
                z[j] -= self.rows[i][j] * zi;
            }
        }
        z
    }
}

/// Violation magnitudes of a point against every row, cone, bound and
/// integrality requirement.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub linear: Vec<f64>,
    pub socs: Vec<f64>,
    pub rotated: Vec<f64>,
    pub bounds: Vec<f64>,
    pub integrality: Vec<f64>,
    /// Tags (or variable names) violated beyond tolerance.
    pub violated: Vec<String>,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        self.linear
            .iter()
            .chain(&self.socs)
            .chain(&self.rotated)
            .chain(&self.bounds)
            .chain(&self.integrality)
            .fold(0.0, |m, v| m.max(*v))
    }
}

/// Checks `point` with tolerance `tol · max(1, |scale|)` per item.
pub fn verify_point(program: &ConicProgram, point: &[f64], tol: f64) -> Result<FeasibilityReport> {
    if point.len() != program.variables.len() {
        return Err(SolverError::Dimension {
            expected: program.variables.len(),
            got: point.len(),
        });
    }
    let mut violated = Vec::new();
    let mut flag = |v: f64, scale: f64, name: &str| {
        if v > tol * scale.abs().max(1.0) {
            violated.push(name.to_string());
        }
    };
    let linear: Vec<f64> = program
        .linear
        .iter()
        .map(|r| {
            let v = r.violation(point);
            flag(v, r.rhs, &r.tag);
            v
        })
        .collect();
    let socs: Vec<f64> = program
        .socs
        .iter()
        .map(|s| {
            let v = s.violation(point);
            flag(v, s.rhs.eval(point), &s.tag);
            v
        })
        .collect();
    let rotated: Vec<f64> = program
        .rotated
        .iter()
        .map(|c| {
            let v = c.violation(point);
            flag(v, c.u.eval(point) + c.v.eval(point), &c.tag);
            v
        })
        .collect();
    let bounds: Vec<f64> = program
        .variables
        .iter()
        .zip(point)
        .map(|(var, x)| {
            let v = (var.lower - x).max(x - var.upper).max(0.0);
            flag(v, *x, &var.name);
            v
        })
        .collect();
    let integrality: Vec<f64> = program
        .variables
        .iter()
        .zip(point)
        .map(|(var, x)| {
            let v = if var.kind == VarKind::Binary {
                (x - x.round()).abs()
            } else {
                0.0
            };
            flag(v, 1.0, &var.name);
            v
        })
        .collect();
    let feasible = violated.is_empty();
    Ok(FeasibilityReport {
        linear,
        socs,
        rotated,
        bounds,
        integrality,
        violated,
        feasible,
    })
}

/// Solution dump as `name,value` rows.
pub fn write_solution_csv<W: Write>(program: &ConicProgram, x: &[f64], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "value"])?;
    for (v, val) in program.variables.iter().zip(x) {
        w.write_record([v.name.clone(), format!("{val}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `name,value` dump; `#` lines are skipped.
pub fn read_solution_csv<R: std::io::Read>(input: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| SolverError::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(SolverError::Parse {
                line,
                message: "expected name,value".into(),
            });
        }
        let value = rec[1].trim().parse::<f64>().map_err(|e| SolverError::Parse {
            line,
            message: format!("value: {e}"),
        })?;
        out.push((rec[0].trim().to_string(), value));
    }
    Ok(out)
}

// ---------------------------------------------------------------- CBF

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CbfCone {
    Zero,
    NonNeg,
    Soc,
    Rotated,
}

impl CbfCone {
    fn code(self) -> &'static str {
        match self {
            CbfCone::Zero => "L=",
            CbfCone::NonNeg => "L+",
            CbfCone::Soc => "Q",
            CbfCone::Rotated => "QR",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "L=" => CbfCone::Zero,
            "L+" => CbfCone::NonNeg,
            "Q" => CbfCone::Soc,
            "QR" => CbfCone::Rotated,
            _ => return None,
        })
    }
}

/// What a block of CBF rows encodes in the program.
#[derive(Debug, Clone, PartialEq)]
enum CbfItem {
    Row(usize),
    Lower(usize),
    Upper(usize),
    Soc(usize),
    Rotated(usize),
}

struct CbfRows {
    /// (cone, dimension) chunks in order
    chunks: Vec<(CbfCone, usize)>,
    acoord: Vec<(usize, usize, f64)>,
    bcoord: Vec<(usize, f64)>,
    rows: usize,
}

impl CbfRows {
    fn push(&mut self, cone: CbfCone, g: &[(usize, f64)], constant: f64) {
        let r = self.rows;
        for (j, c) in g {
            self.acoord.push((r, *j, *c));
        }
        if constant != 0.0 || constant.is_sign_negative() {
            self.bcoord.push((r, constant));
        }
        self.rows += 1;
        match self.chunks.last_mut() {
            Some((c, d)) if *c == cone && !matches!(cone, CbfCone::Soc | CbfCone::Rotated) => *d += 1,
            _ => self.chunks.push((cone, 1)),
        }
    }

    fn extend_last(&mut self, g: &[(usize, f64)], constant: f64) {
        let r = self.rows;
        for (j, c) in g {
            self.acoord.push((r, *j, *c));
        }
        if constant != 0.0 {
            self.bcoord.push((r, constant));
        }
        self.rows += 1;
        if let Some((_, d)) = self.chunks.last_mut() {
            *d += 1;
        }
    }
}

/// Writes `program` in CBF version 3. Names, tags, bound rows, cone factors
/// and product links ride along as `#` comments so a re-parse restores the
/// program exactly.
pub fn write_cbf<W: Write>(program: &ConicProgram, mut out: W) -> Result<()> {
    program.validate().map_err(SolverError::Malformed)?;
    let mut rows = CbfRows {
        chunks: Vec::new(),
        acoord: Vec::new(),
        bcoord: Vec::new(),
        rows: 0,
    };
    let mut meta = Vec::new();
    for r in &program.linear {
        meta.push(format!("# row {} {} {}", rows.rows, r.sense.symbol(), r.tag));
        match r.sense {
            Sense::Eq => rows.push(CbfCone::Zero, &r.terms, -r.rhs),
            Sense::Le => rows.push(CbfCone::NonNeg, &negated(&r.terms), r.rhs),
            Sense::Ge => rows.push(CbfCone::NonNeg, &r.terms, -r.rhs),
        }
    }
    for (j, v) in program.variables.iter().enumerate() {
        if v.lower.is_finite() {
            meta.push(format!("# lb {} {j}", rows.rows));
            rows.push(CbfCone::NonNeg, &[(j, 1.0)], -v.lower);
        }
        if v.upper.is_finite() {
            meta.push(format!("# ub {} {j}", rows.rows));
            rows.push(CbfCone::NonNeg, &[(j, -1.0)], v.upper);
        }
    }
    for s in &program.socs {
        meta.push(format!("# soc {} {} {}", rows.rows, s.factor, s.tag));
        rows.push(CbfCone::Soc, &s.rhs.terms, s.rhs.constant);
        for c in &s.components {
            rows.extend_last(&c.terms, c.constant);
        }
    }
    for c in &program.rotated {
        meta.push(format!("# rot {} {}", rows.rows, c.tag));
        rows.push(CbfCone::Rotated, &c.u.terms, c.u.constant);
        rows.extend_last(&c.v.terms, c.v.constant);
        for w in &c.w {
            rows.extend_last(&w.terms, w.constant);
        }
    }

    writeln!(out, "# p2hh conic program")?;
    for (i, v) in program.variables.iter().enumerate() {
        writeln!(out, "# var {i} {}", v.name)?;
    }
    for m in &meta {
        writeln!(out, "{m}")?;
    }
    for p in &program.products {
        writeln!(out, "# prod {} {} {}", p.product, p.bit, p.cell)?;
    }
    writeln!(out, "VER\n3\n")?;
    writeln!(out, "OBJSENSE\nMIN\n")?;
    writeln!(
        out,
        "VAR\n{} 1\nF {}\n",
        program.variables.len(),
        program.variables.len()
    )?;
    let ints = program.binaries();
    if !ints.is_empty() {
        writeln!(out, "INT\n{}", ints.len())?;
        for i in &ints {
            writeln!(out, "{i}")?;
        }
        writeln!(out)?;
    }
    writeln!(out, "CON\n{} {}", rows.rows, rows.chunks.len())?;
    for (c, d) in &rows.chunks {
        writeln!(out, "{} {d}", c.code())?;
    }
    writeln!(out)?;
    if !program.objective.terms.is_empty() {
        writeln!(out, "OBJACOORD\n{}", program.objective.terms.len())?;
        for (i, c) in &program.objective.terms {
            writeln!(out, "{i} {c}")?;
        }
        writeln!(out)?;
    }
    if program.objective.constant != 0.0 {
        writeln!(out, "OBJBCOORD\n{}\n", program.objective.constant)?;
    }
    if !rows.acoord.is_empty() {
        writeln!(out, "ACOORD\n{}", rows.acoord.len())?;
        for (r, j, c) in &rows.acoord {
            writeln!(out, "{r} {j} {c}")?;
        }
        writeln!(out)?;
    }
    if !rows.bcoord.is_empty() {
        writeln!(out, "BCOORD\n{}", rows.bcoord.len())?;
        for (r, c) in &rows.bcoord {
            writeln!(out, "{r} {c}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn export_cbf(program: &ConicProgram, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_cbf(program, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn import_cbf(path: &std::path::Path) -> Result<ConicProgram> {
    let file = std::fs::File::open(path)?;
    read_cbf(std::io::BufReader::new(file))
}

struct Lines<R> {
    inner: std::iter::Enumerate<std::io::Lines<R>>,
    comments: Vec<(usize, String)>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    /// Next non-empty, non-comment line.
    fn next(&mut self) -> Result<Option<String>> {
        for (k, l) in self.inner.by_ref() {
            let l = l?;
            self.line = k + 1;
            let t = l.trim();
            if let Some(c) = t.strip_prefix('#') {
                self.comments.push((self.line, c.trim().to_string()));
                continue;
            }
            if !t.is_empty() {
                return Ok(Some(t.to_string()));
            }
        }
        Ok(None)
    }

    fn expect(&mut self) -> Result<String> {
        self.next()?.ok_or_else(|| self.err("unexpected end of file"))
    }

    fn err(&self, message: impl Into<String>) -> SolverError {
        SolverError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn numbers<T: std::str::FromStr>(&mut self, want: usize) -> Result<Vec<T>> {
        let l = self.expect()?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != want {
            return Err(self.err(format!("expected {want} fields, got `{l}`")));
        }
        parts
            .iter()
            .map(|p| p.parse::<T>().map_err(|_| self.err(format!("bad number `{p}`"))))
            .collect()
    }

    fn triple(&mut self) -> Result<(usize, usize, f64)> {
        let l = self.expect()?;
        let p: Vec<&str> = l.split_whitespace().collect();
        if p.len() != 3 {
            return Err(self.err(format!("expected 3 fields, got `{l}`")));
        }
        let i = p[0].parse().map_err(|_| self.err("bad index"))?;
        let j = p[1].parse().map_err(|_| self.err("bad index"))?;
        let v = p[2].parse().map_err(|_| self.err("bad value"))?;
        Ok((i, j, v))
    }

    fn pair(&mut self) -> Result<(usize, f64)> {
        let l = self.expect()?;
        let p: Vec<&str> = l.split_whitespace().collect();
        if p.len() != 2 {
            return Err(self.err(format!("expected 2 fields, got `{l}`")));
        }
        let i = p[0].parse().map_err(|_| self.err("bad index"))?;
        let v = p[1].parse().map_err(|_| self.err("bad value"))?;
        Ok((i, v))
    }
}

/// Parses CBF written by [`write_cbf`]. Files without the comment metadata
/// are accepted too: rows then get generic tags and all variables are free.
pub fn read_cbf<R: BufRead>(input: R) -> Result<ConicProgram> {
    let mut lines = Lines {
        inner: input.lines().enumerate(),
        comments: Vec::new(),
        line: 0,
    };
    let mut n = None;
    let mut ints = Vec::new();
    let mut chunks: Vec<(CbfCone, usize)> = Vec::new();
    let mut total_rows = 0;
    let mut obj_terms = Vec::new();
    let mut obj_const = 0.0;
    let mut acoord = Vec::new();
    let mut bcoord = Vec::new();
    let mut minimise = true;
    while let Some(section) = lines.next()? {
        match section.as_str() {
            "VER" => {
                let v: Vec<u32> = lines.numbers(1)?;
                if v[0] > 3 {
                    return Err(lines.err(format!("unsupported version {}", v[0])));
                }
            }
            "OBJSENSE" => minimise = lines.expect()? == "MIN",
            "VAR" => {
                let head: Vec<usize> = lines.numbers(2)?;
                let mut seen = 0;
                for _ in 0..head[1] {
                    let l = lines.expect()?;
                    let p: Vec<&str> = l.split_whitespace().collect();
                    if p.len() != 2 || p[0] != "F" {
                        return Err(lines.err(format!("only free variable domains are supported, got `{l}`")));
                    }
                    seen += p[1].parse::<usize>().map_err(|_| lines.err("bad dimension"))?;
                }
                if seen != head[0] {
                    return Err(lines.err("variable domain sizes do not add up"));
                }
                n = Some(head[0]);
            }
            "INT" => {
                let k: Vec<usize> = lines.numbers(1)?;
                for _ in 0..k[0] {
                    ints.push(lines.numbers::<usize>(1)?[0]);
                }
            }
            "CON" => {
                let head: Vec<usize> = lines.numbers(2)?;
                total_rows = head[0];
                for _ in 0..head[1] {
                    let l = lines.expect()?;
                    let p: Vec<&str> = l.split_whitespace().collect();
                    let cone = p
                        .first()
                        .and_then(|c| CbfCone::parse(c))
                        .ok_or_else(|| lines.err(format!("unsupported cone `{l}`")))?;
                    let d = p
                        .get(1)
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| lines.err("bad cone dimension"))?;
                    chunks.push((cone, d));
                }
                if chunks.iter().map(|c| c.1).sum::<usize>() != total_rows {
                    return Err(lines.err("cone dimensions do not add up"));
                }
            }
            "OBJACOORD" => {
                let k: Vec<usize> = lines.numbers(1)?;
                for _ in 0..k[0] {
                    obj_terms.push(lines.pair()?);
                }
            }
            "OBJBCOORD" => obj_const = lines.numbers::<f64>(1)?[0],
            "ACOORD" => {
                let k: Vec<usize> = lines.numbers(1)?;
                for _ in 0..k[0] {
                    acoord.push(lines.triple()?);
                }
            }
            "BCOORD" => {
                let k: Vec<usize> = lines.numbers(1)?;
                for _ in 0..k[0] {
                    bcoord.push(lines.pair()?);
                }
            }
            other => return Err(lines.err(format!("unsupported section `{other}`"))),
        }
    }
    let n = n.ok_or_else(|| lines.err("missing VAR section"))?;
    if !minimise {
        obj_terms.iter_mut().for_each(|t| t.1 = -t.1);
        obj_const = -obj_const;
    }

    let mut g: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total_rows];
    let mut consts = vec![0.0; total_rows];
    for (r, j, v) in acoord {
        if r >= total_rows || j >= n {
            return Err(lines.err(format!("ACOORD entry ({r}, {j}) out of range")));
        }
        g[r].push((j, v));
    }
    for (r, v) in bcoord {
        if r >= total_rows {
            return Err(lines.err(format!("BCOORD entry {r} out of range")));
        }
        consts[r] += v;
    }
    let aff = |r: usize| Affine::new(g[r].clone(), consts[r]);
    let mut cone_of_row = vec![CbfCone::Zero; total_rows];
    let mut chunk_start = BTreeMap::new();
    let mut at = 0;
    for (c, d) in &chunks {
        chunk_start.insert(at, (*c, *d));
        cone_of_row[at..at + d].fill(*c);
        at += d;
    }

    // metadata
    let mut names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    // item, tag, right-hand side, sense
    type Meta = (CbfItem, Option<String>, Option<f64>, Option<Sense>);
    let mut items: BTreeMap<usize, Meta> = BTreeMap::new();
    let mut products = Vec::new();
    let (mut nrow, mut nsoc, mut nrot) = (0, 0, 0);
    let parse_usize = |s: Option<&str>, line: usize| -> Result<usize> {
        s.and_then(|s| s.parse().ok()).ok_or(SolverError::Parse {
            line,
            message: "bad metadata index".into(),
        })
    };
    for (line, c) in &lines.comments {
        let p: Vec<&str> = c.split_whitespace().collect();
        match p.first().copied() {
            Some("var") => {
                let i = parse_usize(p.get(1).copied(), *line)?;
                if i < n {
                    names[i] = p.get(2).unwrap_or(&"").to_string();
                }
            }
            Some("row") => {
                let r = parse_usize(p.get(1).copied(), *line)?;
                let sense = p.get(2).and_then(|s| Sense::from_symbol(s));
                items.insert(r, (CbfItem::Row(nrow), p.get(3).map(|s| s.to_string()), None, sense));
                nrow += 1;
            }
            Some("lb") | Some("ub") => {
                let r = parse_usize(p.get(1).copied(), *line)?;
                let j = parse_usize(p.get(2).copied(), *line)?;
                let item = if p[0] == "lb" {
                    CbfItem::Lower(j)
                } else {
                    CbfItem::Upper(j)
                };
                items.insert(r, (item, None, None, None));
            }
            Some("soc") => {
                let r = parse_usize(p.get(1).copied(), *line)?;
                let f = p.get(2).and_then(|s| s.parse().ok());
                items.insert(r, (CbfItem::Soc(nsoc), p.get(3).map(|s| s.to_string()), f, None));
                nsoc += 1;
            }
            Some("rot") => {
                let r = parse_usize(p.get(1).copied(), *line)?;
                items.insert(r, (CbfItem::Rotated(nrot), p.get(2).map(|s| s.to_string()), None, None));
                nrot += 1;
            }
            Some("prod") => {
                let v: Vec<usize> = p[1..].iter().filter_map(|s| s.parse().ok()).collect();
                if v.len() != 3 {
                    return Err(SolverError::Parse {
                        line: *line,
                        message: "bad product link".into(),
                    });
                }
                products.push(ProductLink {
                    product: v[0],
                    bit: v[1],
                    cell: v[2],
                });
            }
            _ => {}
        }
    }

    let mut program = ConicProgram::default();
    for (i, name) in names.into_iter().enumerate() {
        let kind = if ints.contains(&i) {
            VarKind::Binary
        } else {
            VarKind::Continuous
        };
        program.add_variable(name, kind, f64::NEG_INFINITY, f64::INFINITY);
    }
    program.objective = Affine::new(obj_terms, obj_const);
    program.products = products;

    let mut r = 0;
    while r < total_rows {
        let cone = cone_of_row[r];
        let meta = items.get(&r).cloned();
        match cone {
            CbfCone::Zero | CbfCone::NonNeg => {
                let a = aff(r);
                match meta.map(|m| (m.0, m.1, m.3)) {
                    Some((CbfItem::Lower(j), _, _)) => program.variables[j].lower = -a.constant + 0.0,
                    Some((CbfItem::Upper(j), _, _)) => program.variables[j].upper = a.constant + 0.0,
                    Some((_, tag, sense)) => {
                        let tag = tag.unwrap_or_else(|| format!("row{r}"));
                        let sense = sense.unwrap_or(if cone == CbfCone::Zero { Sense::Eq } else { Sense::Ge });
                        program.linear.push(lower_row(tag, &a, sense));
                    }
                    None => {
                        let sense = if cone == CbfCone::Zero { Sense::Eq } else { Sense::Ge };
                        program.linear.push(lower_row(format!("row{r}"), &a, sense));
                    }
                }
                r += 1;
            }
            CbfCone::Soc | CbfCone::Rotated => {
                let (_, d) = chunk_start
                    .get(&r)
                    .copied()
                    .ok_or_else(|| lines.err(format!("cone row {r} is not a block start")))?;
                let (tag, factor) = match &meta {
                    Some((_, t, f, _)) => (t.clone(), *f),
                    None => (None, None),
                };
                if cone == CbfCone::Soc {
                    program.socs.push(SocBlock {
                        tag: tag.unwrap_or_else(|| format!("soc{r}")),
                        rhs: aff(r),
                        components: (r + 1..r + d).map(aff).collect(),
                        factor: factor.unwrap_or(1.0),
                    });
                } else {
                    if d < 2 {
                        return Err(lines.err("rotated cone needs at least two rows"));
                    }
                    program.rotated.push(RotatedCone {
                        tag: tag.unwrap_or_else(|| format!("rot{r}")),
                        u: aff(r),
                        v: aff(r + 1),
                        w: (r + 2..r + d).map(aff).collect(),
                    });
                }
                r += d;
            }
        }
    }
    program.validate().map_err(SolverError::Malformed)?;
    Ok(program)
}

fn lower_row(tag: String, a: &Affine, sense: Sense) -> LinearRow {
    // slack g(x) = a·x + c encodes: Eq  a·x − rhs = 0, Le  rhs − a·x ≥ 0, Ge  a·x − rhs ≥ 0
    match sense {
        Sense::Eq | Sense::Ge => LinearRow {
            tag,
            terms: a.terms.clone(),
            sense,
            rhs: -a.constant + 0.0,
        },
        Sense::Le => LinearRow {
            tag,
            terms: negated(&a.terms),
            sense,
            rhs: a.constant + 0.0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm_fixture() -> ConicProgram {
        // min t  s.t. ‖(3, 4)‖ ≤ t
        let mut p = ConicProgram::default();
        let t = p.add_variable("t", VarKind::Continuous, f64::NEG_INFINITY, f64::INFINITY);
        p.socs.push(SocBlock {
            tag: "norm".into(),
            components: vec![Affine::constant(3.0), Affine::constant(4.0)],
            rhs: Affine::new(vec![(t, 1.0)], 0.0),
            factor: 1.0,
        });
        p.objective = Affine::new(vec![(t, 1.0)], 0.0);
        p
    }

    #[test]
    fn norm_of_constant() {
        let p = norm_fixture();
        let s = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[0] - 5.0).abs() < 1e-7);
        assert!(s.bound <= s.objective + 1e-7);
        let report = verify_point(&p, &s.x, 1e-7).unwrap();
        assert!(report.feasible);
        let zero = verify_point(&p, &[0.0], 1e-8).unwrap();
        assert_eq!(zero.violated, vec!["norm".to_string()]);
        assert!((zero.socs[0] - 5.0).abs() < 1e-12);
    }

    fn row(tag: &str, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) -> LinearRow {
        LinearRow {
            tag: tag.into(),
            terms: Affine::new(terms, 0.0).terms,
            sense,
            rhs,
        }
    }

    #[test]
    fn empty_feasible_set_is_certified() {
        let mut p = ConicProgram::default();
        let x = p.add_variable("x", VarKind::Continuous, f64::NEG_INFINITY, f64::INFINITY);
        p.linear.push(row("ge", vec![(x, 1.0)], Sense::Ge, 1.0));
        p.linear.push(row("le", vec![(x, 1.0)], Sense::Le, 0.0));
        p.objective = Affine::new(vec![(x, 1.0)], 0.0);
        let s = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        let z = s.certificate.unwrap();
        let sf = StandardForm::build(&p, &[f64::NEG_INFINITY], &[f64::INFINITY]).unwrap();
        let (atz, bz) = sf.farkas(&z);
        assert!(atz <= 1e-7 * z.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        assert!(bz < 0.0);
        assert!(z.iter().all(|v| *v >= -1e-9));
    }

    #[test]
    fn unbounded_is_reported() {
        let mut p = ConicProgram::default();
        let x = p.add_variable("x", VarKind::Continuous, f64::NEG_INFINITY, 1.0);
        p.objective = Affine::new(vec![(x, 1.0)], 0.0);
        let s = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Unbounded);
        assert!(s.certificate.unwrap()[0] < 0.0);
    }

    fn lp_fixture() -> (ConicProgram, Vec<([f64; 3], f64)>) {
        // max 3x + 2y + 4z over a polytope, written as min of the negation
        let cons = vec![
            ([1.0, 1.0, 2.0], 4.0),
            ([2.0, 0.0, 3.0], 5.0),
            ([2.0, 1.0, 3.0], 7.0),
            ([-1.0, 0.0, 0.0], 0.0),
            ([0.0, -1.0, 0.0], 0.0),
            ([0.0, 0.0, -1.0], 0.0),
        ];
        let mut p = ConicProgram::default();
        for name in ["x", "y", "z"] {
            p.add_variable(name, VarKind::Continuous, f64::NEG_INFINITY, f64::INFINITY);
        }
        for (k, (a, b)) in cons.iter().enumerate() {
            p.linear.push(row(
                &format!("c{k}"),
                (0..3).map(|i| (i, a[i])).filter(|t| t.1 != 0.0).collect(),
                Sense::Le,
                *b,
            ));
        }
        p.objective = Affine::new(vec![(0, -3.0), (1, -2.0), (2, -4.0)], 0.0);
        (p, cons)
    }

    #[test]
    fn lp_matches_vertex_enumeration() {
        let (p, cons) = lp_fixture();
        let c = [-3.0, -2.0, -4.0];
        let mut best = f64::INFINITY;
        for i in 0..cons.len() {
            for j in i + 1..cons.len() {
                for k in j + 1..cons.len() {
                    let m = nalgebra::Matrix3::from_rows(&[
                        nalgebra::RowVector3::from_row_slice(&cons[i].0),
                        nalgebra::RowVector3::from_row_slice(&cons[j].0),
                        nalgebra::RowVector3::from_row_slice(&cons[k].0),
                    ]);
                    let Some(inv) = m.try_inverse() else { continue };
                    let v = inv * nalgebra::Vector3::new(cons[i].1, cons[j].1, cons[k].1);
                    if cons
                        .iter()
                        .all(|(a, b)| a[0] * v[0] + a[1] * v[1] + a[2] * v[2] <= b + 1e-9)
                    {
                        best = best.min(c[0] * v[0] + c[1] * v[1] + c[2] * v[2]);
                    }
                }
            }
        }
        let s = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!(
            (s.objective - best).abs() <= 1e-7 * best.abs().max(1.0),
            "{} vs {best}",
            s.objective
        );
    }

    #[test]
    fn perturbation_flags_binding_row() {
        let (p, _) = lp_fixture();
        let s = solve_continuous(&p, &SolverParams::default()).unwrap();
        let report = verify_point(&p, &s.x, 1e-7).unwrap();
        assert!(report.feasible, "{:?}", report.violated);
        let (k, r) = p
            .linear
            .iter()
            .enumerate()
            .find(|(_, r)| r.terms.iter().any(|t| t.0 == 0 && t.1 > 0.0) && (r.activity(&s.x) - r.rhs).abs() < 1e-6)
            .unwrap();
        let coef = r.terms.iter().find(|t| t.0 == 0).unwrap().1;
        let mut y = s.x.clone();
        y[0] += 1.0;
        let report = verify_point(&p, &y, 1e-7).unwrap();
        assert!((report.linear[k] - coef.abs()).abs() < 1e-6);
        assert!(report.violated.contains(&r.tag));
    }

    #[test]
    fn weak_duality_and_scaling_invariance() {
        let (mut p, _) = lp_fixture();
        let a = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert!(a.bound <= a.objective + 1e-7 * a.objective.abs().max(1.0));
        p.objective = p.objective.scaled(1e4);
        let b = solve_continuous(&p, &SolverParams::default()).unwrap();
        for (x, y) in a.x.iter().zip(&b.x) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ceiling_through_three_bits() {
        let mut p = ConicProgram::default();
        let n = p.add_variable("n", VarKind::Continuous, 0.0, f64::INFINITY);
        let bits: Vec<usize> = (0..3)
            .map(|j| p.add_variable(format!("b{j}"), VarKind::Binary, 0.0, 1.0))
            .collect();
        let mut terms = vec![(n, 1.0)];
        terms.extend(bits.iter().enumerate().map(|(j, b)| (*b, -((1 << j) as f64))));
        p.linear.push(row("bits", terms, Sense::Eq, 0.0));
        p.linear.push(row("floor", vec![(n, 1.0)], Sense::Ge, 2.3));
        p.objective = Affine::new(vec![(n, 1.0)], 0.0);
        let s = solve_misocp(&p, &BranchBoundParams::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.objective - 3.0).abs() < 1e-9);
        assert_eq!(&s.x[1..], &[1.0, 1.0, 0.0]);
        let relax = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert!(relax.objective <= s.objective + 1e-9);
    }

    /// Six binaries switching conic capacity on and off.
    fn six_binary_fixture() -> ConicProgram {
        let mut p = ConicProgram::default();
        let z: Vec<usize> = (0..6)
            .map(|j| p.add_variable(format!("z{j}"), VarKind::Binary, 0.0, 1.0))
            .collect();
        let y: Vec<usize> = (0..6)
            .map(|j| p.add_variable(format!("y{j}"), VarKind::Continuous, 0.0, f64::INFINITY))
            .collect();
        let t = p.add_variable("t", VarKind::Continuous, f64::NEG_INFINITY, f64::INFINITY);
        let caps = [1.3, 0.7, 2.1, 1.1, 0.4, 1.8];
        let costs = [2.0, 1.0, 3.5, 1.6, 0.5, 2.9];
        for j in 0..6 {
            p.linear.push(row(
                &format!("cap{j}"),
                vec![(y[j], 1.0), (z[j], -caps[j])],
                Sense::Le,
                0.0,
            ));
        }
        p.linear
            .push(row("demand", y.iter().map(|i| (*i, 1.0)).collect(), Sense::Ge, 3.2));
        p.linear
            .push(row("pair", vec![(z[0], 1.0), (z[2], 1.0)], Sense::Le, 1.0));
        // quadratic dispatch cost through a rotated cone
        p.rotated.push(RotatedCone {
            tag: "quad".into(),
            u: Affine::new(vec![(t, 1.0)], 0.0),
            v: Affine::constant(0.5),
            w: y.iter().map(|i| Affine::new(vec![(*i, 0.8)], 0.0)).collect(),
        });
        let mut obj: Vec<(usize, f64)> = z.iter().zip(costs).map(|(i, c)| (*i, c)).collect();
        obj.push((t, 1.0));
        p.objective = Affine::new(obj, 0.0);
        p
    }

    #[test]
    fn branch_and_bound_matches_enumeration() {
        let p = six_binary_fixture();
        let params = BranchBoundParams::default();
        let s = solve_misocp(&p, &params).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        let mut best = f64::INFINITY;
        for mask in 0..64u32 {
            let (mut lo, mut hi): (Vec<f64>, Vec<f64>) = (
                p.variables.iter().map(|v| v.lower).collect(),
                p.variables.iter().map(|v| v.upper).collect(),
            );
            for j in 0..6 {
                let v = f64::from((mask >> j) & 1);
                lo[j] = v;
                hi[j] = v;
            }
            let e = solve_with_bounds(&p, &lo, &hi, &SolverParams::default()).unwrap();
            if e.status == SolveStatus::Optimal {
                best = best.min(e.objective);
            }
        }
        assert!(
            (s.objective - best).abs() <= 1e-6 * best.abs(),
            "{} vs {best}",
            s.objective
        );
        assert!(s.bound <= s.objective + 1e-9);
        let relax = solve_continuous(&p, &SolverParams::default()).unwrap();
        assert!(relax.objective <= s.objective + 1e-7);
    }

    #[test]
    fn branch_and_bound_is_deterministic() {
        let p = six_binary_fixture();
        for rule in [
            BranchingRule::MostFractional,
            BranchingRule::FirstFractional,
            BranchingRule::Random,
        ] {
            let params = BranchBoundParams {
                branching: rule,
                seed: 5,
                ..Default::default()
            };
            let a = solve_misocp(&p, &params).unwrap();
            let b = solve_misocp(&p, &params).unwrap();
            assert_eq!(a.x, b.x);
            assert_eq!(a.nodes, b.nodes);
        }
    }

    #[test]
    fn node_limit_returns_iter_limit() {
        let p = six_binary_fixture();
        let params = BranchBoundParams {
            node_limit: 1,
            batch: 1,
            ..Default::default()
        };
        let s = solve_misocp(&p, &params).unwrap();
        assert_eq!(s.status, SolveStatus::IterLimit);
        assert!(BranchBoundParams {
            rel_gap: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cbf_round_trip() {
        let mut p = six_binary_fixture();
        p.socs.push(norm_fixture().socs[0].clone());
        p.socs[0].rhs = Affine::new(vec![(12, 1.0)], -0.0);
        p.products.push(ProductLink {
            product: 6,
            bit: 0,
            cell: 7,
        });
        let mut buf = Vec::new();
        write_cbf(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("INT\n6\n0\n1\n2\n3\n4\n5\n"));
        let q = read_cbf(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(p.canonical(), q.canonical());
    }

    #[test]
    fn cbf_errors_carry_line_numbers() {
        let text = "VER\n3\n\nVAR\n2 1\nF 2\n\nCON\n1 1\nL+ 1\n\nACOORD\n1\n0 5 1.0\n";
        let err = read_cbf(std::io::Cursor::new(text)).unwrap_err();
        assert!(matches!(err, SolverError::Parse { .. }), "{err}");
        let err = read_cbf(std::io::Cursor::new("VER\n3\nFOO\n")).unwrap_err();
        assert!(matches!(err, SolverError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn polish_restores_equalities() {
        let mut p = ConicProgram::default();
        let a = p.add_variable("a", VarKind::Continuous, 0.0, 10.0);
        let b = p.add_variable("b", VarKind::Continuous, 0.0, 10.0);
        let z = p.add_variable("z", VarKind::Binary, 0.0, 1.0);
        let e = p.add_variable("e", VarKind::Continuous, f64::NEG_INFINITY, f64::INFINITY);
        p.linear.push(row("sum", vec![(a, 1.0), (b, 1.0)], Sense::Eq, 3.0));
        p.products.push(ProductLink {
            product: e,
            bit: z,
            cell: a,
        });
        let x = polish(&p, &[1.0 + 1e-7, 2.0 - 3e-8, 1.0, 0.9], &[z]);
        assert!((x[a] + x[b] - 3.0).abs() < 1e-13);
        assert!((x[e] - x[a]).abs() < 1e-13);
        assert_eq!(x[z], 1.0);
    }

    #[test]
    fn solution_csv_round_trip() {
        let p = six_binary_fixture();
        let x: Vec<f64> = (0..p.variables.len()).map(|i| i as f64 * 0.1).collect();
        let mut buf = Vec::new();
        write_solution_csv(&p, &x, &mut buf).unwrap();
        let back = read_solution_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), x.len());
        assert_eq!(back[3], ("z3".to_string(), x[3]));
        assert!(read_solution_csv(std::io::Cursor::new("name,value\na,zz\n")).is_err());
    }
}
