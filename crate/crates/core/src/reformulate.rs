//! Compilation of the symbolic model into a mixed-integer conic program.
//!
//! A chance constraint `P[nominal + Σ_h a_h·1ᵀω_h ≤ 0] ≥ 1 − ε` over a
//! moment ambiguity set becomes the second-order cone
//!
//! ```text
//! ‖ Σ_h a_h · L_h ‖₂ ≤ −f · nominal
//! ```
//!
//! with `L_h` the square-root loading of hour `h` and `f` the safety factor
//! of the chosen mode. Equalities that must hold for every realisation are
//! split into a nominal row and a factor row; across two hours the factor
//! rows are merged under the equal-aggregate-error approximation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use nalgebra::DVector;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::ies_model::{
    build_constraints, expected_counts, Capacity, Commitment, ConstraintKind, ConstraintTag, Coupling, DecisionSchema,
    IesInstance, LinExpr, Part, Recourse, Sense, SymbolicConstraint, Template, VarKey,
};
use crate::scenarios::WindMoments;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReformulateError {
    #[error("invalid reformulation mode: {0}")]
    Mode(String),
    #[error(
        "covariance at day {r}, hour {t} is not positive semidefinite (min eigenvalue {min_eigenvalue}) in `{tag}`"
    )]
    NonPsd {
        tag: String,
        r: usize,
        t: usize,
        min_eigenvalue: f64,
    },
    #[error("invalid big-M: {0}")]
    BigM(String),
    #[error("`{tag}`: {message}")]
    Constraint { tag: String, message: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
}

pub type Result<T> = std::result::Result<T, ReformulateError>;

/// Chance-constraint treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModeKind {
    /// Moment-based distributionally robust (Cantelli).
    Drcc,
    /// Chance constraints under a Gaussian assumption.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReformulationMode {
    pub kind: ModeKind,
    pub epsilon: f64,
}

impl ReformulationMode {
    pub fn drcc(epsilon: f64) -> Self {
        Self {
            kind: ModeKind::Drcc,
            epsilon,
        }
    }

    pub fn gaussian(epsilon: f64) -> Self {
        Self {
            kind: ModeKind::Gaussian,
            epsilon,
        }
    }
}

/// `√(ε/(1−ε))` for the moment-based mode and `1/Φ⁻¹(1−ε)` for the
/// Gaussian mode.
pub fn safety_factor(mode: ReformulationMode) -> Result<f64> {
    let eps = mode.epsilon;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ReformulateError::Mode(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    match mode.kind {
        ModeKind::Drcc => Ok((eps / (1.0 - eps)).sqrt()),
        ModeKind::Gaussian => {
            if eps >= 0.5 {
                return Err(ReformulateError::Mode(format!(
                    "the Gaussian factor is undefined for epsilon ≥ 0.5, got {eps}"
                )));
            }
            let z = Normal::standard().inverse_cdf(1.0 - eps);
            Ok(1.0 / z)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
}

/// Sparse affine function `Σ c_i x_i + constant`, terms sorted by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c + 0.0,
        }
    }

    pub fn new(mut terms: Vec<(usize, f64)>, constant: f64) -> Self {
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (i, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        Self {
            terms: merged,
            constant: constant + 0.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.terms.iter().map(|(i, c)| (*i, c * s)).collect(), self.constant * s)
    }
}

/// `Σ c_i x_i  (sense)  rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub tag: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl LinearRow {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(i, c)| c * x[*i]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let a = self.activity(x);
        match self.sense {
            Sense::Eq => (a - self.rhs).abs(),
            Sense::Le => (a - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - a).max(0.0),
        }
    }
}

/// `‖(c_1(x), …, c_m(x))‖₂ ≤ rhs(x)`. For compiled chance constraints
/// `rhs = −factor · nominal`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocBlock {
    pub tag: String,
    pub components: Vec<Affine>,
    pub rhs: Affine,
    pub factor: f64,
}

impl SocBlock {
    pub fn norm(&self, x: &[f64]) -> f64 {
        self.components.iter().map(|c| c.eval(x).powi(2)).sum::<f64>().sqrt()
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        (self.norm(x) - self.rhs.eval(x)).max(0.0)
    }
}

/// `2·u(x)·v(x) ≥ ‖w(x)‖²` with `u, v ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedCone {
    pub tag: String,
    pub u: Affine,
    pub v: Affine,
    pub w: Vec<Affine>,
}

impl RotatedCone {
    pub fn violation(&self, x: &[f64]) -> f64 {
        let (u, v) = (self.u.eval(x), self.v.eval(x));
        let w2: f64 = self.w.iter().map(|w| w.eval(x).powi(2)).sum();
        // distance-like measure in the equivalent second-order cone
        let lhs = ((u - v).powi(2) + 2.0 * w2).sqrt();
        (lhs - (u + v)).max(0.0)
    }

    /// Smallest `u` satisfying the cone for the current `v` and `w`.
    pub fn min_u(&self, x: &[f64]) -> f64 {
        let w2: f64 = self.w.iter().map(|w| w.eval(x).powi(2)).sum();
        w2 / (2.0 * self.v.eval(x))
    }
}

/// Links a big-M product variable to its bit and cell variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductLink {
    pub product: usize,
    pub bit: usize,
    pub cell: usize,
}

/// Mixed-integer conic program in minimisation form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    pub variables: Vec<Variable>,
    pub linear: Vec<LinearRow>,
    pub socs: Vec<SocBlock>,
    pub rotated: Vec<RotatedCone>,
    pub objective: Affine,
    pub products: Vec<ProductLink>,
}

impl ConicProgram {
    pub fn add_variable(&mut self, name: impl Into<String>, kind: VarKind, lower: f64, upper: f64) -> usize {
        self.variables.push(Variable {
            name: name.into(),
            kind,
            lower,
            upper,
        });
        self.variables.len() - 1
    }

    pub fn binaries(&self) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Binary)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn variable_index(&self) -> BTreeMap<&str, usize> {
        self.variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.as_str(), i))
            .collect()
    }

    /// Checks that every referenced index is declared.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.variables.len();
        let check = |terms: &[(usize, f64)], what: &str| -> std::result::Result<(), String> {
            match terms.iter().find(|(i, c)| *i >= n || !c.is_finite()) {
                Some((i, c)) => Err(format!("{what}: bad term ({i}, {c})")),
                None => Ok(()),
            }
        };
        check(&self.objective.terms, "objective")?;
        for r in &self.linear {
            check(&r.terms, &r.tag)?;
        }
        for s in &self.socs {
            check(&s.rhs.terms, &s.tag)?;
            for c in &s.components {
                check(&c.terms, &s.tag)?;
            }
        }
        for c in &self.rotated {
            check(&c.u.terms, &c.tag)?;
            check(&c.v.terms, &c.tag)?;
            for w in &c.w {
                check(&w.terms, &c.tag)?;
            }
        }
        for v in &self.variables {
            if v.lower > v.upper || v.lower.is_nan() || v.upper.is_nan() {
                return Err(format!("variable {}: empty bounds", v.name));
            }
        }
        for p in &self.products {
            if p.product >= n || p.bit >= n || p.cell >= n {
                return Err("product link out of range".into());
            }
        }
        Ok(())
    }

    /// Canonical text form; identical programs give identical bytes.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "p2hh-conic 1");
        let _ = writeln!(
            s,
            "sizes vars {} rows {} socs {} rotated {} products {}",
            self.variables.len(),
            self.linear.len(),
            self.socs.len(),
            self.rotated.len(),
            self.products.len()
        );
        for (i, v) in self.variables.iter().enumerate() {
            let kind = match v.kind {
                VarKind::Continuous => "C",
                VarKind::Binary => "B",
            };
            let _ = writeln!(s, "var {i} {} {kind} {} {}", v.name, v.lower, v.upper);
        }
        let _ = writeln!(s, "obj {}", AffineText(&self.objective));
        for r in &self.linear {
            let _ = writeln!(
                s,
                "row {} {} {} : {}",
                r.tag,
                r.sense.symbol(),
                r.rhs,
                TermsText(&r.terms)
            );
        }
        for c in &self.socs {
            let _ = writeln!(s, "soc {} factor {} rhs {}", c.tag, c.factor, AffineText(&c.rhs));
            for comp in &c.components {
                let _ = writeln!(s, "  comp {}", AffineText(comp));
            }
        }
        for c in &self.rotated {
            let _ = writeln!(s, "rot {} u {} v {}", c.tag, AffineText(&c.u), AffineText(&c.v));
            for w in &c.w {
                let _ = writeln!(s, "  w {}", AffineText(w));
            }
        }
        for p in &self.products {
            let _ = writeln!(s, "prod {} {} {}", p.product, p.bit, p.cell);
        }
        s
    }
}

struct TermsText<'a>(&'a [(usize, f64)]);

impl fmt::Display for TermsText<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (i, c)) in self.0.iter().enumerate() {
            if n > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}:{c}")?;
        }
        Ok(())
    }
}

struct AffineText<'a>(&'a Affine);

impl fmt::Display for AffineText<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} : {}", self.0.constant, TermsText(&self.0.terms))
    }
}

/// Square-root loadings of the aggregated errors for one day.
#[derive(Debug, Clone)]
pub struct HourLoadings {
    /// `Σ_{r,t}^{1/2} 1` per hour.
    pub single: Vec<DVector<f64>>,
    /// `(J^{1/2}[1;0], J^{1/2}[0;1])` of hours `(t−1, t)`; `None` at `t = 0`.
    pub joint: Vec<Option<(DVector<f64>, DVector<f64>)>>,
    /// `1ᵀ Σ_{r,t} 1`
    pub aggregate_variance: Vec<f64>,
}

/// `(r, t, min_eigenvalue)` of a repaired joint covariance.
pub type Repair = (usize, usize, f64);

/// Square roots of all covariance blocks; joint matrices that needed the
/// eigenvalue repair are returned as `(r, t, min_eigenvalue)`.
pub fn precompute_loadings(moments: &WindMoments) -> Result<(Vec<HourLoadings>, Vec<Repair>)> {
    let mut days = Vec::with_capacity(moments.days());
    let mut repairs = Vec::new();
    for r in 0..moments.days() {
        let mut single = Vec::with_capacity(moments.hours());
        let mut joint = Vec::with_capacity(moments.hours());
        let mut agg = Vec::with_capacity(moments.hours());
        for t in 0..moments.hours() {
            let cov = moments.covariance(r, t);
            let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
            let scale = cov.amax().max(f64::MIN_POSITIVE);
            if min_eig < -1e-9 * scale {
                return Err(ReformulateError::NonPsd {
                    tag: "covariance".into(),
                    r,
                    t,
                    min_eigenvalue: min_eig,
                });
            }
            single.push(moments.aggregate_loading(r, t));
            agg.push(moments.aggregate_variance(r, t));
            if t == 0 {
                joint.push(None);
            } else {
                let (a, b, j) = moments.joint_loadings(r, t).map_err(|e| ReformulateError::Constraint {
                    tag: format!("joint covariance r{} t{}", r + 1, t + 1),
                    message: e.to_string(),
                })?;
                if j.repaired {
                    repairs.push((r, t, j.min_eigenvalue_before));
                }
                joint.push(Some((a, b)));
            }
        }
        days.push(HourLoadings {
            single,
            joint,
            aggregate_variance: agg,
        });
    }
    Ok((days, repairs))
}

/// A chance constraint in cone form over schema variables.
#[derive(Debug, Clone, PartialEq)]
pub enum SymbolicCone {
    /// The loading vanished: `nominal ≤ 0`.
    Linear(LinExpr),
    Soc {
        components: Vec<LinExpr>,
        rhs: LinExpr,
        factor: f64,
    },
}

fn day_of(c: &SymbolicConstraint) -> Result<usize> {
    c.tag.scope.map(|(r, _)| r).ok_or_else(|| ReformulateError::Constraint {
        tag: c.tag.to_string(),
        message: "stochastic constraint without an hour".into(),
    })
}

/// Single-hour chance constraint to cone form.
pub fn reformulate_drcc(
    c: &SymbolicConstraint,
    loadings: &[HourLoadings],
    mode: ReformulationMode,
) -> Result<SymbolicCone> {
    if c.kind != ConstraintKind::DrccInequality {
        return Err(ReformulateError::Constraint {
            tag: c.tag.to_string(),
            message: "not a chance constraint".into(),
        });
    }
    if c.is_intertemporal() {
        return reformulate_intertemporal_drcc(c, loadings, mode);
    }
    let factor = safety_factor(mode)?;
    let Some(load) = c.loadings.first().filter(|l| !l.expr.is_zero()) else {
        return Ok(SymbolicCone::Linear(c.nominal.clone()));
    };
    let r = day_of(c)?;
    let v = &loadings[r].single[load.hour];
    let components = v.iter().map(|vi| load.expr.scaled(*vi)).collect();
    Ok(SymbolicCone::Soc {
        components,
        rhs: c.nominal.scaled(-factor),
        factor,
    })
}

/// Two-hour chance constraint using the joint covariance of both hours.
pub fn reformulate_intertemporal_drcc(
    c: &SymbolicConstraint,
    loadings: &[HourLoadings],
    mode: ReformulationMode,
) -> Result<SymbolicCone> {
    let factor = safety_factor(mode)?;
    let r = day_of(c)?;
    let (prev, cur) = match c.loadings.as_slice() {
        [a, b] if a.hour + 1 == b.hour => (a, b),
        _ => {
            return Err(ReformulateError::Constraint {
                tag: c.tag.to_string(),
                message: "expected loadings on two consecutive hours".into(),
            })
        }
    };
    if prev.expr.is_zero() && cur.expr.is_zero() {
        return Ok(SymbolicCone::Linear(c.nominal.clone()));
    }
    let (v1, v2) = loadings[r].joint[cur.hour]
        .as_ref()
        .ok_or_else(|| ReformulateError::Constraint {
            tag: c.tag.to_string(),
            message: "missing joint covariance".into(),
        })?;
    let components = v1
        .iter()
        .zip(v2.iter())
        .map(|(a, b)| {
            let mut e = prev.expr.scaled(*a);
            e.add_expr(&cur.expr, *b);
            e
        })
        .collect();
    Ok(SymbolicCone::Soc {
        components,
        rhs: c.nominal.scaled(-factor),
        factor,
    })
}

/// Nominal and factor rows (`= 0`) of an equality that holds for every
/// realisation. Loadings of different hours are summed, which is exact for
/// single-hour constraints and assumes equal hourly aggregates otherwise.
pub fn split_stochastic_equality(c: &SymbolicConstraint) -> Result<(LinExpr, LinExpr)> {
    if c.kind != ConstraintKind::StochasticEquality {
        return Err(ReformulateError::Constraint {
            tag: c.tag.to_string(),
            message: "not a stochastic equality".into(),
        });
    }
    let mut factor = LinExpr::new();
    for l in &c.loadings {
        factor.add_expr(&l.expr, 1.0);
    }
    Ok((c.nominal.clone(), factor))
}

/// Deterministic objective and the transmission epigraph cones.
#[derive(Debug, Clone)]
pub struct ObjectiveParts {
    pub linear: LinExpr,
    /// `(tag, τ, [p^trans, √(1ᵀΣ1)·β])` meaning `2·τ·½ ≥ p² + s·β²`.
    pub epigraphs: Vec<(ConstraintTag, VarKey, [LinExpr; 2])>,
}

pub fn build_objective(instance: &IesInstance, loadings: &[HourLoadings]) -> ObjectiveParts {
    let p = &instance.params;
    let mut linear = LinExpr::new()
        .with(VarKey::Capacity(Capacity::Cells), p.cost_cell)
        .with(VarKey::Capacity(Capacity::Converter), p.cost_converter)
        .with(VarKey::Capacity(Capacity::Compressor), p.cost_compressor)
        .with(VarKey::Capacity(Capacity::Tank), p.cost_tank)
        .with(VarKey::Capacity(Capacity::Boiler), p.cost_boiler);
    let mut epigraphs = Vec::new();
    for r in 0..instance.days() {
        let k = instance.days.weights[r];
        for t in 0..instance.hours() {
            linear.add(
                VarKey::Commitment {
                    kind: Commitment::Startup,
                    r,
                    t,
                },
                k * p.cost_startup,
            );
            linear.add(
                VarKey::Commitment {
                    kind: Commitment::Shutdown,
                    r,
                    t,
                },
                k * p.cost_shutdown,
            );
            for c in 0..4 {
                linear.add(VarKey::nominal(Recourse::ChpWeight(c), r, t), k * instance.chp.cost[c]);
            }
            let epi = VarKey::TransmissionEpigraph { r, t };
            linear.add(epi, k * p.cost_transmission);
            linear.add(VarKey::nominal(Recourse::HydrogenMass, r, t), -k * p.price_hydrogen);
            let s = loadings[r].aggregate_variance[t].max(0.0);
            epigraphs.push((
                ConstraintTag::hourly(Template::TransmissionEpigraph, r, t, 0),
                epi,
                [
                    LinExpr::var(VarKey::nominal(Recourse::Transmission, r, t)),
                    LinExpr::var(VarKey::factor(Recourse::Transmission, r, t)).scaled(s.sqrt()),
                ],
            ));
        }
    }
    ObjectiveParts { linear, epigraphs }
}

/// `E[(p + β·1ᵀω)²] = p² + β²·1ᵀΣ1` for zero-mean errors.
pub fn expected_transmission_square(p: f64, beta: f64, aggregate_variance: f64) -> f64 {
    p * p + beta * beta * aggregate_variance
}

/// Linear rows enforcing `stack = n^el · cell` for every coupling, both
/// for nominal values and participation factors.
pub fn linearize_stack_coupling(instance: &IesInstance) -> Result<Vec<(ConstraintTag, LinExpr, Sense)>> {
    let bits = instance.params.bits;
    let m = instance.big_m();
    let bound = instance.cell.max_corner_power();
    if !(m.is_finite() && m >= bound * (1.0 - 1e-12)) {
        return Err(ReformulateError::BigM(format!(
            "{m} MW is below the single-cell power bound {bound} MW"
        )));
    }
    let weight = |j: usize| (1u64 << j) as f64;
    let mut rows = Vec::new();
    let mut cells = LinExpr::var(VarKey::Capacity(Capacity::Cells));
    for j in 0..bits {
        cells.add(VarKey::Bit(j), -weight(j));
    }
    rows.push((ConstraintTag::global(Template::CellBits, 0), cells, Sense::Eq));
    for r in 0..instance.days() {
        for t in 0..instance.hours() {
            for (ci, coupling) in Coupling::ALL.into_iter().enumerate() {
                for (pi, part) in [Part::Nominal, Part::Factor].into_iter().enumerate() {
                    let component = 2 * ci + pi;
                    let stack = VarKey::Policy {
                        part,
                        q: coupling.stack(),
                        r,
                        t,
                    };
                    let cell = VarKey::Policy {
                        part,
                        q: coupling.cell(),
                        r,
                        t,
                    };
                    let mut sum = LinExpr::var(stack);
                    for j in 0..bits {
                        let e = VarKey::Product {
                            coupling,
                            part,
                            r,
                            t,
                            j,
                        };
                        let z = VarKey::Bit(j);
                        sum.add(e, -weight(j));
                        let tag = |tpl| ConstraintTag::hourly(tpl, r, t, component * bits + j);
                        // −M z ≤ e ≤ M z
                        rows.push((
                            tag(Template::ProductZeroLower),
                            LinExpr::var(e).scaled(-1.0).with(z, -m),
                            Sense::Le,
                        ));
                        rows.push((tag(Template::ProductZeroUpper), LinExpr::var(e).with(z, -m), Sense::Le));
                        // cell − M(1 − z) ≤ e ≤ cell + M(1 − z)
                        rows.push((
                            tag(Template::ProductTrackLower),
                            LinExpr::var(cell).with(e, -1.0).with(z, m).plus_constant(-m),
                            Sense::Le,
                        ));
                        rows.push((
                            tag(Template::ProductTrackUpper),
                            LinExpr::var(e).with(cell, -1.0).with(z, m).plus_constant(-m),
                            Sense::Le,
                        ));
                    }
                    rows.push((
                        ConstraintTag::hourly(Template::StackSum, r, t, component),
                        sum,
                        Sense::Eq,
                    ));
                }
            }
        }
    }
    Ok(rows)
}

/// Counts per template of the compiled program.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// template → (compiled count, closed-form count)
    pub counts: BTreeMap<&'static str, (usize, usize)>,
    pub variables: usize,
    pub binaries: usize,
    pub expected_variables: usize,
    pub expected_binaries: usize,
    /// Joint covariance blocks that needed an eigenvalue repair.
    pub repairs: Vec<(usize, usize, f64)>,
}

impl AuditReport {
    pub fn consistent(&self) -> bool {
        self.variables == self.expected_variables
            && self.binaries == self.expected_binaries
            && self.counts.values().all(|(a, b)| a == b)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["template", "count", "expected"])?;
        w.write_record([
            "variables".to_string(),
            self.variables.to_string(),
            self.expected_variables.to_string(),
        ])?;
        w.write_record([
            "binaries".to_string(),
            self.binaries.to_string(),
            self.expected_binaries.to_string(),
        ])?;
        for (name, (count, expected)) in &self.counts {
            w.write_record([name.to_string(), count.to_string(), expected.to_string()])?;
        }
        for (r, t, eig) in &self.repairs {
            w.write_record([
                format!("psd_repair.r{}.t{}", r + 1, t + 1),
                "1".into(),
                format!("{eig}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-form compiled item counts (rows plus cones) per template.
pub fn expected_program_counts(
    days: usize,
    hours: usize,
    bits: usize,
    min_up: usize,
    min_down: usize,
) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for (tpl, n) in expected_counts(days, hours, min_up, min_down) {
        let per = if is_split(tpl) { 2 } else { 1 };
        out.insert(tpl.name(), n * per);
    }
    let rh = days * hours;
    out.insert(Template::CellBits.name(), 1);
    out.insert(Template::StackSum.name(), 6 * rh);
    for tpl in [
        Template::ProductZeroLower,
        Template::ProductZeroUpper,
        Template::ProductTrackLower,
        Template::ProductTrackUpper,
    ] {
        out.insert(tpl.name(), 6 * rh * bits);
    }
    out.insert(Template::TransmissionEpigraph.name(), rh);
    out.retain(|_, v| *v > 0);
    out
}

fn is_split(t: Template) -> bool {
    use Template::*;
    matches!(
        t,
        ChpWeights
            | PowerBalance
            | HeatBalance
            | BoilerRatio
            | CellPower
            | HydrogenConversion
            | CellWeights
            | CellHydrogen
            | CellHeat
            | CellTemperature
            | TemperatureRecursion
            | TankInitial
            | TankRecursion
    )
}

/// Compiled program together with its audit and variable schema.
#[derive(Debug, Clone)]
pub struct Compilation {
    pub program: ConicProgram,
    pub audit: AuditReport,
    pub schema: DecisionSchema,
    pub factor: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RowPart {
    Whole,
    Nominal,
    Factor,
}

fn row_label(tag: &ConstraintTag, part: RowPart) -> String {
    match part {
        RowPart::Whole => tag.to_string(),
        RowPart::Nominal => format!("{tag}.nom"),
        RowPart::Factor => format!("{tag}.fac"),
    }
}

struct Lowering<'a> {
    schema: &'a DecisionSchema,
}

impl Lowering<'_> {
    fn affine(&self, e: &LinExpr, tag: &str) -> Result<Affine> {
        let mut terms = Vec::with_capacity(e.terms.len());
        for (k, c) in &e.terms {
            let i = self.schema.index_of(k).ok_or_else(|| ReformulateError::Constraint {
                tag: tag.to_string(),
                message: format!("variable {k} is not declared"),
            })?;
            terms.push((i, *c));
        }
        Ok(Affine::new(terms, e.constant))
    }

    fn row(&self, tag: String, e: &LinExpr, sense: Sense) -> Result<LinearRow> {
        let a = self.affine(e, &tag)?;
        Ok(LinearRow {
            tag,
            terms: a.terms,
            sense,
            rhs: -a.constant + 0.0,
        })
    }
}

fn variable_bounds(instance: &IesInstance, key: &VarKey) -> (VarKind, f64, f64) {
    let flex = instance.flexibility;
    let inf = f64::INFINITY;
    match *key {
        VarKey::Bit(_) => (VarKind::Binary, 0.0, if flex.p2hh { 1.0 } else { 0.0 }),
        // each day starts with the plant off, so nothing can shut down in the first hour
        VarKey::Commitment {
            kind: Commitment::Shutdown,
            t: 0,
            ..
        } => (VarKind::Binary, 0.0, 0.0),
        VarKey::Commitment { .. } => (VarKind::Binary, 0.0, 1.0),
        VarKey::Capacity(c) => {
            let upper = match c {
                Capacity::Cells => instance.params.max_cells() as f64,
                Capacity::Tank => instance.params.tank_max,
                Capacity::Converter | Capacity::Compressor => inf,
                Capacity::Boiler => {
                    if flex.boiler {
                        inf
                    } else {
                        0.0
                    }
                }
            };
            let upper = if !flex.p2hh && c != Capacity::Boiler {
                0.0
            } else {
                upper
            };
            (VarKind::Continuous, 0.0, upper)
        }
        VarKey::TransmissionEpigraph { .. } => (VarKind::Continuous, 0.0, inf),
        VarKey::Policy { .. } | VarKey::Product { .. } => (VarKind::Continuous, -inf, inf),
    }
}

/// End-to-end compilation of an instance.
pub fn compile_program(instance: &IesInstance, mode: ReformulationMode) -> Result<Compilation> {
    let factor = safety_factor(mode)?;
    let schema = instance.schema();
    let (loadings, repairs) = precompute_loadings(&instance.moments)?;
    let low = Lowering { schema: &schema };

    let mut program = ConicProgram::default();
    for key in schema.keys() {
        let (kind, lo, hi) = variable_bounds(instance, key);
        program.add_variable(key.to_string(), kind, lo, hi);
    }

    let mut linear: Vec<((ConstraintTag, RowPart), LinearRow)> = Vec::new();
    let mut socs: Vec<((ConstraintTag, RowPart), SocBlock)> = Vec::new();
    for c in build_constraints(instance) {
        match c.kind {
            ConstraintKind::DeterministicLinear(sense) => {
                linear.push((
                    (c.tag, RowPart::Whole),
                    low.row(row_label(&c.tag, RowPart::Whole), &c.nominal, sense)?,
                ));
            }
            ConstraintKind::StochasticEquality => {
                let (nominal, fac) = split_stochastic_equality(&c)?;
                linear.push((
                    (c.tag, RowPart::Nominal),
                    low.row(row_label(&c.tag, RowPart::Nominal), &nominal, Sense::Eq)?,
                ));
                if !fac.is_zero() {
                    linear.push((
                        (c.tag, RowPart::Factor),
                        low.row(row_label(&c.tag, RowPart::Factor), &fac, Sense::Eq)?,
                    ));
                }
            }
            ConstraintKind::DrccInequality => {
                let label = row_label(&c.tag, RowPart::Whole);
                match reformulate_drcc(&c, &loadings, mode)? {
                    SymbolicCone::Linear(e) => {
                        linear.push(((c.tag, RowPart::Whole), low.row(label, &e, Sense::Le)?));
                    }
                    SymbolicCone::Soc {
                        components,
                        rhs,
                        factor,
                    } => {
                        let components = components
                            .iter()
                            .map(|e| low.affine(e, &label))
                            .collect::<Result<Vec<_>>>()?;
                        let rhs = low.affine(&rhs, &label)?;
                        socs.push((
                            (c.tag, RowPart::Whole),
                            SocBlock {
                                tag: label,
                                components,
                                rhs,
                                factor,
                            },
                        ));
                    }
                }
            }
        }
    }
    for (tag, e, sense) in linearize_stack_coupling(instance)? {
        linear.push((
            (tag, RowPart::Whole),
            low.row(row_label(&tag, RowPart::Whole), &e, sense)?,
        ));
    }
    for r in 0..instance.days() {
        for t in 0..instance.hours() {
            for coupling in Coupling::ALL {
                for part in [Part::Nominal, Part::Factor] {
                    for j in 0..instance.params.bits {
                        let idx = |k: VarKey| schema.index_of(&k).expect("schema key");
                        program.products.push(ProductLink {
                            product: idx(VarKey::Product {
                                coupling,
                                part,
                                r,
                                t,
                                j,
                            }),
                            bit: idx(VarKey::Bit(j)),
                            cell: idx(VarKey::Policy {
                                part,
                                q: coupling.cell(),
                                r,
                                t,
                            }),
                        });
                    }
                }
            }
        }
    }

    let objective = build_objective(instance, &loadings);
    program.objective = low.affine(&objective.linear, "objective")?;
    let mut rotated = Vec::new();
    for (tag, epi, [p, b]) in &objective.epigraphs {
        let label = row_label(tag, RowPart::Whole);
        rotated.push((
            *tag,
            RotatedCone {
                u: low.affine(&LinExpr::var(*epi), &label)?,
                v: Affine::constant(0.5),
                w: vec![low.affine(p, &label)?, low.affine(b, &label)?],
                tag: label,
            },
        ));
    }

    linear.sort_by_key(|a| a.0);
    socs.sort_by_key(|a| a.0);
    rotated.sort_by_key(|a| a.0);
    program.linear = linear.into_iter().map(|(_, r)| r).collect();
    program.socs = socs.into_iter().map(|(_, s)| s).collect();
    program.rotated = rotated.into_iter().map(|(_, c)| c).collect();

    let mut counts: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    let labels = program
        .linear
        .iter()
        .map(|r| r.tag.as_str())
        .chain(program.socs.iter().map(|s| s.tag.as_str()))
        .chain(program.rotated.iter().map(|c| c.tag.as_str()));
    for label in labels {
        let name = label.split('.').next().unwrap_or(label);
        let tpl = Template::from_name(name).expect("compiled tags use template names");
        counts.entry(tpl.name()).or_default().0 += 1;
    }
    let p = &instance.params;
    for (name, n) in expected_program_counts(instance.days(), instance.hours(), p.bits, p.min_up, p.min_down) {
        counts.entry(name).or_default().1 = n;
    }
    let rh = instance.days() * instance.hours();
    let audit = AuditReport {
        counts,
        variables: program.variables.len(),
        binaries: program.binaries().len(),
        expected_variables: DecisionSchema::expected_len(instance.days(), instance.hours(), p.bits),
        expected_binaries: p.bits + 3 * rh,
        repairs,
    };
    Ok(Compilation {
        program,
        audit,
        schema,
        factor,
    })
}
