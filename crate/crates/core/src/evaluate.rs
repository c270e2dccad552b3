//! Out-of-sample replay of affine policies: realized dispatch, violation
//! statistics, KPIs and the stakeholder profit split.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::ies_model::{
    build_stochastic_constraints, Capacity, Commitment, ConstraintKind, ConstraintTag, Coupling, DecisionSchema,
    IesInstance, Recourse, SymbolicConstraint, Template, VarKey,
};
use crate::scenarios::{forecast_errors, ScenarioErrors, ScenarioSet};

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("unrecognised variable `{0}`")]
    UnknownVariable(String),
    #[error("solution lacks {count} variables, first `{first}`")]
    Incomplete { count: usize, first: String },
    #[error("invalid solution: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvaluateError>;

/// Relative tolerance for counting a constraint as violated.
pub const VIOLATION_TOLERANCE: f64 = 1e-6;

const SLOTS: usize = 21;

fn slot(q: Recourse) -> usize {
    match q {
        Recourse::ChpWeight(k) => k,
        Recourse::Transmission => 4,
        Recourse::BoilerPower => 5,
        Recourse::BoilerHeat => 6,
        Recourse::HydrogenMass => 7,
        Recourse::StackPower => 8,
        Recourse::CellPower => 9,
        Recourse::StackExchange => 10,
        Recourse::CellExchange => 11,
        Recourse::StackHydrogen => 12,
        Recourse::CellHydrogen => 13,
        Recourse::CellHeat => 14,
        Recourse::CellWeight(i) => 15 + i,
        Recourse::Temperature => 19,
        Recourse::TankContent => 20,
    }
}

/// Capacities, commitments, nominal schedules and participation factors.
#[derive(Debug, Clone)]
pub struct AffinePolicySolution {
    schema: DecisionSchema,
    values: Vec<f64>,
}

impl AffinePolicySolution {
    /// From a solver vector in schema order.
    pub fn from_vector(instance: &IesInstance, x: &[f64]) -> Result<Self> {
        let schema = instance.schema();
        if x.len() != schema.len() {
            return Err(EvaluateError::Dimension(format!(
                "solution has {} values, the instance needs {}",
                x.len(),
                schema.len()
            )));
        }
        let sol = Self {
            schema,
            values: x.to_vec(),
        };
        sol.validate()?;
        Ok(sol)
    }

    /// From `(name, value)` pairs; every schema variable must appear once.
    pub fn from_named(instance: &IesInstance, pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let schema = instance.schema();
        let mut values = vec![f64::NAN; schema.len()];
        for (name, value) in pairs {
            let key: VarKey = name.parse().map_err(|_| EvaluateError::UnknownVariable(name.clone()))?;
            let i = schema.index_of(&key).ok_or_else(|| {
                EvaluateError::Dimension(format!("variable `{name}` lies outside the instance dimensions"))
            })?;
            values[i] = value;
        }
        let missing: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_nan()).collect();
        if let Some(&first) = missing.first() {
            return Err(EvaluateError::Incomplete {
                count: missing.len(),
                first: schema.keys()[first].to_string(),
            });
        }
        let sol = Self { schema, values };
        sol.validate()?;
        Ok(sol)
    }

    fn validate(&self) -> Result<()> {
        for (key, v) in self.schema.keys().iter().zip(&self.values) {
            if !v.is_finite() {
                return Err(EvaluateError::Invalid(format!("`{key}` is not finite")));
            }
            if matches!(key, VarKey::Capacity(_)) && *v < -1e-6 {
                return Err(EvaluateError::Invalid(format!("capacity `{key}` is negative ({v})")));
            }
            if key.is_binary() && (v.min((1.0 - v).abs())).abs() > 1e-6 {
                return Err(EvaluateError::Invalid(format!("`{key}` = {v} is not binary")));
            }
        }
        let n = self.capacity(Capacity::Cells);
        if (n - n.round()).abs() > 1e-6 {
            return Err(EvaluateError::Invalid(format!("cell count {n} is not integral")));
        }
        Ok(())
    }

    pub fn schema(&self) -> &DecisionSchema {
        &self.schema
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value of `key`; zero for keys outside the schema (the first-hour
    /// temperature has no participation factor).
    pub fn value(&self, key: &VarKey) -> f64 {
        self.schema.index_of(key).map_or(0.0, |i| self.values[i])
    }

    pub fn capacity(&self, c: Capacity) -> f64 {
        self.value(&VarKey::Capacity(c))
    }

    /// Number of electrolysis cells n^el.
    pub fn cells(&self) -> f64 {
        self.capacity(Capacity::Cells).round()
    }

    pub fn online(&self, r: usize, t: usize) -> bool {
        self.value(&VarKey::Commitment {
            kind: Commitment::Online,
            r,
            t,
        }) > 0.5
    }

    pub fn nominal(&self, q: Recourse, r: usize, t: usize) -> f64 {
        self.value(&VarKey::nominal(q, r, t))
    }

    pub fn factor(&self, q: Recourse, r: usize, t: usize) -> f64 {
        self.value(&VarKey::factor(q, r, t))
    }

    /// `nominal + factor·ξ`
    pub fn policy(&self, q: Recourse, r: usize, t: usize, xi: f64) -> f64 {
        self.nominal(q, r, t) + self.factor(q, r, t) * xi
    }

    /// Writes `name,value` rows after optional `#` header lines.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "name,value")?;
        for (key, v) in self.schema.keys().iter().zip(&self.values) {
            writeln!(out, "{key},{v:?}")?;
        }
        Ok(())
    }

    /// Reads the format of [`AffinePolicySolution::write_csv`].
    pub fn read_csv<R: Read>(instance: &IesInstance, input: R) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen_header = false;
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_header {
                if line != "name,value" {
                    return Err(EvaluateError::Parse {
                        line: i + 1,
                        message: format!("expected header `name,value`, found `{line}`"),
                    });
                }
                seen_header = true;
                continue;
            }
            let (name, value) = line.split_once(',').ok_or_else(|| EvaluateError::Parse {
                line: i + 1,
                message: "expected `name,value`".into(),
            })?;
            let value: f64 = value.trim().parse().map_err(|_| EvaluateError::Parse {
                line: i + 1,
                message: format!("`{value}` is not a number"),
            })?;
            pairs.push((name.trim().to_string(), value));
        }
        if !seen_header {
            return Err(EvaluateError::Parse {
                line: 0,
                message: "empty solution file".into(),
            });
        }
        Self::from_named(instance, pairs)
    }
}

/// One replay of the affine policies against a forecast-error sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedDispatch {
    days: usize,
    hours: usize,
    values: Vec<f64>,
    /// `1ᵀω_{r,t}`, indexed `r·hours + t`.
    pub xi: Vec<f64>,
    /// Realized wind production per hour (MW).
    pub wind: Vec<f64>,
    pub cells: f64,
    /// Temperature at the start of every hour plus after the last hour,
    /// from the exact recursion; `hours + 1` entries per day.
    pub exact_temperature: Vec<Vec<f64>>,
    /// Tank content after every hour from the exact recursion.
    pub exact_tank: Vec<Vec<f64>>,
    /// Electricity balance residual per hour (MW).
    pub power_residual: Vec<f64>,
    /// Heat balance residual per hour (MW).
    pub heat_residual: Vec<f64>,
    /// `stack − n^el·cell` for power, hydrogen and exchange, per hour.
    pub coupling_residual: Vec<[f64; 3]>,
    /// Inequalities breached in this sample.
    pub violations: Vec<ConstraintTag>,
}

impl RealizedDispatch {
    pub fn days(&self) -> usize {
        self.days
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    /// Realized value of a recourse quantity (affine policy).
    pub fn get(&self, q: Recourse, r: usize, t: usize) -> f64 {
        self.values[(r * self.hours + t) * SLOTS + slot(q)]
    }

    pub fn xi(&self, r: usize, t: usize) -> f64 {
        self.xi[r * self.hours + t]
    }

    /// CHP electric and heat output.
    pub fn chp_point(&self, instance: &IesInstance, r: usize, t: usize) -> (f64, f64) {
        (0..4).fold((0.0, 0.0), |(p, q), k| {
            let x = self.get(Recourse::ChpWeight(k), r, t);
            (p + instance.chp.power[k] * x, q + instance.chp.heat[k] * x)
        })
    }

    /// Largest `|exact − affine|` temperature gap (°C).
    pub fn temperature_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.days {
            for t in 0..self.hours {
                worst = worst.max((self.exact_temperature[r][t] - self.get(Recourse::Temperature, r, t)).abs());
            }
        }
        worst
    }

    /// Largest `|exact − affine|` tank-content gap (kg).
    pub fn tank_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.days {
            for t in 0..self.hours {
                worst = worst.max((self.exact_tank[r][t] - self.get(Recourse::TankContent, r, t)).abs());
            }
        }
        worst
    }

    pub fn max_balance_residual(&self) -> f64 {
        self.power_residual
            .iter()
            .chain(&self.heat_residual)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_coupling_residual(&self) -> f64 {
        self.coupling_residual
            .iter()
            .flatten()
            .fold(0.0, |m, v: &f64| m.max(v.abs()))
    }
}

enum Check {
    Policy,
    TemperatureLower(usize),
    TemperatureUpper(usize),
    TankEnd,
}

/// Replays one solution; the inequality list is built once.
pub struct Replayer<'a> {
    instance: &'a IesInstance,
    solution: &'a AffinePolicySolution,
    checks: Vec<(SymbolicConstraint, Check)>,
}

impl<'a> Replayer<'a> {
    pub fn new(instance: &'a IesInstance, solution: &'a AffinePolicySolution) -> Result<Self> {
        let (d, h, b) = solution.schema.dims();
        if (d, h, b) != (instance.days(), instance.hours(), instance.params.bits) {
            return Err(EvaluateError::Dimension(format!(
                "solution covers {d} days × {h} hours with {b} bits, the instance {} × {} with {}",
                instance.days(),
                instance.hours(),
                instance.params.bits
            )));
        }
        let last = instance.hours();
        let checks = build_stochastic_constraints(instance)
            .into_iter()
            .filter(|c| c.kind == ConstraintKind::DrccInequality)
            .map(|c| {
                let t = c.tag.scope.map_or(0, |(_, t)| t);
                let check = match c.tag.template {
                    Template::TemperatureLower => Check::TemperatureLower(t),
                    Template::TemperatureUpper => Check::TemperatureUpper(t),
                    Template::TemperatureEndLower => Check::TemperatureLower(last),
                    Template::TemperatureEndUpper => Check::TemperatureUpper(last),
                    Template::TankEnd => Check::TankEnd,
                    _ => Check::Policy,
                };
                (c, check)
            })
            .collect();
        Ok(Self {
            instance,
            solution,
            checks,
        })
    }

    /// Number of inequality constraints checked per sample.
    pub fn inequalities(&self) -> usize {
        self.checks.len()
    }

    /// Replays errors `ω` laid out `[day][hour][plant]`.
    pub fn replay(&self, omega: &[f64]) -> Result<RealizedDispatch> {
        let inst = self.instance;
        let sol = self.solution;
        let (days, hours, plants) = (inst.days(), inst.hours(), inst.plants());
        if omega.len() != days * hours * plants {
            return Err(EvaluateError::Dimension(format!(
                "error sample has {} entries, expected {days} × {hours} × {plants}",
                omega.len()
            )));
        }
        let p = &inst.params;
        let xi: Vec<f64> = omega.chunks(plants).map(|c| c.iter().sum()).collect();
        let mut values = vec![0.0; days * hours * SLOTS];
        for r in 0..days {
            for t in 0..hours {
                let e = xi[r * hours + t];
                for q in Recourse::all() {
                    values[(r * hours + t) * SLOTS + slot(q)] = sol.policy(q, r, t, e);
                }
            }
        }
        let get = |q: Recourse, r: usize, t: usize| values[(r * hours + t) * SLOTS + slot(q)];
        let cells = sol.cells();
        let c_inv = 1.0 / p.heat_capacity;
        let decay = 1.0 - 1.0 / (p.thermal_resistance * p.heat_capacity);

        let mut wind = Vec::with_capacity(days * hours);
        let mut power_residual = Vec::with_capacity(days * hours);
        let mut heat_residual = Vec::with_capacity(days * hours);
        let mut coupling_residual = Vec::with_capacity(days * hours);
        let mut exact_temperature = Vec::with_capacity(days);
        let mut exact_tank = Vec::with_capacity(days);
        for r in 0..days {
            let mut temps = vec![p.initial_temperature];
            let mut tank = Vec::with_capacity(hours);
            for t in 0..hours {
                let w = inst.moments.mean_total(r, t) + xi[r * hours + t];
                wind.push(w);
                let (mut chp_p, mut chp_q) = (0.0, 0.0);
                for k in 0..4 {
                    chp_p += inst.chp.power[k] * get(Recourse::ChpWeight(k), r, t);
                    chp_q += inst.chp.heat[k] * get(Recourse::ChpWeight(k), r, t);
                }
                power_residual.push(
                    get(Recourse::Transmission, r, t) + chp_p + w
                        - inst.days.electric[r][t]
                        - get(Recourse::StackPower, r, t) / p.eta_converter
                        - p.eta_compressor * get(Recourse::HydrogenMass, r, t)
                        - get(Recourse::BoilerPower, r, t),
                );
                heat_residual.push(
                    chp_q + get(Recourse::StackExchange, r, t) + get(Recourse::BoilerHeat, r, t) - inst.days.heat[r][t],
                );
                coupling_residual.push(Coupling::ALL.map(|c| get(c.stack(), r, t) - cells * get(c.cell(), r, t)));
                let now = temps[t];
                temps.push(
                    decay * now
                        + c_inv * (get(Recourse::CellHeat, r, t) - get(Recourse::CellExchange, r, t))
                        + c_inv * p.ambient_temperature / p.thermal_resistance,
                );
                let previous = if t == 0 { 0.0 } else { tank[t - 1] };
                tank.push(previous + get(Recourse::HydrogenMass, r, t));
            }
            exact_temperature.push(temps);
            exact_tank.push(tank);
        }

        let (tmin, tmax) = inst.temperature_bounds();
        let tank_cap = sol.capacity(Capacity::Tank);
        let mut violations = Vec::new();
        for (c, check) in &self.checks {
            let r = c.tag.scope.map_or(0, |(r, _)| r);
            let (value, scale) = match *check {
                Check::Policy => {
                    let mut v = c.nominal.constant;
                    let mut scale = c.nominal.constant.abs();
                    for (k, a) in &c.nominal.terms {
                        let term = a * sol.value(k);
                        v += term;
                        scale += term.abs();
                    }
                    for l in &c.loadings {
                        let term = l.expr.evaluate(|k| sol.value(k)) * xi[r * hours + l.hour];
                        v += term;
                        scale += term.abs();
                    }
                    (v, scale)
                }
                Check::TemperatureLower(t) => (tmin - exact_temperature[r][t], tmin.abs()),
                Check::TemperatureUpper(t) => (exact_temperature[r][t] - tmax, tmax.abs()),
                Check::TankEnd => {
                    let m = exact_tank[r][hours - 1];
                    (m - tank_cap, m.abs() + tank_cap.abs())
                }
            };
            if value > VIOLATION_TOLERANCE * scale.max(1.0) {
                violations.push(c.tag);
            }
        }

        Ok(RealizedDispatch {
            days,
            hours,
            values,
            xi,
            wind,
            cells,
            exact_temperature,
            exact_tank,
            power_residual,
            heat_residual,
            coupling_residual,
            violations,
        })
    }

    /// Replays every scenario of `errors`; order follows the scenarios.
    pub fn replay_all(&self, errors: &ScenarioErrors) -> Result<Vec<RealizedDispatch>> {
        let (_, d, h, z) = errors.shape();
        if (d, h, z) != (self.instance.days(), self.instance.hours(), self.instance.plants()) {
            return Err(EvaluateError::Dimension(format!(
                "errors cover ({d}, {h}, {z}), the instance ({}, {}, {})",
                self.instance.days(),
                self.instance.hours(),
                self.instance.plants()
            )));
        }
        (0..errors.scenarios())
            .into_par_iter()
            .map(|s| self.replay(errors.sample(s)))
            .collect()
    }
}

/// Replays a single error sample `[day][hour][plant]`.
pub fn apply_policy(
    solution: &AffinePolicySolution,
    omega: &[f64],
    instance: &IesInstance,
) -> Result<RealizedDispatch> {
    Replayer::new(instance, solution)?.replay(omega)
}

/// Violation statistics over a set of replays.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    pub samples: usize,
    /// Samples with at least one breached inequality.
    pub violated_samples: usize,
    /// Samples in which each inequality was breached.
    pub per_constraint: BTreeMap<ConstraintTag, usize>,
    pub inequalities: usize,
    pub max_temperature_deviation: f64,
    pub max_tank_deviation: f64,
}

impl ViolationReport {
    pub fn from_dispatches(dispatches: &[RealizedDispatch], inequalities: usize) -> Self {
        let mut per_constraint = BTreeMap::new();
        let mut violated_samples = 0;
        let (mut temp, mut tank) = (0.0f64, 0.0f64);
        for d in dispatches {
            if !d.violations.is_empty() {
                violated_samples += 1;
            }
            for tag in &d.violations {
                *per_constraint.entry(*tag).or_insert(0) += 1;
            }
            temp = temp.max(d.temperature_deviation());
            tank = tank.max(d.tank_deviation());
        }
        Self {
            samples: dispatches.len(),
            violated_samples,
            per_constraint,
            inequalities,
            max_temperature_deviation: temp,
            max_tank_deviation: tank,
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.violated_samples as f64 / self.samples as f64
        }
    }

    /// Breach frequency of one inequality.
    pub fn constraint_fraction(&self, tag: &ConstraintTag) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        self.per_constraint.get(tag).copied().unwrap_or(0) as f64 / self.samples as f64
    }

    /// Per-template histogram: samples breaching any member of a template.
    pub fn by_template(&self) -> BTreeMap<Template, usize> {
        let mut out = BTreeMap::new();
        for (tag, n) in &self.per_constraint {
            let e = out.entry(tag.template).or_insert(0);
            *e = (*e).max(*n);
        }
        out
    }

    /// `constraint,template,violations,fraction`, one row per breached inequality.
    pub fn write_histogram_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["constraint", "template", "violations", "fraction"])?;
        for (tag, n) in &self.per_constraint {
            w.write_record([
                tag.to_string(),
                tag.template.name().to_string(),
                n.to_string(),
                format!("{:?}", *n as f64 / self.samples.max(1) as f64),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replays errors relative to the instance forecast mean and reports the
/// share of scenarios breaching at least one inequality.
pub fn out_of_sample_violation(
    solution: &AffinePolicySolution,
    scenarios: &ScenarioSet,
    instance: &IesInstance,
) -> Result<ViolationReport> {
    let errors = forecast_errors(scenarios, &instance.moments).map_err(|e| EvaluateError::Dimension(e.to_string()))?;
    violation_report(solution, &errors, instance)
}

/// As [`out_of_sample_violation`] for errors given directly.
pub fn violation_report(
    solution: &AffinePolicySolution,
    errors: &ScenarioErrors,
    instance: &IesInstance,
) -> Result<ViolationReport> {
    let replayer = Replayer::new(instance, solution)?;
    let dispatches = replayer.replay_all(errors)?;
    Ok(ViolationReport::from_dispatches(&dispatches, replayer.inequalities()))
}

/// Energy prices for the profit split, $/MWh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prices {
    pub electricity: f64,
    pub heat: f64,
}

impl Default for Prices {
    fn default() -> Self {
        Self {
            electricity: 55.0,
            heat: 45.0,
        }
    }
}

impl Prices {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("electricity", self.electricity), ("heat", self.heat)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EvaluateError::Config {
                    field: format!("prices.{field}"),
                    message: format!("{v} must be a non-negative number"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stakeholder {
    /// Electricity revenue pool before the split.
    Pool,
    Wind,
    Chp,
    /// P2HH and boiler investor.
    Investor,
}

impl Stakeholder {
    pub const ALL: [Stakeholder; 4] = [
        Stakeholder::Pool,
        Stakeholder::Wind,
        Stakeholder::Chp,
        Stakeholder::Investor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stakeholder::Pool => "pool",
            Stakeholder::Wind => "wind",
            Stakeholder::Chp => "chp",
            Stakeholder::Investor => "investor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfitLine {
    pub stakeholder: Stakeholder,
    pub item: &'static str,
    /// $/yr, sample mean; costs are negative.
    pub amount: f64,
}

/// Annual profit per stakeholder, averaged over the replays.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfitReport {
    pub lines: Vec<ProfitLine>,
    pub samples: usize,
}

impl ProfitReport {
    pub fn total(&self, who: Stakeholder) -> f64 {
        self.lines
            .iter()
            .filter(|l| l.stakeholder == who)
            .map(|l| l.amount)
            .sum()
    }

    pub fn line(&self, who: Stakeholder, item: &str) -> Option<f64> {
        self.lines
            .iter()
            .find(|l| l.stakeholder == who && l.item == item)
            .map(|l| l.amount)
    }

    /// `stakeholder,item,amount` followed by one `total` row per stakeholder.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stakeholder", "item", "amount"])?;
        for l in &self.lines {
            w.write_record([l.stakeholder.name(), l.item, &format!("{:?}", l.amount)])?;
        }
        for who in Stakeholder::ALL {
            w.write_record([who.name(), "total", &format!("{:?}", self.total(who))])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits the electricity pool (sales minus transmission cost) between wind
/// and CHP by production; the CHP adds heat sales and pays fuel and
/// start-up/shut-down costs; the investor sells heat and hydrogen and pays
/// investment and all electricity it draws, compressor included.
pub fn profit_distribution(
    solution: &AffinePolicySolution,
    dispatches: &[RealizedDispatch],
    prices: Prices,
    instance: &IesInstance,
) -> Result<ProfitReport> {
    prices.validate()?;
    if dispatches.is_empty() {
        return Err(EvaluateError::Config {
            field: "samples".into(),
            message: "at least one realized dispatch is needed".into(),
        });
    }
    let p = &instance.params;
    let investment = p.cost_cell * solution.cells()
        + p.cost_converter * solution.capacity(Capacity::Converter)
        + p.cost_compressor * solution.capacity(Capacity::Compressor)
        + p.cost_tank * solution.capacity(Capacity::Tank)
        + p.cost_boiler * solution.capacity(Capacity::Boiler);
    let (mut startup, mut shutdown) = (0.0, 0.0);
    for r in 0..instance.days() {
        let k = instance.days.weights[r];
        for t in 0..instance.hours() {
            startup += k
                * p.cost_startup
                * solution.value(&VarKey::Commitment {
                    kind: Commitment::Startup,
                    r,
                    t,
                });
            shutdown += k
                * p.cost_shutdown
                * solution.value(&VarKey::Commitment {
                    kind: Commitment::Shutdown,
                    r,
                    t,
                });
        }
    }

    let mut acc = [0.0; 12];
    for d in dispatches {
        if (d.days, d.hours) != (instance.days(), instance.hours()) {
            return Err(EvaluateError::Dimension("dispatch does not match the instance".into()));
        }
        let mut a = [0.0; 12];
        let (mut wind_mwh, mut chp_mwh) = (0.0, 0.0);
        for r in 0..instance.days() {
            let k = instance.days.weights[r];
            for t in 0..instance.hours() {
                let (chp_p, chp_q) = d.chp_point(instance, r, t);
                let fuel: f64 = (0..4)
                    .map(|c| instance.chp.cost[c] * d.get(Recourse::ChpWeight(c), r, t))
                    .sum();
                let purchase = d.get(Recourse::StackPower, r, t) / p.eta_converter
                    + p.eta_compressor * d.get(Recourse::HydrogenMass, r, t)
                    + d.get(Recourse::BoilerPower, r, t);
                let trans = d.get(Recourse::Transmission, r, t);
                wind_mwh += k * d.wind[r * instance.hours() + t];
                chp_mwh += k * chp_p;
                a[0] += k * prices.electricity * (instance.days.electric[r][t] + purchase);
                a[1] -= k * p.cost_transmission * trans * trans;
                a[4] += k * prices.heat * chp_q;
                a[5] -= k * fuel;
                a[8] += k * prices.heat * (d.get(Recourse::BoilerHeat, r, t) + d.get(Recourse::StackExchange, r, t));
                a[9] += k * p.price_hydrogen * d.get(Recourse::HydrogenMass, r, t);
                a[11] -= k * prices.electricity * purchase;
            }
        }
        let pool = a[0] + a[1];
        let produced = wind_mwh + chp_mwh;
        let wind_share = if produced > 0.0 {
            (wind_mwh / produced).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let chp_share = if produced > 0.0 { 1.0 - wind_share } else { 0.0 };
        a[2] = wind_share * pool;
        a[3] = chp_share * pool;
        // a pool that cannot be attributed stays a pool residual
        a[6] = -(a[2] + a[3]);
        for (s, v) in acc.iter_mut().zip(a) {
            *s += v;
        }
    }
    let n = dispatches.len() as f64;
    let mean = |i: usize| acc[i] / n;
    use Stakeholder::*;
    let line = |stakeholder, item, amount| ProfitLine {
        stakeholder,
        item,
        amount,
    };
    let lines = vec![
        line(Pool, "electricity_sales", mean(0)),
        line(Pool, "transmission_cost", mean(1)),
        line(Pool, "distributed", mean(6)),
        line(Wind, "electricity_share", mean(2)),
        line(Chp, "electricity_share", mean(3)),
        line(Chp, "heat_sales", mean(4)),
        line(Chp, "fuel", mean(5)),
        line(Chp, "startup", -startup),
        line(Chp, "shutdown", -shutdown),
        line(Investor, "heat_sales", mean(8)),
        line(Investor, "hydrogen_sales", mean(9)),
        line(Investor, "investment", -investment),
        line(Investor, "electricity_purchases", mean(11)),
    ];
    Ok(ProfitReport {
        lines,
        samples: dispatches.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChpPoint {
    pub day: usize,
    pub hour: usize,
    /// `None` for the nominal schedule.
    pub sample: Option<usize>,
    pub power: f64,
    pub heat: f64,
}

/// Annual energy and operating statistics, averaged over the replays.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiReport {
    pub samples: usize,
    /// MWh/yr drawn from the transmission grid.
    pub imported_mwh: f64,
    /// MWh/yr pushed back into the transmission grid.
    pub inverse_flow_mwh: f64,
    pub hydrogen_kg: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    pub chp_points: Vec<ChpPoint>,
    /// Whether every committed nominal CHP point lies in the operating
    /// polytope (1e-6 MW).
    pub chp_inside: bool,
    /// Committed sampled points outside the polytope; affine weights leave
    /// `[0, 1]` exactly when a weight bound is breached.
    pub chp_outside_samples: usize,
    /// Per `(r, t)`: nominal, minimum and maximum exact temperature.
    pub temperature_paths: Vec<(usize, usize, f64, f64, f64)>,
}

impl KpiReport {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        for (name, v) in [
            ("samples", self.samples as f64),
            ("imported_mwh", self.imported_mwh),
            ("inverse_flow_mwh", self.inverse_flow_mwh),
            ("hydrogen_kg", self.hydrogen_kg),
            ("temperature_min", self.temperature_min),
            ("temperature_max", self.temperature_max),
            ("chp_inside", if self.chp_inside { 1.0 } else { 0.0 }),
            ("chp_outside_samples", self.chp_outside_samples as f64),
        ] {
            w.write_record([name, &format!("{v:?}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_chp_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "hour", "sample", "power_mw", "heat_mw"])?;
        for c in &self.chp_points {
            w.write_record([
                (c.day + 1).to_string(),
                (c.hour + 1).to_string(),
                c.sample.map_or_else(|| "nominal".to_string(), |s| (s + 1).to_string()),
                format!("{:?}", c.power),
                format!("{:?}", c.heat),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_temperature_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "hour", "nominal_c", "min_c", "max_c"])?;
        for &(r, t, nominal, lo, hi) in &self.temperature_paths {
            w.write_record([
                (r + 1).to_string(),
                (t + 1).to_string(),
                format!("{nominal:?}"),
                format!("{lo:?}"),
                format!("{hi:?}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Inverse flow is `Σ max(−p^trans, 0)·k_r`; import positive.
pub fn kpi_report(
    solution: &AffinePolicySolution,
    dispatches: &[RealizedDispatch],
    instance: &IesInstance,
) -> Result<KpiReport> {
    let (days, hours) = (instance.days(), instance.hours());
    let n = dispatches.len().max(1) as f64;
    let (mut imported, mut exported, mut hydrogen) = (0.0, 0.0, 0.0);
    let mut chp_points = Vec::new();
    for r in 0..days {
        for t in 0..hours {
            let (mut p, mut q) = (0.0, 0.0);
            for k in 0..4 {
                p += instance.chp.power[k] * solution.nominal(Recourse::ChpWeight(k), r, t);
                q += instance.chp.heat[k] * solution.nominal(Recourse::ChpWeight(k), r, t);
            }
            chp_points.push(ChpPoint {
                day: r,
                hour: t,
                sample: None,
                power: p,
                heat: q,
            });
        }
    }
    let mut temps: Vec<(f64, f64)> = vec![(f64::INFINITY, f64::NEG_INFINITY); days * hours];
    for (s, d) in dispatches.iter().enumerate() {
        if (d.days, d.hours) != (days, hours) {
            return Err(EvaluateError::Dimension("dispatch does not match the instance".into()));
        }
        for r in 0..days {
            let k = instance.days.weights[r];
            for t in 0..hours {
                let trans = d.get(Recourse::Transmission, r, t);
                imported += k * trans.max(0.0);
                exported += k * (-trans).max(0.0);
                hydrogen += k * d.get(Recourse::HydrogenMass, r, t);
                let (power, heat) = d.chp_point(instance, r, t);
                chp_points.push(ChpPoint {
                    day: r,
                    hour: t,
                    sample: Some(s),
                    power,
                    heat,
                });
                let e = &mut temps[r * hours + t];
                e.0 = e.0.min(d.exact_temperature[r][t]);
                e.1 = e.1.max(d.exact_temperature[r][t]);
            }
        }
    }
    let mut temperature_paths = Vec::with_capacity(days * hours);
    for r in 0..days {
        for t in 0..hours {
            let (lo, hi) = temps[r * hours + t];
            let nominal = solution.nominal(Recourse::Temperature, r, t);
            temperature_paths.push((r, t, nominal, lo.min(nominal), hi.max(nominal)));
        }
    }
    let committed = chp_points.iter().filter(|c| solution.online(c.day, c.hour));
    let (nominal, sampled): (Vec<&ChpPoint>, Vec<&ChpPoint>) = committed.partition(|c| c.sample.is_none());
    let chp_inside = nominal.iter().all(|c| instance.chp.contains(c.power, c.heat, 1e-6));
    let chp_outside_samples = sampled
        .iter()
        .filter(|c| !instance.chp.contains(c.power, c.heat, 1e-6))
        .count();
    Ok(KpiReport {
        samples: dispatches.len(),
        imported_mwh: imported / n,
        inverse_flow_mwh: exported / n,
        hydrogen_kg: hydrogen / n,
        temperature_min: temperature_paths.iter().map(|p| p.3).fold(f64::INFINITY, f64::min),
        temperature_max: temperature_paths.iter().map(|p| p.4).fold(f64::NEG_INFINITY, f64::max),
        chp_points,
        chp_inside,
        chp_outside_samples,
        temperature_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic_solver::{solve_misocp, BranchBoundParams, SolveStatus};
    use crate::desk;
    use crate::ies_model::Flexibility;
    use crate::reformulate::{compile_program, ReformulationMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::sync::OnceLock;

    fn solved() -> &'static (IesInstance, AffinePolicySolution) {
        static CELL: OnceLock<(IesInstance, AffinePolicySolution)> = OnceLock::new();
        CELL.get_or_init(|| {
            let instance = desk::fixture(3, 2, Flexibility::default());
            let program = compile_program(&instance, ReformulationMode::drcc(0.05))
                .unwrap()
                .program;
            let sol = solve_misocp(&program, &BranchBoundParams::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            let policy = AffinePolicySolution::from_vector(&instance, &sol.x).unwrap();
            (instance, policy)
        })
    }

    fn random_omega(instance: &IesInstance, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.05).unwrap();
        (0..instance.days() * instance.hours() * instance.plants())
            .map(|_| normal.sample(&mut rng))
            .collect()
    }

    #[test]
    fn zero_error_reproduces_nominal_schedule() {
        let (instance, sol) = solved();
        let omega = vec![0.0; instance.days() * instance.hours() * instance.plants()];
        let d = apply_policy(sol, &omega, instance).unwrap();
        for r in 0..instance.days() {
            for t in 0..instance.hours() {
                for q in Recourse::all() {
                    assert_eq!(d.get(q, r, t), sol.nominal(q, r, t));
                }
            }
        }
    }

    #[test]
    fn random_errors_keep_balances_and_coupling() {
        let (instance, sol) = solved();
        for seed in 0..20 {
            let d = apply_policy(sol, &random_omega(instance, seed), instance).unwrap();
            assert!(d.max_balance_residual() <= 1e-9, "{}", d.max_balance_residual());
            assert!(d.max_coupling_residual() <= 1e-9, "{}", d.max_coupling_residual());
        }
    }

    #[test]
    fn equal_hourly_aggregates_match_exact_recursions() {
        let (instance, sol) = solved();
        let plants = instance.plants();
        for c in [-0.2, 0.05, 0.3] {
            // spread the same aggregate unevenly over the plants
            let omega: Vec<f64> = (0..instance.days() * instance.hours())
                .flat_map(|_| (0..plants).map(move |z| if z == 0 { 0.7 * c } else { 0.3 * c / (plants - 1) as f64 }))
                .collect();
            let d = apply_policy(sol, &omega, instance).unwrap();
            assert!(d.temperature_deviation() <= 1e-9, "{}", d.temperature_deviation());
            assert!(d.tank_deviation() <= 1e-9, "{}", d.tank_deviation());
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (instance, sol) = solved();
        assert!(matches!(
            apply_policy(sol, &[0.0; 3], instance),
            Err(EvaluateError::Dimension(_))
        ));
    }

    #[test]
    fn forecast_mean_scenarios_never_violate() {
        let (instance, sol) = solved();
        let m = &instance.moments;
        let scenarios = ScenarioSet::from_fn(
            10,
            instance.days(),
            instance.hours(),
            instance.plants(),
            |_, r, t, z| m.mean(r, t)[z],
        )
        .unwrap();
        let report = out_of_sample_violation(sol, &scenarios, instance).unwrap();
        assert_eq!(report.samples, 10);
        assert_eq!(report.fraction(), 0.0);
        assert!(report.per_constraint.is_empty());
    }

    #[test]
    fn boiler_breach_counts_every_sample() {
        let (instance, sol) = solved();
        let mut broken = sol.clone();
        let boiler = broken.capacity(Capacity::Boiler);
        for t in 0..instance.hours() {
            let i = broken
                .schema
                .index_of(&VarKey::nominal(Recourse::BoilerPower, 0, t))
                .unwrap();
            broken.values[i] = boiler + 1.0;
        }
        let errors = ScenarioErrors::from_fn(
            50,
            instance.days(),
            instance.hours(),
            instance.plants(),
            |s, _, t, z| 0.01 * ((s + t + z) as f64).sin(),
        );
        let report = violation_report(&broken, &errors, instance).unwrap();
        assert_eq!(report.fraction(), 1.0);
        let tag = ConstraintTag::hourly(Template::BoilerUpper, 0, 0, 0);
        assert_eq!(report.constraint_fraction(&tag), 1.0);
        assert_eq!(report.by_template()[&Template::BoilerUpper], 50);
        let mut csv = Vec::new();
        report.write_histogram_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("constraint,template,violations,fraction\n"));
    }

    #[test]
    fn replays_are_deterministic() {
        let (instance, sol) = solved();
        let errors = ScenarioErrors::from_fn(
            40,
            instance.days(),
            instance.hours(),
            instance.plants(),
            |s, r, t, z| 0.05 * ((7 * s + 3 * r + 5 * t + z) as f64).cos(),
        );
        let a = violation_report(sol, &errors, instance).unwrap();
        let b = violation_report(sol, &errors, instance).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profit_lines_sum_to_totals() {
        let (instance, sol) = solved();
        let replayer = Replayer::new(instance, sol).unwrap();
        let dispatches: Vec<_> = (0..10)
            .map(|s| replayer.replay(&random_omega(instance, s)).unwrap())
            .collect();
        let report = profit_distribution(sol, &dispatches, Prices::default(), instance).unwrap();
        for who in Stakeholder::ALL {
            let sum: f64 = report
                .lines
                .iter()
                .filter(|l| l.stakeholder == who)
                .map(|l| l.amount)
                .sum();
            assert!((sum - report.total(who)).abs() <= 1e-6);
        }
        // the pool is fully distributed when anything is produced
        assert!(
            report.total(Stakeholder::Pool).abs()
                <= 1e-6 * report.line(Stakeholder::Pool, "electricity_sales").unwrap()
        );
        let shares = report.line(Stakeholder::Wind, "electricity_share").unwrap()
            + report.line(Stakeholder::Chp, "electricity_share").unwrap();
        let pool = report.line(Stakeholder::Pool, "electricity_sales").unwrap()
            + report.line(Stakeholder::Pool, "transmission_cost").unwrap();
        assert!((shares - pool).abs() <= 1e-6);
    }

    #[test]
    fn no_wind_means_no_wind_profit() {
        let (instance, sol) = solved();
        let m = &instance.moments;
        let mut omega = Vec::new();
        for r in 0..instance.days() {
            for t in 0..instance.hours() {
                omega.extend(m.mean(r, t).iter().map(|v| -v));
            }
        }
        let d = apply_policy(sol, &omega, instance).unwrap();
        assert!(d.wind.iter().all(|w| w.abs() < 1e-12));
        let report = profit_distribution(sol, &[d], Prices::default(), instance).unwrap();
        assert!(report.total(Stakeholder::Wind).abs() < 1e-9);
    }

    #[test]
    fn negative_prices_are_rejected() {
        let (instance, sol) = solved();
        let d = apply_policy(sol, &random_omega(instance, 1), instance).unwrap();
        let prices = Prices {
            electricity: -1.0,
            heat: 45.0,
        };
        assert!(matches!(
            profit_distribution(sol, &[d], prices, instance),
            Err(EvaluateError::Config { .. })
        ));
    }

    #[test]
    fn kpis_follow_the_sign_convention() {
        let (instance, sol) = solved();
        let replayer = Replayer::new(instance, sol).unwrap();
        let dispatches: Vec<_> = (0..5)
            .map(|s| replayer.replay(&random_omega(instance, s)).unwrap())
            .collect();
        let kpi = kpi_report(sol, &dispatches, instance).unwrap();
        assert!(kpi.chp_inside);
        assert!(kpi.imported_mwh >= 0.0 && kpi.inverse_flow_mwh >= 0.0);
        let mut expected = 0.0;
        for d in &dispatches {
            for t in 0..instance.hours() {
                expected += instance.days.weights[0] * (-d.get(Recourse::Transmission, 0, t)).max(0.0);
            }
        }
        assert!((kpi.inverse_flow_mwh - expected / 5.0).abs() <= 1e-9 * expected.max(1.0));
        assert_eq!(kpi.chp_points.len(), instance.hours() * 6);
        assert!(kpi.temperature_min <= kpi.temperature_max);
    }

    #[test]
    fn importing_everywhere_means_no_inverse_flow() {
        let (instance, sol) = solved();
        let mut d = apply_policy(sol, &random_omega(instance, 2), instance).unwrap();
        for t in 0..instance.hours() {
            d.values[t * SLOTS + slot(Recourse::Transmission)] = 0.5;
        }
        let kpi = kpi_report(sol, &[d], instance).unwrap();
        assert_eq!(kpi.inverse_flow_mwh, 0.0);
        assert!(kpi.imported_mwh > 0.0);
    }

    #[test]
    fn solution_csv_round_trips() {
        let (instance, sol) = solved();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf, &["p2hh test".to_string()]).unwrap();
        let back = AffinePolicySolution::read_csv(instance, buf.as_slice()).unwrap();
        assert_eq!(back.values(), sol.values());

        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            AffinePolicySolution::read_csv(instance, truncated.as_bytes()),
            Err(EvaluateError::Incomplete { .. })
        ));
        let garbled = text.replacen("cap.cells", "cap.cellz", 1);
        assert!(matches!(
            AffinePolicySolution::read_csv(instance, garbled.as_bytes()),
            Err(EvaluateError::UnknownVariable(_))
        ));
        let other = desk::fixture(2, 2, Flexibility::default());
        assert!(matches!(
            AffinePolicySolution::read_csv(&other, text.as_bytes()),
            Err(EvaluateError::Dimension(_))
        ));
    }
}
