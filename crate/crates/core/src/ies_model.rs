//! Planning model of the integrated electricity/heat system: parameters,
//! decision variables and the symbolic constraint set before reformulation.
//!
//! Every recourse quantity follows an affine policy
//! `q̃(ω) = q + φ·(1ᵀω)` with nominal value `q` and participation factor `φ`.
//! Symbolic constraints are written as
//!
//! ```text
//! nominal + Σ_h loading_h · (1ᵀω_{r,h})   (=, ≤) 0
//! ```
//!
//! where `h` ranges over at most two consecutive hours of the same day.
//! Hours and days are zero-based. Stack/cell products `n^el · p^p2hh` are
//! not emitted here; they are linearised by the reformulation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrolyser::{self, CellOperatingRegion, CellParameters, FARADAY};
use crate::scenarios::{RepresentativeDaySet, WindMoments};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn config_err(field: &str, message: impl Into<String>) -> ModelError {
    ModelError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Cost, efficiency, ramping, thermal and risk parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IesParameters {
    /// $/cell·yr
    pub cost_cell: f64,
    /// $/MW·yr
    pub cost_converter: f64,
    /// $/(kg/h)·yr
    pub cost_compressor: f64,
    /// $/kg·yr
    pub cost_tank: f64,
    /// $/MW·yr
    pub cost_boiler: f64,
    /// $/event
    pub cost_startup: f64,
    /// $/event
    pub cost_shutdown: f64,
    /// $/MW²h
    pub cost_transmission: f64,
    /// $/kg, hydrogen sale price
    pub price_hydrogen: f64,
    pub eta_converter: f64,
    pub eta_boiler: f64,
    /// MWh/kg
    pub eta_compressor: f64,
    /// MW/h
    pub ramp_up: f64,
    pub ramp_down: f64,
    pub startup_ramp: f64,
    pub shutdown_ramp: f64,
    /// hours
    pub min_up: usize,
    pub min_down: usize,
    /// Cell heat capacity, MWh/°C.
    pub heat_capacity: f64,
    /// Equivalent thermal resistance of a cell, °C/MW.
    pub thermal_resistance: f64,
    /// °C
    pub ambient_temperature: f64,
    /// Cell temperature at the start of each day, °C.
    pub initial_temperature: f64,
    /// C/mol
    pub faraday: f64,
    /// Thermal-neutral voltage used in the hydrogen conversion; `None`
    /// evaluates the cell correlation at 25 °C.
    pub thermal_neutral_voltage: Option<f64>,
    /// kg
    pub tank_max: f64,
    pub epsilon: f64,
    /// Width of the binary expansion of the cell count.
    pub bits: usize,
    /// Big-M for the stack products, MW per cell; `None` uses the largest
    /// single-cell power on the admissible box.
    pub big_m: Option<f64>,
}

impl Default for IesParameters {
    fn default() -> Self {
        Self {
            cost_cell: 200.0,
            cost_converter: 15_000.0,
            cost_compressor: 1_000.0,
            cost_tank: 50.0,
            cost_boiler: 10_000.0,
            cost_startup: 100.0,
            cost_shutdown: 100.0,
            cost_transmission: 30.0,
            price_hydrogen: 4.0,
            eta_converter: 0.95,
            eta_boiler: 0.99,
            eta_compressor: 0.002,
            ramp_up: 0.5,
            ramp_down: 0.5,
            startup_ramp: 0.6,
            shutdown_ramp: 0.6,
            min_up: 2,
            min_down: 2,
            heat_capacity: 1e-4,
            thermal_resistance: 3.3e5,
            ambient_temperature: 20.0,
            initial_temperature: 80.0,
            faraday: FARADAY,
            thermal_neutral_voltage: None,
            tank_max: 10_000.0,
            epsilon: 0.05,
            bits: 12,
            big_m: None,
        }
    }
}

impl IesParameters {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("cost_cell", self.cost_cell),
            ("cost_converter", self.cost_converter),
            ("cost_compressor", self.cost_compressor),
            ("cost_tank", self.cost_tank),
            ("cost_boiler", self.cost_boiler),
            ("cost_startup", self.cost_startup),
            ("cost_shutdown", self.cost_shutdown),
            ("cost_transmission", self.cost_transmission),
            ("eta_compressor", self.eta_compressor),
            ("tank_max", self.tank_max),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        let positive = [
            ("price_hydrogen", self.price_hydrogen),
            ("ramp_up", self.ramp_up),
            ("ramp_down", self.ramp_down),
            ("startup_ramp", self.startup_ramp),
            ("shutdown_ramp", self.shutdown_ramp),
            ("heat_capacity", self.heat_capacity),
            ("thermal_resistance", self.thermal_resistance),
            ("faraday", self.faraday),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("eta_converter", self.eta_converter), ("eta_boiler", self.eta_boiler)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err(name, format!("must lie in (0, 1], got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(config_err(
                "epsilon",
                format!("must lie in the open interval (0, 1), got {}", self.epsilon),
            ));
        }
        if self.min_up < 1 {
            return Err(config_err("min_up", "must be at least 1"));
        }
        if self.min_down < 1 {
            return Err(config_err("min_down", "must be at least 1"));
        }
        if self.bits == 0 || self.bits > 30 {
            return Err(config_err("bits", format!("must lie in 1..=30, got {}", self.bits)));
        }
        if !self.ambient_temperature.is_finite() || !self.initial_temperature.is_finite() {
            return Err(config_err("ambient_temperature", "temperatures must be finite"));
        }
        if let Some(u) = self.thermal_neutral_voltage {
            if !(u.is_finite() && u > 0.0) {
                return Err(config_err(
                    "thermal_neutral_voltage",
                    format!("must be positive, got {u}"),
                ));
            }
        }
        if let Some(m) = self.big_m {
            if !(m.is_finite() && m > 0.0) {
                return Err(config_err("big_m", format!("must be positive, got {m}")));
            }
        }
        Ok(())
    }

    /// Largest cell count representable with `bits` binaries.
    pub fn max_cells(&self) -> usize {
        (1usize << self.bits) - 1
    }
}

/// CHP operating polytope given by four corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChpRegion {
    /// Electric output at the corners, MW.
    pub power: [f64; 4],
    /// Heat output at the corners, MW.
    pub heat: [f64; 4],
    /// Fuel cost at the corners, $/h.
    pub cost: [f64; 4],
}

impl Default for ChpRegion {
    fn default() -> Self {
        Self {
            power: [0.3, 1.5, 1.2, 0.2],
            heat: [0.0, 0.0, 1.2, 0.9],
            cost: [30.0, 120.0, 110.0, 40.0],
        }
    }
}

impl ChpRegion {
    pub fn validate(&self) -> Result<()> {
        if self
            .power
            .iter()
            .chain(&self.heat)
            .chain(&self.cost)
            .any(|v| !v.is_finite())
        {
            return Err(config_err("chp", "corner values must be finite"));
        }
        if self.cost.iter().any(|c| *c < 0.0) {
            return Err(config_err("chp.cost", "corner costs must be non-negative"));
        }
        let mut sign = 0.0;
        for k in 0..4 {
            let (a, b, c) = (k, (k + 1) % 4, (k + 2) % 4);
            let cross = (self.power[b] - self.power[a]) * (self.heat[c] - self.heat[b])
                - (self.heat[b] - self.heat[a]) * (self.power[c] - self.power[b]);
            if cross.abs() <= 1e-12 {
                return Err(config_err("chp", "corners must form a non-degenerate quadrilateral"));
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(config_err("chp", "corners must form a convex quadrilateral in order"));
            }
        }
        Ok(())
    }

    /// Whether `(p, q)` lies in the polytope within `tol` (MW).
    pub fn contains(&self, p: f64, q: f64, tol: f64) -> bool {
        let mut orientation = 0.0;
        for k in 0..4 {
            let b = (k + 1) % 4;
            let cross = (self.power[b] - self.power[k]) * (self.heat[(k + 2) % 4] - self.heat[b])
                - (self.heat[b] - self.heat[k]) * (self.power[(k + 2) % 4] - self.power[b]);
            orientation += cross;
        }
        let s = orientation.signum();
        (0..4).all(|k| {
            let b = (k + 1) % 4;
            let (ex, ey) = (self.power[b] - self.power[k], self.heat[b] - self.heat[k]);
            let len = ex.hypot(ey);
            let cross = ex * (q - self.heat[k]) - ey * (p - self.power[k]);
            s * cross / len >= -tol
        })
    }
}

/// Which flexibility options may be built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flexibility {
    pub p2hh: bool,
    pub boiler: bool,
}

impl Default for Flexibility {
    fn default() -> Self {
        Self {
            p2hh: true,
            boiler: true,
        }
    }
}

impl Flexibility {
    /// The four planning cases: CHP only, boiler only, P2HH only, both.
    pub fn scenario(index: usize) -> Option<Self> {
        match index {
            1 => Some(Self {
                p2hh: false,
                boiler: false,
            }),
            2 => Some(Self {
                p2hh: false,
                boiler: true,
            }),
            3 => Some(Self {
                p2hh: true,
                boiler: false,
            }),
            4 => Some(Self {
                p2hh: true,
                boiler: true,
            }),
            _ => None,
        }
    }
}

/// A validated planning instance.
#[derive(Debug, Clone)]
pub struct IesInstance {
    pub params: IesParameters,
    pub chp: ChpRegion,
    pub cell: CellOperatingRegion,
    pub days: RepresentativeDaySet,
    pub moments: WindMoments,
    pub flexibility: Flexibility,
    thermal_neutral_voltage: f64,
    big_m: f64,
}

/// Sizes of the compiled problem, predicted before compilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableForecast {
    pub continuous: usize,
    pub binary: usize,
}

pub fn build_instance(
    params: IesParameters,
    chp: ChpRegion,
    cell_params: &CellParameters,
    cell: CellOperatingRegion,
    days: RepresentativeDaySet,
    moments: WindMoments,
) -> Result<IesInstance> {
    params.validate()?;
    chp.validate()?;
    days.validate()
        .map_err(|e| ModelError::Dimension(format!("representative days: {e}")))?;
    if days.days() != moments.days() || days.hours() != moments.hours() {
        return Err(ModelError::Dimension(format!(
            "demand covers {} days × {} hours but wind moments cover {} × {}",
            days.days(),
            days.hours(),
            moments.days(),
            moments.hours()
        )));
    }
    let (tmin, tmax) = (cell_params.temperature_min, cell_params.temperature_max);
    if params.initial_temperature < tmin || params.initial_temperature > tmax {
        return Err(config_err(
            "initial_temperature",
            format!("{} °C lies outside [{tmin}, {tmax}]", params.initial_temperature),
        ));
    }
    let utn = match params.thermal_neutral_voltage {
        Some(u) => u,
        None => electrolyser::thermal_neutral_voltage(25.0, cell_params)
            .map_err(|e| config_err("thermal_neutral_voltage", e.to_string()))?,
    };
    let cell_bound = cell.max_corner_power();
    let big_m = params.big_m.unwrap_or(cell_bound);
    if big_m < cell_bound * (1.0 - 1e-12) {
        return Err(config_err(
            "big_m",
            format!("{big_m} MW is below the single-cell power bound {cell_bound} MW"),
        ));
    }
    Ok(IesInstance {
        params,
        chp,
        cell,
        days,
        moments,
        flexibility: Flexibility::default(),
        thermal_neutral_voltage: utn,
        big_m,
    })
}

impl IesInstance {
    pub fn with_flexibility(mut self, flexibility: Flexibility) -> Self {
        self.flexibility = flexibility;
        self
    }

    pub fn days(&self) -> usize {
        self.days.days()
    }
    pub fn hours(&self) -> usize {
        self.days.hours()
    }
    pub fn plants(&self) -> usize {
        self.moments.plants()
    }

    pub fn thermal_neutral_voltage(&self) -> f64 {
        self.thermal_neutral_voltage
    }

    pub fn big_m(&self) -> f64 {
        self.big_m
    }

    /// kg of hydrogen per MWh of hydrogen power.
    pub fn hydrogen_per_mwh(&self) -> f64 {
        hydrogen_coefficient(self.thermal_neutral_voltage, self.params.faraday)
    }

    pub fn temperature_bounds(&self) -> (f64, f64) {
        let t = self.cell.temperatures();
        (
            t.iter().copied().fold(f64::INFINITY, f64::min),
            t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn schema(&self) -> DecisionSchema {
        DecisionSchema::new(self.days(), self.hours(), self.params.bits)
    }

    pub fn variable_forecast(&self) -> VariableForecast {
        let s = self.schema();
        let binary = s.keys().iter().filter(|k| k.is_binary()).count();
        VariableForecast {
            continuous: s.len() - binary,
            binary,
        }
    }
}

/// `3.6·10⁶ / (U_tn F)`, kg per MWh.
pub fn hydrogen_coefficient(thermal_neutral_voltage: f64, faraday: f64) -> f64 {
    3.6e6 / (thermal_neutral_voltage * faraday)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Capacity {
    Cells,
    Converter,
    Compressor,
    Tank,
    Boiler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Commitment {
    Online,
    Startup,
    Shutdown,
}

/// Recourse quantities with an affine policy. Stack quantities are
/// upper-case in the model (`P2HH`, `EXC`), cell quantities lower-case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Recourse {
    /// x_k, factor α_k
    ChpWeight(usize),
    /// p^trans, factor β
    Transmission,
    /// p^EB, factor ρ
    BoilerPower,
    /// q^EB, factor ν
    BoilerHeat,
    /// n^H2 (kg/h), factor γ
    HydrogenMass,
    /// p^P2HH, factor Δ
    StackPower,
    /// p^p2hh, factor δ
    CellPower,
    /// q^EXC, factor Λ
    StackExchange,
    /// q^exc, factor λ
    CellExchange,
    /// h^P2HH, factor Π
    StackHydrogen,
    /// h^p2hh, factor π
    CellHydrogen,
    /// q^p2hh, factor κ
    CellHeat,
    /// y_i, factor ζ_i
    CellWeight(usize),
    /// T, factor μ (none in the first hour)
    Temperature,
    /// m^H2, factor υ
    TankContent,
}

impl Recourse {
    pub const SCALARS: [Recourse; 13] = [
        Recourse::Transmission,
        Recourse::BoilerPower,
        Recourse::BoilerHeat,
        Recourse::HydrogenMass,
        Recourse::StackPower,
        Recourse::CellPower,
        Recourse::StackExchange,
        Recourse::CellExchange,
        Recourse::StackHydrogen,
        Recourse::CellHydrogen,
        Recourse::CellHeat,
        Recourse::Temperature,
        Recourse::TankContent,
    ];

    /// Every recourse quantity of one hour in canonical order.
    pub fn all() -> Vec<Recourse> {
        let mut v: Vec<Recourse> = (0..4).map(Recourse::ChpWeight).collect();
        v.extend(Self::SCALARS);
        v.extend((0..4).map(Recourse::CellWeight));
        v
    }

    fn base_name(self) -> &'static str {
        match self {
            Recourse::ChpWeight(_) => "chp_weight",
            Recourse::Transmission => "transmission",
            Recourse::BoilerPower => "boiler_power",
            Recourse::BoilerHeat => "boiler_heat",
            Recourse::HydrogenMass => "hydrogen_mass",
            Recourse::StackPower => "stack_power",
            Recourse::CellPower => "cell_power",
            Recourse::StackExchange => "stack_exchange",
            Recourse::CellExchange => "cell_exchange",
            Recourse::StackHydrogen => "stack_hydrogen",
            Recourse::CellHydrogen => "cell_hydrogen",
            Recourse::CellHeat => "cell_heat",
            Recourse::CellWeight(_) => "cell_weight",
            Recourse::Temperature => "temperature",
            Recourse::TankContent => "tank_content",
        }
    }

    fn index(self) -> Option<usize> {
        match self {
            Recourse::ChpWeight(k) | Recourse::CellWeight(k) => Some(k),
            _ => None,
        }
    }

    fn from_parts(base: &str, index: Option<usize>) -> Option<Recourse> {
        Some(match (base, index) {
            ("chp_weight", Some(k)) if k < 4 => Recourse::ChpWeight(k),
            ("cell_weight", Some(k)) if k < 4 => Recourse::CellWeight(k),
            (_, Some(_)) => return None,
            (name, None) => *Self::SCALARS.iter().find(|q| q.base_name() == name)?,
        })
    }
}

/// Stack/cell pairs linked by `stack = n^el · cell`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Coupling {
    Power,
    Hydrogen,
    Exchange,
}

impl Coupling {
    pub const ALL: [Coupling; 3] = [Coupling::Power, Coupling::Hydrogen, Coupling::Exchange];

    pub fn name(self) -> &'static str {
        match self {
            Coupling::Power => "power",
            Coupling::Hydrogen => "hydrogen",
            Coupling::Exchange => "exchange",
        }
    }

    pub fn stack(self) -> Recourse {
        match self {
            Coupling::Power => Recourse::StackPower,
            Coupling::Hydrogen => Recourse::StackHydrogen,
            Coupling::Exchange => Recourse::StackExchange,
        }
    }

    pub fn cell(self) -> Recourse {
        match self {
            Coupling::Power => Recourse::CellPower,
            Coupling::Hydrogen => Recourse::CellHydrogen,
            Coupling::Exchange => Recourse::CellExchange,
        }
    }
}

/// Whether a key refers to a nominal value or a participation factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Nominal,
    Factor,
}

impl Part {
    fn prefix(self) -> &'static str {
        match self {
            Part::Nominal => "nom",
            Part::Factor => "fac",
        }
    }
}

/// Name of one decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    Capacity(Capacity),
    /// z_j of the cell-count expansion
    Bit(usize),
    Commitment {
        kind: Commitment,
        r: usize,
        t: usize,
    },
    Policy {
        part: Part,
        q: Recourse,
        r: usize,
        t: usize,
    },
    /// e_{r,t,j} = z_j · (cell nominal or factor)
    Product {
        coupling: Coupling,
        part: Part,
        r: usize,
        t: usize,
        j: usize,
    },
    /// Epigraph of the expected squared transmission.
    TransmissionEpigraph {
        r: usize,
        t: usize,
    },
}

impl VarKey {
    pub fn nominal(q: Recourse, r: usize, t: usize) -> Self {
        VarKey::Policy {
            part: Part::Nominal,
            q,
            r,
            t,
        }
    }

    pub fn factor(q: Recourse, r: usize, t: usize) -> Self {
        VarKey::Policy {
            part: Part::Factor,
            q,
            r,
            t,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, VarKey::Bit(_) | VarKey::Commitment { .. })
    }

    /// `(r, t)` for per-hour variables.
    pub fn scope(&self) -> Option<(usize, usize)> {
        match *self {
            VarKey::Capacity(_) | VarKey::Bit(_) => None,
            VarKey::Commitment { r, t, .. }
            | VarKey::Policy { r, t, .. }
            | VarKey::Product { r, t, .. }
            | VarKey::TransmissionEpigraph { r, t } => Some((r, t)),
        }
    }
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            VarKey::Capacity(c) => {
                let name = match c {
                    Capacity::Cells => "cells",
                    Capacity::Converter => "converter",
                    Capacity::Compressor => "compressor",
                    Capacity::Tank => "tank",
                    Capacity::Boiler => "boiler",
                };
                write!(f, "cap.{name}")
            }
            VarKey::Bit(j) => write!(f, "bit.j{}", j + 1),
            VarKey::Commitment { kind, r, t } => {
                let name = match kind {
                    Commitment::Online => "online",
                    Commitment::Startup => "startup",
                    Commitment::Shutdown => "shutdown",
                };
                write!(f, "bin.{name}.r{}.t{}", r + 1, t + 1)
            }
            VarKey::Policy { part, q, r, t } => {
                write!(f, "{}.{}.r{}.t{}", part.prefix(), q.base_name(), r + 1, t + 1)?;
                if let Some(k) = q.index() {
                    write!(f, ".k{}", k + 1)?;
                }
                Ok(())
            }
            VarKey::Product {
                coupling,
                part,
                r,
                t,
                j,
            } => write!(
                f,
                "prod.{}.{}.r{}.t{}.j{}",
                coupling.name(),
                part.prefix(),
                r + 1,
                t + 1,
                j + 1
            ),
            VarKey::TransmissionEpigraph { r, t } => write!(f, "epi.transmission.r{}.t{}", r + 1, t + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognised variable name `{0}`")]
pub struct ParseVarKeyError(pub String);

fn parse_index(part: &str, prefix: char) -> Option<usize> {
    part.strip_prefix(prefix)?.parse::<usize>().ok()?.checked_sub(1)
}

impl FromStr for VarKey {
    type Err = ParseVarKeyError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || ParseVarKeyError(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        let key = match parts.as_slice() {
            ["cap", name] => VarKey::Capacity(match *name {
                "cells" => Capacity::Cells,
                "converter" => Capacity::Converter,
                "compressor" => Capacity::Compressor,
                "tank" => Capacity::Tank,
                "boiler" => Capacity::Boiler,
                _ => return Err(err()),
            }),
            ["bit", j] => VarKey::Bit(parse_index(j, 'j').ok_or_else(err)?),
            ["bin", kind, r, t] => VarKey::Commitment {
                kind: match *kind {
                    "online" => Commitment::Online,
                    "startup" => Commitment::Startup,
                    "shutdown" => Commitment::Shutdown,
                    _ => return Err(err()),
                },
                r: parse_index(r, 'r').ok_or_else(err)?,
                t: parse_index(t, 't').ok_or_else(err)?,
            },
            [prefix @ ("nom" | "fac"), base, r, t, rest @ ..] => {
                let index = match rest {
                    [] => None,
                    [k] => Some(parse_index(k, 'k').ok_or_else(err)?),
                    _ => return Err(err()),
                };
                VarKey::Policy {
                    part: if *prefix == "nom" { Part::Nominal } else { Part::Factor },
                    q: Recourse::from_parts(base, index).ok_or_else(err)?,
                    r: parse_index(r, 'r').ok_or_else(err)?,
                    t: parse_index(t, 't').ok_or_else(err)?,
                }
            }
            ["prod", coupling, part, r, t, j] => VarKey::Product {
                coupling: *Coupling::ALL.iter().find(|c| c.name() == *coupling).ok_or_else(err)?,
                part: match *part {
                    "nom" => Part::Nominal,
                    "fac" => Part::Factor,
                    _ => return Err(err()),
                },
                r: parse_index(r, 'r').ok_or_else(err)?,
                t: parse_index(t, 't').ok_or_else(err)?,
                j: parse_index(j, 'j').ok_or_else(err)?,
            },
            ["epi", "transmission", r, t] => VarKey::TransmissionEpigraph {
                r: parse_index(r, 'r').ok_or_else(err)?,
                t: parse_index(t, 't').ok_or_else(err)?,
            },
            _ => return Err(err()),
        };
        Ok(key)
    }
}

/// The full, canonically ordered variable list of an instance.
#[derive(Debug, Clone)]
pub struct DecisionSchema {
    days: usize,
    hours: usize,
    bits: usize,
    keys: Vec<VarKey>,
    index: BTreeMap<VarKey, usize>,
}

impl DecisionSchema {
    pub fn new(days: usize, hours: usize, bits: usize) -> Self {
        let mut keys = vec![
            VarKey::Capacity(Capacity::Cells),
            VarKey::Capacity(Capacity::Converter),
            VarKey::Capacity(Capacity::Compressor),
            VarKey::Capacity(Capacity::Tank),
            VarKey::Capacity(Capacity::Boiler),
        ];
        keys.extend((0..bits).map(VarKey::Bit));
        for r in 0..days {
            for t in 0..hours {
                for kind in [Commitment::Online, Commitment::Startup, Commitment::Shutdown] {
                    keys.push(VarKey::Commitment { kind, r, t });
                }
                for q in Recourse::all() {
                    keys.push(VarKey::nominal(q, r, t));
                    if !(q == Recourse::Temperature && t == 0) {
                        keys.push(VarKey::factor(q, r, t));
                    }
                }
                for coupling in Coupling::ALL {
                    for part in [Part::Nominal, Part::Factor] {
                        for j in 0..bits {
                            keys.push(VarKey::Product {
                                coupling,
                                part,
                                r,
                                t,
                                j,
                            });
                        }
                    }
                }
                keys.push(VarKey::TransmissionEpigraph { r, t });
            }
        }
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self {
            days,
            hours,
            bits,
            keys,
            index,
        }
    }

    pub fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &VarKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn contains(&self, key: &VarKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.days, self.hours, self.bits)
    }

    /// Closed-form variable count.
    pub fn expected_len(days: usize, hours: usize, bits: usize) -> usize {
        let per_hour = 3 + 2 * (4 + 13 + 4) + 6 * bits + 1;
        5 + bits + days * hours * per_hour - days
    }
}

/// Affine expression over decision variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: BTreeMap<VarKey, f64>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: BTreeMap::new(),
            constant: c,
        }
    }

    pub fn var(key: VarKey) -> Self {
        Self::new().with(key, 1.0)
    }

    /// Adds `coef · key`, dropping terms that cancel to exactly zero.
    pub fn add(&mut self, key: VarKey, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let entry = self.terms.entry(key).or_insert(0.0);
        *entry += coef;
        if *entry == 0.0 {
            self.terms.remove(&key);
        }
    }

    pub fn with(mut self, key: VarKey, coef: f64) -> Self {
        self.add(key, coef);
        self
    }

    pub fn plus_constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        for (k, c) in &other.terms {
            self.add(*k, c * scale);
        }
        self.constant += other.constant * scale;
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        let mut out = LinExpr::new();
        out.add_expr(self, s);
        out
    }

    /// True when the expression is identically zero.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.constant == 0.0
    }

    pub fn evaluate(&self, value: impl Fn(&VarKey) -> f64) -> f64 {
        self.constant + self.terms.iter().map(|(k, c)| c * value(k)).sum::<f64>()
    }
}

impl fmt::Display for LinExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, c) in &self.terms {
            if first {
                write!(f, "{c}*{k}")?;
            } else {
                write!(f, " + {c}*{k}")?;
            }
            first = false;
        }
        if first || self.constant != 0.0 {
            if first {
                write!(f, "{}", self.constant)?;
            } else {
                write!(f, " + {}", self.constant)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

impl Sense {
    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "=" => Some(Sense::Eq),
            "<=" => Some(Sense::Le),
            ">=" => Some(Sense::Ge),
            _ => None,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Sense::Eq => "=",
            Sense::Le => "<=",
            Sense::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    DeterministicLinear(Sense),
    /// Holds for every realisation; split into a nominal and a factor row.
    StochasticEquality,
    /// Individual chance constraint `P[expr ≤ 0] ≥ 1 − ε`.
    DrccInequality,
}

/// Constraint families. Names double as audit labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Template {
    // commitment logic
    StartupInitial,
    Startup,
    Shutdown,
    MinUpInitial,
    MinUp,
    MinDown,
    // equalities
    TemperatureInitial,
    ChpWeights,
    PowerBalance,
    HeatBalance,
    BoilerRatio,
    CellPower,
    HydrogenConversion,
    CellWeights,
    CellHydrogen,
    CellHeat,
    CellTemperature,
    TemperatureRecursion,
    TankInitial,
    TankRecursion,
    // chance constraints
    ChpWeightLower,
    ChpWeightUpper,
    RampUpInitial,
    RampUp,
    RampDown,
    BoilerLower,
    BoilerUpper,
    ExchangeLower,
    CellWeightLower,
    CellWeightUpper,
    TemperatureLower,
    TemperatureUpper,
    TemperatureEndLower,
    TemperatureEndUpper,
    TankEnd,
    Converter,
    Compressor,
    // emitted by the reformulation
    CellBits,
    StackSum,
    ProductZeroLower,
    ProductZeroUpper,
    ProductTrackLower,
    ProductTrackUpper,
    TransmissionEpigraph,
}

impl Template {
    pub const ALL: [Template; 44] = [
        Template::StartupInitial,
        Template::Startup,
        Template::Shutdown,
        Template::MinUpInitial,
        Template::MinUp,
        Template::MinDown,
        Template::TemperatureInitial,
        Template::ChpWeights,
        Template::PowerBalance,
        Template::HeatBalance,
        Template::BoilerRatio,
        Template::CellPower,
        Template::HydrogenConversion,
        Template::CellWeights,
        Template::CellHydrogen,
        Template::CellHeat,
        Template::CellTemperature,
        Template::TemperatureRecursion,
        Template::TankInitial,
        Template::TankRecursion,
        Template::ChpWeightLower,
        Template::ChpWeightUpper,
        Template::RampUpInitial,
        Template::RampUp,
        Template::RampDown,
        Template::BoilerLower,
        Template::BoilerUpper,
        Template::ExchangeLower,
        Template::CellWeightLower,
        Template::CellWeightUpper,
        Template::TemperatureLower,
        Template::TemperatureUpper,
        Template::TemperatureEndLower,
        Template::TemperatureEndUpper,
        Template::TankEnd,
        Template::Converter,
        Template::Compressor,
        Template::CellBits,
        Template::StackSum,
        Template::ProductZeroLower,
        Template::ProductZeroUpper,
        Template::ProductTrackLower,
        Template::ProductTrackUpper,
        Template::TransmissionEpigraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::StartupInitial => "startup_initial",
            Template::Startup => "startup",
            Template::Shutdown => "shutdown",
            Template::MinUpInitial => "min_up_initial",
            Template::MinUp => "min_up",
            Template::MinDown => "min_down",
            Template::TemperatureInitial => "temperature_initial",
            Template::ChpWeights => "chp_weights",
            Template::PowerBalance => "power_balance",
            Template::HeatBalance => "heat_balance",
            Template::BoilerRatio => "boiler_ratio",
            Template::CellPower => "cell_power",
            Template::HydrogenConversion => "hydrogen_conversion",
            Template::CellWeights => "cell_weights",
            Template::CellHydrogen => "cell_hydrogen",
            Template::CellHeat => "cell_heat",
            Template::CellTemperature => "cell_temperature",
            Template::TemperatureRecursion => "temperature_recursion",
            Template::TankInitial => "tank_initial",
            Template::TankRecursion => "tank_recursion",
            Template::ChpWeightLower => "chp_weight_lower",
            Template::ChpWeightUpper => "chp_weight_upper",
            Template::RampUpInitial => "ramp_up_initial",
            Template::RampUp => "ramp_up",
            Template::RampDown => "ramp_down",
            Template::BoilerLower => "boiler_lower",
            Template::BoilerUpper => "boiler_upper",
            Template::ExchangeLower => "exchange_lower",
            Template::CellWeightLower => "cell_weight_lower",
            Template::CellWeightUpper => "cell_weight_upper",
            Template::TemperatureLower => "temperature_lower",
            Template::TemperatureUpper => "temperature_upper",
            Template::TemperatureEndLower => "temperature_end_lower",
            Template::TemperatureEndUpper => "temperature_end_upper",
            Template::TankEnd => "tank_end",
            Template::Converter => "converter",
            Template::Compressor => "compressor",
            Template::CellBits => "cell_bits",
            Template::StackSum => "stack_sum",
            Template::ProductZeroLower => "product_zero_lower",
            Template::ProductZeroUpper => "product_zero_upper",
            Template::ProductTrackLower => "product_track_lower",
            Template::ProductTrackUpper => "product_track_upper",
            Template::TransmissionEpigraph => "transmission_epigraph",
        }
    }

    pub fn from_name(name: &str) -> Option<Template> {
        Self::ALL.iter().copied().find(|t| t.name() == name)
    }
}

/// Identifies one emitted constraint. `scope` is `None` for constraints
/// that do not belong to an hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConstraintTag {
    pub scope: Option<(usize, usize)>,
    pub template: Template,
    pub component: usize,
}

impl ConstraintTag {
    pub fn hourly(template: Template, r: usize, t: usize, component: usize) -> Self {
        Self {
            scope: Some((r, t)),
            template,
            component,
        }
    }

    pub fn global(template: Template, component: usize) -> Self {
        Self {
            scope: None,
            template,
            component,
        }
    }
}

impl fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.template.name())?;
        if let Some((r, t)) = self.scope {
            write!(f, ".r{}.t{}", r + 1, t + 1)?;
        }
        write!(f, ".c{}", self.component + 1)
    }
}

/// Coefficient of the aggregated error `1ᵀω_{r,hour}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Loading {
    pub hour: usize,
    pub expr: LinExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicConstraint {
    pub kind: ConstraintKind,
    pub tag: ConstraintTag,
    pub nominal: LinExpr,
    /// Sorted by hour, at most one entry per hour.
    pub loadings: Vec<Loading>,
}

impl SymbolicConstraint {
    fn deterministic(sense: Sense, tag: ConstraintTag, expr: LinExpr) -> Self {
        Self {
            kind: ConstraintKind::DeterministicLinear(sense),
            tag,
            nominal: expr,
            loadings: Vec::new(),
        }
    }

    fn stochastic(kind: ConstraintKind, tag: ConstraintTag, nominal: LinExpr, loadings: Vec<(usize, LinExpr)>) -> Self {
        let mut loadings: Vec<Loading> = loadings
            .into_iter()
            .map(|(hour, expr)| Loading { hour, expr })
            .collect();
        loadings.sort_by_key(|l| l.hour);
        Self {
            kind,
            tag,
            nominal,
            loadings,
        }
    }

    /// Whether the constraint involves the errors of more than one hour.
    pub fn is_intertemporal(&self) -> bool {
        self.loadings.len() > 1
    }

    /// `nominal + Σ_h loading_h · ξ_h` for decisions `value` and aggregated
    /// errors `xi(hour)`.
    pub fn evaluate(&self, value: impl Fn(&VarKey) -> f64, xi: impl Fn(usize) -> f64) -> f64 {
        let mut v = self.nominal.evaluate(&value);
        for l in &self.loadings {
            v += l.expr.evaluate(&value) * xi(l.hour);
        }
        v
    }

    /// Every variable referenced by the constraint.
    pub fn variables(&self) -> impl Iterator<Item = &VarKey> {
        self.nominal
            .terms
            .keys()
            .chain(self.loadings.iter().flat_map(|l| l.expr.terms.keys()))
    }
}

impl fmt::Display for SymbolicConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (label, rel) = match self.kind {
            ConstraintKind::DeterministicLinear(s) => ("lin", s.symbol()),
            ConstraintKind::StochasticEquality => ("eq", "="),
            ConstraintKind::DrccInequality => ("drcc", "<="),
        };
        write!(f, "[{label}] {}: {}", self.tag, self.nominal)?;
        for l in &self.loadings {
            write!(f, " + ({})*xi.t{}", l.expr, l.hour + 1)?;
        }
        write!(f, " {rel} 0")
    }
}

fn online(r: usize, t: usize) -> VarKey {
    VarKey::Commitment {
        kind: Commitment::Online,
        r,
        t,
    }
}
fn startup(r: usize, t: usize) -> VarKey {
    VarKey::Commitment {
        kind: Commitment::Startup,
        r,
        t,
    }
}
fn shutdown(r: usize, t: usize) -> VarKey {
    VarKey::Commitment {
        kind: Commitment::Shutdown,
        r,
        t,
    }
}

/// Start-up/shut-down logic and minimum up/down windows. Each day starts
/// with the plant off.
pub fn build_commitment_constraints(instance: &IesInstance) -> Vec<SymbolicConstraint> {
    commitment_constraints(
        instance.days(),
        instance.hours(),
        instance.params.min_up,
        instance.params.min_down,
    )
}

/// Commitment logic for explicit dimensions.
pub fn commitment_constraints(days: usize, hours: usize, min_up: usize, min_down: usize) -> Vec<SymbolicConstraint> {
    let le = |template, r, t, c, expr| {
        SymbolicConstraint::deterministic(Sense::Le, ConstraintTag::hourly(template, r, t, c), expr)
    };
    let mut out = Vec::new();
    for r in 0..days {
        for t in 0..hours {
            if t == 0 {
                out.push(le(
                    Template::StartupInitial,
                    r,
                    0,
                    0,
                    LinExpr::var(online(r, 0)).with(startup(r, 0), -1.0),
                ));
                let end = hours.min(min_up);
                for (c, tau) in (1..end).enumerate() {
                    out.push(le(
                        Template::MinUpInitial,
                        r,
                        0,
                        c,
                        LinExpr::var(online(r, 0)).with(online(r, tau), -1.0),
                    ));
                }
                continue;
            }
            out.push(le(
                Template::Startup,
                r,
                t,
                0,
                LinExpr::var(online(r, t))
                    .with(online(r, t - 1), -1.0)
                    .with(startup(r, t), -1.0),
            ));
            out.push(le(
                Template::Shutdown,
                r,
                t,
                0,
                LinExpr::var(online(r, t - 1))
                    .with(online(r, t), -1.0)
                    .with(shutdown(r, t), -1.0),
            ));
            if t + 1 < hours {
                // windows τ ∈ {t+1, …, min(|t|, v + t − 1)} in one-based hours
                let up_end = (hours - 1).min(min_up + t - 1);
                for (c, tau) in (t + 1..=up_end).enumerate() {
                    out.push(le(
                        Template::MinUp,
                        r,
                        t,
                        c,
                        LinExpr::var(online(r, t))
                            .with(online(r, t - 1), -1.0)
                            .with(online(r, tau), -1.0),
                    ));
                }
                let down_end = (hours - 1).min(min_down + t - 1);
                for (c, tau) in (t + 1..=down_end).enumerate() {
                    out.push(le(
                        Template::MinDown,
                        r,
                        t,
                        c,
                        LinExpr::var(online(r, t - 1))
                            .with(online(r, t), -1.0)
                            .with(online(r, tau), 1.0)
                            .plus_constant(-1.0),
                    ));
                }
            }
        }
    }
    out
}

/// Balances, policies, unit limits, P2HH, tank, converter and compressor.
pub fn build_stochastic_constraints(instance: &IesInstance) -> Vec<SymbolicConstraint> {
    let p = &instance.params;
    let chp = &instance.chp;
    let cell = &instance.cell;
    let hours = instance.hours();
    let (tmin, tmax) = instance.temperature_bounds();
    let kh2 = instance.hydrogen_per_mwh();
    let cap = |c| VarKey::Capacity(c);
    let nom = VarKey::nominal;
    let fac = VarKey::factor;
    let c_inv = 1.0 / p.heat_capacity;
    let decay = 1.0 - 1.0 / (p.thermal_resistance * p.heat_capacity);

    use ConstraintKind::{DrccInequality as Drcc, StochasticEquality as Seq};
    let mut out = Vec::new();
    for r in 0..instance.days() {
        let mut push = |kind, template, t, c, nominal: LinExpr, loadings: Vec<(usize, LinExpr)>| {
            out.push(SymbolicConstraint::stochastic(
                kind,
                ConstraintTag::hourly(template, r, t, c),
                nominal,
                loadings,
            ));
        };
        for t in 0..hours {
            let x = |k| nom(Recourse::ChpWeight(k), r, t);
            let a = |k| fac(Recourse::ChpWeight(k), r, t);
            let y = |i| nom(Recourse::CellWeight(i), r, t);
            let z = |i| fac(Recourse::CellWeight(i), r, t);
            let n = |q| nom(q, r, t);
            let f = |q| fac(q, r, t);
            use Recourse::*;

            if t == 0 {
                out_push_deterministic(&mut push, r, p.initial_temperature);
            }

            // CHP weights sum to the commitment status
            let mut nominal = LinExpr::new().with(online(r, t), -1.0);
            let mut loading = LinExpr::new();
            for k in 0..4 {
                nominal.add(x(k), 1.0);
                loading.add(a(k), 1.0);
            }
            push(Seq, Template::ChpWeights, t, 0, nominal, vec![(t, loading)]);

            // power balance: supply − demand
            let wind_mean = instance.moments.mean_total(r, t);
            let mut nominal = LinExpr::var(n(Transmission))
                .with(n(StackPower), -1.0 / p.eta_converter)
                .with(n(HydrogenMass), -p.eta_compressor)
                .with(n(BoilerPower), -1.0)
                .plus_constant(wind_mean - instance.days.electric[r][t]);
            let mut loading = LinExpr::var(f(Transmission))
                .with(f(StackPower), -1.0 / p.eta_converter)
                .with(f(HydrogenMass), -p.eta_compressor)
                .with(f(BoilerPower), -1.0)
                .plus_constant(1.0);
            for k in 0..4 {
                nominal.add(x(k), chp.power[k]);
                loading.add(a(k), chp.power[k]);
            }
            push(Seq, Template::PowerBalance, t, 0, nominal, vec![(t, loading)]);

            // heat balance
            let mut nominal = LinExpr::var(n(StackExchange))
                .with(n(BoilerHeat), 1.0)
                .plus_constant(-instance.days.heat[r][t]);
            let mut loading = LinExpr::var(f(StackExchange)).with(f(BoilerHeat), 1.0);
            for k in 0..4 {
                nominal.add(x(k), chp.heat[k]);
                loading.add(a(k), chp.heat[k]);
            }
            push(Seq, Template::HeatBalance, t, 0, nominal, vec![(t, loading)]);

            push(
                Seq,
                Template::BoilerRatio,
                t,
                0,
                LinExpr::var(n(BoilerHeat)).with(n(BoilerPower), -p.eta_boiler),
                vec![(t, LinExpr::var(f(BoilerHeat)).with(f(BoilerPower), -p.eta_boiler))],
            );
            push(
                Seq,
                Template::CellPower,
                t,
                0,
                LinExpr::var(n(CellPower))
                    .with(n(CellHydrogen), -1.0)
                    .with(n(CellHeat), -1.0),
                vec![(
                    t,
                    LinExpr::var(f(CellPower))
                        .with(f(CellHydrogen), -1.0)
                        .with(f(CellHeat), -1.0),
                )],
            );
            push(
                Seq,
                Template::HydrogenConversion,
                t,
                0,
                LinExpr::var(n(HydrogenMass)).with(n(StackHydrogen), -kh2),
                vec![(t, LinExpr::var(f(HydrogenMass)).with(f(StackHydrogen), -kh2))],
            );

            // cell region weights
            let mut w_nom = LinExpr::constant(-1.0);
            let mut w_fac = LinExpr::new();
            let mut h_nom = LinExpr::var(n(CellHydrogen)).scaled(-1.0);
            let mut h_fac = LinExpr::var(f(CellHydrogen)).scaled(-1.0);
            let mut q_nom = LinExpr::var(n(CellHeat)).scaled(-1.0);
            let mut q_fac = LinExpr::var(f(CellHeat)).scaled(-1.0);
            let mut t_nom = LinExpr::var(n(Temperature)).scaled(-1.0);
            let mut t_fac = if t == 0 {
                LinExpr::new()
            } else {
                LinExpr::var(f(Temperature)).scaled(-1.0)
            };
            for (i, corner) in cell.corners.iter().enumerate() {
                w_nom.add(y(i), 1.0);
                w_fac.add(z(i), 1.0);
                h_nom.add(y(i), corner.hydrogen_mw);
                h_fac.add(z(i), corner.hydrogen_mw);
                q_nom.add(y(i), corner.heat_mw);
                q_fac.add(z(i), corner.heat_mw);
                t_nom.add(y(i), corner.temperature);
                t_fac.add(z(i), corner.temperature);
            }
            push(Seq, Template::CellWeights, t, 0, w_nom, vec![(t, w_fac)]);
            push(Seq, Template::CellHydrogen, t, 0, h_nom, vec![(t, h_fac)]);
            push(Seq, Template::CellHeat, t, 0, q_nom, vec![(t, q_fac)]);
            push(Seq, Template::CellTemperature, t, 0, t_nom, vec![(t, t_fac)]);

            // temperature evolution into hour t + 1
            if t + 1 < hours {
                let nominal = LinExpr::var(nom(Temperature, r, t + 1))
                    .with(n(Temperature), -decay)
                    .with(n(CellHeat), -c_inv)
                    .with(n(CellExchange), c_inv)
                    .plus_constant(-c_inv * p.ambient_temperature / p.thermal_resistance);
                let mut current = LinExpr::var(f(CellHeat)).scaled(-c_inv).with(f(CellExchange), c_inv);
                if t > 0 {
                    current.add(f(Temperature), -decay);
                }
                push(
                    Seq,
                    Template::TemperatureRecursion,
                    t,
                    0,
                    nominal,
                    vec![(t, current), (t + 1, LinExpr::var(fac(Temperature, r, t + 1)))],
                );
            }

            // tank content
            if t == 0 {
                push(
                    Seq,
                    Template::TankInitial,
                    0,
                    0,
                    LinExpr::var(n(TankContent)).with(n(HydrogenMass), -1.0),
                    vec![(0, LinExpr::var(f(TankContent)).with(f(HydrogenMass), -1.0))],
                );
            } else {
                push(
                    Seq,
                    Template::TankRecursion,
                    t,
                    0,
                    LinExpr::var(n(TankContent))
                        .with(nom(TankContent, r, t - 1), -1.0)
                        .with(n(HydrogenMass), -1.0),
                    vec![
                        (t - 1, LinExpr::var(fac(TankContent, r, t - 1)).scaled(-1.0)),
                        (t, LinExpr::var(f(TankContent)).with(f(HydrogenMass), -1.0)),
                    ],
                );
            }

            // CHP weights within [0, 1]
            for k in 0..4 {
                push(
                    Drcc,
                    Template::ChpWeightLower,
                    t,
                    k,
                    LinExpr::var(x(k)).scaled(-1.0),
                    vec![(t, LinExpr::var(a(k)).scaled(-1.0))],
                );
            }
            for k in 0..4 {
                push(
                    Drcc,
                    Template::ChpWeightUpper,
                    t,
                    k,
                    LinExpr::var(x(k)).plus_constant(-1.0),
                    vec![(t, LinExpr::var(a(k)))],
                );
            }

            // ramping
            let chp_power = |tt: usize, part: Part, scale: f64| {
                let mut e = LinExpr::new();
                for k in 0..4 {
                    e.add(
                        VarKey::Policy {
                            part,
                            q: ChpWeight(k),
                            r,
                            t: tt,
                        },
                        scale * chp.power[k],
                    );
                }
                e
            };
            if t == 0 {
                push(
                    Drcc,
                    Template::RampUpInitial,
                    0,
                    0,
                    chp_power(0, Part::Nominal, 1.0).plus_constant(-p.startup_ramp),
                    vec![(0, chp_power(0, Part::Factor, 1.0))],
                );
            } else {
                // P x_t − P x_{t−1} ≤ SU (1 − u_{t−1}) + RU u_{t−1}
                let mut up = chp_power(t, Part::Nominal, 1.0);
                up.add_expr(&chp_power(t - 1, Part::Nominal, -1.0), 1.0);
                up.add(online(r, t - 1), p.startup_ramp - p.ramp_up);
                up.constant -= p.startup_ramp;
                push(
                    Drcc,
                    Template::RampUp,
                    t,
                    0,
                    up,
                    vec![
                        (t - 1, chp_power(t - 1, Part::Factor, -1.0)),
                        (t, chp_power(t, Part::Factor, 1.0)),
                    ],
                );
                // P x_{t−1} − P x_t ≤ SD (1 − u_t) + RD u_t
                let mut down = chp_power(t - 1, Part::Nominal, 1.0);
                down.add_expr(&chp_power(t, Part::Nominal, -1.0), 1.0);
                down.add(online(r, t), p.shutdown_ramp - p.ramp_down);
                down.constant -= p.shutdown_ramp;
                push(
                    Drcc,
                    Template::RampDown,
                    t,
                    0,
                    down,
                    vec![
                        (t - 1, chp_power(t - 1, Part::Factor, 1.0)),
                        (t, chp_power(t, Part::Factor, -1.0)),
                    ],
                );
            }

            // electric boiler
            push(
                Drcc,
                Template::BoilerLower,
                t,
                0,
                LinExpr::var(n(BoilerPower)).scaled(-1.0),
                vec![(t, LinExpr::var(f(BoilerPower)).scaled(-1.0))],
            );
            push(
                Drcc,
                Template::BoilerUpper,
                t,
                0,
                LinExpr::var(n(BoilerPower)).with(cap(Capacity::Boiler), -1.0),
                vec![(t, LinExpr::var(f(BoilerPower)))],
            );

            push(
                Drcc,
                Template::ExchangeLower,
                t,
                0,
                LinExpr::var(n(CellExchange)).scaled(-1.0),
                vec![(t, LinExpr::var(f(CellExchange)).scaled(-1.0))],
            );

            for i in 0..4 {
                push(
                    Drcc,
                    Template::CellWeightLower,
                    t,
                    i,
                    LinExpr::var(y(i)).scaled(-1.0),
                    vec![(t, LinExpr::var(z(i)).scaled(-1.0))],
                );
            }
            for i in 0..4 {
                push(
                    Drcc,
                    Template::CellWeightUpper,
                    t,
                    i,
                    LinExpr::var(y(i)).plus_constant(-1.0),
                    vec![(t, LinExpr::var(z(i)))],
                );
            }

            if t > 0 {
                push(
                    Drcc,
                    Template::TemperatureLower,
                    t,
                    0,
                    LinExpr::var(n(Temperature)).scaled(-1.0).plus_constant(tmin),
                    vec![(t, LinExpr::var(f(Temperature)).scaled(-1.0))],
                );
                push(
                    Drcc,
                    Template::TemperatureUpper,
                    t,
                    0,
                    LinExpr::var(n(Temperature)).plus_constant(-tmax),
                    vec![(t, LinExpr::var(f(Temperature)))],
                );
            }

            if t + 1 == hours {
                // temperature after the last hour
                let next = LinExpr::var(n(Temperature))
                    .scaled(decay)
                    .with(n(CellHeat), c_inv)
                    .with(n(CellExchange), -c_inv)
                    .plus_constant(c_inv * p.ambient_temperature / p.thermal_resistance);
                let mut next_fac = LinExpr::var(f(CellHeat)).scaled(c_inv).with(f(CellExchange), -c_inv);
                if t > 0 {
                    next_fac.add(f(Temperature), decay);
                }
                push(
                    Drcc,
                    Template::TemperatureEndLower,
                    t,
                    0,
                    next.scaled(-1.0).plus_constant(tmin),
                    vec![(t, next_fac.scaled(-1.0))],
                );
                push(
                    Drcc,
                    Template::TemperatureEndUpper,
                    t,
                    0,
                    next.clone().plus_constant(-tmax),
                    vec![(t, next_fac)],
                );
                push(
                    Drcc,
                    Template::TankEnd,
                    t,
                    0,
                    LinExpr::var(n(TankContent)).with(cap(Capacity::Tank), -1.0),
                    vec![(t, LinExpr::var(f(TankContent)))],
                );
            }

            push(
                Drcc,
                Template::Converter,
                t,
                0,
                LinExpr::var(n(StackPower)).with(cap(Capacity::Converter), -p.eta_converter),
                vec![(t, LinExpr::var(f(StackPower)))],
            );
            push(
                Drcc,
                Template::Compressor,
                t,
                0,
                LinExpr::var(n(HydrogenMass)).with(cap(Capacity::Compressor), -1.0),
                vec![(t, LinExpr::var(f(HydrogenMass)))],
            );
        }
    }
    out.sort_by_key(|c| c.tag);
    out
}

fn out_push_deterministic(
    push: &mut impl FnMut(ConstraintKind, Template, usize, usize, LinExpr, Vec<(usize, LinExpr)>),
    r: usize,
    t0: f64,
) {
    push(
        ConstraintKind::DeterministicLinear(Sense::Eq),
        Template::TemperatureInitial,
        0,
        0,
        LinExpr::var(VarKey::nominal(Recourse::Temperature, r, 0)).plus_constant(-t0),
        Vec::new(),
    );
}

/// All symbolic constraints, sorted by tag.
pub fn build_constraints(instance: &IesInstance) -> Vec<SymbolicConstraint> {
    let mut all = build_commitment_constraints(instance);
    all.extend(build_stochastic_constraints(instance));
    all.sort_by_key(|c| c.tag);
    all
}

fn window(hours: usize, v: usize, t: usize) -> usize {
    // one-based t, τ ∈ {t+1, …, min(|t|, v + t − 1)}
    (hours.min(v + t - 1)).saturating_sub(t)
}

/// Closed-form number of symbolic constraints per template.
pub fn expected_counts(days: usize, hours: usize, min_up: usize, min_down: usize) -> BTreeMap<Template, usize> {
    use Template::*;
    let (r, h) = (days, hours);
    let mut m = BTreeMap::new();
    m.insert(StartupInitial, r);
    m.insert(Startup, r * (h - 1));
    m.insert(Shutdown, r * (h - 1));
    m.insert(MinUpInitial, r * window(h, min_up, 1));
    m.insert(MinUp, r * (2..h).map(|t| window(h, min_up, t)).sum::<usize>());
    m.insert(MinDown, r * (2..h).map(|t| window(h, min_down, t)).sum::<usize>());
    m.insert(TemperatureInitial, r);
    for t in [
        ChpWeights,
        PowerBalance,
        HeatBalance,
        BoilerRatio,
        CellPower,
        HydrogenConversion,
        CellWeights,
        CellHydrogen,
        CellHeat,
        CellTemperature,
        BoilerLower,
        BoilerUpper,
        ExchangeLower,
        Converter,
        Compressor,
    ] {
        m.insert(t, r * h);
    }
    m.insert(TemperatureRecursion, r * (h - 1));
    m.insert(TankInitial, r);
    m.insert(TankRecursion, r * (h - 1));
    for t in [ChpWeightLower, ChpWeightUpper, CellWeightLower, CellWeightUpper] {
        m.insert(t, 4 * r * h);
    }
    m.insert(RampUpInitial, r);
    m.insert(RampUp, r * (h - 1));
    m.insert(RampDown, r * (h - 1));
    m.insert(TemperatureLower, r * (h - 1));
    m.insert(TemperatureUpper, r * (h - 1));
    m.insert(TemperatureEndLower, r);
    m.insert(TemperatureEndUpper, r);
    m.insert(TankEnd, r);
    m.retain(|_, v| *v > 0);
    m
}
