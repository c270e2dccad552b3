//! Alkaline electrolysis cell physics and the linearised temperature /
//! hydrogen / heat (T-H-H) operating region of a single cell.
//!
//! The polarisation curve uses the common empirical alkaline form
//!
//! ```text
//! U_cell(i, T) = U_rev(T) + (r1 + r2 T) i + s log10((t1 + t2/T + t3/T²) i + 1)
//! U_tn(T)      = (ΔH₂₅ + ΔCp (T − 25)) / (2F)
//! ```
//!
//! with `i` in A/cm² and `T` in °C. Power densities are W/cm²; the region
//! corners are converted to MW per cell once, using the cell area.
//! Concentration over-potential is not modelled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Faraday constant, C/mol.
pub const FARADAY: f64 = 96_485.332_12;

/// Half-width of the temperature window (°C) around the admissible band in
/// which the correlations may be evaluated.
pub const EXTRAPOLATION_MARGIN: f64 = 20.0;

/// Grid resolution used for region error reports and parameter validation.
pub const REGION_GRID: usize = 41;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElectrolyserError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("operating point outside the admissible box: {0}")]
    Region(String),
    #[error("invalid cell configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ElectrolyserError>;

/// Coefficients of a single alkaline cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellParameters {
    /// Reversible voltage at 25 °C, V.
    pub rev_voltage_ref: f64,
    /// Temperature slope of the reversible voltage, V/°C.
    pub rev_voltage_slope: f64,
    /// Ohmic coefficient, Ω·cm².
    pub ohmic_r1: f64,
    /// Ohmic temperature coefficient, Ω·cm²/°C.
    pub ohmic_r2: f64,
    /// Activation (Tafel-like) coefficient, V.
    pub activation_s: f64,
    /// cm²/A
    pub activation_t1: f64,
    /// cm²·°C/A
    pub activation_t2: f64,
    /// cm²·°C²/A
    pub activation_t3: f64,
    /// Active cell area, cm².
    pub area_cm2: f64,
    pub current_density_min: f64,
    pub current_density_max: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    /// Molar formation enthalpy of liquid water at 25 °C, J/mol.
    pub enthalpy_ref: f64,
    /// Reaction heat-capacity change, J/(mol·°C).
    pub heat_capacity_change: f64,
}

impl Default for CellParameters {
    fn default() -> Self {
        Self {
            rev_voltage_ref: 1.229,
            rev_voltage_slope: -0.846e-3,
            ohmic_r1: 0.165,
            ohmic_r2: 0.0,
            activation_s: 0.22,
            activation_t1: 480.0,
            activation_t2: 1.6e5,
            activation_t3: 2.4e6,
            area_cm2: 2500.0,
            current_density_min: 0.2,
            current_density_max: 0.4,
            temperature_min: 60.0,
            temperature_max: 80.0,
            enthalpy_ref: 285_840.0,
            heat_capacity_change: -31.77,
        }
    }
}

impl CellParameters {
    /// Checks the box limits and that the cell is exothermic everywhere on
    /// the admissible box.
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rev_voltage_ref,
            self.rev_voltage_slope,
            self.ohmic_r1,
            self.ohmic_r2,
            self.activation_s,
            self.activation_t1,
            self.activation_t2,
            self.activation_t3,
            self.area_cm2,
            self.current_density_min,
            self.current_density_max,
            self.temperature_min,
            self.temperature_max,
            self.enthalpy_ref,
            self.heat_capacity_change,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(ElectrolyserError::Config("non-finite coefficient".into()));
        }
        if self.area_cm2 <= 0.0 {
            return Err(ElectrolyserError::Config("cell area must be positive".into()));
        }
        if !(self.current_density_min > 0.0 && self.current_density_min < self.current_density_max) {
            return Err(ElectrolyserError::Config(format!(
                "need 0 < i_min < i_max, got [{}, {}]",
                self.current_density_min, self.current_density_max
            )));
        }
        if self.temperature_min >= self.temperature_max {
            return Err(ElectrolyserError::Config(format!(
                "need T_min < T_max, got [{}, {}]",
                self.temperature_min, self.temperature_max
            )));
        }
        for (temperature, density) in self.grid(REGION_GRID) {
            let u = cell_voltage(density, temperature, self)?;
            let utn = thermal_neutral_voltage(temperature, self)?;
            if u <= utn {
                return Err(ElectrolyserError::Config(format!(
                    "cell voltage {u:.4} V not above thermal-neutral {utn:.4} V at ({temperature} °C, {density} A/cm²)"
                )));
            }
        }
        Ok(())
    }

    /// Regular `n × n` grid over the admissible (T, i) box.
    pub fn grid(&self, n: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = n.max(2);
        (0..n).flat_map(move |a| {
            let t = lerp(self.temperature_min, self.temperature_max, a as f64 / (n - 1) as f64);
            (0..n).map(move |b| {
                let i = lerp(
                    self.current_density_min,
                    self.current_density_max,
                    b as f64 / (n - 1) as f64,
                );
                (t, i)
            })
        })
    }

    fn in_box(&self, density: f64, temperature: f64) -> bool {
        let eps = 1e-12;
        density >= self.current_density_min - eps
            && density <= self.current_density_max + eps
            && temperature >= self.temperature_min - eps
            && temperature <= self.temperature_max + eps
    }

    fn check_window(&self, temperature: f64) -> Result<()> {
        let lo = self.temperature_min - EXTRAPOLATION_MARGIN;
        let hi = self.temperature_max + EXTRAPOLATION_MARGIN;
        if !(lo..=hi).contains(&temperature) {
            return Err(ElectrolyserError::Domain(format!(
                "temperature {temperature} °C outside extrapolation window [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ElectrolyserError::Domain(format!("{name} is not finite")))
    }
}

/// Reversible voltage, V.
pub fn reversible_voltage(temperature: f64, params: &CellParameters) -> f64 {
    params.rev_voltage_ref + params.rev_voltage_slope * (temperature - 25.0)
}

/// Cell voltage at current density `density` (A/cm²) and temperature (°C).
pub fn cell_voltage(density: f64, temperature: f64, params: &CellParameters) -> Result<f64> {
    finite("current density", density)?;
    finite("temperature", temperature)?;
    if density < 0.0 {
        return Err(ElectrolyserError::Domain(format!("negative current density {density}")));
    }
    params.check_window(temperature)?;
    let ohmic = (params.ohmic_r1 + params.ohmic_r2 * temperature) * density;
    let t_coeff =
        params.activation_t1 + params.activation_t2 / temperature + params.activation_t3 / (temperature * temperature);
    let activation = params.activation_s * (t_coeff * density + 1.0).log10();
    Ok(reversible_voltage(temperature, params) + ohmic + activation)
}

/// Thermal-neutral voltage from the formation enthalpy correlation, V.
pub fn thermal_neutral_voltage(temperature: f64, params: &CellParameters) -> Result<f64> {
    finite("temperature", temperature)?;
    let enthalpy = params.enthalpy_ref + params.heat_capacity_change * (temperature - 25.0);
    Ok(enthalpy / (2.0 * FARADAY))
}

/// One operating point of a cell. Powers are in W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOperatingPoint {
    pub current_density: f64,
    pub temperature: f64,
    pub power: f64,
    pub hydrogen_power: f64,
    pub heat_power: f64,
}

/// Splits the injected power at `(density, temperature)` into hydrogen and
/// heat power. The identity `power = hydrogen_power + heat_power` holds by
/// construction.
pub fn cell_power_split(density: f64, temperature: f64, params: &CellParameters) -> Result<CellOperatingPoint> {
    finite("current density", density)?;
    finite("temperature", temperature)?;
    if !params.in_box(density, temperature) {
        return Err(ElectrolyserError::Region(format!(
            "({temperature} °C, {density} A/cm²) not in [{}, {}] × [{}, {}]",
            params.temperature_min, params.temperature_max, params.current_density_min, params.current_density_max
        )));
    }
    let u_cell = cell_voltage(density, temperature, params)?;
    let u_tn = thermal_neutral_voltage(temperature, params)?;
    let current = density * params.area_cm2;
    let power = u_cell * current;
    let hydrogen_power = u_tn * current;
    Ok(CellOperatingPoint {
        current_density: density,
        temperature,
        power,
        hydrogen_power,
        heat_power: power - hydrogen_power,
    })
}

/// Deviation of a (hydrogen, heat, temperature) triple from the T-H-H
/// surface, in MW. Zero iff the triple lies on the surface.
pub fn thh_residual(
    hydrogen_mw: f64,
    heat_mw: f64,
    temperature: f64,
    params: &CellParameters,
    area_cm2: f64,
) -> Result<f64> {
    finite("hydrogen power", hydrogen_mw)?;
    finite("heat power", heat_mw)?;
    if hydrogen_mw <= 0.0 {
        return Err(ElectrolyserError::Domain(format!(
            "hydrogen power must be positive to invert for current density, got {hydrogen_mw}"
        )));
    }
    if area_cm2 <= 0.0 {
        return Err(ElectrolyserError::Domain("area must be positive".into()));
    }
    let u_tn = thermal_neutral_voltage(temperature, params)?;
    // W/cm² -> A/cm²
    let density = hydrogen_mw * 1e6 / (u_tn * area_cm2);
    let u_cell = cell_voltage(density, temperature, params)?;
    Ok(heat_mw - hydrogen_mw / u_tn * (u_cell - u_tn))
}

/// One corner of the linearised cell region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCorner {
    pub label: char,
    pub temperature: f64,
    pub current_density: f64,
    /// MW per cell
    pub hydrogen_mw: f64,
    /// MW per cell
    pub heat_mw: f64,
}

impl RegionCorner {
    pub fn power_mw(&self) -> f64 {
        self.hydrogen_mw + self.heat_mw
    }
}

/// Corner-point approximation of the T-H-H surface over the admissible box.
///
/// Corners are A = (T_min, i_min), B = (T_min, i_max), C = (T_max, i_max),
/// D = (T_max, i_min).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOperatingRegion {
    pub corners: [RegionCorner; 4],
    pub area_cm2: f64,
    /// Largest heat-axis distance of a sampled surface point from the hull,
    /// relative to the largest corner power.
    pub hull_error: f64,
    pub tolerance: f64,
}

/// Relative hull tolerance used by [`build_cell_region`].
pub const DEFAULT_HULL_TOLERANCE: f64 = 0.02;

impl CellOperatingRegion {
    pub fn temperatures(&self) -> [f64; 4] {
        self.corners.map(|c| c.temperature)
    }

    pub fn hydrogen(&self) -> [f64; 4] {
        self.corners.map(|c| c.hydrogen_mw)
    }

    pub fn heat(&self) -> [f64; 4] {
        self.corners.map(|c| c.heat_mw)
    }

    pub fn max_corner_power(&self) -> f64 {
        self.corners.iter().map(RegionCorner::power_mw).fold(0.0, f64::max)
    }

    pub fn within_tolerance(&self) -> bool {
        self.hull_error <= self.tolerance
    }

    /// Range of heat (MW) the hull admits at a given temperature and hydrogen
    /// power, or `None` when `(T, h)` is outside the hull's projection.
    pub fn heat_interval(&self, temperature: f64, hydrogen_mw: f64) -> Option<(f64, f64)> {
        let t = self.temperatures();
        let h = self.hydrogen();
        let q = self.heat();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        // The fibre {y ≥ 0, 1ᵀy = 1, Tᵀy = T, Hᵀy = h} is a segment whose
        // endpoints have at least one zero weight.
        for zero in 0..4 {
            let idx: Vec<usize> = (0..4).filter(|&k| k != zero).collect();
            let m = nalgebra::Matrix3::new(
                1.0, 1.0, 1.0, t[idx[0]], t[idx[1]], t[idx[2]], h[idx[0]], h[idx[1]], h[idx[2]],
            );
            let rhs = nalgebra::Vector3::new(1.0, temperature, hydrogen_mw);
            let Some(w) = m.lu().solve(&rhs) else { continue };
            if w.iter().all(|&x| x >= -1e-9) {
                let val = w[0] * q[idx[0]] + w[1] * q[idx[1]] + w[2] * q[idx[2]];
                lo = lo.min(val);
                hi = hi.max(val);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Writes the corner table as CSV.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "corner",
            "temperature_c",
            "current_density_a_cm2",
            "hydrogen_mw",
            "heat_mw",
            "power_mw",
        ])?;
        for c in &self.corners {
            w.write_record([
                c.label.to_string(),
                c.temperature.to_string(),
                c.current_density.to_string(),
                c.hydrogen_mw.to_string(),
                c.heat_mw.to_string(),
                c.power_mw().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the cell physics at the four box corners and measures how far
/// the true surface strays from their hull on a dense grid.
pub fn build_cell_region(params: &CellParameters) -> Result<CellOperatingRegion> {
    if params.temperature_min == params.temperature_max || params.current_density_min == params.current_density_max {
        return Err(ElectrolyserError::Config("degenerate (T, i) box".into()));
    }
    params.validate()?;
    let to_mw = 1e-6;
    let corner = |label, temperature, density| -> Result<RegionCorner> {
        let p = cell_power_split(density, temperature, params)?;
        Ok(RegionCorner {
            label,
            temperature,
            current_density: density,
            hydrogen_mw: p.hydrogen_power * to_mw,
            heat_mw: p.heat_power * to_mw,
        })
    };
    let (t0, t1) = (params.temperature_min, params.temperature_max);
    let (i0, i1) = (params.current_density_min, params.current_density_max);
    let mut region = CellOperatingRegion {
        corners: [
            corner('A', t0, i0)?,
            corner('B', t0, i1)?,
            corner('C', t1, i1)?,
            corner('D', t1, i0)?,
        ],
        area_cm2: params.area_cm2,
        hull_error: 0.0,
        tolerance: DEFAULT_HULL_TOLERANCE,
    };
    let scale = region.max_corner_power();
    let mut worst: f64 = 0.0;
    for (temperature, density) in params.grid(REGION_GRID) {
        let p = cell_power_split(density, temperature, params)?;
        let (h, q) = (p.hydrogen_power * to_mw, p.heat_power * to_mw);
        let gap = match region.heat_interval(temperature, h) {
            Some((lo, hi)) => (lo - q).max(q - hi).max(0.0),
            None => f64::INFINITY,
        };
        worst = worst.max(gap);
    }
    region.hull_error = worst / scale;
    Ok(region)
}
