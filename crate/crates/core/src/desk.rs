//! Desk-scale instance: two representative days of eight hours and two
//! wind plants, small enough for the embedded branch-and-bound.
//!
//! Day 1 is a cold windy day on which the heat-led CHP plant pushes power
//! back into the transmission grid; day 2 is a mild day.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::electrolyser::{build_cell_region, CellParameters};
use crate::ies_model::{build_instance, ChpRegion, Flexibility, IesInstance, IesParameters};
use crate::scenarios::{estimate_moments, RepresentativeDaySet, ScenarioSet};

pub const DAYS: usize = 2;
pub const HOURS: usize = 8;
pub const PLANTS: usize = 2;
pub const SCENARIOS: usize = 200;
pub const SCENARIO_SEED: u64 = 2021;
pub const BITS: usize = 8;

pub const ELECTRIC: [[f64; HOURS]; DAYS] = [
    [0.50, 0.45, 0.45, 0.55, 0.75, 0.85, 0.80, 0.65],
    [0.45, 0.40, 0.45, 0.60, 0.75, 0.80, 0.75, 0.60],
];
pub const HEAT: [[f64; HOURS]; DAYS] = [
    [1.00, 1.05, 1.10, 1.00, 0.90, 0.85, 0.90, 1.00],
    [0.60, 0.65, 0.70, 0.60, 0.50, 0.45, 0.50, 0.60],
];
pub const WEIGHTS: [f64; DAYS] = [200.0, 165.0];
/// Forecast per day, hour and plant (MW).
pub const WIND: [[[f64; PLANTS]; HOURS]; DAYS] = [
    [
        [0.55, 0.45],
        [0.60, 0.50],
        [0.60, 0.55],
        [0.50, 0.45],
        [0.40, 0.35],
        [0.35, 0.30],
        [0.40, 0.35],
        [0.50, 0.40],
    ],
    [
        [0.35, 0.30],
        [0.40, 0.30],
        [0.40, 0.35],
        [0.30, 0.25],
        [0.25, 0.20],
        [0.20, 0.20],
        [0.25, 0.20],
        [0.30, 0.25],
    ],
];
/// Hour-to-hour persistence of the forecast error.
pub const PERSISTENCE: f64 = 0.6;
/// Correlation between the two plants' errors.
pub const PLANT_CORRELATION: f64 = 0.5;
/// Error standard deviation as a fraction of the forecast.
pub const RELATIVE_SPREAD: f64 = 0.2;

pub fn representative_days() -> RepresentativeDaySet {
    RepresentativeDaySet::new(
        ELECTRIC.iter().map(|d| d.to_vec()).collect(),
        HEAT.iter().map(|d| d.to_vec()).collect(),
        WEIGHTS.to_vec(),
    )
    .expect("desk demand is valid")
}

/// AR(1) errors with correlated innovations, clipped at zero output.
pub fn generate_scenarios(n: usize, seed: u64) -> ScenarioSet {
    let corr = DMatrix::from_fn(PLANTS, PLANTS, |i, j| if i == j { 1.0 } else { PLANT_CORRELATION });
    let chol = corr.cholesky().expect("correlation is positive definite").l();
    let innovation = (1.0 - PERSISTENCE * PERSISTENCE).sqrt();
    let mut values = vec![0.0; n * DAYS * HOURS * PLANTS];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..n {
        for r in 0..DAYS {
            let mut state = [0.0; PLANTS];
            for t in 0..HOURS {
                let g: Vec<f64> = (0..PLANTS).map(|_| StandardNormal.sample(&mut rng)).collect();
                for z in 0..PLANTS {
                    let e: f64 = (0..PLANTS).map(|k| chol[(z, k)] * g[k]).sum();
                    state[z] = if t == 0 {
                        e
                    } else {
                        PERSISTENCE * state[z] + innovation * e
                    };
                    let mean = WIND[r][t][z];
                    let v = mean + RELATIVE_SPREAD * mean * state[z];
                    values[((s * DAYS + r) * HOURS + t) * PLANTS + z] = v.max(0.0);
                }
            }
        }
    }
    ScenarioSet::new(n, DAYS, HOURS, PLANTS, values).expect("generated scenarios are valid")
}

pub fn scenarios() -> ScenarioSet {
    generate_scenarios(SCENARIOS, SCENARIO_SEED)
}

pub fn parameters() -> IesParameters {
    IesParameters {
        bits: BITS,
        ..IesParameters::default()
    }
}

/// Desk instance with moments estimated from `scenarios`.
pub fn instance_from(params: IesParameters, scenarios: &ScenarioSet, flexibility: Flexibility) -> IesInstance {
    let cell_params = CellParameters::default();
    let cell = build_cell_region(&cell_params).expect("default cell region");
    let moments = estimate_moments(scenarios).expect("desk moments");
    build_instance(
        params,
        ChpRegion::default(),
        &cell_params,
        cell,
        representative_days(),
        moments,
    )
    .expect("desk instance")
    .with_flexibility(flexibility)
}

pub fn instance(flexibility: Flexibility) -> IesInstance {
    instance_from(parameters(), &scenarios(), flexibility)
}

/// The first `hours` hours of day 1 as a single day covering the year,
/// with `bits` cell-count bits; small enough for exhaustive checks.
pub fn fixture(hours: usize, bits: usize, flexibility: Flexibility) -> IesInstance {
    let full = scenarios();
    let sliced = ScenarioSet::from_fn(full.scenarios(), 1, hours, PLANTS, |s, _, t, z| full.get(s, 0, t, z))
        .expect("fixture scenarios");
    let cell_params = CellParameters::default();
    let cell = build_cell_region(&cell_params).expect("default cell region");
    let moments = estimate_moments(&sliced).expect("fixture moments");
    let days = RepresentativeDaySet::new(
        vec![ELECTRIC[0][..hours].to_vec()],
        vec![HEAT[0][..hours].to_vec()],
        vec![WEIGHTS.iter().sum()],
    )
    .expect("fixture demand");
    let params = IesParameters {
        bits,
        ..IesParameters::default()
    };
    build_instance(params, ChpRegion::default(), &cell_params, cell, days, moments)
        .expect("fixture instance")
        .with_flexibility(flexibility)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_are_reproducible() {
        let a = generate_scenarios(20, 3);
        let b = generate_scenarios(20, 3);
        assert_eq!(a, b);
        assert_eq!(a.shape(), (20, DAYS, HOURS, PLANTS));
    }

    #[test]
    fn weights_cover_a_year() {
        assert_eq!(representative_days().total_weight(), 365.0);
    }
}
