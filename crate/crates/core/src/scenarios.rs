//! Wind scenarios, representative days and forecast-error moments.
//!
//! Indices are zero-based in the API and one-based in CSV files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("negative wind power {value} at scenario {scenario}, day {day}, hour {hour}, plant {plant} (line {line})")]
    Negative {
        value: f64,
        scenario: usize,
        day: usize,
        hour: usize,
        plant: usize,
        line: u64,
    },
    #[error("missing entry at {0}")]
    Missing(String),
    #[error("duplicate entry at {0} (line {1})")]
    Duplicate(String, u64),
    #[error("no scenarios in input")]
    Empty,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate moments: {0}")]
    Degenerate(String),
    #[error("index error: {0}")]
    Index(String),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn parse_err(line: u64, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| parse_err(line, format!("missing column `{name}`")))?;
    raw.parse()
        .map_err(|_| parse_err(line, format!("column `{name}`: cannot parse `{raw}`")))
}

fn one_based(v: usize, name: &str, line: u64) -> Result<usize> {
    v.checked_sub(1)
        .ok_or_else(|| parse_err(line, format!("{name} indices start at 1")))
}

/// Wind power tensor indexed `[scenario][day][hour][plant]`, in MW.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    values: Vec<f64>,
    scenarios: usize,
    days: usize,
    hours: usize,
    plants: usize,
}

impl ScenarioSet {
    pub fn new(scenarios: usize, days: usize, hours: usize, plants: usize, values: Vec<f64>) -> Result<Self> {
        if scenarios == 0 {
            return Err(ScenarioError::Empty);
        }
        if days == 0 || hours == 0 || plants == 0 {
            return Err(ScenarioError::Config(format!(
                "empty dimension: days {days}, hours {hours}, plants {plants}"
            )));
        }
        if values.len() != scenarios * days * hours * plants {
            return Err(ScenarioError::Config(format!(
                "expected {} values, got {}",
                scenarios * days * hours * plants,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            let (s, r, t, z) = Self::unflatten(pos, days, hours, plants);
            return Err(ScenarioError::Negative {
                value: values[pos],
                scenario: s + 1,
                day: r + 1,
                hour: t + 1,
                plant: z + 1,
                line: 0,
            });
        }
        Ok(Self {
            values,
            scenarios,
            days,
            hours,
            plants,
        })
    }

    /// Builds a set from a closure over `(s, r, t, z)`.
    pub fn from_fn(
        scenarios: usize,
        days: usize,
        hours: usize,
        plants: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(scenarios * days * hours * plants);
        for s in 0..scenarios {
            for r in 0..days {
                for t in 0..hours {
                    for z in 0..plants {
                        values.push(f(s, r, t, z));
                    }
                }
            }
        }
        Self::new(scenarios, days, hours, plants, values)
    }

    fn unflatten(pos: usize, days: usize, hours: usize, plants: usize) -> (usize, usize, usize, usize) {
        let z = pos % plants;
        let t = (pos / plants) % hours;
        let r = (pos / (plants * hours)) % days;
        let s = pos / (plants * hours * days);
        (s, r, t, z)
    }

    /// `(scenarios, days, hours, plants)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.scenarios, self.days, self.hours, self.plants)
    }

    pub fn scenarios(&self) -> usize {
        self.scenarios
    }
    pub fn days(&self) -> usize {
        self.days
    }
    pub fn hours(&self) -> usize {
        self.hours
    }
    pub fn plants(&self) -> usize {
        self.plants
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize, t: usize, z: usize) -> f64 {
        self.values[((s * self.days + r) * self.hours + t) * self.plants + z]
    }

    /// Wind vector of one scenario-day-hour.
    pub fn slice(&self, s: usize, r: usize, t: usize) -> &[f64] {
        let start = ((s * self.days + r) * self.hours + t) * self.plants;
        &self.values[start..start + self.plants]
    }

    fn scenario_block(&self, s: usize) -> &[f64] {
        let len = self.days * self.hours * self.plants;
        &self.values[s * len..(s + 1) * len]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "day", "hour", "plant", "mw"])?;
        for s in 0..self.scenarios {
            for r in 0..self.days {
                for t in 0..self.hours {
                    for z in 0..self.plants {
                        w.write_record([
                            (s + 1).to_string(),
                            (r + 1).to_string(),
                            (t + 1).to_string(),
                            (z + 1).to_string(),
                            self.get(s, r, t, z).to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a wind-scenario CSV with columns `scenario,day,hour,plant,mw`.
pub fn ingest_scenarios(path: impl AsRef<Path>) -> Result<ScenarioSet> {
    read_scenarios(open(path.as_ref())?)
}

pub fn read_scenarios<R: Read>(input: R) -> Result<ScenarioSet> {
    let mut rdr = csv_reader(input);
    let mut cells: BTreeMap<(usize, usize, usize, usize), f64> = BTreeMap::new();
    let mut dims = (0, 0, 0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 5 {
            return Err(parse_err(line, format!("expected 5 columns, found {}", rec.len())));
        }
        let s = one_based(field(&rec, 0, "scenario", line)?, "scenario", line)?;
        let r = one_based(field(&rec, 1, "day", line)?, "day", line)?;
        let t = one_based(field(&rec, 2, "hour", line)?, "hour", line)?;
        let z = one_based(field(&rec, 3, "plant", line)?, "plant", line)?;
        let mw: f64 = field(&rec, 4, "mw", line)?;
        if !mw.is_finite() || mw < 0.0 {
            return Err(ScenarioError::Negative {
                value: mw,
                scenario: s + 1,
                day: r + 1,
                hour: t + 1,
                plant: z + 1,
                line,
            });
        }
        if cells.insert((s, r, t, z), mw).is_some() {
            return Err(ScenarioError::Duplicate(
                format!("scenario {}, day {}, hour {}, plant {}", s + 1, r + 1, t + 1, z + 1),
                line,
            ));
        }
        dims = (
            dims.0.max(s + 1),
            dims.1.max(r + 1),
            dims.2.max(t + 1),
            dims.3.max(z + 1),
        );
    }
    if cells.is_empty() {
        return Err(ScenarioError::Empty);
    }
    let (ns, nr, nt, nz) = dims;
    let mut values = Vec::with_capacity(ns * nr * nt * nz);
    for s in 0..ns {
        for r in 0..nr {
            for t in 0..nt {
                for z in 0..nz {
                    match cells.get(&(s, r, t, z)) {
                        Some(v) => values.push(*v),
                        None => {
                            return Err(ScenarioError::Missing(format!(
                                "scenario {}, day {}, hour {}, plant {}",
                                s + 1,
                                r + 1,
                                t + 1,
                                z + 1
                            )))
                        }
                    }
                }
            }
        }
    }
    ScenarioSet::new(ns, nr, nt, nz, values)
}

/// Hourly electric and heat demand of one day, MW.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandDay {
    pub electric: Vec<f64>,
    pub heat: Vec<f64>,
}

/// Reads `day,hour,electric_mw,heat_mw` rows into per-day profiles.
pub fn read_demand<R: Read>(input: R) -> Result<Vec<DemandDay>> {
    let mut rdr = csv_reader(input);
    let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let (mut nd, mut nh) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 {
            return Err(parse_err(line, format!("expected 4 columns, found {}", rec.len())));
        }
        let d = one_based(field(&rec, 0, "day", line)?, "day", line)?;
        let h = one_based(field(&rec, 1, "hour", line)?, "hour", line)?;
        let e: f64 = field(&rec, 2, "electric_mw", line)?;
        let q: f64 = field(&rec, 3, "heat_mw", line)?;
        if !(e.is_finite() && q.is_finite()) || e < 0.0 || q < 0.0 {
            return Err(parse_err(
                line,
                format!("negative or non-finite demand at day {}, hour {}", d + 1, h + 1),
            ));
        }
        if cells.insert((d, h), (e, q)).is_some() {
            return Err(ScenarioError::Duplicate(format!("day {}, hour {}", d + 1, h + 1), line));
        }
        nd = nd.max(d + 1);
        nh = nh.max(h + 1);
    }
    if cells.is_empty() {
        return Err(ScenarioError::Empty);
    }
    let mut days = Vec::with_capacity(nd);
    for d in 0..nd {
        let mut day = DemandDay {
            electric: Vec::with_capacity(nh),
            heat: Vec::with_capacity(nh),
        };
        for h in 0..nh {
            let (e, q) = cells
                .get(&(d, h))
                .ok_or_else(|| ScenarioError::Missing(format!("day {}, hour {}", d + 1, h + 1)))?;
            day.electric.push(*e);
            day.heat.push(*q);
        }
        days.push(day);
    }
    Ok(days)
}

pub fn read_demand_file(path: impl AsRef<Path>) -> Result<Vec<DemandDay>> {
    read_demand(open(path.as_ref())?)
}

/// Reads `day,weight` rows.
pub fn read_weights<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut rdr = csv_reader(input);
    let mut cells = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let d = one_based(field(&rec, 0, "day", line)?, "day", line)?;
        let w: f64 = field(&rec, 1, "weight", line)?;
        if cells.insert(d, w).is_some() {
            return Err(ScenarioError::Duplicate(format!("day {}", d + 1), line));
        }
    }
    if cells.is_empty() {
        return Err(ScenarioError::Empty);
    }
    let n = cells.keys().max().map_or(0, |d| d + 1);
    (0..n)
        .map(|d| {
            cells
                .get(&d)
                .copied()
                .ok_or_else(|| ScenarioError::Missing(format!("weight of day {}", d + 1)))
        })
        .collect()
}

pub fn read_weights_file(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_weights(open(path.as_ref())?)
}

/// Representative days with their annual weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeDaySet {
    /// `[day][hour]` electric demand, MW
    pub electric: Vec<Vec<f64>>,
    /// `[day][hour]` heat demand, MW
    pub heat: Vec<Vec<f64>>,
    /// days per year represented by each day
    pub weights: Vec<f64>,
}

impl RepresentativeDaySet {
    pub fn new(electric: Vec<Vec<f64>>, heat: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let set = Self {
            electric,
            heat,
            weights,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_demand(days: &[DemandDay], weights: Vec<f64>) -> Result<Self> {
        Self::new(
            days.iter().map(|d| d.electric.clone()).collect(),
            days.iter().map(|d| d.heat.clone()).collect(),
            weights,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n == 0 {
            return Err(ScenarioError::Empty);
        }
        if self.electric.len() != n || self.heat.len() != n {
            return Err(ScenarioError::Config(format!(
                "{} weights but {} electric / {} heat profiles",
                n,
                self.electric.len(),
                self.heat.len()
            )));
        }
        let hours = self.hours();
        if hours < 2 {
            return Err(ScenarioError::Config("a day needs at least two hours".into()));
        }
        for (r, (e, q)) in self.electric.iter().zip(&self.heat).enumerate() {
            if e.len() != hours || q.len() != hours {
                return Err(ScenarioError::Config(format!("day {} has ragged hours", r + 1)));
            }
            if e.iter().chain(q).any(|v| !v.is_finite() || *v < 0.0) {
                return Err(ScenarioError::Config(format!("day {} has negative demand", r + 1)));
            }
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(ScenarioError::Config(format!("day weight must be positive, got {w}")));
        }
        Ok(())
    }

    pub fn days(&self) -> usize {
        self.weights.len()
    }

    pub fn hours(&self) -> usize {
        self.electric.first().map_or(0, Vec::len)
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn write_demand_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "hour", "electric_mw", "heat_mw"])?;
        for r in 0..self.days() {
            for t in 0..self.hours() {
                w.write_record([
                    (r + 1).to_string(),
                    (t + 1).to_string(),
                    self.electric[r][t].to_string(),
                    self.heat[r][t].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_weights_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "weight"])?;
        for (r, k) in self.weights.iter().enumerate() {
            w.write_record([(r + 1).to_string(), k.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One source day for clustering. `wind` may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyProfile {
    pub electric: Vec<f64>,
    pub heat: Vec<f64>,
    pub wind: Vec<f64>,
}

/// Reads `day,hour,electric_mw,heat_mw,wind_mw` rows into per-day profiles.
pub fn read_profiles<R: Read>(input: R) -> Result<Vec<DailyProfile>> {
    let mut rdr = csv_reader(input);
    let mut cells: BTreeMap<(usize, usize), [f64; 3]> = BTreeMap::new();
    let (mut nd, mut nh) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 5 {
            return Err(parse_err(line, format!("expected 5 columns, found {}", rec.len())));
        }
        let d = one_based(field(&rec, 0, "day", line)?, "day", line)?;
        let h = one_based(field(&rec, 1, "hour", line)?, "hour", line)?;
        let v = [
            field::<f64>(&rec, 2, "electric_mw", line)?,
            field::<f64>(&rec, 3, "heat_mw", line)?,
            field::<f64>(&rec, 4, "wind_mw", line)?,
        ];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(parse_err(
                line,
                format!("negative or non-finite value at day {}, hour {}", d + 1, h + 1),
            ));
        }
        if cells.insert((d, h), v).is_some() {
            return Err(ScenarioError::Duplicate(format!("day {}, hour {}", d + 1, h + 1), line));
        }
        nd = nd.max(d + 1);
        nh = nh.max(h + 1);
    }
    if cells.is_empty() {
        return Err(ScenarioError::Empty);
    }
    (0..nd)
        .map(|d| {
            let mut p = DailyProfile {
                electric: Vec::with_capacity(nh),
                heat: Vec::with_capacity(nh),
                wind: Vec::with_capacity(nh),
            };
            for h in 0..nh {
                let v = cells
                    .get(&(d, h))
                    .ok_or_else(|| ScenarioError::Missing(format!("day {}, hour {}", d + 1, h + 1)))?;
                p.electric.push(v[0]);
                p.heat.push(v[1]);
                p.wind.push(v[2]);
            }
            Ok(p)
        })
        .collect()
}

pub fn read_profiles_file(path: impl AsRef<Path>) -> Result<Vec<DailyProfile>> {
    read_profiles(open(path.as_ref())?)
}

/// Result of [`cluster_representative_days`].
#[derive(Debug, Clone)]
pub struct Clustering {
    pub days: RepresentativeDaySet,
    /// Mean wind profile of each cluster (empty rows when no wind given).
    pub wind: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares in normalised feature space.
    pub wcss: f64,
    /// Centroids in normalised feature space.
    pub centroids: Vec<Vec<f64>>,
    /// The normalised feature vectors that were clustered.
    pub features: Vec<Vec<f64>>,
}

pub const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITER: usize = 500;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid for every point; ties go to the lowest index.
pub fn assign_to_nearest(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Arithmetic mean of the points assigned to each cluster.
pub fn cluster_means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

fn wcss(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn kmeans_pp_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = centroids.len();
    let mut assignment = assign_to_nearest(points, &centroids);
    for _ in 0..KMEANS_MAX_ITER {
        let mut means = cluster_means(points, &assignment, k);
        // an emptied cluster takes the point farthest from its centroid
        for c in 0..k {
            if !assignment.contains(&c) {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &means[assignment[a]])
                            .total_cmp(&sq_dist(&points[b], &means[assignment[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                means[c] = points[far].clone();
                assignment[far] = c;
            }
        }
        centroids = cluster_means(points, &assignment, k);
        let next = assign_to_nearest(points, &centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    (centroids, assignment)
}

fn channel_scale(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.fold(0.0, |a: f64, v| a.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// K-means (k-means++ seeding, best of [`KMEANS_RESTARTS`] Lloyd runs) over
/// daily (electric, heat, wind) vectors, each channel scaled by its maximum.
pub fn cluster_representative_days(profiles: &[DailyProfile], k: usize, seed: u64) -> Result<Clustering> {
    if profiles.is_empty() {
        return Err(ScenarioError::Empty);
    }
    if k == 0 || k > profiles.len() {
        return Err(ScenarioError::Config(format!(
            "cluster count {k} must lie in 1..={}",
            profiles.len()
        )));
    }
    let hours = profiles[0].electric.len();
    let wind_len = profiles[0].wind.len();
    for (d, p) in profiles.iter().enumerate() {
        if p.electric.len() != hours || p.heat.len() != hours || p.wind.len() != wind_len {
            return Err(ScenarioError::Config(format!(
                "day {} has ragged profile lengths",
                d + 1
            )));
        }
    }
    let se = channel_scale(profiles.iter().flat_map(|p| p.electric.iter().copied()));
    let sq = channel_scale(profiles.iter().flat_map(|p| p.heat.iter().copied()));
    let sw = channel_scale(profiles.iter().flat_map(|p| p.wind.iter().copied()));
    let features: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| {
            p.electric
                .iter()
                .map(|v| v / se)
                .chain(p.heat.iter().map(|v| v / sq))
                .chain(p.wind.iter().map(|v| v / sw))
                .collect()
        })
        .collect();

    let runs: Vec<(f64, Vec<Vec<f64>>, Vec<usize>)> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(run as u64);
            let init = kmeans_pp_seed(&features, k, &mut rng);
            let (centroids, assignment) = lloyd(&features, init);
            (wcss(&features, &centroids, &assignment), centroids, assignment)
        })
        .collect();
    // first run wins ties, so the result does not depend on thread count
    let (best_wcss, centroids, assignment) = runs
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("at least one restart");

    let mut electric = vec![vec![0.0; hours]; k];
    let mut heat = vec![vec![0.0; hours]; k];
    let mut wind = vec![vec![0.0; wind_len]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in profiles.iter().zip(&assignment) {
        counts[a] += 1;
        for t in 0..hours {
            electric[a][t] += p.electric[t];
            heat[a][t] += p.heat[t];
        }
        for (w, v) in wind[a].iter_mut().zip(&p.wind).take(wind_len) {
            *w += v;
        }
    }
    for c in 0..k {
        let n = counts[c] as f64;
        electric[c].iter_mut().for_each(|v| *v /= n);
        heat[c].iter_mut().for_each(|v| *v /= n);
        wind[c].iter_mut().for_each(|v| *v /= n);
    }
    let weights = counts.iter().map(|&c| c as f64).collect();
    let days = RepresentativeDaySet::new(electric, heat, weights)?;
    Ok(Clustering {
        days,
        wind,
        assignment,
        wcss: best_wcss,
        centroids,
        features,
    })
}

/// Symmetric PSD square root by eigen-decomposition with eigenvalues clamped
/// at zero. Also returns the smallest eigenvalue before clamping.
pub fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&roots) * v.transpose();
    ((&root + root.transpose()) * 0.5, min_eig)
}

/// Eigenvalue-clamp repair of a symmetric matrix. Returns the repaired
/// matrix and the smallest eigenvalue before repair.
pub fn psd_repair(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig >= 0.0 {
        return (sym, min_eig);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    ((&out + out.transpose()) * 0.5, min_eig)
}

/// Joint covariance of `[ω_{t−1}; ω_t]` after symmetrisation and repair.
#[derive(Debug, Clone)]
pub struct JointCovariance {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue_before: f64,
    pub repaired: bool,
}

/// Forecast means and error covariances per representative day and hour.
#[derive(Debug, Clone)]
pub struct WindMoments {
    days: usize,
    hours: usize,
    plants: usize,
    /// `[r * hours + t]`
    mean: Vec<DVector<f64>>,
    cov: Vec<DMatrix<f64>>,
    /// `cross[r * hours + t] = E[ω_{t−1} ω_tᵀ]`; zero at `t = 0`
    cross: Vec<DMatrix<f64>>,
}

impl WindMoments {
    pub fn from_parts(
        days: usize,
        hours: usize,
        plants: usize,
        mean: Vec<DVector<f64>>,
        cov: Vec<DMatrix<f64>>,
        cross: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = days * hours;
        if n == 0 || plants == 0 {
            return Err(ScenarioError::Config("empty moment dimensions".into()));
        }
        if mean.len() != n || cov.len() != n || cross.len() != n {
            return Err(ScenarioError::Config(format!(
                "expected {n} moment blocks, got mean {}, cov {}, cross {}",
                mean.len(),
                cov.len(),
                cross.len()
            )));
        }
        for (i, (m, (c, x))) in mean.iter().zip(cov.iter().zip(&cross)).enumerate() {
            if m.len() != plants || c.shape() != (plants, plants) || x.shape() != (plants, plants) {
                return Err(ScenarioError::Config(format!("moment block {i} has wrong shape")));
            }
            if (c - c.transpose()).amax() > 1e-9 * c.amax().max(1.0) {
                return Err(ScenarioError::Config(format!("covariance block {i} not symmetric")));
            }
        }
        Ok(Self {
            days,
            hours,
            plants,
            mean,
            cov,
            cross,
        })
    }

    /// Moments with no inter-temporal correlation.
    pub fn uncorrelated(days: usize, hours: usize, mean: Vec<DVector<f64>>, cov: Vec<DMatrix<f64>>) -> Result<Self> {
        let plants = mean.first().map_or(0, DVector::len);
        let cross = vec![DMatrix::zeros(plants, plants); days * hours];
        Self::from_parts(days, hours, plants, mean, cov, cross)
    }

    pub fn days(&self) -> usize {
        self.days
    }
    pub fn hours(&self) -> usize {
        self.hours
    }
    pub fn plants(&self) -> usize {
        self.plants
    }

    pub fn mean(&self, r: usize, t: usize) -> &DVector<f64> {
        &self.mean[r * self.hours + t]
    }

    pub fn covariance(&self, r: usize, t: usize) -> &DMatrix<f64> {
        &self.cov[r * self.hours + t]
    }

    pub fn cross_covariance(&self, r: usize, t: usize) -> &DMatrix<f64> {
        &self.cross[r * self.hours + t]
    }

    /// `1ᵀ m_{r,t}`
    pub fn mean_total(&self, r: usize, t: usize) -> f64 {
        self.mean(r, t).sum()
    }

    /// `1ᵀ Σ_{r,t} 1`, the variance of the aggregated error.
    pub fn aggregate_variance(&self, r: usize, t: usize) -> f64 {
        self.covariance(r, t).sum()
    }

    /// `Σ^{1/2} 1` using the clamped symmetric square root.
    pub fn aggregate_loading(&self, r: usize, t: usize) -> DVector<f64> {
        let (root, _) = psd_sqrt(self.covariance(r, t));
        root * DVector::from_element(self.plants, 1.0)
    }

    /// Columns `J^{1/2} [1; 0]` and `J^{1/2} [0; 1]` of the repaired joint
    /// covariance of hours `t − 1` and `t`.
    pub fn joint_loadings(&self, r: usize, t: usize) -> Result<(DVector<f64>, DVector<f64>, JointCovariance)> {
        let joint = joint_covariance(self, r, t)?;
        let (root, _) = psd_sqrt(&joint.matrix);
        let z = self.plants;
        let mut first = DVector::zeros(2 * z);
        let mut second = DVector::zeros(2 * z);
        for i in 0..z {
            first[i] = 1.0;
            second[z + i] = 1.0;
        }
        Ok((&root * first, &root * second, joint))
    }

    /// CSV table of means and covariances.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "hour", "kind", "i", "j", "value"])?;
        for r in 0..self.days {
            for t in 0..self.hours {
                let (d, h) = ((r + 1).to_string(), (t + 1).to_string());
                for i in 0..self.plants {
                    w.write_record([
                        &d,
                        &h,
                        "mean",
                        &(i + 1).to_string(),
                        "",
                        &self.mean(r, t)[i].to_string(),
                    ])?;
                }
                for (kind, m) in [("cov", self.covariance(r, t)), ("cross", self.cross_covariance(r, t))] {
                    for i in 0..self.plants {
                        for j in 0..self.plants {
                            w.write_record([
                                d.as_str(),
                                h.as_str(),
                                kind,
                                &(i + 1).to_string(),
                                &(j + 1).to_string(),
                                &m[(i, j)].to_string(),
                            ])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample mean, unbiased error covariance and lag-1 error cross-covariance
/// per (day, hour).
pub fn estimate_moments(scenarios: &ScenarioSet) -> Result<WindMoments> {
    let (ns, nr, nt, nz) = scenarios.shape();
    if ns < 2 {
        return Err(ScenarioError::Degenerate(format!(
            "{ns} scenario(s); the unbiased covariance needs at least two"
        )));
    }
    let denom = (ns - 1) as f64;
    let mut mean = Vec::with_capacity(nr * nt);
    for r in 0..nr {
        for t in 0..nt {
            let mut m = DVector::zeros(nz);
            for s in 0..ns {
                for z in 0..nz {
                    m[z] += scenarios.get(s, r, t, z);
                }
            }
            mean.push(m / ns as f64);
        }
    }
    let err = |s: usize, r: usize, t: usize| -> DVector<f64> {
        DVector::from_iterator(nz, (0..nz).map(|z| scenarios.get(s, r, t, z) - mean[r * nt + t][z]))
    };
    let mut cov = Vec::with_capacity(nr * nt);
    let mut cross = Vec::with_capacity(nr * nt);
    for r in 0..nr {
        for t in 0..nt {
            let mut c = DMatrix::zeros(nz, nz);
            let mut x = DMatrix::zeros(nz, nz);
            for s in 0..ns {
                let e = err(s, r, t);
                c += &e * e.transpose();
                if t > 0 {
                    x += err(s, r, t - 1) * e.transpose();
                }
            }
            c /= denom;
            x /= denom;
            cov.push((&c + c.transpose()) * 0.5);
            cross.push(x);
        }
    }
    WindMoments::from_parts(nr, nt, nz, mean, cov, cross)
}

/// Forecast errors `ω = value − mean` of every scenario, same layout as the
/// scenario tensor.
pub fn forecast_errors(scenarios: &ScenarioSet, moments: &WindMoments) -> Result<ScenarioErrors> {
    let (ns, nr, nt, nz) = scenarios.shape();
    if (nr, nt, nz) != (moments.days(), moments.hours(), moments.plants()) {
        return Err(ScenarioError::Config(format!(
            "scenario shape ({nr}, {nt}, {nz}) does not match moments ({}, {}, {})",
            moments.days(),
            moments.hours(),
            moments.plants()
        )));
    }
    let mut values = Vec::with_capacity(ns * nr * nt * nz);
    for s in 0..ns {
        for r in 0..nr {
            for t in 0..nt {
                let m = moments.mean(r, t);
                for z in 0..nz {
                    values.push(scenarios.get(s, r, t, z) - m[z]);
                }
            }
        }
    }
    Ok(ScenarioErrors {
        values,
        scenarios: ns,
        days: nr,
        hours: nt,
        plants: nz,
    })
}

/// Forecast-error tensor `[scenario][day][hour][plant]`; entries may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioErrors {
    values: Vec<f64>,
    scenarios: usize,
    days: usize,
    hours: usize,
    plants: usize,
}

impl ScenarioErrors {
    pub fn from_fn(
        scenarios: usize,
        days: usize,
        hours: usize,
        plants: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(scenarios * days * hours * plants);
        for s in 0..scenarios {
            for r in 0..days {
                for t in 0..hours {
                    for z in 0..plants {
                        values.push(f(s, r, t, z));
                    }
                }
            }
        }
        Self {
            values,
            scenarios,
            days,
            hours,
            plants,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.scenarios, self.days, self.hours, self.plants)
    }

    pub fn scenarios(&self) -> usize {
        self.scenarios
    }

    pub fn get(&self, s: usize, r: usize, t: usize, z: usize) -> f64 {
        self.values[((s * self.days + r) * self.hours + t) * self.plants + z]
    }

    pub fn slice(&self, s: usize, r: usize, t: usize) -> &[f64] {
        let start = ((s * self.days + r) * self.hours + t) * self.plants;
        &self.values[start..start + self.plants]
    }

    /// All errors of scenario `s`, laid out `[day][hour][plant]`.
    pub fn sample(&self, s: usize) -> &[f64] {
        let len = self.days * self.hours * self.plants;
        &self.values[s * len..(s + 1) * len]
    }

    /// `1ᵀ ω_{s,r,t}`
    pub fn aggregate(&self, s: usize, r: usize, t: usize) -> f64 {
        self.slice(s, r, t).iter().sum()
    }

    /// Raw error export `scenario,day,hour,plant,error_mw`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "day", "hour", "plant", "error_mw"])?;
        for s in 0..self.scenarios {
            for r in 0..self.days {
                for t in 0..self.hours {
                    for z in 0..self.plants {
                        w.write_record([
                            (s + 1).to_string(),
                            (r + 1).to_string(),
                            (t + 1).to_string(),
                            (z + 1).to_string(),
                            self.get(s, r, t, z).to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Block matrix `[[Σ_{t−1}, Υ], [Υᵀ, Σ_t]]`, symmetrised and eigenvalue-clamped.
/// `t` is zero-based and must be at least 1.
pub fn joint_covariance(moments: &WindMoments, r: usize, t: usize) -> Result<JointCovariance> {
    if r >= moments.days() || t >= moments.hours() {
        return Err(ScenarioError::Index(format!("(day {r}, hour {t}) out of range")));
    }
    if t == 0 {
        return Err(ScenarioError::Index(
            "joint covariance needs a previous hour; hour index must be at least 1".into(),
        ));
    }
    let z = moments.plants();
    let mut m = DMatrix::zeros(2 * z, 2 * z);
    let cross = moments.cross_covariance(r, t);
    m.view_mut((0, 0), (z, z)).copy_from(moments.covariance(r, t - 1));
    m.view_mut((z, z), (z, z)).copy_from(moments.covariance(r, t));
    m.view_mut((0, z), (z, z)).copy_from(cross);
    m.view_mut((z, 0), (z, z)).copy_from(&cross.transpose());
    let (matrix, min_eig) = psd_repair(&m);
    Ok(JointCovariance {
        matrix,
        min_eigenvalue_before: min_eig,
        repaired: min_eig < 0.0,
    })
}

/// Resamples whole scenarios with replacement.
pub fn bootstrap_resample(scenarios: &ScenarioSet, n: usize, seed: u64) -> Result<ScenarioSet> {
    if n == 0 {
        return Err(ScenarioError::Config("bootstrap sample count must be positive".into()));
    }
    let (ns, nr, nt, nz) = scenarios.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * nr * nt * nz);
    for _ in 0..n {
        let pick = rng.random_range(0..ns);
        values.extend_from_slice(scenarios.scenario_block(pick));
    }
    ScenarioSet::new(n, nr, nt, nz, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_csv() -> &'static str {
        "scenario,day,hour,plant,mw\n\
         1,1,1,1,0.5\n1,1,2,1,0.6\n1,1,3,1,0.7\n\
         2,1,1,1,0.4\n2,1,2,1,0.8\n2,1,3,1,0.9\n"
    }

    #[test]
    fn ingest_shape_echo() {
        let set = read_scenarios(fixture_csv().as_bytes()).unwrap();
        assert_eq!(set.shape(), (2, 1, 3, 1));
        assert_eq!(set.get(1, 0, 2, 0), 0.9);
    }

    #[test]
    fn ingest_rejects_negative_with_coordinates() {
        let text = fixture_csv().replace("2,1,2,1,0.8", "2,1,2,1,-0.8");
        match read_scenarios(text.as_bytes()) {
            Err(ScenarioError::Negative {
                scenario,
                day,
                hour,
                plant,
                ..
            }) => {
                assert_eq!((scenario, day, hour, plant), (2, 1, 2, 1));
            }
            other => panic!("expected negative-value error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_empty_and_missing() {
        assert!(matches!(read_scenarios("".as_bytes()), Err(ScenarioError::Empty)));
        assert!(matches!(
            read_scenarios("scenario,day,hour,plant,mw\n".as_bytes()),
            Err(ScenarioError::Empty)
        ));
        let text = fixture_csv().replace("2,1,3,1,0.9\n", "");
        let err = read_scenarios(text.as_bytes()).unwrap_err();
        assert!(matches!(err, ScenarioError::Missing(ref m) if m.contains("scenario 2") && m.contains("hour 3")));
        let ragged = fixture_csv().replace("1,1,2,1,0.6", "1,1,2,0.6");
        assert!(matches!(
            read_scenarios(ragged.as_bytes()),
            Err(ScenarioError::Parse { .. })
        ));
    }

    fn profiles() -> Vec<DailyProfile> {
        (0..12)
            .map(|d| {
                let level = if d % 3 == 0 { 2.0 } else { 1.0 } + 0.01 * d as f64;
                DailyProfile {
                    electric: (0..4).map(|h| level + 0.1 * h as f64).collect(),
                    heat: (0..4).map(|h| 3.0 - level + 0.05 * h as f64).collect(),
                    wind: vec![],
                }
            })
            .collect()
    }

    #[test]
    fn single_cluster_is_mean_profile() {
        let p = profiles();
        let c = cluster_representative_days(&p, 1, 7).unwrap();
        assert_eq!(c.days.weights, vec![12.0]);
        for t in 0..4 {
            let mean: f64 = p.iter().map(|d| d.electric[t]).sum::<f64>() / 12.0;
            assert!((c.days.electric[0][t] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_partition_days_and_lloyd_is_fixed_point() {
        let p = profiles();
        for k in 1..=5 {
            let c = cluster_representative_days(&p, k, 11).unwrap();
            assert_eq!(c.days.total_weight(), 12.0);
            let means = cluster_means(&c.features, &c.assignment, k);
            assert_eq!(assign_to_nearest(&c.features, &means), c.assignment);
        }
    }

    #[test]
    fn clustering_is_seed_deterministic() {
        let p = profiles();
        let a = cluster_representative_days(&p, 3, 5).unwrap();
        let b = cluster_representative_days(&p, 3, 5).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.wcss.to_bits(), b.wcss.to_bits());
    }

    #[test]
    fn too_many_clusters_is_config_error() {
        assert!(matches!(
            cluster_representative_days(&profiles(), 13, 0),
            Err(ScenarioError::Config(_))
        ));
    }

    #[test]
    fn moments_center_errors_and_stay_psd() {
        let set = ScenarioSet::from_fn(50, 2, 3, 2, |s, r, t, z| {
            1.0 + 0.3 * ((s * 7 + r * 3 + t * 5 + z) % 11) as f64 / 11.0
        })
        .unwrap();
        let m = estimate_moments(&set).unwrap();
        let errors = forecast_errors(&set, &m).unwrap();
        for r in 0..2 {
            for t in 0..3 {
                for z in 0..2 {
                    let mean: f64 = (0..50).map(|s| errors.get(s, r, t, z)).sum::<f64>() / 50.0;
                    assert!(mean.abs() <= 1e-12);
                }
                let eig = m.covariance(r, t).clone().symmetric_eigen();
                assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
            }
        }
    }

    #[test]
    fn single_scenario_is_degenerate() {
        let set = ScenarioSet::from_fn(1, 1, 2, 1, |_, _, _, _| 1.0).unwrap();
        assert!(matches!(estimate_moments(&set), Err(ScenarioError::Degenerate(_))));
    }

    #[test]
    fn joint_covariance_blocks() {
        let set = ScenarioSet::from_fn(30, 1, 3, 2, |s, _, t, z| {
            1.0 + ((s * 13 + t * 7 + z * 3) % 17) as f64 / 17.0
        })
        .unwrap();
        let m = estimate_moments(&set).unwrap();
        let j = joint_covariance(&m, 0, 1).unwrap();
        assert_eq!(j.matrix.shape(), (4, 4));
        assert!((&j.matrix - j.matrix.transpose()).amax() <= 1e-12);
        let eig = j.matrix.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
        assert!(matches!(joint_covariance(&m, 0, 0), Err(ScenarioError::Index(_))));

        let un = WindMoments::uncorrelated(
            1,
            2,
            vec![DVector::from_vec(vec![1.0, 1.0]); 2],
            vec![DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]); 2],
        )
        .unwrap();
        let j = joint_covariance(&un, 0, 1).unwrap();
        assert!(j.matrix.view((0, 2), (2, 2)).amax() == 0.0);
        assert!(j.matrix.view((2, 0), (2, 2)).amax() == 0.0);
        assert!(!j.repaired);
    }

    #[test]
    fn indefinite_joint_matrix_is_clamped() {
        let cov = DMatrix::from_row_slice(1, 1, &[1.0]);
        let cross = DMatrix::from_row_slice(1, 1, &[1.5]);
        let m = WindMoments::from_parts(
            1,
            2,
            1,
            vec![DVector::from_element(1, 0.0); 2],
            vec![cov.clone(), cov],
            vec![DMatrix::zeros(1, 1), cross],
        )
        .unwrap();
        let j = joint_covariance(&m, 0, 1).unwrap();
        assert!(j.repaired);
        assert!(j.min_eigenvalue_before < 0.0);
        let eig = j.matrix.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn bootstrap_is_deterministic_and_sized() {
        let set = read_scenarios(fixture_csv().as_bytes()).unwrap();
        let a = bootstrap_resample(&set, 17, 3).unwrap();
        let b = bootstrap_resample(&set, 17, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scenarios(), 17);
        assert!(matches!(bootstrap_resample(&set, 0, 3), Err(ScenarioError::Config(_))));
    }

    #[test]
    fn demand_and_weights_round_trip() {
        let days = RepresentativeDaySet::new(
            vec![vec![1.0, 2.0], vec![1.5, 2.5]],
            vec![vec![3.0, 3.5], vec![0.5, 0.25]],
            vec![200.0, 165.0],
        )
        .unwrap();
        let mut d = Vec::new();
        days.write_demand_csv(&mut d).unwrap();
        let mut w = Vec::new();
        days.write_weights_csv(&mut w).unwrap();
        let back =
            RepresentativeDaySet::from_demand(&read_demand(d.as_slice()).unwrap(), read_weights(w.as_slice()).unwrap())
                .unwrap();
        assert_eq!(back, days);
    }
}
