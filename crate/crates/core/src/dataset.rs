//! Cycle-level battery data: canonical CSV ingest, SOH, a synthetic fade
//! generator, min-max normalization, sliding windows and LOOCV splits.
//!
//! Canonical CSV header:
//! `battery_id,cycle_index,capacity_ah[,voltage_avg_v,current_avg_a,temp_avg_c][,cc_charge_time_s]`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// End of life is the first cycle below this fraction of rated capacity.
pub const EOL_FRACTION: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Nasa,
    Calce,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    VoltageAvg,
    CurrentAvg,
    TempAvg,
    Capacity,
    CcChargeTime,
    Soh,
}

impl Feature {
    pub fn column(self) -> &'static str {
        match self {
            Feature::VoltageAvg => "voltage_avg_v",
            Feature::CurrentAvg => "current_avg_a",
            Feature::TempAvg => "temp_avg_c",
            Feature::Capacity => "capacity_ah",
            Feature::CcChargeTime => "cc_charge_time_s",
            Feature::Soh => "soh",
        }
    }
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Nasa => "nasa",
            Profile::Calce => "calce",
            Profile::Synthetic => "synthetic",
        }
    }

    /// Model input features, in channel order.
    pub fn features(self) -> &'static [Feature] {
        match self {
            Profile::Nasa | Profile::Synthetic => {
                &[Feature::VoltageAvg, Feature::CurrentAvg, Feature::TempAvg, Feature::Capacity]
            }
            Profile::Calce => &[Feature::Capacity, Feature::CcChargeTime, Feature::Soh],
        }
    }

    /// Columns that must be present in an ingested CSV.
    pub fn required_columns(self) -> Vec<&'static str> {
        let mut cols = vec!["battery_id", "cycle_index"];
        cols.extend(self.features().iter().filter(|f| **f != Feature::Soh).map(|f| f.column()));
        cols
    }

    pub fn rated_capacity(self) -> f64 {
        match self {
            Profile::Nasa | Profile::Synthetic => 2.0,
            Profile::Calce => 1.1,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Profile::Nasa, Profile::Calce, Profile::Synthetic]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown data profile `{s}`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_index: u32,
    pub capacity: f64,
    pub voltage_avg: Option<f64>,
    pub current_avg: Option<f64>,
    pub temp_avg: Option<f64>,
    pub cc_charge_time: Option<f64>,
    pub soh: Option<f64>,
}

impl CycleRecord {
    pub fn feature(&self, f: Feature) -> Option<f64> {
        match f {
            Feature::VoltageAvg => self.voltage_avg,
            Feature::CurrentAvg => self.current_avg,
            Feature::TempAvg => self.temp_avg,
            Feature::Capacity => Some(self.capacity),
            Feature::CcChargeTime => self.cc_charge_time,
            Feature::Soh => self.soh,
        }
    }

    fn set_feature(&mut self, f: Feature, v: f64) {
        match f {
            Feature::VoltageAvg => self.voltage_avg = Some(v),
            Feature::CurrentAvg => self.current_avg = Some(v),
            Feature::TempAvg => self.temp_avg = Some(v),
            Feature::Capacity => self.capacity = v,
            Feature::CcChargeTime => self.cc_charge_time = Some(v),
            Feature::Soh => self.soh = Some(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatterySeries {
    pub battery_id: String,
    pub rated_capacity: f64,
    pub records: Vec<CycleRecord>,
    pub profile: Profile,
}

impl BatterySeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.capacity).collect()
    }

    /// `[T×C]` matrix of the given features.
    pub fn feature_matrix(&self, features: &[Feature]) -> Result<Array2<f64>> {
        let mut m = Array2::zeros((self.len(), features.len()));
        for (t, r) in self.records.iter().enumerate() {
            for (c, &f) in features.iter().enumerate() {
                m[(t, c)] = r.feature(f).ok_or_else(|| {
                    Error::Contract(format!(
                        "battery {} cycle {} has no {}",
                        self.battery_id,
                        r.cycle_index,
                        f.column()
                    ))
                })?;
            }
        }
        Ok(m)
    }

    /// Overwrites the given features from a `[T×C]` matrix, keeping everything else.
    pub fn with_feature_matrix(&self, features: &[Feature], m: &Array2<f64>) -> Result<Self> {
        if m.nrows() != self.len() || m.ncols() != features.len() {
            return Err(Error::dim("with_feature_matrix", m.shape(), &[self.len(), features.len()]));
        }
        let mut out = self.clone();
        for (t, r) in out.records.iter_mut().enumerate() {
            for (c, &f) in features.iter().enumerate() {
                r.set_feature(f, m[(t, c)]);
            }
        }
        Ok(out)
    }
}

/// Fills `soh_t = capacity_t / capacity_1 · 100`.
pub fn compute_soh(mut series: BatterySeries) -> Result<BatterySeries> {
    let c1 = series
        .records
        .first()
        .map(|r| r.capacity)
        .ok_or(Error::EmptySequence("compute_soh"))?;
    if !(c1 > 0.0) {
        return Err(Error::Contract(format!(
            "battery {} has initial capacity {c1}; SOH needs it > 0",
            series.battery_id
        )));
    }
    for r in &mut series.records {
        r.soh = Some(r.capacity / c1 * 100.0);
    }
    Ok(series)
}

fn ingest_err(path: &Path, row: Option<usize>, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Reads a canonical CSV. Rows are grouped by `battery_id` in first-appearance
/// order; within a battery `cycle_index` must strictly increase. Row numbers in
/// errors count data rows from 1.
pub fn ingest_csv(path: &Path, profile: Profile) -> Result<Vec<BatterySeries>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, path, profile)
}

pub fn ingest_reader(reader: impl std::io::Read, path: &Path, profile: Profile) -> Result<Vec<BatterySeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| ingest_err(path, None, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = profile.required_columns();
    let missing: Vec<&str> = required.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(ingest_err(
            path,
            None,
            format!(
                "missing column(s) {}; the {} profile requires {}",
                missing.join(", "),
                profile.as_str(),
                required.join(",")
            ),
        ));
    }
    let id_col = col("battery_id").expect("checked");
    let cycle_col = col("cycle_index").expect("checked");
    let optional = [
        Feature::Capacity,
        Feature::VoltageAvg,
        Feature::CurrentAvg,
        Feature::TempAvg,
        Feature::CcChargeTime,
    ];
    let feature_cols: Vec<(Feature, usize)> = optional.iter().filter_map(|&f| col(f.column()).map(|c| (f, c))).collect();

    let mut batteries: Vec<BatterySeries> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| ingest_err(path, Some(row), e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(id_col);
        if id.is_empty() {
            return Err(ingest_err(path, Some(row), "empty battery_id"));
        }
        let cycle: u32 = field(cycle_col)
            .parse()
            .ok()
            .filter(|c| *c >= 1)
            .ok_or_else(|| ingest_err(path, Some(row), format!("cycle_index `{}` is not an integer ≥ 1", field(cycle_col))))?;
        let mut record = CycleRecord {
            cycle_index: cycle,
            ..CycleRecord::default()
        };
        for &(f, c) in &feature_cols {
            let raw = field(c);
            let needed = required.contains(&f.column());
            if raw.is_empty() {
                if needed {
                    return Err(ingest_err(path, Some(row), format!("missing value for {}", f.column())));
                }
                continue;
            }
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| ingest_err(path, Some(row), format!("{} `{raw}` is not a finite number", f.column())))?;
            record.set_feature(f, v);
        }
        if !(record.capacity > 0.0) {
            return Err(ingest_err(
                path,
                Some(row),
                format!("capacity_ah must be > 0, got {}", record.capacity),
            ));
        }
        let series = match batteries.iter_mut().find(|b| b.battery_id == id) {
            Some(s) => s,
            None => {
                batteries.push(BatterySeries {
                    battery_id: id.to_string(),
                    rated_capacity: profile.rated_capacity(),
                    records: Vec::new(),
                    profile,
                });
                batteries.last_mut().expect("just pushed")
            }
        };
        if let Some(prev) = series.records.last() {
            if cycle <= prev.cycle_index {
                let what = if cycle == prev.cycle_index { "duplicated" } else { "non-increasing" };
                return Err(ingest_err(
                    path,
                    Some(row),
                    format!("{what} cycle_index {cycle} for battery {id} (previous {})", prev.cycle_index),
                ));
            }
        }
        series.records.push(record);
    }
    if batteries.is_empty() {
        return Err(ingest_err(path, None, "no data rows"));
    }
    batteries.into_iter().map(compute_soh).collect()
}

/// Ingests every `*.csv` in `dir` (sorted by file name). Battery ids must be unique across files.
pub fn ingest_dir(dir: &Path, profile: Profile) -> Result<Vec<BatterySeries>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ingest_err(dir, None, "directory contains no .csv files"));
    }
    let mut out: Vec<BatterySeries> = Vec::new();
    for f in &files {
        for s in ingest_csv(f, profile)? {
            if out.iter().any(|b| b.battery_id == s.battery_id) {
                return Err(ingest_err(f, None, format!("battery {} appears in more than one file", s.battery_id)));
            }
            out.push(s);
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes series in canonical form. Values use shortest round-trip formatting.
pub fn write_csv(series: &[BatterySeries], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "battery_id",
        "cycle_index",
        "capacity_ah",
        "voltage_avg_v",
        "current_avg_a",
        "temp_avg_c",
        "cc_charge_time_s",
    ])?;
    for s in series {
        for r in &s.records {
            wtr.write_record([
                s.battery_id.clone(),
                r.cycle_index.to_string(),
                r.capacity.to_string(),
                opt(r.voltage_avg),
                opt(r.current_avg),
                opt(r.temp_avg),
                opt(r.cc_charge_time),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_csv_file(series: &[BatterySeries], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(series, std::io::BufWriter::new(file))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub battery_id: String,
    pub c0: f64,
    /// Fractional fade per cycle before the knee.
    pub fade_rate: f64,
    pub knee_cycle: u32,
    /// Post-knee fade rate as a multiple of `fade_rate`.
    pub post_knee_factor: f64,
    pub noise_std: f64,
    pub n_cycles: u32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            battery_id: "SYN01".into(),
            c0: 2.0,
            fade_rate: 6e-4,
            knee_cycle: 180,
            post_knee_factor: 4.0,
            noise_std: 0.005,
            n_cycles: 300,
            seed: 0,
        }
    }
}

impl SynthParams {
    /// Noise-free capacity at cycle `t ≥ 1`: linear fade from `c0` at rate `r₁`
    /// until the knee, then `r₂ = factor·r₁`.
    pub fn clean_capacity(&self, t: u32) -> f64 {
        let r1 = self.fade_rate;
        let r2 = self.post_knee_factor * r1;
        let k = f64::from(self.knee_cycle.max(1));
        let t = f64::from(t);
        let fade = if t < k { r1 * (t - 1.0) } else { r1 * (k - 1.0) + r2 * (t - k) };
        self.c0 * (1.0 - fade)
    }

    fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0) || self.n_cycles < 50 || !(self.noise_std >= 0.0) || !(self.fade_rate >= 0.0) {
            return Err(Error::Config(format!(
                "synthesize needs c0 > 0, n_cycles ≥ 50, noise_std ≥ 0, fade_rate ≥ 0; got {self:?}"
            )));
        }
        if !(self.post_knee_factor >= 1.0) {
            return Err(Error::Config("post_knee_factor must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Knee-shaped capacity fade with noisy auxiliary signals that track capacity.
pub fn synthesize_battery(p: &SynthParams) -> Result<BatterySeries> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let cap_noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let rel = p.noise_std / p.c0;
    let aux = Normal::new(0.0, rel).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(p.n_cycles as usize);
    for t in 1..=p.n_cycles {
        let mut c = p.clean_capacity(t);
        if p.noise_std > 0.0 {
            c += cap_noise.sample(&mut rng);
        }
        if !(c > 0.0) {
            log::warn!("synthetic battery {} reaches nonpositive capacity at cycle {t}; truncating", p.battery_id);
            break;
        }
        let h = c / p.c0;
        let mut draw = || if rel > 0.0 { aux.sample(&mut rng) } else { 0.0 };
        records.push(CycleRecord {
            cycle_index: t,
            capacity: c,
            voltage_avg: Some(3.3 + 0.5 * h + 0.5 * draw()),
            current_avg: Some(-1.2 - 0.8 * h + 0.8 * draw()),
            temp_avg: Some(32.0 + 6.0 * (1.0 - h) + 6.0 * draw()),
            cc_charge_time: Some(3000.0 * h + 3000.0 * draw()),
            soh: None,
        });
    }
    compute_soh(BatterySeries {
        battery_id: p.battery_id.clone(),
        rated_capacity: p.c0,
        records,
        profile: Profile::Synthetic,
    })
}

/// `n` batteries that share `base` except for id, seed and a small seeded spread in fade rate and knee.
pub fn synthesize_fleet(base: &SynthParams, n: usize, seed: u64) -> Result<Vec<BatterySeries>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = rand_distr::Uniform::new_inclusive(-1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    (0..n)
        .map(|i| {
            let mut p = base.clone();
            p.battery_id = format!("SYN{:02}", i + 1);
            p.seed = seed.wrapping_mul(1000).wrapping_add(i as u64 + 1);
            p.fade_rate *= 1.0 + 0.15 * spread.sample(&mut rng);
            let knee = f64::from(base.knee_cycle) * (1.0 + 0.1 * spread.sample(&mut rng));
            p.knee_cycle = knee.round().max(1.0) as u32;
            synthesize_battery(&p)
        })
        .collect()
}

/// Per-feature min-max scaling fitted on training batteries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub features: Vec<Feature>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Battery ids whose values were read during fitting.
    pub fitted_on: Vec<String>,
}

impl NormalizationState {
    pub fn fit(train: &[BatterySeries], features: &[Feature]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySequence("fit_normalizer"));
        }
        let mut min = vec![f64::INFINITY; features.len()];
        let mut max = vec![f64::NEG_INFINITY; features.len()];
        for s in train {
            let m = s.feature_matrix(features)?;
            for ((_, c), v) in m.indexed_iter() {
                min[c] = min[c].min(*v);
                max[c] = max[c].max(*v);
            }
        }
        for (c, f) in features.iter().enumerate() {
            if !(max[c] > min[c]) {
                log::warn!("feature {} is constant on the training set; using unit range", f.column());
                max[c] = min[c] + 1.0;
            }
        }
        let fitted_on: BTreeSet<String> = train.iter().map(|s| s.battery_id.clone()).collect();
        Ok(Self {
            features: features.to_vec(),
            min,
            max,
            fitted_on: fitted_on.into_iter().collect(),
        })
    }

    pub fn normalize(&self, c: usize, v: f64) -> f64 {
        (v - self.min[c]) / (self.max[c] - self.min[c])
    }

    pub fn denormalize(&self, c: usize, v: f64) -> f64 {
        v * (self.max[c] - self.min[c]) + self.min[c]
    }

    pub fn channel(&self, f: Feature) -> Option<usize> {
        self.features.iter().position(|&x| x == f)
    }

    pub fn capacity_channel(&self) -> Result<usize> {
        self.channel(Feature::Capacity)
            .ok_or_else(|| Error::Contract("normalizer does not cover capacity".into()))
    }

    pub fn normalize_capacity(&self, v: f64) -> Result<f64> {
        Ok(self.normalize(self.capacity_channel()?, v))
    }

    pub fn denormalize_capacity(&self, v: f64) -> Result<f64> {
        Ok(self.denormalize(self.capacity_channel()?, v))
    }

    /// Applies the scaling to a `[T×C]` matrix in feature order. No clamping.
    pub fn apply(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        if m.ncols() != self.features.len() {
            return Err(Error::dim("apply_normalizer", m.shape(), &[self.features.len()]));
        }
        Ok(Array2::from_shape_fn(m.raw_dim(), |(t, c)| self.normalize(c, m[(t, c)])))
    }

    pub fn invert(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        if m.ncols() != self.features.len() {
            return Err(Error::dim("invert_normalizer", m.shape(), &[self.features.len()]));
        }
        Ok(Array2::from_shape_fn(m.raw_dim(), |(t, c)| self.denormalize(c, m[(t, c)])))
    }
}

/// One training example: `features` is `[C×L]` row-major (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub features: Vec<f64>,
    pub channels: usize,
    pub window_len: usize,
    pub target: f64,
    pub battery_id: String,
    /// Cycle index of the last input cycle; the target is the following cycle.
    pub end_cycle: u32,
}

impl WindowedSample {
    /// `[L×C]` view of the features (time along rows).
    pub fn time_major(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.window_len, self.channels), |(t, c)| self.features[c * self.window_len + t])
    }

    pub fn set_time_major(&mut self, m: &Array2<f64>) {
        for ((t, c), v) in m.indexed_iter() {
            self.features[c * self.window_len + t] = *v;
        }
    }
}

/// Sliding windows of length `window_len`, stride 1, target = next-cycle capacity.
///
/// With a normalizer the features and target are scaled; without one they are raw.
pub fn make_windows(series: &BatterySeries, window_len: usize, norm: Option<&NormalizationState>) -> Result<Vec<WindowedSample>> {
    if window_len == 0 {
        return Err(Error::Config("window_len must be ≥ 1".into()));
    }
    if series.len() < window_len + 1 {
        return Err(Error::SequenceTooShort {
            needed: window_len + 1,
            got: series.len(),
        });
    }
    let features = norm.map_or(series.profile.features(), |n| n.features.as_slice());
    let mut m = series.feature_matrix(features)?;
    let mut caps = series.capacities();
    if let Some(n) = norm {
        m = n.apply(&m)?;
        for c in &mut caps {
            *c = n.normalize_capacity(*c)?;
        }
    }
    let ch = features.len();
    Ok((0..series.len() - window_len)
        .map(|start| {
            let mut feats = vec![0.0; ch * window_len];
            for c in 0..ch {
                for t in 0..window_len {
                    feats[c * window_len + t] = m[(start + t, c)];
                }
            }
            WindowedSample {
                features: feats,
                channels: ch,
                window_len,
                target: caps[start + window_len],
                battery_id: series.battery_id.clone(),
                end_cycle: series.records[start + window_len - 1].cycle_index,
            }
        })
        .collect())
}

/// Stacks samples into `x[B×C×L]` and `y[B]`.
pub fn batch_tensors<'a>(samples: impl IntoIterator<Item = &'a WindowedSample>) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for s in samples {
        match dims {
            None => dims = Some((s.channels, s.window_len)),
            Some(d) if d != (s.channels, s.window_len) => {
                return Err(Error::dim("batch_tensors", &[d.0, d.1], &[s.channels, s.window_len]));
            }
            _ => {}
        }
        xs.extend_from_slice(&s.features);
        ys.push(s.target);
    }
    let (c, l) = dims.ok_or(Error::EmptySequence("batch_tensors"))?;
    let b = ys.len();
    Ok((Tensor::new(vec![b, c, l], xs)?, Tensor::new(vec![b], ys)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: usize,
}

/// Leave-one-battery-out splits, as indices into `batteries`.
pub fn make_loocv_splits(batteries: &[BatterySeries]) -> Result<Vec<Split>> {
    if batteries.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 batteries, got {}",
            batteries.len()
        )));
    }
    Ok((0..batteries.len())
        .map(|test| Split {
            train: (0..batteries.len()).filter(|&i| i != test).collect(),
            test,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NASA_HEADER: &str = "battery_id,cycle_index,capacity_ah,voltage_avg_v,current_avg_a,temp_avg_c\n";

    fn ingest(text: &str, p: Profile) -> Result<Vec<BatterySeries>> {
        ingest_reader(text.as_bytes(), Path::new("mem.csv"), p)
    }

    #[test]
    fn three_rows() {
        let text = format!("{NASA_HEADER}B5,1,1.86,3.5,-1.8,32\nB5,2,1.85,3.5,-1.8,32.1\nB5,3,1.84,3.5,-1.8,32.2\n");
        let s = ingest(&text, Profile::Nasa).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 3);
        assert_eq!(s[0].rated_capacity, 2.0);
        assert_eq!(s[0].records[0].soh, Some(100.0));
    }

    #[test]
    fn duplicate_cycle_names_row() {
        let text = format!("{NASA_HEADER}B5,1,1.86,3.5,-1.8,32\nB5,1,1.85,3.5,-1.8,32.1\n");
        match ingest(&text, Profile::Nasa) {
            Err(Error::Ingest { row: Some(2), message, .. }) => assert!(message.contains("duplicated")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_temperature_lists_required() {
        let text = "battery_id,cycle_index,capacity_ah,voltage_avg_v,current_avg_a\nB5,1,1.8,3.5,-1.8\n";
        match ingest(text, Profile::Nasa) {
            Err(Error::Ingest { row: None, message, .. }) => {
                assert!(message.contains("temp_avg_c"));
                assert!(message.contains("voltage_avg_v,current_avg_a,temp_avg_c,capacity_ah"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonpositive_capacity_and_missing_value() {
        let text = format!("{NASA_HEADER}B5,1,0,3.5,-1.8,32\n");
        assert!(matches!(ingest(&text, Profile::Nasa), Err(Error::Ingest { row: Some(1), .. })));
        let text = format!("{NASA_HEADER}B5,1,1.2,,-1.8,32\n");
        assert!(matches!(ingest(&text, Profile::Nasa), Err(Error::Ingest { row: Some(1), .. })));
    }

    #[test]
    fn calce_profile_columns() {
        let text = "battery_id,cycle_index,capacity_ah,cc_charge_time_s\nCS2_35,1,1.1,5000\nCS2_35,2,1.0,4900\n";
        let s = ingest(text, Profile::Calce).unwrap();
        let m = s[0].feature_matrix(Profile::Calce.features()).unwrap();
        assert_eq!(m.row(1).to_vec(), vec![1.0, 4900.0, 1.0 / 1.1 * 100.0]);
        assert_eq!(s[0].rated_capacity, 1.1);
    }

    #[test]
    fn grouping_by_id() {
        let text = format!("{NASA_HEADER}A,1,1.8,3,1,30\nB,1,1.9,3,1,30\nA,2,1.7,3,1,30\n");
        let s = ingest(&text, Profile::Nasa).unwrap();
        assert_eq!(s.iter().map(|b| (b.battery_id.as_str(), b.len())).collect::<Vec<_>>(), vec![("A", 2), ("B", 1)]);
    }

    #[test]
    fn soh_examples() {
        let mk = |caps: &[f64]| BatterySeries {
            battery_id: "x".into(),
            rated_capacity: 2.0,
            records: caps
                .iter()
                .enumerate()
                .map(|(i, &c)| CycleRecord { cycle_index: i as u32 + 1, capacity: c, ..Default::default() })
                .collect(),
            profile: Profile::Nasa,
        };
        let s = compute_soh(mk(&[1.1, 1.1])).unwrap();
        assert_eq!(s.records[1].soh, Some(100.0));
        let s = compute_soh(mk(&[2.0, 1.4])).unwrap();
        assert!((s.records[1].soh.unwrap() - 70.0).abs() < 1e-12);
        assert!(compute_soh(mk(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn synthetic_shapes() {
        let flat = SynthParams { fade_rate: 0.0, noise_std: 0.0, ..SynthParams::default() };
        let s = synthesize_battery(&flat).unwrap();
        assert!(s.capacities().iter().all(|&c| c == 2.0));
        let clean = SynthParams { noise_std: 0.0, ..SynthParams::default() };
        let caps = synthesize_battery(&clean).unwrap().capacities();
        assert!(caps.windows(2).all(|w| w[1] < w[0]));
        assert!(synthesize_battery(&SynthParams { n_cycles: 10, ..SynthParams::default() }).is_err());
    }

    #[test]
    fn synthetic_truncates_at_nonpositive() {
        let p = SynthParams { fade_rate: 0.01, noise_std: 0.0, knee_cycle: 500, ..SynthParams::default() };
        let s = synthesize_battery(&p).unwrap();
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn normalizer_affine_and_round_trip() {
        let mk = |caps: &[f64]| BatterySeries {
            battery_id: "n".into(),
            rated_capacity: 2.0,
            records: caps
                .iter()
                .enumerate()
                .map(|(i, &c)| CycleRecord { cycle_index: i as u32 + 1, capacity: c, ..Default::default() })
                .collect(),
            profile: Profile::Calce,
        };
        let n = NormalizationState::fit(&[mk(&[2.0, 1.4])], &[Feature::Capacity]).unwrap();
        assert_eq!(n.normalize(0, 2.0), 1.0);
        assert_eq!(n.normalize(0, 1.4), 0.0);
        assert!((n.normalize(0, 1.7) - 0.5).abs() < 1e-12);
        assert!(n.normalize(0, 2.2) > 1.0);
        for v in [1.1, 1.55, 3.0] {
            assert!((n.denormalize(0, n.normalize(0, v)) - v).abs() < 1e-12);
        }
        let flat = NormalizationState::fit(&[mk(&[1.5, 1.5])], &[Feature::Capacity]).unwrap();
        assert_eq!(flat.max[0] - flat.min[0], 1.0);
    }

    #[test]
    fn windows_count_and_alignment() {
        let s = synthesize_battery(&SynthParams { n_cycles: 50, ..SynthParams::default() }).unwrap();
        let w = make_windows(&s, 16, None).unwrap();
        assert_eq!(w.len(), 34);
        assert_eq!(w.last().unwrap().target, s.records[49].capacity);
        let caps = s.capacities();
        for (i, sample) in w.iter().enumerate() {
            assert_eq!(sample.target, caps[i + 16]);
            assert_eq!(sample.end_cycle, s.records[i + 15].cycle_index);
            // capacity channel holds the preceding cycles
            assert_eq!(&sample.features[3 * 16..4 * 16], &caps[i..i + 16]);
        }
        let mut short = s.clone();
        short.records.truncate(16);
        assert!(matches!(make_windows(&short, 16, None), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn loocv_splits() {
        let fleet = synthesize_fleet(&SynthParams { n_cycles: 60, ..SynthParams::default() }, 4, 1).unwrap();
        let splits = make_loocv_splits(&fleet).unwrap();
        assert_eq!(splits.len(), 4);
        let tests: BTreeSet<usize> = splits.iter().map(|s| s.test).collect();
        assert_eq!(tests.len(), 4);
        for s in &splits {
            assert_eq!(s.train.len(), 3);
            assert!(!s.train.contains(&s.test));
        }
        assert!(make_loocv_splits(&fleet[..1]).is_err());
    }
}
