//! Capacity metrics in Ah, end-of-life detection, rollouts and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{make_windows, BatterySeries, NormalizationState, EOL_FRACTION};
use crate::error::{Error, Result};
use crate::model::CdformerModel;
use crate::tensor::Tensor;

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptySequence(op));
    }
    if a.len() != b.len() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair("rmse", y_true, y_pred)?;
    let sse: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((sse / y_true.len() as f64).sqrt())
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair("mae", y_true, y_pred)?;
    let sae: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum();
    Ok(sae / y_true.len() as f64)
}

/// 1-based position of the first capacity below `0.7·rated`.
pub fn find_eol(capacity: &[f64], rated: f64) -> Option<usize> {
    let threshold = EOL_FRACTION * rated;
    capacity.iter().position(|&c| c < threshold).map(|i| i + 1)
}

/// `|N_true − N_pred| / N_true`, or `None` when either trajectory never crosses.
pub fn relative_error(true_caps: &[f64], pred_caps: &[f64], rated: f64) -> Option<f64> {
    let n_true = find_eol(true_caps, rated)?;
    let n_pred = find_eol(pred_caps, rated)?;
    Some((n_true as f64 - n_pred as f64).abs() / n_true as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    #[default]
    OneStep,
    Recursive,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_step" => Ok(RolloutMode::OneStep),
            "recursive" => Ok(RolloutMode::Recursive),
            _ => Err(Error::Config(format!("unknown rollout mode `{s}` (one_step | recursive)"))),
        }
    }
}

/// Anything that maps a normalized batch `[B×C×L]` to normalized next-cycle capacities.
pub trait Predictor {
    fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>>;
}

impl Predictor for CdformerModel {
    fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.predict(x)
    }
}

/// Predicted cycles with true and predicted capacity in Ah.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub cycles: Vec<u32>,
    pub true_ah: Vec<f64>,
    pub pred_ah: Vec<f64>,
}

const PREDICT_CHUNK: usize = 256;

/// Predicts every cycle after the first window.
///
/// `OneStep` builds each window from ground truth. `Recursive` feeds each
/// prediction back into the capacity channel of later windows; other
/// channels stay ground truth.
pub fn rollout(
    model: &dyn Predictor,
    series: &BatterySeries,
    norm: &NormalizationState,
    window_len: usize,
    mode: RolloutMode,
) -> Result<Rollout> {
    let cap_ch = norm.capacity_channel()?;
    let n = series.len();
    if n < window_len + 1 {
        return Err(Error::SequenceTooShort {
            needed: window_len + 1,
            got: n,
        });
    }
    let cycles: Vec<u32> = series.records[window_len..].iter().map(|r| r.cycle_index).collect();
    let true_ah: Vec<f64> = series.records[window_len..].iter().map(|r| r.capacity).collect();
    let pred_norm = match mode {
        RolloutMode::OneStep => {
            let windows = make_windows(series, window_len, Some(norm))?;
            let mut out = Vec::with_capacity(windows.len());
            for chunk in windows.chunks(PREDICT_CHUNK) {
                let (x, _) = crate::dataset::batch_tensors(chunk)?;
                out.extend(model.predict_batch(&x)?);
            }
            out
        }
        RolloutMode::Recursive => {
            let mut m = norm.apply(&series.feature_matrix(&norm.features)?)?;
            let ch = norm.features.len();
            let mut out = Vec::with_capacity(n - window_len);
            for t in window_len..n {
                let mut x = vec![0.0; ch * window_len];
                for c in 0..ch {
                    for k in 0..window_len {
                        x[c * window_len + k] = m[(t - window_len + k, c)];
                    }
                }
                let y = model.predict_batch(&Tensor::new(vec![1, ch, window_len], x)?)?[0];
                m[(t, cap_ch)] = y;
                out.push(y);
            }
            out
        }
    };
    let pred_ah = pred_norm
        .iter()
        .map(|&v| norm.denormalize(cap_ch, v))
        .collect::<Vec<_>>();
    if pred_ah.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rollout prediction"));
    }
    Ok(Rollout { cycles, true_ah, pred_ah })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub battery_id: String,
    pub rmse: f64,
    pub mae: f64,
    pub re: Option<f64>,
    pub cycles: Vec<u32>,
    pub true_capacity: Vec<f64>,
    pub pred_capacity: Vec<f64>,
    pub eol_true: Option<u32>,
    pub eol_pred: Option<u32>,
    pub mode: RolloutMode,
}

/// Scores a rollout. End of life is located on the full trajectory: the
/// observed history before the first prediction followed by the rollout.
pub fn evaluate(series: &BatterySeries, r: &Rollout, mode: RolloutMode) -> Result<EvalReport> {
    let history: Vec<f64> = series.records[..series.len() - r.cycles.len()].iter().map(|c| c.capacity).collect();
    let all_cycles: Vec<u32> = series.records.iter().map(|c| c.cycle_index).collect();
    let full_true: Vec<f64> = history.iter().chain(&r.true_ah).copied().collect();
    let full_pred: Vec<f64> = history.iter().chain(&r.pred_ah).copied().collect();
    let rated = series.rated_capacity;
    let eol_true = find_eol(&full_true, rated).map(|i| all_cycles[i - 1]);
    let eol_pred = find_eol(&full_pred, rated).map(|i| all_cycles[i - 1]);
    let re = relative_error(&full_true, &full_pred, rated);
    if re.is_none() {
        log::warn!(
            "battery {}: relative error undefined ({} trajectory never crosses {:.0}% of rated)",
            series.battery_id,
            if eol_true.is_none() { "true" } else { "predicted" },
            EOL_FRACTION * 100.0
        );
    }
    Ok(EvalReport {
        battery_id: series.battery_id.clone(),
        rmse: rmse(&r.true_ah, &r.pred_ah)?,
        mae: mae(&r.true_ah, &r.pred_ah)?,
        re,
        cycles: r.cycles.clone(),
        true_capacity: r.true_ah.clone(),
        pred_capacity: r.pred_ah.clone(),
        eol_true,
        eol_pred,
        mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryMetrics {
    pub id: String,
    pub rmse: f64,
    pub mae: f64,
    pub re: Option<f64>,
    pub eol_true: Option<u32>,
    pub eol_pred: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rmse: f64,
    pub mae: f64,
    /// Mean over batteries where it is defined; `None` if it is defined for none.
    pub re: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub dataset: String,
    pub model: String,
    pub config_hash: String,
    pub per_battery: Vec<BatteryMetrics>,
    pub aggregate: Aggregate,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::EmptySequence("aggregate"));
    }
    let excluded = reports.iter().filter(|r| r.re.is_none()).count();
    if excluded > 0 {
        log::warn!("{excluded} of {} batteries excluded from the RE mean (undefined)", reports.len());
    }
    Ok(Aggregate {
        rmse: mean(reports.iter().map(|r| r.rmse)).expect("nonempty"),
        mae: mean(reports.iter().map(|r| r.mae)).expect("nonempty"),
        re: mean(reports.iter().filter_map(|r| r.re)),
    })
}

pub fn summarize(dataset: &str, model: &str, config_hash: &str, reports: &[EvalReport]) -> Result<ReportSummary> {
    Ok(ReportSummary {
        dataset: dataset.to_string(),
        model: model.to_string(),
        config_hash: config_hash.to_string(),
        per_battery: reports
            .iter()
            .map(|r| BatteryMetrics {
                id: r.battery_id.clone(),
                rmse: r.rmse,
                mae: r.mae,
                re: r.re,
                eol_true: r.eol_true,
                eol_pred: r.eol_pred,
            })
            .collect(),
        aggregate: aggregate(reports)?,
    })
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// File name used for a battery's trajectory CSV.
pub fn trajectory_file_name(battery_id: &str) -> String {
    let safe: String = battery_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("trajectory_{safe}.csv")
}

pub fn write_trajectory(r: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cycle", "true_ah", "pred_ah"])?;
    for ((c, t), p) in r.cycles.iter().zip(&r.true_capacity).zip(&r.pred_capacity) {
        w.write_record([c.to_string(), t.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `(cycles, true_ah, pred_ah)` from a trajectory CSV.
pub fn read_trajectory(path: &Path) -> Result<(Vec<u32>, Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let (mut c, mut t, mut p) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.deserialize::<(u32, f64, f64)>().enumerate() {
        let (a, b, d) = rec.map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            row: Some(i + 1),
            message: e.to_string(),
        })?;
        c.push(a);
        t.push(b);
        p.push(d);
    }
    Ok((c, t, p))
}

/// Writes `metrics.json` and one trajectory CSV per battery into `dir`.
pub fn emit_report(summary: &ReportSummary, reports: &[EvalReport], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptySequence("emit_report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(summary)?;
    let path = dir.join("metrics.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    for r in reports {
        write_trajectory(r, &dir.join(trajectory_file_name(&r.battery_id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_battery, Feature, SynthParams};

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 1.0], &[1.0, 2.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert!(rmse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn eol_examples() {
        assert_eq!(find_eol(&[1.5, 1.41, 1.39, 1.2], 2.0), Some(3));
        assert_eq!(find_eol(&[1.5, 1.41], 2.0), None);
        assert_eq!(find_eol(&[1.0, 1.5], 2.0), Some(1));
        // exactly at threshold is not below it
        assert_eq!(find_eol(&[1.4], 2.0), None);
    }

    #[test]
    fn relative_error_examples() {
        let mk = |eol: usize| -> Vec<f64> { (1..=120).map(|i| if i < eol { 1.9 } else { 1.0 }).collect() };
        assert!((relative_error(&mk(100), &mk(90), 2.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(relative_error(&mk(100), &mk(100), 2.0), Some(0.0));
        assert_eq!(relative_error(&mk(100), &[1.9; 120], 2.0), None);
    }

    struct Oracle(Vec<f64>);

    impl Predictor for Oracle {
        fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
            // the oracle knows targets by matching the last capacity entry
            let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            Ok((0..b)
                .map(|i| {
                    let last = x.data()[i * c * l + 3 * l + l - 1];
                    let pos = self.0.iter().position(|v| (v - last).abs() < 1e-15).unwrap();
                    self.0[pos + 1]
                })
                .collect())
        }
    }

    struct Constant(f64);

    impl Predictor for Constant {
        fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
            Ok(vec![self.0; x.shape()[0]])
        }
    }

    fn battery() -> (BatterySeries, NormalizationState) {
        let s = synthesize_battery(&SynthParams { n_cycles: 300, noise_std: 0.0, ..SynthParams::default() }).unwrap();
        let n = NormalizationState::fit(std::slice::from_ref(&s), crate::dataset::Profile::Synthetic.features()).unwrap();
        (s, n)
    }

    #[test]
    fn perfect_model_rolls_out_exactly() {
        let (s, n) = battery();
        let cap = n.capacity_channel().unwrap();
        let normalized: Vec<f64> = s.capacities().iter().map(|&c| n.normalize(cap, c)).collect();
        for mode in [RolloutMode::OneStep, RolloutMode::Recursive] {
            let r = rollout(&Oracle(normalized.clone()), &s, &n, 16, mode).unwrap();
            assert_eq!(r.cycles.len(), 300 - 16);
            assert_eq!(r.cycles[0], 17);
            for (t, p) in r.true_ah.iter().zip(&r.pred_ah) {
                assert!((t - p).abs() < 1e-12);
            }
            let rep = evaluate(&s, &r, mode).unwrap();
            assert!(rep.rmse < 1e-12 && rep.mae < 1e-12);
            assert_eq!(rep.re, Some(0.0));
        }
    }

    #[test]
    fn recursive_constant_model_has_constant_tail() {
        let (s, n) = battery();
        let r = rollout(&Constant(0.25), &s, &n, 16, RolloutMode::Recursive).unwrap();
        let expect = n.denormalize(n.channel(Feature::Capacity).unwrap(), 0.25);
        assert!(r.pred_ah.iter().all(|&p| p == expect));
    }

    #[test]
    fn report_round_trip() {
        let (s, n) = battery();
        let r = rollout(&Constant(0.5), &s, &n, 16, RolloutMode::OneStep).unwrap();
        let rep = evaluate(&s, &r, RolloutMode::OneStep).unwrap();
        let summary = summarize("synthetic", "cdformer", "abc", std::slice::from_ref(&rep)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&summary, std::slice::from_ref(&rep), dir.path()).unwrap();
        let (c, t, p) = read_trajectory(&dir.path().join(trajectory_file_name(&s.battery_id))).unwrap();
        assert_eq!(c, rep.cycles);
        assert_eq!(t, rep.true_capacity);
        assert_eq!(p, rep.pred_capacity);
        let back: ReportSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(back, summary);
    }

    #[test]
    fn config_hash_is_stable_hex() {
        let h = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&serde_json::json!({"a": 1})).unwrap());
    }
}
