//! Composite temporal augmentation: time warping, time resampling and
//! additive Gaussian noise on `[T×C]` sequences (rows are time steps).

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub alpha: f64,
    pub rho: f64,
    pub sigma: f64,
    pub per_technique_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            rho: 0.8,
            sigma: 0.01,
            per_technique_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.alpha >= 0.0
            && self.rho > 0.0
            && self.rho <= 1.0
            && self.sigma.is_finite()
            && self.sigma >= 0.0
            && (0.0..=1.0).contains(&self.per_technique_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "augmentation needs alpha ≥ 0, rho ∈ (0,1], sigma ≥ 0, per_technique_prob ∈ [0,1]; got {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case")]
pub enum Applied {
    TimeWarp { alpha: f64 },
    TimeResample { rho: f64, retained: usize },
    GaussianNoise { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSequence {
    pub values: Array2<f64>,
    pub provenance: Vec<Applied>,
}

/// Piecewise-linear interpolation of `(xs, ys)` at `q`, clamped outside the knot range.
pub fn linear_interpolate(xs: &[f64], ys: &[f64], q: f64) -> Result<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::Contract(format!(
            "linear_interpolate needs ≥ 2 knots and equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("linear_interpolate needs strictly increasing xs".into()));
    }
    Ok(interp_sorted(xs, ys, q))
}

// Caller guarantees sorted knots.
fn interp_sorted(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    interp_column(xs, ArrayView1::from(ys), q)
}

fn interp_column(xs: &[f64], col: ArrayView1<f64>, q: f64) -> f64 {
    let n = xs.len();
    if q <= xs[0] {
        return col[0];
    }
    if q >= xs[n - 1] {
        return col[n - 1];
    }
    let hi = xs.partition_point(|&x| x <= q);
    let lo = hi - 1;
    col[lo] + (col[hi] - col[lo]) * (q - xs[lo]) / (xs[hi] - xs[lo])
}

/// Warped sample positions `D` (0-based): interior `t + U(−α, α)`, endpoints
/// pinned, sorted, clamped to `[0, T−1]`.
pub fn warp_positions(t_len: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if t_len < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: t_len });
    }
    let last = (t_len - 1) as f64;
    let mut d: Vec<f64> = (0..t_len)
        .map(|t| {
            let u: f64 = rng.random();
            t as f64 + alpha * (2.0 * u - 1.0)
        })
        .collect();
    d[0] = 0.0;
    d[t_len - 1] = last;
    d.sort_by(f64::total_cmp);
    for v in &mut d {
        *v = v.clamp(0.0, last);
    }
    Ok(d)
}

pub fn time_warp(x: &Array2<f64>, alpha: f64, rng: &mut impl Rng) -> Result<Array2<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("time_warp alpha must be ≥ 0, got {alpha}")));
    }
    let t_len = x.nrows();
    let d = warp_positions(t_len, alpha, rng)?;
    let grid: Vec<f64> = (0..t_len).map(|t| t as f64).collect();
    Ok(Array2::from_shape_fn(x.raw_dim(), |(t, c)| interp_column(&grid, x.column(c), d[t])))
}

/// Retained 0-based indices for resampling: both endpoints plus `floor(ρT) − 2`
/// distinct interior indices, ascending.
pub fn resample_indices(t_len: usize, rho: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = (rho * t_len as f64).floor() as usize;
    if n < 2 || t_len < 2 {
        return Err(Error::Config(format!(
            "time_resample keeps floor(rho·T) = {n} points (rho {rho}, T {t_len}); need ≥ 2"
        )));
    }
    let n = n.min(t_len);
    let mut idx: Vec<usize> = if n == t_len {
        (0..t_len).collect()
    } else {
        let mut v: Vec<usize> = sample(rng, t_len - 2, n - 2).into_iter().map(|i| i + 1).collect();
        v.push(0);
        v.push(t_len - 1);
        v
    };
    idx.sort_unstable();
    Ok(idx)
}

pub fn time_resample(x: &Array2<f64>, rho: f64, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let t_len = x.nrows();
    let idx = resample_indices(t_len, rho, rng)?;
    let knots: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    let mut out = Array2::zeros(x.raw_dim());
    for c in 0..x.ncols() {
        let col = x.column(c);
        let ys: Vec<f64> = idx.iter().map(|&i| col[i]).collect();
        for t in 0..t_len {
            out[(t, c)] = interp_sorted(&knots, &ys, t as f64);
        }
    }
    Ok(out)
}

pub fn gaussian_noise(x: &Array2<f64>, sigma: f64, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("gaussian_noise sigma {sigma}: {e}")))?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    Ok(x.mapv(|v| v + normal.sample(rng)))
}

/// RNG stream for one augmented sample: seeded from the config, one stream per counter.
pub fn sample_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

thread_local! {
    static CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of [`apply_composite`] calls made on the current thread.
pub fn composite_calls() -> u64 {
    CALLS.with(|c| c.get())
}

/// Warp → resample → noise, each firing independently with `per_technique_prob`.
pub fn apply_composite(x: &Array2<f64>, cfg: &AugmentConfig, counter: u64) -> Result<AugmentedSequence> {
    apply_composite_scaled(x, cfg, counter, None)
}

/// As [`apply_composite`], with the noise of channel `c` multiplied by
/// `noise_scale[c]` (e.g. a feature's range, for data in raw units).
pub fn apply_composite_scaled(
    x: &Array2<f64>,
    cfg: &AugmentConfig,
    counter: u64,
    noise_scale: Option<&[f64]>,
) -> Result<AugmentedSequence> {
    cfg.validate()?;
    if let Some(s) = noise_scale {
        if s.len() != x.ncols() {
            return Err(Error::dim("apply_composite_scaled", x.shape(), &[s.len()]));
        }
    }
    CALLS.with(|c| c.set(c.get() + 1));
    let mut rng = sample_rng(cfg.seed, counter);
    let p = cfg.per_technique_prob;
    let mut values = x.clone();
    let mut provenance = Vec::new();
    if rng.random_bool(p) {
        values = time_warp(&values, cfg.alpha, &mut rng)?;
        provenance.push(Applied::TimeWarp { alpha: cfg.alpha });
    }
    if rng.random_bool(p) {
        let retained = resample_indices(values.nrows(), cfg.rho, &mut rng.clone())?.len();
        values = time_resample(&values, cfg.rho, &mut rng)?;
        provenance.push(Applied::TimeResample { rho: cfg.rho, retained });
    }
    if rng.random_bool(p) {
        values = match noise_scale {
            None => gaussian_noise(&values, cfg.sigma, &mut rng)?,
            Some(scale) => {
                let eps = gaussian_noise(&Array2::zeros(values.raw_dim()), cfg.sigma, &mut rng)?;
                Array2::from_shape_fn(values.raw_dim(), |(t, c)| values[(t, c)] + eps[(t, c)] * scale[c])
            }
        };
        provenance.push(Applied::GaussianNoise { sigma: cfg.sigma });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("augmented sequence"));
    }
    Ok(AugmentedSequence { values, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp(t: usize, a: f64, b: f64) -> Array2<f64> {
        Array2::from_shape_fn((t, 2), |(i, c)| if c == 0 { a * i as f64 + b } else { -2.0 * i as f64 })
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(linear_interpolate(&[0.0, 2.0], &[0.0, 4.0], 1.0).unwrap(), 2.0);
        assert_eq!(linear_interpolate(&[0.0, 1.0, 3.0], &[5.0, 7.0, -1.0], 1.0).unwrap(), 7.0);
        assert_eq!(linear_interpolate(&[0.0, 1.0], &[5.0, 7.0], -1.0).unwrap(), 5.0);
        assert_eq!(linear_interpolate(&[0.0, 1.0], &[5.0, 7.0], 9.0).unwrap(), 7.0);
        assert!(linear_interpolate(&[0.0, 0.0], &[1.0, 2.0], 0.0).is_err());
        assert!(linear_interpolate(&[1.0, 0.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn identity_limits() {
        let x = Array2::from_shape_fn((12, 3), |(t, c)| ((t * 31 + c * 7) % 11) as f64 * 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(time_warp(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(time_resample(&x, 1.0, &mut rng).unwrap(), x);
        assert_eq!(gaussian_noise(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn too_short_or_too_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Array2::<f64>::zeros((1, 2));
        assert!(matches!(time_warp(&one, 0.1, &mut rng), Err(Error::SequenceTooShort { .. })));
        let x = Array2::<f64>::zeros((4, 1));
        assert!(matches!(time_resample(&x, 0.4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn ramp_oracles() {
        let x = ramp(16, 0.25, 1.5);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = warp_positions(16, 0.4, &mut rng.clone()).unwrap();
            let w = time_warp(&x, 0.4, &mut rng).unwrap();
            for t in 0..16 {
                assert!((w[(t, 0)] - (0.25 * d[t] + 1.5)).abs() < 1e-12);
                assert!((w[(t, 1)] + 2.0 * d[t]).abs() < 1e-12);
            }
            let r = time_resample(&x, 0.5, &mut rng).unwrap();
            assert!((&r - &x).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn composite_provenance_and_replay() {
        let x = ramp(10, 1.0, 0.0);
        let off = AugmentConfig { per_technique_prob: 0.0, ..AugmentConfig::default() };
        let a = apply_composite(&x, &off, 3).unwrap();
        assert_eq!(a.values, x);
        assert!(a.provenance.is_empty());

        let neutral = AugmentConfig { per_technique_prob: 1.0, alpha: 0.0, rho: 1.0, sigma: 0.0, seed: 5 };
        let b = apply_composite(&x, &neutral, 3).unwrap();
        assert_eq!(b.values, x);
        assert_eq!(b.provenance.len(), 3);

        let cfg = AugmentConfig { per_technique_prob: 1.0, seed: 11, ..AugmentConfig::default() };
        let c1 = apply_composite(&x, &cfg, 42).unwrap();
        let c2 = apply_composite(&x, &cfg, 42).unwrap();
        assert_eq!(c1, c2);
        let c3 = apply_composite(&x, &cfg, 43).unwrap();
        assert_ne!(c1.values, c3.values);
    }
}
