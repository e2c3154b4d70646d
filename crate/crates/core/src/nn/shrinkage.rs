//! Channel-wise adaptive soft-thresholding.

use rand::Rng;

use super::{Dense, Forward, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// `sign(x)·max(|x| − λ, 0)` with per-channel `λ[B×C]` broadcast over time.
///
/// Built from primitives so the gradient is the subgradient of that form:
/// zero inside the dead zone and at its edges.
pub fn soft_threshold(tape: &mut Tape, x: Var, lambda: Var) -> Result<Var> {
    let (sx, sl) = (tape.shape(x).to_vec(), tape.shape(lambda).to_vec());
    if sx.len() != 3 || sl.len() != 2 || sx[..2] != sl[..] {
        return Err(Error::dim("soft_threshold", &sx, &sl));
    }
    if let Some(bad) = tape.value(lambda).data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("soft_threshold needs λ ≥ 0, got {bad}")));
    }
    let lam = tape.expand_time(lambda, sx[2])?;
    let mag = tape.abs(x)?;
    let shrunk = tape.sub(mag, lam)?;
    let shrunk = tape.max_scalar(shrunk, 0.0)?;
    let sign = tape.sign(x)?;
    tape.mul(sign, shrunk)
}

/// Produces per-channel thresholds `λ = σ(W2·relu(W1·avgpool(F) + b1) + b2) ∈ (0,1)`.
#[derive(Clone, Debug)]
pub struct ThresholdGenerator {
    pub fc1: Dense,
    pub fc2: Dense,
    pub reduction: usize,
}

impl ThresholdGenerator {
    /// Hidden width is `channels / reduction`, floored, at least 1.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "threshold generator needs channels ≥ 1 and reduction ≥ 1, got {channels}/{reduction}"
            )));
        }
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            fc1: Dense::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features
    }

    /// `features[B×C×L] → λ[B×C]`.
    pub fn forward(&self, f: &mut Forward, features: Var) -> Result<Var> {
        let z = f.tape.global_avg_pool(features)?;
        let h = self.fc1.forward(f, z)?;
        let h = f.tape.relu(h)?;
        let s = self.fc2.forward(f, h)?;
        f.tape.sigmoid(s)
    }
}
