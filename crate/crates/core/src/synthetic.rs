//! Seeded synthetic series for tests, smoke runs and directional experiments.

use serde::{Deserialize, Serialize};

use crate::data::SeriesTable;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Rows in the bundled sinusoid fixture: 64 windows at L=32, T=8.
pub const SINUSOID_ROWS: usize = 103;

/// Two noiseless sinusoids with different periods and phases.
pub fn sinusoid(rows: usize) -> SeriesTable {
    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(rows * 2);
    for t in 0..rows {
        let t = t as f64;
        values.push((tau * t / 24.0).sin());
        values.push(0.5 * (tau * t / 12.0 + 1.0).cos() + 0.25 * (tau * t / 40.0).sin());
    }
    table(rows, values, &["sin_a", "sin_b"])
}

/// Channel 0 is AR(1) with coefficient `phi`; channel 1 repeats channel 0
/// `lag` steps later plus a little noise. With `lag >= T` the follower's
/// whole horizon is already visible in the leader's lookback.
pub fn leader_follower(rows: usize, lag: usize, phi: f64, noise: f64, seed: u64) -> Result<SeriesTable> {
    if lag == 0 || lag >= rows {
        return Err(Error::InvalidArgument(format!("lag {lag} must be in 1..{rows}")));
    }
    let mut rng = Rng::new(seed).derive(7);
    let total = rows + lag;
    let mut lead = vec![0.0; total];
    for t in 1..total {
        lead[t] = phi * lead[t - 1] + rng.normal();
    }
    let mut values = Vec::with_capacity(rows * 2);
    for t in lag..total {
        values.push(lead[t]);
        values.push(lead[t - lag] + noise * rng.normal());
    }
    Ok(table(rows, values, &["leader", "follower"]))
}

/// One channel with a slowly drifting seasonal shape:
/// `s(t) = a*s(t-period) + sqrt(1-a^2)*u(t)` where `u` is smooth AR(1) noise.
/// Forecasting well needs a lookback longer than `period`.
pub fn long_memory(rows: usize, period: usize, a: f64, seed: u64) -> Result<SeriesTable> {
    if period == 0 || !(0.0..1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!(
            "long_memory needs period > 0 and a in [0,1), got {period}, {a}"
        )));
    }
    let mut rng = Rng::new(seed).derive(8);
    let burn = 4 * period;
    let total = rows + burn;
    let mut u = 0.0;
    let mut s = vec![0.0; total];
    let innov = (1.0 - a * a).sqrt();
    for t in 0..total {
        u = 0.9 * u + (1.0f64 - 0.81).sqrt() * rng.normal();
        let prev = if t >= period { s[t - period] } else { 0.0 };
        s[t] = a * prev + if t >= period { innov * u } else { u };
    }
    Ok(table(rows, s[burn..].to_vec(), &["seasonal"]))
}

/// Placeholder rows with ETTh1's geometry (17,420 hourly rows, 7 channels).
/// Only the shape matters for border and window-count checks.
pub fn etth_shaped(rows: usize, seed: u64) -> SeriesTable {
    let mut rng = Rng::new(seed).derive(9);
    let values = (0..rows * 7).map(|_| rng.normal()).collect();
    table(rows, values, &["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"])
}

fn table(rows: usize, values: Vec<f64>, names: &[&str]) -> SeriesTable {
    SeriesTable::new(
        (0..rows).map(|t| t.to_string()).collect(),
        values,
        names.iter().map(|s| s.to_string()).collect(),
    )
    .expect("generator produces consistent shapes")
}

/// A named synthetic source usable from experiment plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticSpec {
    Sinusoid { rows: usize },
    LeaderFollower { rows: usize, lag: usize, phi: f64, noise: f64 },
    LongMemory { rows: usize, period: usize, a: f64 },
}

impl SyntheticSpec {
    /// `seed` drives the noise; the sinusoid ignores it.
    pub fn generate(&self, seed: u64) -> Result<SeriesTable> {
        match *self {
            SyntheticSpec::Sinusoid { rows } => Ok(sinusoid(rows)),
            SyntheticSpec::LeaderFollower { rows, lag, phi, noise } => leader_follower(rows, lag, phi, noise, seed),
            SyntheticSpec::LongMemory { rows, period, a } => long_memory(rows, period, a, seed),
        }
    }
}
