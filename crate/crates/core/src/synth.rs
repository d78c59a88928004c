//! Deterministic synthetic vintage and prediction generator. Each signal
//! follows one of five canonical revision behaviors; with noise off the
//! curves are exact, which makes the generator usable as a test oracle
//! for the whole pipeline.

use crate::error::{Error, Result};
use crate::predictions::PredictionHistory;
use crate::signal::{derive_seed, SignalId, Week};
use crate::store::{LoadOptions, RevisionDataset, UptoWeek, VintageRecord};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Over-reported at first, corrected down within one week.
    EarlyDecline,
    /// Under-reported, rising to stable over a few weeks.
    EarlyIncrease,
    /// Stable immediately, with one spurious zero report.
    SteadySpike,
    /// Flat for eight weeks, then rising to stable.
    LateIncrease,
    /// Over-reported for eight weeks, then declining to stable.
    MidDecrease,
}

impl Behavior {
    pub const ALL: [Behavior; 5] = [
        Behavior::EarlyDecline,
        Behavior::EarlyIncrease,
        Behavior::SteadySpike,
        Behavior::LateIncrease,
        Behavior::MidDecrease,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Behavior::EarlyDecline => "early-decline",
            Behavior::EarlyIncrease => "early-increase",
            Behavior::SteadySpike => "steady-spike",
            Behavior::LateIncrease => "late-increase",
            Behavior::MidDecrease => "mid-decrease",
        }
    }
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Behavior::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown behavior token {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regions: Vec<String>,
    pub features: Vec<FeatureSpec>,
    /// Number of observation weeks; the final issue week equals this.
    pub weeks: Week,
    pub seed: u64,
    /// Ratio between stable and misreported values; in (0, 1].
    pub stable_multiplier: f64,
    /// Ramp length of the early-increase behavior.
    pub stabilization_week: Week,
    /// Relative noise on not-yet-stable entries; 0 keeps templates exact.
    pub noise_scale: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() || self.features.is_empty() {
            return Err(Error::InvalidConfig("need at least one region and one feature".into()));
        }
        if self.regions.iter().any(|r| r.is_empty())
            || self.features.iter().any(|f| f.name.is_empty())
        {
            return Err(Error::InvalidConfig("empty region or feature name".into()));
        }
        if self.weeks == 0 {
            return Err(Error::InvalidConfig("weeks must be >= 1".into()));
        }
        if !(self.stable_multiplier > 0.0 && self.stable_multiplier <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "stable_multiplier must be in (0, 1], got {}",
                self.stable_multiplier
            )));
        }
        if self.stabilization_week == 0 || self.stabilization_week > self.weeks {
            return Err(Error::InvalidConfig(format!(
                "stabilization_week must be in 1..={}, got {}",
                self.weeks, self.stabilization_week
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.features.len() {
            return Err(Error::InvalidConfig("duplicate feature names".into()));
        }
        Ok(())
    }
}

/// Stable value of one signal at one observation week: a per-signal base
/// level with a mild weekly trend, so regions and weeks are distinguishable.
fn stable_value(region_idx: usize, feature_idx: usize, obs: Week) -> f64 {
    let base = 80.0 + 15.0 * region_idx as f64 + 7.0 * feature_idx as f64;
    base * (1.0 + 0.02 * (obs - 1) as f64)
}

/// Template value at revision index `r` (0 = first issue). The second
/// element marks entries in the stable tail, which never receive noise.
fn template(behavior: Behavior, s: f64, r: Week, cfg: &SynthConfig) -> (f64, bool) {
    let inflate = 1.0 / cfg.stable_multiplier;
    match behavior {
        Behavior::EarlyDecline => {
            if r == 0 {
                (s * inflate, false)
            } else {
                (s, true)
            }
        }
        Behavior::EarlyIncrease => {
            let n = cfg.stabilization_week;
            if r >= n {
                (s, true)
            } else {
                let low = s * cfg.stable_multiplier;
                (low + (s - low) * r as f64 / n as f64, false)
            }
        }
        Behavior::SteadySpike => {
            if r == 2 {
                (0.0, true)
            } else {
                (s, true)
            }
        }
        Behavior::LateIncrease => {
            let low = s * cfg.stable_multiplier;
            if r < 8 {
                (low, false)
            } else if r < 11 {
                (low + (s - low) * (r - 7) as f64 / 4.0, false)
            } else {
                (s, true)
            }
        }
        Behavior::MidDecrease => {
            let high = s * inflate;
            if r < 8 {
                (high, false)
            } else if r < 10 {
                (high + (s - high) * (r - 7) as f64 / 3.0, false)
            } else {
                (s, true)
            }
        }
    }
}

/// Generate the full vintage dataset for a config. Deterministic in the
/// seed; with noise 0 the emitted values follow the templates exactly.
pub fn gen_vintages(cfg: &SynthConfig) -> Result<RevisionDataset> {
    cfg.validate()?;
    let mut records = Vec::new();
    for (ri, region) in cfg.regions.iter().enumerate() {
        for (fi, feat) in cfg.features.iter().enumerate() {
            for obs in 1..=cfg.weeks {
                let s = stable_value(ri, fi, obs);
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &format!("{region}/{}/{obs}", feat.name),
                ));
                for issue in obs..=cfg.weeks {
                    let (mut value, stable_tail) = template(feat.behavior, s, issue - obs, cfg);
                    if !stable_tail && cfg.noise_scale > 0.0 {
                        value += cfg.noise_scale * s * rng.gen_range(-1.0..1.0);
                    }
                    records.push(VintageRecord {
                        signal: SignalId::new(region.clone(), feat.name.clone()),
                        obs_week: obs,
                        issue_week: issue,
                        value,
                    });
                }
            }
        }
    }
    RevisionDataset::from_records(records, &LoadOptions::default())
}

/// Synthetic forecasts with a known multiplicative bias: the forecast for
/// week w+k made at week w is the stable target divided by (1 + beta),
/// plus optional noise. With noise 0 the correction that recovers the
/// stable value is exactly beta.
pub fn gen_predictions(
    ds: &RevisionDataset,
    target_feature: &str,
    model_name: &str,
    k: Week,
    beta: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<PredictionHistory>> {
    let betas: BTreeMap<String, f64> = ds
        .signals()
        .iter()
        .filter(|s| s.feature == target_feature)
        .map(|s| (s.region.clone(), beta))
        .collect();
    gen_predictions_per_region(ds, target_feature, model_name, k, &betas, noise_scale, seed)
}

/// [`gen_predictions`] with one bias per region. Every region carrying the
/// target feature must appear in `betas`.
pub fn gen_predictions_per_region(
    ds: &RevisionDataset,
    target_feature: &str,
    model_name: &str,
    k: Week,
    betas: &BTreeMap<String, f64>,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<PredictionHistory>> {
    if let Some((region, beta)) = betas.iter().find(|(_, b)| !(**b > -1.0)) {
        return Err(Error::InvalidConfig(format!(
            "beta must exceed -1, got {beta} for region {region:?}"
        )));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
    }
    let mut out = Vec::new();
    for sig in ds.signals() {
        if sig.feature != target_feature {
            continue;
        }
        let beta = *betas.get(&sig.region).ok_or_else(|| {
            Error::InvalidConfig(format!("no beta configured for region {:?}", sig.region))
        })?;
        let mut hist = PredictionHistory::new(model_name, sig.region.clone(), k);
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
            seed,
            &format!("{model_name}|{}|{k}", sig.region),
        ));
        for made in 1..=ds.final_week().saturating_sub(k) {
            let target_obs = made + k;
            let stable = match ds.backfill_sequence(sig, target_obs, UptoWeek::Final) {
                Ok(b) => b.stable_value(),
                Err(_) => continue,
            };
            let mut value = stable / (1.0 + beta);
            if noise_scale > 0.0 {
                value += noise_scale * stable * rng.gen_range(-1.0..1.0);
            }
            hist.insert(made, value)?;
        }
        if !hist.is_empty() {
            out.push(hist);
        }
    }
    if out.is_empty() {
        return Err(Error::UnknownSignal(format!(
            "no signals with feature {target_feature:?}"
        )));
    }
    Ok(out)
}
