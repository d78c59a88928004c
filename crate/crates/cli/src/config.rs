//! Run configuration: defaults, JSON file, then flag overrides, in that
//! order of precedence (flags win).

use crate::CommonArgs;
use backfill_core::error::{Error, Result};
use backfill_core::fnv1a64;
use backfill_core::model::TrainConfig;
use backfill_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One synthetic prediction history to generate alongside the vintages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPredictions {
    pub model: String,
    pub horizon: u32,
    /// Uniform multiplicative bias, used when `betas` is absent.
    #[serde(default)]
    pub beta: f64,
    /// Per-region biases; must cover every region when present.
    #[serde(default)]
    pub betas: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub noise_scale: f64,
    /// Defaults to a value derived from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Stabilization threshold for BErr-based diagnostics.
    pub epsilon: f64,
    /// Edge budget factor: tau defaults to tau_factor * |signals|.
    pub tau_factor: usize,
    pub tau: Option<usize>,
    /// Autoregressive rollout steps at inference.
    pub steps_l: usize,
    pub hidden: usize,
    pub model_hidden: usize,
    pub rf_hidden: (usize, usize),
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    /// Scheduled-sampling feedback probability during pretraining.
    pub sample_prob: f64,
    /// Fully teacher-forced epochs; defaults to half the pretrain budget.
    pub teacher_epochs: Option<usize>,
    pub seed: u64,
    pub target_feature: String,
    /// Share the hidden layer of the per-signal decoder heads.
    pub shared_heads: bool,
    /// Scale-normalize sequences before the graph DTW accumulation.
    pub scale_graph: bool,
    /// Synthetic world, read by `simulate` only.
    pub synth: Option<SynthConfig>,
    /// Synthetic forecasters, read by `simulate` only.
    pub synth_predictions: Vec<SynthPredictions>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epsilon: 0.05,
            tau_factor: 3,
            tau: None,
            steps_l: 5,
            hidden: 50,
            model_hidden: 50,
            rf_hidden: (60, 30),
            pretrain_epochs: 2000,
            finetune_epochs: 1000,
            pretrain_lr: 1e-3,
            finetune_lr: 5e-4,
            sample_prob: 0.5,
            teacher_epochs: None,
            seed: 0,
            target_feature: "cases".into(),
            shared_heads: false,
            scale_graph: false,
            synth: None,
            synth_predictions: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("{}: {e}", path.display()))
        })
    }

    /// Apply command-line overrides. Boolean flags only switch on.
    pub fn apply(&mut self, args: &CommonArgs) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &args.$field {
                    self.$field = v.clone();
                })*
            };
        }
        take!(
            epsilon,
            tau_factor,
            steps_l,
            hidden,
            model_hidden,
            pretrain_epochs,
            finetune_epochs,
            pretrain_lr,
            finetune_lr,
            sample_prob,
            seed,
            target_feature
        );
        if let Some(tau) = args.tau {
            self.tau = Some(tau);
        }
        if let Some(te) = args.teacher_epochs {
            self.teacher_epochs = Some(te);
        }
        if args.shared_heads {
            self.shared_heads = true;
        }
        if args.scale_graph {
            self.scale_graph = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be a positive finite number, got {}",
                self.epsilon
            )));
        }
        if self.tau_factor == 0 {
            return Err(Error::InvalidConfig(
                "tau_factor must be >= 1; pass --tau 0 for an empty graph".into(),
            ));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            model_hidden: self.model_hidden,
            rf_hidden: self.rf_hidden,
            steps_l: self.steps_l,
            pretrain_epochs: self.pretrain_epochs,
            teacher_epochs: self.teacher_epochs,
            pretrain_lr: self.pretrain_lr,
            finetune_epochs: self.finetune_epochs,
            finetune_lr: self.finetune_lr,
            sample_prob: self.sample_prob,
            seed: self.seed,
            shared_heads: self.shared_heads,
            target_feature: self.target_feature.clone(),
        }
    }

    /// Stable hash of the effective configuration, recorded in manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Forecast horizons the pipeline is specified for.
pub fn validate_horizon(k: u32) -> Result<()> {
    if !(1..=4).contains(&k) {
        return Err(Error::InvalidConfig(format!(
            "horizon must be in 1..=4, got {k}"
        )));
    }
    Ok(())
}
