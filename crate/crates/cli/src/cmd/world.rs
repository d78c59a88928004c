//! Synthetic-world subcommands: simulate and evaluate.

use super::train::load_pretrained;
use crate::config::validate_horizon;
use crate::out::{
    effective_config, require_data, require_out, warn_short_bseqs, with_jobs, write_manifest,
    write_text,
};
use crate::{EvaluateArgs, SimulateArgs};
use backfill_core::analytics::ScoreMetric;
use backfill_core::baselines::{improvement, mean_std, train_baseline, BaselineKind};
use backfill_core::error::{Error, Result};
use backfill_core::model::finetune;
use backfill_core::predictions::{load_predictions_csv, save_predictions_csv, PredictionHistory};
use backfill_core::signal::derive_seed;
use backfill_core::store::UptoWeek;
use backfill_core::synth::{gen_predictions, gen_predictions_per_region, gen_vintages};
use backfill_core::SignalId;
use rayon::prelude::*;

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    let dir = require_out(&a.common)?;
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("simulate needs a synth section in the config".into()))?;

    let ds = gen_vintages(synth)?;
    ds.save_csv(dir.join("vintages.csv"))?;
    let mut outputs = vec!["vintages.csv"];

    let mut histories = Vec::new();
    for p in &cfg.synth_predictions {
        validate_horizon(p.horizon)?;
        let seed = p
            .seed
            .unwrap_or_else(|| derive_seed(cfg.seed, &format!("predictions|{}|{}", p.model, p.horizon)));
        let generated = match &p.betas {
            Some(betas) => gen_predictions_per_region(
                &ds,
                &cfg.target_feature,
                &p.model,
                p.horizon,
                betas,
                p.noise_scale,
                seed,
            )?,
            None => gen_predictions(
                &ds,
                &cfg.target_feature,
                &p.model,
                p.horizon,
                p.beta,
                p.noise_scale,
                seed,
            )?,
        };
        histories.extend(generated);
    }
    if !histories.is_empty() {
        save_predictions_csv(&histories, dir.join("predictions.csv"))?;
        outputs.push("predictions.csv");
    }
    write_manifest(&dir, "simulate", &cfg, &outputs, true)
}

fn metric_token(metric: ScoreMetric) -> &'static str {
    match metric {
        ScoreMetric::Mae => "mae",
        ScoreMetric::Mape => "mape",
    }
}

/// Improvement table: one row per (forecaster, metric), one column pair
/// per refiner, improvements in percent averaged over regions, mean and
/// population std over seed replicates.
pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    validate_horizon(a.horizon)?;
    if a.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be >= 1".into()));
    }
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);
    let dir = require_out(&a.common)?;
    let (t, k) = (a.week, a.horizon);
    if t + k > ds.final_week() {
        return Err(Error::WeekOutOfRange {
            week: t + k,
            final_week: ds.final_week(),
        });
    }

    let pretrained = load_pretrained(&a.checkpoint, t, a.reuse_pretrain)?;
    let graph = super::build_graph(&cfg, &ds, t)?;

    let mut histories: Vec<PredictionHistory> = load_predictions_csv(&a.predictions)?
        .into_iter()
        .filter(|h| h.horizon == k)
        .collect();
    histories.sort_by(|x, y| (&x.model, &x.region).cmp(&(&y.model, &y.region)));
    if histories.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no forecast histories at horizon {k}"
        )));
    }
    let mut groups: Vec<(String, Vec<&PredictionHistory>)> = Vec::new();
    for h in &histories {
        match groups.last_mut() {
            Some((m, v)) if *m == h.model => v.push(h),
            _ => groups.push((h.model.clone(), vec![h])),
        }
    }

    // One job per (forecaster, replicate, region); each trains the refiner
    // and all four baselines so the cell stays together.
    struct Job<'a> {
        seed_idx: usize,
        hist: &'a PredictionHistory,
    }
    let n_seeds = a.seeds as usize;
    let mut jobs = Vec::new();
    for (_, hs) in &groups {
        for seed_idx in 0..n_seeds {
            for h in hs {
                jobs.push(Job { seed_idx, hist: h });
            }
        }
    }

    let tc = cfg.train_config();
    let cells: Vec<[f64; 5]> = with_jobs(a.common.jobs, || {
        jobs.par_iter()
            .map(|job| {
                let h = job.hist;
                let rep_seed = derive_seed(cfg.seed, &format!("replicate|{}", job.seed_idx));
                let mut own_cfg = tc.clone();
                own_cfg.seed = derive_seed(rep_seed, &format!("{}|{}", h.model, h.region));
                let refined = finetune(&ds, &graph, &pretrained, h, t, k, &own_cfg)?
                    .predict(&ds, h)?
                    .y_star;
                let mut cell = [refined, 0.0, 0.0, 0.0, 0.0];
                for (b, kind) in BaselineKind::ALL.into_iter().enumerate() {
                    let mut bl_cfg = tc.clone();
                    bl_cfg.seed =
                        derive_seed(rep_seed, &format!("baseline|{kind}|{}|{}", h.model, h.region));
                    let m = train_baseline(kind, &ds, &graph, &pretrained, h, t, k, &bl_cfg)?;
                    cell[b + 1] = m.predict(&ds, h)?;
                }
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut csv = String::from(
        "model,metric,refined_mean,refined_std,ffnreg_mean,ffnreg_std,modelreg_mean,modelreg_std,bseqreg_mean,bseqreg_std,bseqreg2_mean,bseqreg2_std,regions,seeds\n",
    );
    let mut base = 0usize;
    for (model, hs) in &groups {
        let n_r = hs.len();
        let mut raw = Vec::with_capacity(n_r);
        let mut truth = Vec::with_capacity(n_r);
        for h in hs {
            raw.push(h.value_at(t).ok_or_else(|| {
                Error::InsufficientHistory(format!(
                    "{} {} k={k}: no forecast made at week {t}",
                    h.model, h.region
                ))
            })?);
            let target = SignalId::new(h.region.clone(), cfg.target_feature.clone());
            truth.push(ds.backfill_sequence(&target, t + k, UptoWeek::Final)?.stable_value());
        }
        for metric in [ScoreMetric::Mae, ScoreMetric::Mape] {
            let mut cols = Vec::with_capacity(5);
            for col in 0..5 {
                let mut per_seed = Vec::with_capacity(n_seeds);
                for seed_idx in 0..n_seeds {
                    let refined: Vec<f64> = (0..n_r)
                        .map(|r| cells[base + seed_idx * n_r + r][col])
                        .collect();
                    per_seed.push(improvement(&refined, &raw, &truth, metric)?);
                }
                cols.push(mean_std(&per_seed)?);
            }
            csv.push_str(&format!(
                "{model},{},{},{},{},{},{},{},{},{},{},{},{n_r},{}\n",
                metric_token(metric),
                cols[0].0,
                cols[0].1,
                cols[1].0,
                cols[1].1,
                cols[2].0,
                cols[2].1,
                cols[3].0,
                cols[3].1,
                cols[4].0,
                cols[4].1,
                a.seeds
            ));
        }
        base += n_seeds * n_r;
    }
    write_text(&dir.join("evaluate.csv"), &csv)?;
    write_manifest(&dir, "evaluate", &cfg, &["evaluate.csv"], false)
}
