//! Training-side subcommands: pretrain, refine, rectify.

use crate::config::validate_horizon;
use crate::out::{
    effective_config, require_data, require_out, warn_short_bseqs, with_jobs, write_manifest,
    write_text,
};
use crate::{PretrainArgs, RectifyArgs, RefineArgs};
use backfill_core::error::{Error, Result};
use backfill_core::model::{finetune, pretrain_bseqenc, rectify as rectify_target};
use backfill_core::nn::params::{load_checkpoint, save_checkpoint, ParamSet};
use backfill_core::predictions::{load_predictions_csv, PredictionHistory};
use backfill_core::signal::{derive_seed, Week};
use rayon::prelude::*;

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);
    let dir = require_out(&a.common)?;

    let graph = super::build_graph(&cfg, &ds, a.week)?;
    let out = pretrain_bseqenc(&ds, &graph, a.week, &cfg.train_config())?;
    save_checkpoint(&out.params, Some(out.week), dir.join("pretrain.json"))?;

    let mut losses = String::from("epoch,loss\n");
    for (epoch, loss) in out.loss_history.iter().enumerate() {
        losses.push_str(&format!("{epoch},{loss}\n"));
    }
    write_text(&dir.join("pretrain_loss.csv"), &losses)?;
    write_manifest(&dir, "pretrain", &cfg, &["pretrain.json", "pretrain_loss.csv"], false)
}

/// A checkpoint carries the week it was pretrained for; refuse mismatches
/// unless the operator opted into reuse. A missing week matches anything.
fn check_checkpoint_week(found: Option<Week>, requested: Week, reuse: bool) -> Result<()> {
    match found {
        Some(w) if w != requested && !reuse => Err(Error::StaleCheckpoint {
            checkpoint_week: w,
            requested_week: requested,
        }),
        _ => Ok(()),
    }
}

pub(crate) fn load_pretrained(path: &std::path::Path, week: Week, reuse: bool) -> Result<ParamSet> {
    let (params, found_week) = load_checkpoint(path)?;
    check_checkpoint_week(found_week, week, reuse)?;
    Ok(params)
}

pub fn refine(a: &RefineArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    validate_horizon(a.horizon)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);
    let dir = require_out(&a.common)?;

    let pretrained = load_pretrained(&a.checkpoint, a.week, a.reuse_pretrain)?;
    let graph = super::build_graph(&cfg, &ds, a.week)?;

    let mut histories: Vec<PredictionHistory> = load_predictions_csv(&a.predictions)?
        .into_iter()
        .filter(|h| h.horizon == a.horizon)
        .collect();
    histories.sort_by(|x, y| (&x.model, &x.region).cmp(&(&y.model, &y.region)));
    if histories.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no forecast histories at horizon {}",
            a.horizon
        )));
    }

    let tc = cfg.train_config();
    let rows: Vec<String> = with_jobs(a.common.jobs, || {
        histories
            .par_iter()
            .map(|h| {
                let mut job_cfg = tc.clone();
                job_cfg.seed = derive_seed(cfg.seed, &format!("{}|{}", h.model, h.region));
                let model = finetune(&ds, &graph, &pretrained, h, a.week, a.horizon, &job_cfg)?;
                let out = model.predict(&ds, h)?;
                Ok(format!(
                    "{},{},{},{},{},{},{}\n",
                    h.model, h.region, a.week, a.horizon, out.y_raw, out.gamma, out.y_star
                ))
            })
            .collect::<Result<Vec<String>>>()
    })??;

    let mut csv = String::from("model,region,week,horizon_k,y_raw,gamma,y_star\n");
    for row in rows {
        csv.push_str(&row);
    }
    write_text(&dir.join("refined.csv"), &csv)?;
    write_manifest(&dir, "refine", &cfg, &["refined.csv"], false)
}

pub fn rectify(a: &RectifyArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    validate_horizon(a.horizon)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);
    let dir = require_out(&a.common)?;

    let pretrained = load_pretrained(&a.checkpoint, a.week, a.reuse_pretrain)?;
    let graph = super::build_graph(&cfg, &ds, a.week)?;
    let preds = match &a.predictions {
        Some(path) => load_predictions_csv(path)?,
        None => Vec::new(),
    };

    let report = rectify_target(
        &ds,
        &graph,
        &pretrained,
        a.week,
        a.horizon,
        &a.region,
        &preds,
        &cfg.train_config(),
    )?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(&dir.join("rectify.json"), &text)?;
    write_manifest(&dir, "rectify", &cfg, &["rectify.json"], false)
}
