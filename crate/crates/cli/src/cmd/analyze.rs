//! Data-side subcommands: ingest, stats, cluster, graph.

use crate::out::{effective_config, require_data, require_out, warn_short_bseqs, write_manifest, write_text};
use crate::{ClusterArgs, GraphArgs, IngestArgs, StatsArgs};
use backfill_core::analytics::{aggregate, AggMetric, GroupBy, Reduce};
use backfill_core::dtw::cluster_bseqs;
use backfill_core::error::{Error, Result};
use backfill_core::signal::Week;
use backfill_core::store::{RevisionDataset, UptoWeek};
use backfill_core::SignalId;

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);

    let mut delays = serde_json::Map::new();
    for sig in ds.signals() {
        delays.insert(sig.to_string(), ds.delay(sig)?.into());
    }
    let doc = serde_json::json!({
        "signals": ds.signals().len(),
        "records": ds.len(),
        "final_week": ds.final_week(),
        "delays": delays,
    });
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n";
    print!("{text}");
    if a.common.out.is_some() {
        let dir = require_out(&a.common)?;
        write_text(&dir.join("ingest.json"), &text)?;
        write_manifest(&dir, "ingest", &cfg, &["ingest.json"], false)?;
    }
    Ok(())
}

fn parse_metric(s: &str) -> Result<AggMetric> {
    match s {
        "berr_initial" => Ok(AggMetric::BerrInitial),
        "stime" => Ok(AggMetric::Stime),
        _ => Err(Error::InvalidConfig(format!(
            "unknown metric {s:?}; expected berr_initial or stime"
        ))),
    }
}

fn parse_group_by(s: &str) -> Result<GroupBy> {
    match s {
        "signal" => Ok(GroupBy::Signal),
        "region" => Ok(GroupBy::Region),
        "feature" => Ok(GroupBy::Feature),
        _ => Err(Error::InvalidConfig(format!(
            "unknown grouping {s:?}; expected signal, region, or feature"
        ))),
    }
}

fn parse_reduce(s: &str) -> Result<Reduce> {
    match s {
        "mean" => Ok(Reduce::Mean),
        "median-of-means" => Ok(Reduce::MedianOfMeans),
        _ => Err(Error::InvalidConfig(format!(
            "unknown reduction {s:?}; expected mean or median-of-means"
        ))),
    }
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);

    let metrics = match a.metric.as_deref() {
        None => vec![AggMetric::BerrInitial, AggMetric::Stime],
        Some(tok) => vec![parse_metric(tok)?],
    };
    let group_by = parse_group_by(&a.group_by)?;
    let reduce = parse_reduce(&a.reduce)?;

    let mut csv = String::from("metric,group,value,n,skipped\n");
    for metric in metrics {
        let table = aggregate(&ds, metric, group_by, reduce, cfg.epsilon)?;
        for row in &table.rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                metric.as_str(),
                row.group,
                row.value,
                row.n,
                row.skipped
            ));
        }
    }
    match &a.common.out {
        Some(_) => {
            let dir = require_out(&a.common)?;
            write_text(&dir.join("stats.csv"), &csv)?;
            write_manifest(&dir, "stats", &cfg, &["stats.csv"], false)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Every backfill sequence visible at `upto`, with its identifying key.
fn all_bseqs(
    ds: &RevisionDataset,
    upto: UptoWeek,
) -> Result<(Vec<(SignalId, Week)>, Vec<Vec<f64>>)> {
    let mut keys = Vec::new();
    let mut seqs = Vec::new();
    for sig in ds.signals() {
        for obs in ds.observation_weeks(sig) {
            match ds.backfill_sequence(sig, obs, upto) {
                Ok(b) => {
                    keys.push((sig.clone(), obs));
                    seqs.push(b.values);
                }
                Err(Error::NoRecords { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((keys, seqs))
}

pub fn cluster(a: &ClusterArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);
    let dir = require_out(&a.common)?;

    let upto = match a.upto {
        Some(w) => UptoWeek::Week(w),
        None => UptoWeek::Final,
    };
    let (keys, seqs) = all_bseqs(&ds, upto)?;
    let asg = cluster_bseqs(&seqs, a.k, cfg.seed, a.max_iters)?;

    let mut labels = String::from("region,feature,observation_week,cluster\n");
    for ((sig, obs), &label) in keys.iter().zip(&asg.labels) {
        labels.push_str(&format!("{},{},{obs},{label}\n", sig.region, sig.feature));
    }
    let mut centroids = String::from("cluster,step,value\n");
    for (c, centroid) in asg.centroids.iter().enumerate() {
        for (step, v) in centroid.iter().enumerate() {
            centroids.push_str(&format!("{c},{step},{v}\n"));
        }
    }
    write_text(&dir.join("clusters.csv"), &labels)?;
    write_text(&dir.join("centroids.csv"), &centroids)?;
    write_manifest(&dir, "cluster", &cfg, &["clusters.csv", "centroids.csv"], false)
}

pub fn graph(a: &GraphArgs) -> Result<()> {
    let cfg = effective_config(&a.common)?;
    let ds = require_data(&a.common)?;
    warn_short_bseqs(&ds);
    let dir = require_out(&a.common)?;

    let g = super::build_graph(&cfg, &ds, a.week)?;
    let mut csv = String::from("region_a,feature_a,region_b,feature_b,weight\n");
    for e in &g.edges {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.a.region, e.a.feature, e.b.region, e.b.feature, e.weight
        ));
    }
    write_text(&dir.join("edges.csv"), &csv)?;
    write_manifest(&dir, "graph", &cfg, &["edges.csv"], false)
}
