mod analyze;
mod train;
mod world;

pub use analyze::{cluster, graph, ingest, stats};
pub use train::{pretrain, rectify, refine};
pub use world::{evaluate, simulate};

use crate::config::RunConfig;
use backfill_core::error::Result;
use backfill_core::graph::{graph_gen, GraphGenOptions, SignalGraph};
use backfill_core::signal::Week;
use backfill_core::store::RevisionDataset;

/// Edge budget: explicit tau, else tau_factor scaled by the signal count.
pub(crate) fn edge_budget(cfg: &RunConfig, ds: &RevisionDataset) -> usize {
    cfg.tau.unwrap_or(cfg.tau_factor * ds.signals().len())
}

pub(crate) fn build_graph(cfg: &RunConfig, ds: &RevisionDataset, week: Week) -> Result<SignalGraph> {
    graph_gen(
        ds,
        week,
        edge_budget(cfg, ds),
        GraphGenOptions {
            scale: cfg.scale_graph,
        },
    )
}
