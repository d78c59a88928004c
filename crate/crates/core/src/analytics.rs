//! Backfill diagnostics (relative revision error and stabilization time),
//! their aggregates, and the evaluation metrics used to score forecasts.

use crate::error::{Error, Result};
use crate::store::{BackfillSequence, RevisionDataset, UptoWeek};
use std::collections::BTreeMap;

/// Relative revision error of the value `r` weeks into the sequence
/// (1-based; r = 1 is the first published value).
pub fn berr(bseq: &BackfillSequence, r: usize) -> Result<f64> {
    if r == 0 || r > bseq.len() {
        return Err(Error::InvalidArgument(format!(
            "revision week {r} outside 1..={}",
            bseq.len()
        )));
    }
    let stable = bseq.stable_value();
    if stable == 0.0 {
        return Err(Error::UndefinedBErr);
    }
    Ok((bseq.values[r - 1] - stable).abs() / stable.abs())
}

/// Smallest 1-based index s such that the relative revision error stays
/// below `epsilon` from s onward. Returns the sequence length when the
/// stable value is zero or no such index exists.
pub fn stime(bseq: &BackfillSequence, epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be a positive real, got {epsilon}"
        )));
    }
    let stable = bseq.stable_value();
    if stable == 0.0 {
        return Ok(bseq.len());
    }
    let mut s = bseq.len(); // the last entry always has error 0
    for i in (1..bseq.len()).rev() {
        // walk backwards while the error stays below epsilon
        let e = (bseq.values[i - 1] - stable).abs() / stable.abs();
        if e < epsilon {
            s = i;
        } else {
            break;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMetric {
    /// Relative revision error of the first published value.
    BerrInitial,
    /// Stabilization week index.
    Stime,
}

impl AggMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggMetric::BerrInitial => "berr_initial",
            AggMetric::Stime => "stime",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Signal,
    Region,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    /// Per-group means plus an `overall` row holding their median.
    MedianOfMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStat {
    pub group: String,
    pub value: f64,
    /// sequences that contributed
    pub n: usize,
    /// sequences skipped because their stable value is zero
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct StatsTable {
    pub metric: AggMetric,
    pub rows: Vec<GroupStat>,
}

/// Aggregate a backfill diagnostic over every (signal, observation week)
/// sequence in the dataset. Sequences whose stable value is zero are
/// skipped and counted. `epsilon` is only used for the stabilization
/// metric.
pub fn aggregate(
    ds: &RevisionDataset,
    metric: AggMetric,
    group_by: GroupBy,
    reduce: Reduce,
    epsilon: f64,
) -> Result<StatsTable> {
    if ds.signals().is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut groups: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for sig in ds.signals() {
        let key = match group_by {
            GroupBy::Signal => sig.to_string(),
            GroupBy::Region => sig.region.clone(),
            GroupBy::Feature => sig.feature.clone(),
        };
        let entry = groups.entry(key).or_insert((0.0, 0, 0));
        for obs in ds.observation_weeks(sig) {
            let bseq = match ds.backfill_sequence(sig, obs, UptoWeek::Final) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let value = match metric {
                AggMetric::BerrInitial => match berr(&bseq, 1) {
                    Ok(v) => v,
                    Err(Error::UndefinedBErr) => {
                        entry.2 += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                },
                AggMetric::Stime => {
                    if bseq.stable_value() == 0.0 {
                        entry.2 += 1;
                        continue;
                    }
                    stime(&bseq, epsilon)? as f64
                }
            };
            entry.0 += value;
            entry.1 += 1;
        }
    }

    let mut rows = Vec::with_capacity(groups.len());
    for (group, (sum, n, skipped)) in groups {
        if n == 0 {
            return Err(Error::EmptyGroup(group));
        }
        rows.push(GroupStat {
            group,
            value: sum / n as f64,
            n,
            skipped,
        });
    }

    if reduce == Reduce::MedianOfMeans {
        let mut means: Vec<f64> = rows.iter().map(|r| r.value).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = means.len();
        let median = if m % 2 == 1 {
            means[m / 2]
        } else {
            (means[m / 2 - 1] + means[m / 2]) / 2.0
        };
        let n: usize = rows.iter().map(|r| r.n).sum();
        let skipped: usize = rows.iter().map(|r| r.skipped).sum();
        rows.push(GroupStat {
            group: "overall".into(),
            value: median,
            n,
            skipped,
        });
    }

    Ok(StatsTable { metric, rows })
}

/// Sample Pearson correlation. Errors on constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "pearson needs at least 2 points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMetric {
    Mae,
    Mape,
}

/// Mean absolute error or mean absolute percentage error.
pub fn score(preds: &[f64], truths: &[f64], metric: ScoreMetric) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0;
    for (i, (&p, &y)) in preds.iter().zip(truths).enumerate() {
        let e = (p - y).abs();
        total += match metric {
            ScoreMetric::Mae => e,
            ScoreMetric::Mape => {
                if y == 0.0 {
                    return Err(Error::ZeroTruth(i));
                }
                e / y.abs()
            }
        };
    }
    Ok(total / preds.len() as f64)
}

/// MAE against the stable targets minus MAE against the real-time targets.
/// Positive values mean the model looked better than it really was.
pub fn delta_mae(preds: &[f64], realtime_truths: &[f64], stable_truths: &[f64]) -> Result<f64> {
    Ok(score(preds, stable_truths, ScoreMetric::Mae)?
        - score(preds, realtime_truths, ScoreMetric::Mae)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SignalId;
    use crate::store::{LoadOptions, VintageRecord};

    fn bseq(values: &[f64]) -> BackfillSequence {
        BackfillSequence {
            signal: SignalId::new("US", "deaths"),
            obs_week: 10,
            start_issue: 10,
            delay: 0,
            values: values.to_vec(),
            fill_mask: vec![false; values.len()],
        }
    }

    const EXAMPLE: [f64; 7] = [223.0, 236.0, 236.0, 404.0, 404.0, 404.0, 404.0];

    #[test]
    fn berr_worked_example() {
        let b = bseq(&EXAMPLE);
        let third = berr(&b, 3).unwrap();
        assert!((third - (404.0 - 236.0) / 404.0).abs() < 1e-15);
        assert!((third - 0.41584158415841585).abs() < 1e-15);
        assert_eq!(berr(&bseq(&[5.0, 5.0, 5.0]), 2).unwrap(), 0.0);
        assert_eq!(berr(&bseq(&[100.0, 50.0]), 1).unwrap(), 1.0);
    }

    #[test]
    fn berr_rejects_bad_input() {
        let b = bseq(&EXAMPLE);
        assert!(berr(&b, 0).is_err());
        assert!(berr(&b, 8).is_err());
        assert!(matches!(
            berr(&bseq(&[1.0, 0.0]), 1),
            Err(Error::UndefinedBErr)
        ));
    }

    #[test]
    fn stime_worked_example() {
        assert_eq!(stime(&bseq(&EXAMPLE), 0.05).unwrap(), 4);
        assert_eq!(stime(&bseq(&[7.0, 7.0, 7.0]), 0.05).unwrap(), 1);
        assert_eq!(stime(&bseq(&[1.0, 2.0]), 0.05).unwrap(), 2);
        // zero stable value falls back to the sequence length
        assert_eq!(stime(&bseq(&[1.0, 0.0, 0.0]), 0.05).unwrap(), 3);
        assert!(stime(&bseq(&EXAMPLE), 0.0).is_err());
    }

    fn one_seq_dataset(values: &[(u32, f64)]) -> RevisionDataset {
        let records = values
            .iter()
            .map(|&(issue, value)| VintageRecord {
                signal: SignalId::new("US", "deaths"),
                obs_week: 1,
                issue_week: issue,
                value,
            })
            .collect();
        RevisionDataset::from_records(records, &LoadOptions::default()).unwrap()
    }

    #[test]
    fn aggregate_single_sequence() {
        let ds = one_seq_dataset(&[(1, 141.0), (2, 100.0)]);
        let table = aggregate(&ds, AggMetric::BerrInitial, GroupBy::Signal, Reduce::Mean, 0.05)
            .unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!((table.rows[0].value - 0.41).abs() < 1e-12);
        assert_eq!(table.rows[0].n, 1);
        assert_eq!(table.rows[0].skipped, 0);
    }

    #[test]
    fn aggregate_uniform_ratio_median_of_means() {
        // every initial value exactly 1.32x its stable value
        let mut records = Vec::new();
        for (r, region) in ["AZ", "CA", "NY"].iter().enumerate() {
            for obs in 1..=3u32 {
                let stable = 100.0 * (r + 1) as f64 + obs as f64;
                records.push(VintageRecord {
                    signal: SignalId::new(*region, "cases"),
                    obs_week: obs,
                    issue_week: obs,
                    value: 1.32 * stable,
                });
                records.push(VintageRecord {
                    signal: SignalId::new(*region, "cases"),
                    obs_week: obs,
                    issue_week: obs + 1,
                    value: stable,
                });
            }
        }
        // keep the final week clear of the last obs week's revisions
        records.push(VintageRecord {
            signal: SignalId::new("AZ", "cases"),
            obs_week: 4,
            issue_week: 5,
            value: 1.32 * 50.0,
        });
        records.push(VintageRecord {
            signal: SignalId::new("AZ", "cases"),
            obs_week: 4,
            issue_week: 6,
            value: 50.0,
        });
        let ds = RevisionDataset::from_records(records, &LoadOptions::default()).unwrap();
        let table = aggregate(
            &ds,
            AggMetric::BerrInitial,
            GroupBy::Signal,
            Reduce::MedianOfMeans,
            0.05,
        )
        .unwrap();
        let overall = table.rows.last().unwrap();
        assert_eq!(overall.group, "overall");
        assert!((overall.value - 0.32).abs() < 1e-9);
    }

    #[test]
    fn aggregate_two_group_median() {
        // region A mean 0.1, region B mean 0.5
        let mut records = Vec::new();
        for (region, ratio) in [("A", 1.1), ("B", 1.5)] {
            records.push(VintageRecord {
                signal: SignalId::new(region, "cases"),
                obs_week: 1,
                issue_week: 1,
                value: ratio * 100.0,
            });
            records.push(VintageRecord {
                signal: SignalId::new(region, "cases"),
                obs_week: 1,
                issue_week: 2,
                value: 100.0,
            });
        }
        let ds = RevisionDataset::from_records(records, &LoadOptions::default()).unwrap();
        let table = aggregate(
            &ds,
            AggMetric::BerrInitial,
            GroupBy::Region,
            Reduce::MedianOfMeans,
            0.05,
        )
        .unwrap();
        let overall = table.rows.last().unwrap();
        assert!((overall.value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn aggregate_counts_skipped_zero_stable() {
        let mut records = vec![
            VintageRecord {
                signal: SignalId::new("A", "cases"),
                obs_week: 1,
                issue_week: 1,
                value: 0.0,
            },
            VintageRecord {
                signal: SignalId::new("A", "cases"),
                obs_week: 2,
                issue_week: 2,
                value: 120.0,
            },
            VintageRecord {
                signal: SignalId::new("A", "cases"),
                obs_week: 2,
                issue_week: 3,
                value: 100.0,
            },
        ];
        records.push(VintageRecord {
            signal: SignalId::new("A", "cases"),
            obs_week: 1,
            issue_week: 3,
            value: 0.0,
        });
        let ds = RevisionDataset::from_records(records, &LoadOptions::default()).unwrap();
        let table =
            aggregate(&ds, AggMetric::BerrInitial, GroupBy::Region, Reduce::Mean, 0.05).unwrap();
        assert_eq!(table.rows[0].n, 1);
        assert_eq!(table.rows[0].skipped, 1);
        assert!((table.rows[0].value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        let yneg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &yneg).unwrap() + 1.0).abs() < 1e-12);
        // sqrt(27/28)
        let r = pearson(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.9819805060619657).abs() < 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation)
        ));
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[2.0, 3.0], &[2.0, 3.0], ScoreMetric::Mae).unwrap(), 0.0);
        assert_eq!(score(&[2.0, 3.0], &[2.0, 3.0], ScoreMetric::Mape).unwrap(), 0.0);
        assert_eq!(score(&[3.0], &[2.0], ScoreMetric::Mae).unwrap(), 1.0);
        assert_eq!(score(&[3.0], &[2.0], ScoreMetric::Mape).unwrap(), 0.5);
        assert_eq!(score(&[1.0, 4.0], &[2.0, 2.0], ScoreMetric::Mae).unwrap(), 1.5);
        assert_eq!(score(&[1.0, 4.0], &[2.0, 2.0], ScoreMetric::Mape).unwrap(), 0.75);
        assert!(matches!(
            score(&[1.0], &[0.0], ScoreMetric::Mape),
            Err(Error::ZeroTruth(0))
        ));
        assert!(score(&[1.0], &[1.0, 2.0], ScoreMetric::Mae).is_err());
    }

    #[test]
    fn delta_mae_examples() {
        assert_eq!(delta_mae(&[5.0], &[4.0], &[4.0]).unwrap(), 0.0);
        assert_eq!(delta_mae(&[10.0], &[10.0], &[12.0]).unwrap(), 2.0);
    }
}
