//! Vintage store: every published value of every signal, indexed by
//! (signal, observation week, issue week), plus the two derived views used
//! everywhere else: backfill sequences and real-time sequences.

use crate::error::{Error, Result};
use crate::signal::{SignalId, Week};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// One published value: signal `signal` for observation week `obs_week`,
/// as issued at `issue_week`.
#[derive(Debug, Clone, PartialEq)]
pub struct VintageRecord {
    pub signal: SignalId,
    pub obs_week: Week,
    pub issue_week: Week,
    pub value: f64,
}

/// Options for [`RevisionDataset::load_csv`] / [`RevisionDataset::from_records`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Per-signal reporting delay override. Signals not listed here get the
    /// modal first-issue lag inferred from the data.
    pub delay_overrides: BTreeMap<SignalId, Week>,
}

/// Immutable vintage store. Safe to share across threads after load.
#[derive(Debug, Clone)]
pub struct RevisionDataset {
    signals: Vec<SignalId>,
    /// per signal: obs week -> (issue week -> value)
    records: Vec<BTreeMap<Week, BTreeMap<Week, f64>>>,
    delays: Vec<Week>,
    final_week: Week,
    n_records: usize,
}

/// Ordered revisions of one signal at one observation week.
///
/// `values[i]` is the value at issue week `start_issue + i`. Entries at issue
/// weeks with no published value, zeros published after a nonzero value
/// (reporting spikes), and weeks past the last revision (terminated
/// revisions) all repeat the previous value and are marked in `fill_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackfillSequence {
    pub signal: SignalId,
    pub obs_week: Week,
    /// First issue week covered by `values` (the signal's first publication
    /// for this observation week).
    pub start_issue: Week,
    /// Reporting delay used for this signal (modal first-issue lag).
    pub delay: Week,
    pub values: Vec<f64>,
    /// true where the entry was forward-filled rather than observed
    pub fill_mask: Vec<bool>,
}

impl BackfillSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Last entry of the sequence. Equals the stable value when the sequence
    /// was built up to the dataset's final week.
    pub fn stable_value(&self) -> f64 {
        *self.values.last().expect("BackfillSequence is never empty")
    }

    pub fn initial_value(&self) -> f64 {
        self.values[0]
    }
}

/// Value of `upto_week` in [`RevisionDataset::backfill_sequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UptoWeek {
    Week(Week),
    Final,
}

impl From<Week> for UptoWeek {
    fn from(w: Week) -> Self {
        UptoWeek::Week(w)
    }
}

/// The multivariate series as visible at one prediction week: for each
/// signal, values for observation weeks `1..=week`. Signals with no data
/// published by `week` are absent.
#[derive(Debug, Clone)]
pub struct RealTimeSequence {
    pub week: Week,
    pub series: BTreeMap<SignalId, Vec<f64>>,
}

impl RealTimeSequence {
    /// Value for `signal` at observation week `obs_week` (1-based).
    pub fn value(&self, signal: &SignalId, obs_week: Week) -> Option<f64> {
        self.series
            .get(signal)
            .and_then(|s| s.get(obs_week as usize - 1))
            .copied()
    }

    /// The current-week value of `signal`, delay-substituted if needed.
    pub fn latest(&self, signal: &SignalId) -> Option<f64> {
        self.series.get(signal).and_then(|s| s.last()).copied()
    }
}

impl RevisionDataset {
    /// Load a vintage CSV with header `signal,region,observation_week,issue_week,value`.
    pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(file, opts)
    }

    pub fn read_csv(reader: impl Read, opts: &LoadOptions) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);

        {
            let headers = rdr.headers().map_err(|e| Error::MalformedRow {
                line: 1,
                msg: e.to_string(),
            })?;
            let expected = ["signal", "region", "observation_week", "issue_week", "value"];
            let got: Vec<&str> = headers.iter().collect();
            if got != expected {
                return Err(Error::MalformedRow {
                    line: 1,
                    msg: format!("expected header {:?}, got {:?}", expected.join(","), got.join(",")),
                });
            }
        }

        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::MalformedRow {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != 5 {
                return Err(Error::MalformedRow {
                    line,
                    msg: format!("expected 5 fields, got {}", rec.len()),
                });
            }
            let field = |i: usize| rec.get(i).unwrap_or("");
            let parse_week = |i: usize, name: &str| -> Result<Week> {
                field(i).parse::<Week>().map_err(|_| Error::MalformedRow {
                    line,
                    msg: format!("bad {name} {:?}", field(i)),
                })
            };
            let obs_week = parse_week(2, "observation_week")?;
            let issue_week = parse_week(3, "issue_week")?;
            if obs_week == 0 {
                return Err(Error::MalformedRow {
                    line,
                    msg: "observation_week must be >= 1".into(),
                });
            }
            if issue_week < obs_week {
                return Err(Error::IssueBeforeObservation {
                    line,
                    obs_week,
                    issue_week,
                });
            }
            let value: f64 = field(4).parse().map_err(|_| Error::MalformedRow {
                line,
                msg: format!("bad value {:?}", field(4)),
            })?;
            if !value.is_finite() {
                return Err(Error::NonFiniteValue { line });
            }
            if field(0).is_empty() || field(1).is_empty() {
                return Err(Error::MalformedRow {
                    line,
                    msg: "empty signal or region token".into(),
                });
            }
            records.push(VintageRecord {
                signal: SignalId::new(field(1), field(0)),
                obs_week,
                issue_week,
                value,
            });
        }
        Self::from_records(records, opts)
    }

    /// Build a dataset from in-memory records, validating uniqueness.
    pub fn from_records(records: Vec<VintageRecord>, opts: &LoadOptions) -> Result<Self> {
        let mut signals: Vec<SignalId> = records.iter().map(|r| r.signal.clone()).collect();
        signals.sort();
        signals.dedup();

        let index: BTreeMap<&SignalId, usize> =
            signals.iter().enumerate().map(|(i, s)| (s, i)).collect();

        let mut table: Vec<BTreeMap<Week, BTreeMap<Week, f64>>> =
            vec![BTreeMap::new(); signals.len()];
        let mut final_week = 0;
        let mut n_records = 0;
        for r in &records {
            if r.issue_week < r.obs_week {
                return Err(Error::IssueBeforeObservation {
                    line: 0,
                    obs_week: r.obs_week,
                    issue_week: r.issue_week,
                });
            }
            if !r.value.is_finite() {
                return Err(Error::NonFiniteValue { line: 0 });
            }
            let i = index[&r.signal];
            let prev = table[i]
                .entry(r.obs_week)
                .or_default()
                .insert(r.issue_week, r.value);
            if prev.is_some() {
                return Err(Error::DuplicateRecord {
                    signal: r.signal.to_string(),
                    obs_week: r.obs_week,
                    issue_week: r.issue_week,
                });
            }
            final_week = final_week.max(r.issue_week);
            n_records += 1;
        }

        // modal first-issue lag per signal; ties resolved toward the smaller lag
        let mut delays = Vec::with_capacity(signals.len());
        for (i, sig) in signals.iter().enumerate() {
            if let Some(d) = opts.delay_overrides.get(sig) {
                delays.push(*d);
                continue;
            }
            let mut counts: BTreeMap<Week, usize> = BTreeMap::new();
            for (obs, issues) in &table[i] {
                if let Some(first) = issues.keys().next() {
                    *counts.entry(first - obs).or_default() += 1;
                }
            }
            let modal = counts
                .iter()
                .max_by_key(|(lag, n)| (**n, std::cmp::Reverse(**lag)))
                .map(|(lag, _)| *lag)
                .unwrap_or(0);
            delays.push(modal);
        }

        Ok(Self {
            signals,
            records: table,
            delays,
            final_week,
            n_records,
        })
    }

    pub fn signals(&self) -> &[SignalId] {
        &self.signals
    }

    pub fn signal_index(&self, signal: &SignalId) -> Option<usize> {
        self.signals.binary_search(signal).ok()
    }

    pub fn final_week(&self) -> Week {
        self.final_week
    }

    pub fn len(&self) -> usize {
        self.n_records
    }

    pub fn is_empty(&self) -> bool {
        self.n_records == 0
    }

    pub fn delay(&self, signal: &SignalId) -> Result<Week> {
        let i = self
            .signal_index(signal)
            .ok_or_else(|| Error::UnknownSignal(signal.to_string()))?;
        Ok(self.delays[i])
    }

    /// Observation weeks with at least one record for `signal`.
    pub fn observation_weeks(&self, signal: &SignalId) -> Vec<Week> {
        match self.signal_index(signal) {
            Some(i) => self.records[i].keys().copied().collect(),
            None => Vec::new(),
        }
    }

    /// Raw published value, if any.
    pub fn value_at(&self, signal: &SignalId, obs_week: Week, issue_week: Week) -> Option<f64> {
        let i = self.signal_index(signal)?;
        self.records[i].get(&obs_week)?.get(&issue_week).copied()
    }

    /// All stored records, sorted by (signal, observation week, issue week).
    pub fn records(&self) -> impl Iterator<Item = VintageRecord> + '_ {
        self.signals.iter().enumerate().flat_map(move |(i, sig)| {
            self.records[i].iter().flat_map(move |(&obs_week, issues)| {
                issues.iter().map(move |(&issue_week, &value)| VintageRecord {
                    signal: sig.clone(),
                    obs_week,
                    issue_week,
                    value,
                })
            })
        })
    }

    /// Write the vintage CSV this dataset would load from, atomically.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("signal,region,observation_week,issue_week,value\n");
        for r in self.records() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.signal.feature, r.signal.region, r.obs_week, r.issue_week, r.value
            ));
        }
        crate::util::atomic_write(path.as_ref(), out.as_bytes())
    }

    /// Most revised value of (signal, obs_week) as of `issue_week` (latest
    /// issue at or before it).
    pub fn latest_value(&self, signal: &SignalId, obs_week: Week, issue_week: Week) -> Option<f64> {
        let i = self.signal_index(signal)?;
        self.records[i]
            .get(&obs_week)?
            .range(..=issue_week)
            .next_back()
            .map(|(_, v)| *v)
    }

    /// The revision sequence for (signal, obs_week), revised up to `upto`.
    ///
    /// The sequence starts at the first issue week actually published for
    /// this observation week; no entries are invented before publication.
    /// Missing intermediate issues, zeros published after a nonzero value,
    /// and weeks past the last revision repeat the previous value and are
    /// flagged in `fill_mask`.
    pub fn backfill_sequence(
        &self,
        signal: &SignalId,
        obs_week: Week,
        upto: impl Into<UptoWeek>,
    ) -> Result<BackfillSequence> {
        let upto = match upto.into() {
            UptoWeek::Week(w) => w,
            UptoWeek::Final => self.final_week,
        };
        if upto > self.final_week {
            return Err(Error::WeekOutOfRange {
                week: upto,
                final_week: self.final_week,
            });
        }
        let i = self
            .signal_index(signal)
            .ok_or_else(|| Error::UnknownSignal(signal.to_string()))?;
        let issues = self.records[i]
            .get(&obs_week)
            .filter(|m| !m.is_empty())
            .ok_or_else(|| Error::NoRecords {
                signal: signal.to_string(),
                obs_week,
            })?;
        let start_issue = *issues.keys().next().unwrap();
        if upto < start_issue {
            // nothing published yet at that vintage
            return Err(Error::NoRecords {
                signal: signal.to_string(),
                obs_week,
            });
        }

        let mut values = Vec::with_capacity((upto - start_issue + 1) as usize);
        let mut fill_mask = Vec::with_capacity(values.capacity());
        let mut had_nonzero = false;
        for w in start_issue..=upto {
            match issues.get(&w) {
                Some(&v) if !(v == 0.0 && had_nonzero) => {
                    values.push(v);
                    fill_mask.push(false);
                }
                // missing revision, or a zero reported after a nonzero value
                _ => match values.last() {
                    Some(&prev) => {
                        values.push(prev);
                        fill_mask.push(true);
                    }
                    None => {
                        // first entry is an observed zero (no nonzero seen yet)
                        values.push(*issues.get(&w).unwrap());
                        fill_mask.push(false);
                    }
                },
            }
            if *values.last().unwrap() != 0.0 {
                had_nonzero = true;
            }
        }
        Ok(BackfillSequence {
            signal: signal.clone(),
            obs_week,
            start_issue,
            delay: self.delays[i],
            values,
            fill_mask,
        })
    }

    /// The full multivariate series as visible at prediction week `t`.
    ///
    /// For each signal present by week `t`, returns values for observation
    /// weeks `1..=t` as issued at `t`. Observation weeks with nothing issued
    /// yet (reporting delay at the tip, or gaps) substitute the most revised
    /// value of the nearest earlier week with data; weeks before the signal
    /// first existed substitute the earliest available week's value.
    pub fn real_time_sequence(&self, t: Week) -> Result<RealTimeSequence> {
        if t == 0 || t > self.final_week {
            return Err(Error::WeekOutOfRange {
                week: t,
                final_week: self.final_week,
            });
        }
        let mut series = BTreeMap::new();
        for (i, sig) in self.signals.iter().enumerate() {
            let mut vals: Vec<Option<f64>> = Vec::with_capacity(t as usize);
            for w in 1..=t {
                let v = self.records[i]
                    .get(&w)
                    .and_then(|m| m.range(..=t).next_back())
                    .map(|(_, v)| *v);
                vals.push(v);
            }
            if vals.iter().all(|v| v.is_none()) {
                continue; // signal not yet published at week t
            }
            // forward substitution, then backward for a leading gap
            let mut filled = Vec::with_capacity(vals.len());
            let mut last = None;
            for v in &vals {
                let v = v.or(last);
                filled.push(v);
                last = v;
            }
            let first_known = filled.iter().flatten().next().copied().unwrap();
            let series_vals: Vec<f64> = filled.into_iter().map(|v| v.unwrap_or(first_known)).collect();
            series.insert(sig.clone(), series_vals);
        }
        Ok(RealTimeSequence { week: t, series })
    }
}

/// Per-signal scaling parameters. `std == 0.0` marks a constant signal,
/// which is only shifted.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleStats {
    pub mean: f64,
    pub std: f64,
}

impl ScaleStats {
    pub fn fit(series: &[f64]) -> Self {
        assert!(!series.is_empty(), "cannot fit scaling to an empty series");
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        ScaleStats {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn scale(&self, x: f64) -> f64 {
        if self.std == 0.0 {
            x - self.mean
        } else {
            (x - self.mean) / self.std
        }
    }

    pub fn unscale(&self, x: f64) -> f64 {
        if self.std == 0.0 {
            x + self.mean
        } else {
            x * self.std + self.mean
        }
    }

    /// Standard deviation with the constant-signal case mapped to 1, for use
    /// as a residual normalizer.
    pub fn denom(&self) -> f64 {
        if self.std == 0.0 {
            1.0
        } else {
            self.std
        }
    }
}

/// Fitted per-signal scaling for one training week.
#[derive(Debug, Clone, Default)]
pub struct Scaler {
    stats: BTreeMap<SignalId, ScaleStats>,
}

impl Scaler {
    pub fn fit<'a>(series: impl IntoIterator<Item = (&'a SignalId, &'a [f64])>) -> Self {
        let stats = series
            .into_iter()
            .map(|(sig, vals)| (sig.clone(), ScaleStats::fit(vals)))
            .collect();
        Scaler { stats }
    }

    /// Fit from the real-time view at one week; this is what training uses.
    pub fn fit_realtime(rts: &RealTimeSequence) -> Self {
        Self::fit(rts.series.iter().map(|(s, v)| (s, v.as_slice())))
    }

    pub fn stats(&self, signal: &SignalId) -> Result<ScaleStats> {
        self.stats
            .get(signal)
            .copied()
            .ok_or_else(|| Error::UnknownSignal(signal.to_string()))
    }

    pub fn transform(&self, signal: &SignalId, series: &[f64]) -> Result<Vec<f64>> {
        let st = self.stats(signal)?;
        Ok(series.iter().map(|&x| st.scale(x)).collect())
    }

    pub fn inverse(&self, signal: &SignalId, series: &[f64]) -> Result<Vec<f64>> {
        let st = self.stats(signal)?;
        Ok(series.iter().map(|&x| st.unscale(x)).collect())
    }
}

/// Scale every series to mean 0 / std 1 (population std), returning the
/// scaled set together with the fitted parameters for inversion. Constant
/// series are shifted to zero and left unscaled.
pub fn scale_for_training(
    series: &BTreeMap<SignalId, Vec<f64>>,
) -> (BTreeMap<SignalId, Vec<f64>>, Scaler) {
    let scaler = Scaler::fit(series.iter().map(|(s, v)| (s, v.as_slice())));
    let scaled = series
        .iter()
        .map(|(sig, vals)| (sig.clone(), scaler.transform(sig, vals).unwrap()))
        .collect();
    (scaled, scaler)
}
