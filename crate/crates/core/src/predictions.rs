//! Forecast histories of black-box models: one value per
//! (model, region, horizon, week the forecast was made).

use crate::error::{Error, Result};
use crate::signal::Week;
use crate::util::atomic_write;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// All forecasts of one model for one region at one horizon, keyed by the
/// week each forecast was made. A forecast made at week w targets week w+k.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHistory {
    pub model: String,
    pub region: String,
    pub horizon: Week,
    values: BTreeMap<Week, f64>,
}

impl PredictionHistory {
    pub fn new(model: impl Into<String>, region: impl Into<String>, horizon: Week) -> Self {
        PredictionHistory {
            model: model.into(),
            region: region.into(),
            horizon,
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, made_week: Week, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { line: 0 });
        }
        if self.values.insert(made_week, value).is_some() {
            return Err(Error::DuplicateRecord {
                signal: format!("{}/{}/k{}", self.model, self.region, self.horizon),
                obs_week: made_week,
                issue_week: made_week,
            });
        }
        Ok(())
    }

    /// Forecast made at `made_week`, if any.
    pub fn value_at(&self, made_week: Week) -> Option<f64> {
        self.values.get(&made_week).copied()
    }

    pub fn weeks(&self) -> impl Iterator<Item = Week> + '_ {
        self.values.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Error if forecasts are not present for every week in lo..=hi.
    pub fn require_contiguous(&self, lo: Week, hi: Week) -> Result<()> {
        for w in lo..=hi {
            if !self.values.contains_key(&w) {
                return Err(Error::InsufficientHistory(format!(
                    "{} {} k={}: no forecast made at week {w}",
                    self.model, self.region, self.horizon
                )));
            }
        }
        Ok(())
    }
}

/// Load `model,region,forecast_made_week,horizon_k,value` rows grouped into
/// histories, sorted by (model, region, horizon).
pub fn load_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionHistory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_predictions(file)
}

pub fn read_predictions(reader: impl Read) -> Result<Vec<PredictionHistory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers().map_err(|e| Error::MalformedRow {
            line: 1,
            msg: e.to_string(),
        })?;
        let expected = ["model", "region", "forecast_made_week", "horizon_k", "value"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::MalformedRow {
                line: 1,
                msg: format!("expected header {:?}, got {:?}", expected.join(","), got.join(",")),
            });
        }
    }
    let mut map: BTreeMap<(String, String, Week), PredictionHistory> = BTreeMap::new();
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
        if field(0).is_empty() || field(1).is_empty() {
            return Err(Error::MalformedRow {
                line,
                msg: "empty model or region token".into(),
            });
        }
        let made: Week = field(2).parse().map_err(|_| Error::MalformedRow {
            line,
            msg: format!("bad forecast_made_week {:?}", field(2)),
        })?;
        let horizon: Week = field(3).parse().map_err(|_| Error::MalformedRow {
            line,
            msg: format!("bad horizon_k {:?}", field(3)),
        })?;
        let value: f64 = field(4).parse().map_err(|_| Error::MalformedRow {
            line,
            msg: format!("bad value {:?}", field(4)),
        })?;
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { line });
        }
        let key = (field(0).to_string(), field(1).to_string(), horizon);
        let hist = map.entry(key.clone()).or_insert_with(|| {
            PredictionHistory::new(key.0.clone(), key.1.clone(), horizon)
        });
        hist.insert(made, value).map_err(|e| match e {
            Error::DuplicateRecord { signal, .. } => Error::MalformedRow {
                line,
                msg: format!("duplicate forecast for {signal} at week {made}"),
            },
            other => other,
        })?;
    }
    Ok(map.into_values().collect())
}

pub fn save_predictions_csv(histories: &[PredictionHistory], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("model,region,forecast_made_week,horizon_k,value\n");
    let mut sorted: Vec<&PredictionHistory> = histories.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.model, &a.region, a.horizon).cmp(&(&b.model, &b.region, b.horizon))
    });
    for h in sorted {
        for (week, value) in &h.values {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                h.model, h.region, week, h.horizon, value
            ));
        }
    }
    atomic_write(path.as_ref(), out.as_bytes())
}
