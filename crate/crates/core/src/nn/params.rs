//! Named parameter storage, deterministic initialization, and the JSON
//! checkpoint format.

use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Named parameters with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value mismatch for {name}"
        );
        assert!(
            self.params
                .insert(name.to_string(), Param { shape, values })
                .is_none(),
            "duplicate parameter {name}"
        );
    }

    /// Weight matrix initialized uniform(-1/sqrt(cols), 1/sqrt(cols)).
    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha20Rng) {
        let bound = 1.0 / (cols as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, vec![rows, cols], values);
    }

    /// Bias or state vector initialized to zeros.
    pub fn add_zeros(&mut self, name: &str, n: usize) {
        self.insert(name, vec![n], vec![0.0; n]);
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }
}

/// One forward pass: a tape with every parameter bound as a leaf.
pub struct Session {
    pub tape: Tape,
    ids: BTreeMap<String, NodeId>,
}

impl Session {
    pub fn new(params: &ParamSet) -> Self {
        let mut tape = Tape::new();
        let ids = params
            .iter()
            .map(|(name, p)| (name.to_string(), tape.leaf(p.values.clone())))
            .collect();
        Session { tape, ids }
    }

    pub fn param(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Run backward from `output` and collect per-parameter gradients.
    pub fn grads(&self, output: NodeId) -> BTreeMap<String, Vec<f64>> {
        let all = self.tape.backward(output);
        self.ids
            .iter()
            .map(|(name, &id)| (name.clone(), all.get(id).to_vec()))
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "params-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    /// Week the checkpoint was trained for, when applicable.
    week: Option<u32>,
    params: BTreeMap<String, Param>,
}

/// Serialize parameters with a versioned header. The write is atomic:
/// a temp file in the target directory renamed into place.
pub fn save_checkpoint(params: &ParamSet, week: Option<u32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        week,
        params: params
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    };
    let json = serde_json::to_string(&file).expect("checkpoint serializes");
    crate::util::atomic_write(path, json.as_bytes())
}

/// Load a checkpoint, returning the parameters and the week recorded in
/// the header.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamSet, Option<u32>)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.display().to_string())
        } else {
            Error::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    let file: CheckpointFile = serde_json::from_slice(&data)
        .map_err(|e| Error::BadCheckpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::BadCheckpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
            file.format
        )));
    }
    let mut params = ParamSet::new();
    for (name, p) in file.params {
        if p.shape.iter().product::<usize>() != p.values.len() {
            return Err(Error::BadCheckpoint(format!(
                "parameter {name}: shape {:?} does not match {} values",
                p.shape,
                p.values.len()
            )));
        }
        if p.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadCheckpoint(format!(
                "parameter {name} holds non-finite values"
            )));
        }
        params.insert(&name, p.shape, p.values);
    }
    Ok((params, file.week))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let build = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            ps.add_matrix("w", 4, 9, &mut rng);
            ps.add_zeros("b", 4);
            ps
        };
        let a = build(5);
        let b = build(5);
        assert_eq!(a, b);
        assert_ne!(a, build(6));
        let bound = 1.0 / 3.0;
        assert!(a.get("w").values.iter().all(|v| v.abs() <= bound));
        assert!(a.get("b").values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn session_binds_and_collects_grads() {
        let mut ps = ParamSet::new();
        ps.insert("w", vec![2], vec![3.0, 4.0]);
        let mut s = Session::new(&ps);
        let w = s.param("w");
        let sq = s.tape.mul(w, w);
        let out = s.tape.sum(sq);
        let g = s.grads(out);
        assert_eq!(g["w"], vec![6.0, 8.0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ps = ParamSet::new();
        ps.insert("a.w", vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]);
        ps.insert("a.b", vec![2], vec![0.0, 1.0]);
        save_checkpoint(&ps, Some(30), &path).unwrap();
        let (loaded, week) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ps);
        assert_eq!(week, Some(30));
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(dir.path().join("absent.json")),
            Err(Error::MissingCheckpoint(_))
        ));
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, b"{\"format\":\"other\",\"params\":{}}").unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadCheckpoint(_))));
        let garbled = dir.path().join("garbled.json");
        std::fs::write(&garbled, b"not json").unwrap();
        assert!(matches!(load_checkpoint(&garbled), Err(Error::BadCheckpoint(_))));
    }
}
