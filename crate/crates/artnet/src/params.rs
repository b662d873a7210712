//! Named parameter store and JSON checkpoints.
//!
//! Parameters live here between steps; each training example binds them
//! into a fresh graph as leaves and hands gradients back by id. Checkpoint
//! files keep the registration order so a load can verify name, order and
//! shape all at once.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, Var};

/// Checkpoint format version written and required back.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint parse error on {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint entry {index} is {found:?}, expected parameter {expected:?}")]
    NameMismatch {
        index: usize,
        found: String,
        expected: String,
    },
    #[error("checkpoint shape {found:?} for {name:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint has {found} parameters, expected {expected}")]
    CountMismatch { found: usize, expected: usize },
    #[error("non-finite value in parameter {0:?}")]
    NonFinite(String),
}

/// Stable handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a tensor under a unique name; ids are dense and follow
    /// registration order.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId, ParamError> {
        if self.lookup.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Gaussian-initialized matrix parameter.
    pub fn add_gaussian(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, ParamError> {
        let normal = Normal::new(0.0, std).expect("std must be positive");
        let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    /// Gaussian-initialized vector parameter.
    pub fn add_gaussian_vec(
        &mut self,
        name: &str,
        len: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, ParamError> {
        let normal = Normal::new(0.0, std).expect("std must be positive");
        let data: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::vector(data))
    }

    /// Zero-initialized vector parameter (biases).
    pub fn add_zeros_vec(&mut self, name: &str, len: usize) -> Result<ParamId, ParamError> {
        self.add(name, Tensor::vector(vec![0.0; len]))
    }

    /// Uniform(-bound, bound) matrix parameter.
    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, ParamError> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    /// Binds every parameter into `g` as a leaf, in registration order.
    pub fn bind<'g>(&self, g: &'g Graph) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Writes all parameters as one JSON document. Fails without touching
    /// the file if any value is non-finite.
    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        for (name, t) in self.iter() {
            if !t.all_finite() {
                return Err(ParamError::NonFinite(name.to_string()));
            }
        }
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_VERSION,
            params: self
                .iter()
                .map(|(name, t)| CheckpointEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&doc).expect("checkpoint serialization");
        let mut f = fs::File::create(path).map_err(|source| ParamError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(json.as_bytes()).map_err(|source| ParamError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    /// Loads values into an already-constructed store; name order and every
    /// shape must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<(), ParamError> {
        let raw = fs::read_to_string(path).map_err(|source| ParamError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc: CheckpointDoc =
            serde_json::from_str(&raw).map_err(|source| ParamError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(ParamError::Version {
                found: doc.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if doc.params.len() != self.tensors.len() {
            return Err(ParamError::CountMismatch {
                found: doc.params.len(),
                expected: self.tensors.len(),
            });
        }
        for (i, entry) in doc.params.iter().enumerate() {
            if entry.name != self.names[i] {
                return Err(ParamError::NameMismatch {
                    index: i,
                    found: entry.name.clone(),
                    expected: self.names[i].clone(),
                });
            }
            if entry.shape != self.tensors[i].shape() {
                return Err(ParamError::ShapeMismatch {
                    name: entry.name.clone(),
                    found: entry.shape.clone(),
                    expected: self.tensors[i].shape().to_vec(),
                });
            }
            if entry.data.len() != entry.shape.iter().product::<usize>() {
                return Err(ParamError::ShapeMismatch {
                    name: entry.name.clone(),
                    found: vec![entry.data.len()],
                    expected: entry.shape.clone(),
                });
            }
        }
        for (i, entry) in doc.params.into_iter().enumerate() {
            let shape = self.tensors[i].shape().to_vec();
            self.tensors[i] = if shape.len() == 2 {
                Tensor::matrix(shape[0], shape[1], entry.data)
            } else {
                Tensor::vector(entry.data)
            };
        }
        Ok(())
    }
}

/// Parameter vars bound into one graph; indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps externally created leaves (finite-difference checking binds
    /// perturbed copies); order must match the store's registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    /// Gradients in registration order; `None` for parameters the loss does
    /// not touch.
    pub fn gradients(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn small_store() -> (ParamStore, ParamId, ParamId) {
        let mut ps = ParamStore::new();
        let w = ps
            .add("w", Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]))
            .unwrap();
        let b = ps.add("b", Tensor::vector(vec![0.5, -0.6])).unwrap();
        (ps, w, b)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            ps.add("w", Tensor::scalar(2.0)),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn ids_follow_registration_order() {
        let (ps, w, b) = small_store();
        assert_eq!(w.index(), 0);
        assert_eq!(b.index(), 1);
        assert_eq!(ps.name(w), "w");
        assert_eq!(ps.num_scalars(), 6);
        assert_eq!(ps.id_of("b"), Some(b));
        assert_eq!(ps.id_of("nope"), None);
    }

    #[test]
    fn binding_exposes_params_and_gradients() {
        let (ps, w, b) = small_store();
        let g = Graph::new();
        let bind = ps.bind(&g);
        let y = g.matvec(bind.var(w), bind.var(b)).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let grads = bind.gradients(&g);
        assert_eq!(grads.len(), 2);
        assert!(grads[0].is_some() && grads[1].is_some());
        // d/dw sum(w b) = [b; b]
        let gw = grads[0].as_ref().unwrap();
        assert_eq!(gw.data(), &[0.5, -0.6, 0.5, -0.6]);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut ps = ParamStore::new();
        let mut rng = seeds::init_rng(1);
        ps.add_gaussian("w", 3, 4, 0.02, &mut rng).unwrap();
        ps.add("odd", Tensor::vector(vec![0.1 + 0.2, 1e-300, -0.0, 3.141592653589793]))
            .unwrap();
        ps.save(&path).unwrap();

        let mut ps2 = ParamStore::new();
        let mut rng2 = seeds::init_rng(99);
        ps2.add_gaussian("w", 3, 4, 0.02, &mut rng2).unwrap();
        ps2.add("odd", Tensor::vector(vec![0.0; 4])).unwrap();
        ps2.load(&path).unwrap();

        for (a, b) in ps.iter().zip(ps2.iter()) {
            assert_eq!(a.0, b.0);
            // Bit-exact, not approximately equal.
            for (x, y) in a.1.data().iter().zip(b.1.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {} drifted", a.0);
            }
        }
    }

    #[test]
    fn load_rejects_wrong_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (ps, _, _) = small_store();
        ps.save(&path).unwrap();

        let mut other = ParamStore::new();
        other.add("w", Tensor::matrix(2, 2, vec![0.0; 4])).unwrap();
        other.add("bias", Tensor::vector(vec![0.0; 2])).unwrap();
        let err = other.load(&path).unwrap_err();
        assert!(err.to_string().contains("bias") || err.to_string().contains("\"b\""));
    }

    #[test]
    fn load_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (ps, _, _) = small_store();
        ps.save(&path).unwrap();

        let mut other = ParamStore::new();
        other.add("w", Tensor::matrix(2, 2, vec![0.0; 4])).unwrap();
        other.add("b", Tensor::vector(vec![0.0; 3])).unwrap();
        let err = other.load(&path).unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");
    }

    #[test]
    fn load_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (ps, _, _) = small_store();
        ps.save(&path).unwrap();

        let mut other = ParamStore::new();
        other.add("w", Tensor::matrix(2, 2, vec![0.0; 4])).unwrap();
        assert!(matches!(
            other.load(&path),
            Err(ParamError::CountMismatch { .. })
        ));
    }

    #[test]
    fn save_rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::vector(vec![1.0, f64::NAN])).unwrap();
        assert!(matches!(ps.save(&path), Err(ParamError::NonFinite(_))));
        assert!(!path.exists());
    }
}
