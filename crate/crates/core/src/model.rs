//! Convolutional embedding network with a hyperspherical classifier, and its
//! on-disk checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{dten, DataError};
use crate::diff::{DiffError, Graph, NodeId, Scalar, Tensor};
use crate::image::Image;
use crate::seeds;

pub const NORM_EPS: f64 = 1e-8;
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input {found:?} does not match model input {expected:?}")]
    InputDims { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub identities: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            channels: vec![8, 16, 32],
            embed_dim: 64,
            identities: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} must be ≥ 2", self.embed_dim));
        }
        if self.identities < 2 {
            return bad(format!("identities {} must be ≥ 2", self.identities));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive".into());
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        let down = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return bad(format!(
                "input_size {} must be divisible by {down} for {} pooling stages",
                self.input_size,
                self.channels.len()
            ));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.input_size, self.input_size, self.input_channels]
    }

    /// Length of the flattened feature map fed to the dense layer.
    pub fn flat_len(&self) -> usize {
        let side = self.input_size >> self.channels.len();
        side * side * self.channels.last().copied().unwrap_or(0)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (k, &cout) in self.channels.iter().enumerate() {
            out.push((format!("conv{k}.weight"), vec![3, 3, cin, cout]));
            out.push((format!("conv{k}.bias"), vec![cout]));
            cin = cout;
        }
        out.push(("fc.weight".into(), vec![self.embed_dim, self.flat_len()]));
        out.push(("fc.bias".into(), vec![self.embed_dim]));
        out.push(("classifier.weight".into(), vec![self.identities, self.embed_dim]));
        out
    }
}

/// Encoder parameters followed by the `I × d` classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Vec<Tensor<T>>,
}

/// Parameter nodes of one model instance on a tape.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub params: Vec<NodeId>,
}

impl ModelNodes {
    pub fn classifier(&self) -> NodeId {
        *self.params.last().expect("model has parameters")
    }
}

fn normalize_rows<T: Scalar>(t: &mut Tensor<T>) {
    let d = *t.dims().last().expect("matrix");
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|&v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v = T::from_f64_lossy(v.to_f64_lossy() / n);
            }
        }
    }
}

impl<T: Scalar> ModelState<T> {
    /// He-normal weights, zero biases, unit-norm random classifier rows.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeds::rng(seed, &[seeds::TAG_INIT]);
        let specs = config.param_specs();
        let n_specs = specs.len();
        let mut params = Vec::with_capacity(n_specs);
        for (k, (name, dims)) in specs.into_iter().enumerate() {
            let n: usize = dims.iter().product();
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&dims)
            } else if k == n_specs - 1 {
                let std = Normal::new(0.0, 1.0).expect("unit normal");
                let mut t = Tensor::new(dims, (0..n).map(|_| T::from_f64_lossy(std.sample(&mut rng))).collect())?;
                normalize_rows(&mut t);
                t
            } else {
                let fan_in: usize = if dims.len() == 4 {
                    dims[0] * dims[1] * dims[2]
                } else {
                    dims[1]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::new(
                    dims,
                    (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect(),
                )?
            };
            params.push(t);
        }
        Ok(Self { config, params })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn classifier(&self) -> &Tensor<T> {
        self.params.last().expect("model has parameters")
    }

    pub fn renormalize_classifier(&mut self) {
        normalize_rows(self.params.last_mut().expect("model has parameters"));
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over every parameter's DTEN encoding, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(dten::encode(p));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Put the parameters on the tape, as marked inputs when gradients are
    /// wanted and as constants otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelNodes {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.input(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        ModelNodes { params }
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<(), ModelError> {
        if dims != self.config.input_dims() {
            return Err(ModelError::InputDims {
                expected: self.config.input_dims().to_vec(),
                found: dims.to_vec(),
            });
        }
        Ok(())
    }

    /// Unit-norm `[d]` embedding of image node `x`.
    pub fn embed_graph(&self, g: &mut Graph<T>, nodes: &ModelNodes, x: NodeId) -> Result<NodeId, ModelError> {
        self.check_input(g.value(x)?.dims())?;
        let mut h = g.offset(x, -0.5)?;
        for stage in 0..self.config.channels.len() {
            let k = nodes.params[2 * stage];
            let b = nodes.params[2 * stage + 1];
            h = g.conv2d(h, k, 1)?;
            h = g.add(h, b)?;
            h = g.relu(h)?;
            h = g.avg_pool2d(h, 2)?;
        }
        let n = self.config.channels.len();
        let flat = g.reshape(h, &[self.config.flat_len(), 1])?;
        let z = g.matmul(nodes.params[2 * n], flat)?;
        let z = g.reshape(z, &[self.config.embed_dim])?;
        let z = g.add(z, nodes.params[2 * n + 1])?;
        Ok(g.l2_normalize(z, NORM_EPS)?)
    }

    /// `[I]` cosines between embedding node `e` and the classifier rows.
    pub fn logits_graph(&self, g: &mut Graph<T>, nodes: &ModelNodes, e: NodeId) -> Result<NodeId, ModelError> {
        let col = g.reshape(e, &[self.config.embed_dim, 1])?;
        let l = g.matmul(nodes.classifier(), col)?;
        Ok(g.reshape(l, &[self.config.identities])?)
    }

    /// Forward pass for a single image tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let e = self.embed_graph(&mut g, &nodes, xn)?;
        Ok(g.value(e)?.clone())
    }

    pub fn cosine_logits(&self, e: &[T]) -> Vec<f64> {
        let d = self.config.embed_dim;
        self.classifier()
            .data()
            .chunks(d)
            .map(|row| {
                row.iter()
                    .zip(e)
                    .map(|(&w, &x)| w.to_f64_lossy() * x.to_f64_lossy())
                    .sum()
            })
            .collect()
    }
}

impl ModelState<f32> {
    pub fn embed(&self, img: &Image) -> Result<Vec<f32>, ModelError> {
        Ok(self.forward(img.tensor())?.into_data())
    }
}

/// Contents of `checkpoint.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    #[serde(rename = "final")]
    pub is_final: bool,
    /// Parameter name → file name within the checkpoint directory.
    pub params: BTreeMap<String, String>,
    /// Free-form run metadata (training config, seed).
    #[serde(default)]
    pub run: serde_json::Value,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write `dir` atomically: everything goes to a sibling temp directory which
/// is then renamed over the target.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState<f32>,
    step: u64,
    epoch: u64,
    is_final: bool,
    run: serde_json::Value,
) -> Result<(), ModelError> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    let name = dir
        .file_name()
        .ok_or_else(|| ckpt_err(dir, "checkpoint path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    let mut params = BTreeMap::new();
    for (pname, t) in state.param_names().into_iter().zip(&state.params) {
        let file = format!("{pname}.dten");
        dten::save_tensor(&tmp.join(&file), t)?;
        params.insert(pname, file);
    }
    let manifest = CheckpointManifest {
        model: state.config.clone(),
        step,
        epoch,
        is_final,
        params,
        run,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let mpath = tmp.join(CHECKPOINT_MANIFEST);
    fs::write(&mpath, text).map_err(|e| DataError::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| DataError::io(dir, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState<f32>, CheckpointManifest), ModelError> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| DataError::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ckpt_err(&mpath, e.to_string()))?;
    manifest.model.validate()?;
    let mut params = Vec::new();
    for (pname, dims) in manifest.model.param_specs() {
        let file = manifest
            .params
            .get(&pname)
            .ok_or_else(|| ckpt_err(&mpath, format!("missing parameter {pname}")))?;
        let t: Tensor<f32> = dten::load_tensor(&dir.join(file))?;
        if t.dims() != dims.as_slice() {
            return Err(ckpt_err(
                &dir.join(file),
                format!("{pname}: expected {dims:?}, found {:?}", t.dims()),
            ));
        }
        params.push(t);
    }
    Ok((
        ModelState {
            config: manifest.model.clone(),
            params,
        },
        manifest,
    ))
}

/// Random unit vector of length `d`, for tests and chance baselines.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_graph;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            input_channels: 3,
            channels: vec![2, 3],
            embed_dim: 4,
            identities: 3,
        }
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = ModelState::<f32>::init(ModelConfig::default(), 1).unwrap();
        let img = Image::from_fn(32, 32, 3, |i, j, k| ((i * 7 + j * 3 + k) % 11) as f32 / 10.0);
        let a = m.embed(&img).unwrap();
        let b = m.embed(&img).unwrap();
        assert_eq!(a, b);
        let n = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_image_gives_unit_vector() {
        let m = ModelState::<f32>::init(ModelConfig::default(), 3).unwrap();
        let e = m.embed(&Image::filled(32, 32, 3, 0.0)).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        let n = e.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5, "norm {n}");
    }

    #[test]
    fn classifier_rows_unit_norm() {
        let m = ModelState::<f64>::init(small(), 2).unwrap();
        for row in m.classifier().data().chunks(4) {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_rejected() {
        let m = ModelState::<f32>::init(small(), 2).unwrap();
        let err = m.forward(&Tensor::zeros(&[8, 8, 3])).unwrap_err();
        assert!(matches!(err, ModelError::InputDims { .. }));
    }

    #[test]
    fn cosine_logit_anchors() {
        let m = ModelState::<f64>::init(small(), 5).unwrap();
        let row1: Vec<f64> = m.classifier().data()[4..8].to_vec();
        let l = m.cosine_logits(&row1);
        assert!((l[1] - 1.0).abs() < 1e-12);
        // Orthogonal to row 0.
        let r0 = &m.classifier().data()[0..4];
        let mut o = vec![r0[1], -r0[0], 0.0, 0.0];
        let n = norm(&o);
        o.iter_mut().for_each(|v| *v /= n);
        assert!(m.cosine_logits(&o)[0].abs() < 1e-12);
        let mut rng = seeds::rng(1, &[]);
        for _ in 0..50 {
            let e = random_unit(&mut rng, 4);
            assert!(m.cosine_logits(&e).iter().all(|c| c.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn prenormalization_scale_invariance() {
        let m = ModelState::<f64>::init(small(), 7).unwrap();
        let img: Tensor<f64> = Image::from_fn(16, 16, 3, |i, j, k| ((i + 2 * j + k) % 5) as f32 / 4.0)
            .tensor()
            .cast();
        let base = m.forward(&img).unwrap();
        let n = small().channels.len();
        for c in [0.1, 3.0, 250.0] {
            let mut scaled = m.clone();
            // Scaling the dense layer and its bias scales the pre-normalized feature by c.
            scaled.params[2 * n] = scaled.params[2 * n].map(|v| v * c);
            scaled.params[2 * n + 1] = scaled.params[2 * n + 1].map(|v| v * c);
            let e = scaled.forward(&img).unwrap();
            assert!(e.max_abs_diff(&base) < 1e-6);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut m = ModelState::<f64>::init(small(), 11).unwrap();
        // Non-zero biases so their gradients are exercised away from kinks.
        for k in [1, 3, 5] {
            m.params[k] = m.params[k].map(|_| 0.05);
        }
        let img: Tensor<f64> = Image::from_fn(16, 16, 3, |i, j, k| ((i * 5 + j * 3 + k) % 7) as f32 / 6.0)
            .tensor()
            .cast();
        let mut g = Graph::new();
        let nodes = m.bind(&mut g, true);
        let x = g.constant(img);
        let e = m.embed_graph(&mut g, &nodes, x).unwrap();
        let l = m.logits_graph(&mut g, &nodes, e).unwrap();
        let loss = g.softmax_cross_entropy(l, 1).unwrap();
        // Probe subset: first conv kernel, dense bias, classifier.
        let probe = [nodes.params[0], nodes.params[5], nodes.params[6]];
        let out = check_graph(&mut g, loss, &probe, 1e-6).unwrap();
        assert!(out.max_rel_error < 1e-3, "{out:?}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelState::<f32>::init(small(), 4).unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &m, 12, 3, true, serde_json::json!({"seed": 4})).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
        assert_eq!(manifest.step, 12);
        assert!(manifest.is_final);
        // Overwrite in place.
        save_checkpoint(&path, &m, 13, 3, false, serde_json::Value::Null).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().1.step, 13);
        assert!(!dir.path().join(".ckpt.tmp").exists());
    }

    #[test]
    fn missing_checkpoint_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_checkpoint(&dir.path().join("nope")) {
            Err(ModelError::Data(e)) => assert!(e.is_missing_file()),
            other => panic!("{other:?}"),
        }
    }
}
