//! MLP encoder with dropout followed by a cosine-similarity classifier.
//!
//! The encoder maps `B×input_dim` inputs to L2-normalized `B×bottleneck_dim`
//! features. The classifier compares those features against the row-normalized
//! class weight matrix `Ŵ` (`K×bottleneck_dim`) and divides by a temperature,
//! so each logit is a scaled cosine similarity. During adaptation the
//! classifier is frozen and only the encoder moves.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_temperature")]
    pub classifier_temperature: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_bottleneck() -> usize {
    32
}
fn default_dropout() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    0.05
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: default_hidden(),
            bottleneck_dim: default_bottleneck(),
            num_classes,
            dropout_rate: default_dropout(),
            classifier_temperature: default_temperature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be at least 1".into()));
        }
        if self.bottleneck_dim == 0 {
            return Err(Error::Config("model.bottleneck_dim must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be at least 1".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::Config(format!("model.hidden_dims[{i}] must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "model.dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.classifier_temperature > 0.0 && self.classifier_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "model.classifier_temperature {} must be positive",
                self.classifier_temperature
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every encoder layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.bottleneck_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Dense layer computing `x · weight + bias`; `weight` is `fan_in × fan_out`.
#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

fn fresh_leaf(t: &Tensor) -> Tensor {
    Tensor::param(t.data().to_vec(), t.shape()).expect("shape of an existing tensor")
}

/// Clones get their own parameter leaves, so gradients accumulated through
/// one copy never show up in another.
impl Clone for Linear {
    fn clone(&self) -> Self {
        Linear {
            weight: fresh_leaf(&self.weight),
            bias: fresh_leaf(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Encoder,
    Classifier,
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Vec<Linear>,
    classifier: Tensor,
    classifier_frozen: bool,
    pretrained: bool,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            classifier: fresh_leaf(&self.classifier),
            classifier_frozen: self.classifier_frozen,
            pretrained: self.pretrained,
        }
    }
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let bound = init_bound(fan_in, fan_out);
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect()
}

/// Scaled-uniform initialization bound `sqrt(6 / (fan_in + fan_out))`.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let mut encoder = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            encoder.push(Linear {
                weight: Tensor::param(xavier(fan_in, fan_out, rng), &[fan_in, fan_out])?,
                bias: Tensor::param(vec![0.0; fan_out], &[fan_out])?,
            });
        }
        let (k, h) = (config.num_classes, config.bottleneck_dim);
        // The classifier is stored K×h; its fan is (h, K).
        let classifier = Tensor::param(xavier(h, k, rng), &[k, h])?;
        Ok(Model {
            config: config.clone(),
            encoder,
            classifier,
            classifier_frozen: false,
            pretrained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder
    }

    pub fn classifier_weight(&self) -> &Tensor {
        &self.classifier
    }

    pub fn classifier_frozen(&self) -> bool {
        self.classifier_frozen
    }

    pub fn freeze_classifier(&mut self) {
        self.classifier_frozen = true;
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub(crate) fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    /// Every parameter tensor tagged with its role, encoder first.
    pub fn parameters(&self) -> Vec<(ParamRole, &Tensor)> {
        let mut out: Vec<(ParamRole, &Tensor)> = Vec::new();
        for layer in &self.encoder {
            out.push((ParamRole::Encoder, &layer.weight));
            out.push((ParamRole::Encoder, &layer.bias));
        }
        out.push((ParamRole::Classifier, &self.classifier));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out: Vec<(ParamRole, &mut Tensor)> = Vec::new();
        for layer in &mut self.encoder {
            out.push((ParamRole::Encoder, &mut layer.weight));
            out.push((ParamRole::Encoder, &mut layer.bias));
        }
        out.push((ParamRole::Classifier, &mut self.classifier));
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Encoder forward pass. Passing an rng turns dropout on after every
    /// hidden activation; `None` is the deterministic inference path.
    pub fn encode(&self, x: &Tensor, mut rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "encoder expects {} input columns, got shape {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        let last = self.encoder.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row_bias(&layer.bias)?;
            if i < last {
                h = h.relu();
                if let Some(r) = rng.as_deref_mut() {
                    h = h.dropout(self.config.dropout_rate, true, r)?;
                }
            }
        }
        h.normalize_rows()
    }

    /// Cosine logits `normalize(features) · normalize(Ŵ)ᵀ / temperature`.
    /// A frozen classifier enters the graph as a constant.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.cols() != self.config.bottleneck_dim {
            return Err(Error::Dimension(format!(
                "classifier expects {} feature columns, got shape {:?}",
                self.config.bottleneck_dim,
                features.shape()
            )));
        }
        let w = if self.classifier_frozen {
            self.classifier.detach()
        } else {
            self.classifier.clone()
        };
        let w = w.normalize_rows()?.transpose()?;
        Ok(features
            .normalize_rows()?
            .matmul(&w)?
            .scale(1.0 / self.config.classifier_temperature))
    }

    pub fn predict_proba(&self, x: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        self.classify(&self.encode(x, rng)?)?.softmax()
    }

    /// Argmax class per row with dropout off; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(x, None)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            classifier_frozen: self.classifier_frozen,
            pretrained: self.pretrained,
            encoder: self
                .encoder
                .iter()
                .map(|l| LayerRecord {
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
            classifier: self.classifier.data().to_vec(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: format!("{}: {e}", path.display()),
        })?;
        file.into_model()
    }

    /// Loads a checkpoint and rejects it unless it was written for `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
        let model = Model::load(path)?;
        if let Some(field) = config_mismatch(&model.config, expected) {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the model config: {field} differs",
                path.display()
            )));
        }
        Ok(model)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn config_mismatch(a: &ModelConfig, b: &ModelConfig) -> Option<&'static str> {
    if a.input_dim != b.input_dim {
        Some("input_dim")
    } else if a.hidden_dims != b.hidden_dims {
        Some("hidden_dims")
    } else if a.bottleneck_dim != b.bottleneck_dim {
        Some("bottleneck_dim")
    } else if a.num_classes != b.num_classes {
        Some("num_classes")
    } else if a.dropout_rate.to_bits() != b.dropout_rate.to_bits() {
        Some("dropout_rate")
    } else if a.classifier_temperature.to_bits() != b.classifier_temperature.to_bits() {
        Some("classifier_temperature")
    } else {
        None
    }
}

const CHECKPOINT_FORMAT: &str = "uidm-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: pretty-printed JSON with the model config echoed and
/// every weight as a flat row-major array. Floats use shortest round-trip
/// formatting, so reloading is bit-exact.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    classifier_frozen: bool,
    pretrained: bool,
    encoder: Vec<LayerRecord>,
    classifier: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl CheckpointFile {
    fn into_model(self) -> Result<Model> {
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        if self.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if dims.len() != self.encoder.len() {
            return Err(bad(format!(
                "config implies {} encoder layers, file has {}",
                dims.len(),
                self.encoder.len()
            )));
        }
        let mut encoder = Vec::with_capacity(dims.len());
        for (i, ((fan_in, fan_out), rec)) in dims.into_iter().zip(self.encoder).enumerate() {
            if rec.weight.len() != fan_in * fan_out || rec.bias.len() != fan_out {
                return Err(bad(format!("encoder layer {i} has the wrong size")));
            }
            encoder.push(Linear {
                weight: Tensor::param(rec.weight, &[fan_in, fan_out])?,
                bias: Tensor::param(rec.bias, &[fan_out])?,
            });
        }
        let (k, h) = (self.config.num_classes, self.config.bottleneck_dim);
        if self.classifier.len() != k * h {
            return Err(bad("classifier has the wrong size".into()));
        }
        Ok(Model {
            classifier: Tensor::param(self.classifier, &[k, h])?,
            config: self.config,
            encoder,
            classifier_frozen: self.classifier_frozen,
            pretrained: self.pretrained,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::constant(data, &[n, d]).unwrap()
    }

    #[test]
    fn empty_hidden_dims_gives_single_layer() {
        let mut cfg = ModelConfig::new(3, 2);
        cfg.hidden_dims.clear();
        let m = Model::init(&cfg, &mut seeded_rng(0)).unwrap();
        assert_eq!(m.encoder_layers().len(), 1);
        assert_eq!(m.encoder_layers()[0].weight.shape(), &[3, 32]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::new(2, 4);
        let a = Model::init(&cfg, &mut seeded_rng(42)).unwrap();
        let b = Model::init(&cfg, &mut seeded_rng(42)).unwrap();
        for ((_, p), (_, q)) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(p.data(), q.data());
        }
        for layer in a.encoder_layers() {
            let (fi, fo) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let bound = init_bound(fi, fo);
            assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
        assert!(!a.classifier_frozen());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = ModelConfig::new(2, 2);
        cfg.dropout_rate = 1.0;
        assert!(matches!(Model::init(&cfg, &mut seeded_rng(0)), Err(Error::Config(_))));
        let mut cfg = ModelConfig::new(2, 2);
        cfg.classifier_temperature = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic_and_normalized() {
        let m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(1)).unwrap();
        let x = random_input(20, 2, 2);
        let a = m.encode(&x, None).unwrap();
        let b = m.encode(&x, None).unwrap();
        assert_eq!(a.data(), b.data());
        for i in 0..a.rows() {
            let n: f64 = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(1)).unwrap();
        let x = random_input(4, 3, 0);
        assert!(matches!(m.encode(&x, None), Err(Error::Dimension(_))));
        let f = random_input(4, 5, 0);
        assert!(matches!(m.classify(&f), Err(Error::Dimension(_))));
    }

    #[test]
    fn stochastic_encodes_differ() {
        let m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(1)).unwrap();
        let x = random_input(8, 2, 3);
        let mut rng = seeded_rng(4);
        let outs: Vec<Vec<f64>> = (0..5)
            .map(|_| m.encode(&x, Some(&mut rng)).unwrap().data().to_vec())
            .collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn aligned_feature_wins_and_scale_invariance() {
        let m = Model::init(&ModelConfig::new(2, 4), &mut seeded_rng(5)).unwrap();
        let w = m.classifier_weight().normalize_rows().unwrap();
        for k in 0..4 {
            let f = Tensor::from_rows(&[w.row(k)]).unwrap();
            let logits = m.classify(&f).unwrap();
            let best = argmax(logits.row(0));
            assert_eq!(best, k);
            let top = logits.row(0)[k];
            assert!(logits.row(0).iter().enumerate().all(|(j, &v)| j == k || v < top));
        }
        let f = random_input(10, 32, 6);
        let base = m.classify(&f).unwrap();
        let scaled = m.classify(&f.scale(37.5)).unwrap();
        for i in 0..10 {
            assert_eq!(argmax(base.row(i)), argmax(scaled.row(i)));
        }
    }

    #[test]
    fn lower_temperature_is_more_confident() {
        let mut cfg = ModelConfig::new(2, 4);
        let sharp = Model::init(&cfg, &mut seeded_rng(8)).unwrap();
        cfg.classifier_temperature = 1.0;
        let soft = Model::init(&cfg, &mut seeded_rng(8)).unwrap();
        let f = random_input(16, 32, 9);
        let ps = sharp.classify(&f).unwrap().softmax().unwrap();
        let pt = soft.classify(&f).unwrap().softmax().unwrap();
        for i in 0..16 {
            let k = argmax(ps.row(i));
            assert!(ps.row(i)[k] > pt.row(i)[k]);
        }
    }

    #[test]
    fn fresh_model_predicts_near_uniform_on_average() {
        // One random init and one random input per sample: by symmetry of the
        // initialization every class has expected probability 1/K.
        let cfg = ModelConfig::new(2, 4);
        let mut mean = [0.0; 4];
        for s in 0..1000 {
            let m = Model::init(&cfg, &mut seeded_rng(10_000 + s)).unwrap();
            let p = m.predict_proba(&random_input(1, 2, s), None).unwrap();
            assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..4 {
                mean[k] += p.row(0)[k] / 1000.0;
            }
        }
        for m in mean {
            assert!((m - 0.25).abs() < 0.1, "class mean {m}");
        }
    }

    #[test]
    fn frozen_classifier_gets_no_gradient() {
        let mut m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(1)).unwrap();
        m.freeze_classifier();
        let x = random_input(4, 2, 0);
        m.predict_proba(&x, None).unwrap().sum().backward().unwrap();
        assert!(m.classifier_weight().grad().is_none());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(12)).unwrap();
        m.freeze_classifier();
        m.save(&path).unwrap();
        let back = Model::load_expecting(&path, m.config()).unwrap();
        assert!(back.classifier_frozen());
        for ((_, p), (_, q)) in m.parameters().iter().zip(back.parameters()) {
            let pb: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
        let x = random_input(16, 2, 13);
        let a = m.predict_proba(&x, None).unwrap();
        let b = back.predict_proba(&x, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(12)).unwrap();
        m.save(&path).unwrap();
        let other = ModelConfig::new(2, 4);
        match Model::load_expecting(&path, &other) {
            Err(Error::Config(msg)) => assert!(msg.contains("num_classes")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(matches!(
            Model::load(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
        let corrupt = dir.path().join("bad.json");
        fs::write(&corrupt, "{ not json").unwrap();
        assert!(matches!(Model::load(&corrupt), Err(Error::Format { .. })));
    }

    #[test]
    fn clones_do_not_share_gradients() {
        let m = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(0)).unwrap();
        let c = m.clone();
        let x = Tensor::from_rows(&[[0.5, -0.5]]).unwrap();
        m.predict_proba(&x, None).unwrap().log().sum().backward().unwrap();
        for ((_, a), (_, b)) in m.parameters().iter().zip(c.parameters()) {
            assert_eq!(a.data(), b.data());
            assert!(a.grad().is_some());
            assert!(b.grad().is_none());
        }
    }
}
