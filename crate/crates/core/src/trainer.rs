//! Deterministic fine-tuning: batching, AdamW, plateau LR schedule,
//! checkpoints, and JSON-Lines metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align;
use crate::autograd::Mat;
use crate::dataset::{corpus_vocab, Dataset};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::model::{EncoderCache, Model, ModelConfig, TrainSample};
use crate::params::ParamStore;
use crate::synthcohort::{write_file, Diagnosis};
use crate::textkit::{class_prompt, TokenSequence, Vocab};
use crate::vision::normalize_mmse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub patience: usize,
    pub factor: f64,
    /// Minimum validation gain that counts as an improvement.
    pub threshold: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Train on full reports; otherwise on bare class prompts.
    pub report_supervision: bool,
    pub classes: Vec<Diagnosis>,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.01,
            lambda: align::DEFAULT_LAMBDA,
            patience: 5,
            factor: 0.1,
            threshold: 1e-4,
            grad_clip: 1.0,
            seed,
            report_supervision: true,
            classes: Diagnosis::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("plateau patience must be >= 1"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config(format!(
                "plateau factor {} must be in (0, 1)",
                self.factor
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) || !(self.threshold >= 0.0) {
            return Err(Error::config(
                "weight decay, clip norm and threshold must be non-negative",
            ));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        Ok(())
    }
}

/// Model and optimization settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            model: ModelConfig::desk(0),
            train: TrainConfig::desk(seed),
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            model: ModelConfig::paper(0),
            train: TrainConfig::desk(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        // vocab size is data-dependent and filled in at training time
        let mut m = self.model.clone();
        m.text.vocab_size = m.text.vocab_size.max(3);
        m.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

/// Biases and the temperature are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name == align::TAU)
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every trainable parameter that has a gradient. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            if self.weight_decay > 0.0 && decays(name) {
                p.value *= 1.0 - lr * self.weight_decay;
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Scale gradients so their global l2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.values_mut() {
            *g *= s;
        }
    }
    norm
}

/// Reduce-on-plateau for a metric that should increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: Option<f64>,
    bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// Record one epoch's metric; returns true when the LR was reduced.
    pub fn step(&mut self, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b + self.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.reductions += 1;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub cl_loss: f64,
    pub mmse_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

const MANIFEST: &str = "manifest.json";
const MANIFEST_DIGEST: &str = "manifest.sha256";
const VOCAB: &str = "vocab.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
    pub sha256: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub metrics: Option<EpochMetrics>,
    pub experiment: Option<ExperimentConfig>,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

fn io_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write `model` as `manifest.json`, `manifest.sha256`, `vocab.json`, and one
/// little-endian f64 file per parameter.
pub fn save_checkpoint(
    model: &Model,
    dir: &Path,
    epoch: usize,
    metrics: Option<&EpochMetrics>,
    experiment: Option<&ExperimentConfig>,
) -> Result<()> {
    io_dir(&dir.join("params"))?;
    let mut params = Vec::with_capacity(model.store.len());
    for (name, p) in model.store.iter() {
        let bytes: Vec<u8> = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = format!("params/{name}.f64");
        write_file(&dir.join(&file), &bytes)?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: [p.value.nrows(), p.value.ncols()],
            file,
            sha256: sha256_hex(&bytes),
            trainable: p.trainable,
        });
    }
    let config_hash = match experiment {
        Some(e) => e.hash()?,
        None => sha256_hex(&serde_json::to_vec(&model.config)?),
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash,
        epoch,
        metrics: metrics.cloned(),
        experiment: experiment.cloned(),
        model: model.config.clone(),
        params,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST), &bytes)?;
    write_file(&dir.join(MANIFEST_DIGEST), sha256_hex(&bytes).as_bytes())?;
    model.vocab.save(&dir.join(VOCAB))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load and verify a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let bytes = read(&dir.join(MANIFEST))?;
    let digest = read(&dir.join(MANIFEST_DIGEST))?;
    if digest != sha256_hex(&bytes).as_bytes() {
        return Err(corrupt("manifest digest mismatch"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let vocab = Vocab::load(&dir.join(VOCAB)).map_err(|e| corrupt(format!("vocab: {e}")))?;
    let mut model = Model::new(manifest.model.clone(), vocab, 0).map_err(|e| corrupt(e.to_string()))?;
    if manifest.params.len() != model.store.len() {
        return Err(corrupt(format!(
            "manifest lists {} parameters, model expects {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let Some(p) = model.store.get_mut(&entry.name) else {
            return Err(corrupt(format!("unexpected parameter {}", entry.name)));
        };
        let shape = [p.value.nrows(), p.value.ncols()];
        if shape != entry.shape || p.trainable != entry.trainable {
            return Err(corrupt(format!(
                "parameter {} does not match the model layout",
                entry.name
            )));
        }
        let raw = read(&dir.join(&entry.file))?;
        if raw.len() != shape[0] * shape[1] * 8 || sha256_hex(&raw) != entry.sha256 {
            return Err(corrupt(format!("parameter file {} failed verification", entry.file)));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        p.value = Mat::from_shape_vec((shape[0], shape[1]), values).expect("length checked");
    }
    Ok((model, manifest))
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    /// Parameters after the last epoch.
    pub final_store: ParamStore,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub optimizer_steps: u64,
}

/// Training texts, one per scan.
fn training_texts(model: &Model, data: &Dataset, reports: bool) -> Vec<TokenSequence> {
    data.scans
        .iter()
        .map(|s| {
            if reports {
                model.tokenize(&s.report)
            } else {
                model.tokenize(&class_prompt(s.diagnosis()).text)
            }
        })
        .collect()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::synthcohort::splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9))
}

/// Fresh model for `config` with a vocabulary built from `train_data`.
pub fn init_model(config: &ExperimentConfig, train_data: &Dataset) -> Result<Model> {
    let vocab = corpus_vocab(train_data)?;
    let mut mc = config.model.clone();
    mc.text.vocab_size = vocab.len();
    Model::new(mc, vocab, config.train.seed)
}

/// Train from a fresh model. Writes metrics, the resolved config, and the
/// best checkpoint under `out` when given.
pub fn train(
    config: &ExperimentConfig,
    train_data: &Dataset,
    val: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = init_model(config, train_data)?;
    train_model(config, model, train_data, val, out)
}

pub fn train_model(
    config: &ExperimentConfig,
    mut model: Model,
    train_data: &Dataset,
    val: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let tc = &config.train;
    if train_data.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut metrics_file = match out {
        Some(dir) => {
            io_dir(dir)?;
            write_file(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(config)?)?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let texts = training_texts(&model, train_data, tc.report_supervision);
    let targets: Vec<f64> = train_data
        .scans
        .iter()
        .map(|s| normalize_mmse(s.mmse() as f64))
        .collect();
    let mut opt = AdamW::new(tc.weight_decay);
    let mut sched = PlateauScheduler::new(tc.lr, tc.factor, tc.patience, tc.threshold);
    let mut cache = EncoderCache::new();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(tc.seed, epoch)));
        let lr = sched.lr;
        let (mut sum_total, mut sum_cl, mut sum_mmse, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| TrainSample {
                    key: train_data.scans[i].key,
                    volume: &train_data.scans[i].volume,
                    text: &texts[i],
                    target: targets[i],
                })
                .collect();
            let mut res = model.batch_loss(&batch, tc.lambda, &mut cache)?;
            let finite = res.loss.total.is_finite() && res.grads.values().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                let dump = match out {
                    Some(dir) => {
                        let path = dir.join("nan_dump");
                        save_checkpoint(&model, &path, epoch, None, Some(config))?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss { epoch, step, dump });
            }
            clip_global_norm(&mut res.grads, tc.grad_clip);
            opt.step(&mut model.store, &res.grads, lr);
            align::clamp_tau(&mut model.store);
            sum_total += res.loss.total;
            sum_cl += res.loss.cl;
            sum_mmse += res.loss.mmse;
            batches += 1;
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            evaluate(&model, val, &tc.classes)?.accuracy
        };
        let m = EpochMetrics {
            epoch,
            train_loss: sum_total / batches as f64,
            cl_loss: sum_cl / batches as f64,
            mmse_loss: sum_mmse / batches as f64,
            val_acc,
            lr,
        };
        if let Some((f, path)) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_acc > *b) {
            if let Some(dir) = out {
                let snapshot = Model {
                    config: model.config.clone(),
                    store: model.store.clone(),
                    vocab: model.vocab.clone(),
                };
                save_checkpoint(&snapshot, &dir.join(CHECKPOINT_DIR), epoch, Some(&m), Some(config))?;
            }
            best = Some((val_acc, epoch, model.store.clone()));
        }
        sched.step(val_acc);
        history.push(m);
    }

    let final_store = model.store.clone();
    let (best_val_acc, best_epoch) = match best {
        Some((acc, epoch, store)) => {
            model.store = store;
            (acc, epoch)
        }
        None => {
            if let Some(dir) = out {
                save_checkpoint(&model, &dir.join(CHECKPOINT_DIR), 0, None, Some(config))?;
            }
            (0.0, 0)
        }
    };
    Ok(TrainOutcome {
        model,
        final_store,
        history,
        best_epoch,
        best_val_acc,
        optimizer_steps: opt.steps(),
    })
}

/// Path of the checkpoint directory inside a training output directory, or
/// the path itself when it already is one.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.join(MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_reduces_once_after_patience() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 5, 1e-4);
        let curve = [0.3, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.6, 0.7];
        let mut reduced_at = Vec::new();
        for (e, &v) in curve.iter().enumerate() {
            if s.step(v) {
                reduced_at.push(e + 1);
            }
        }
        assert_eq!(reduced_at, vec![8]);
        assert!((s.lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn sub_threshold_gain_is_stagnation() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2, 1e-4);
        assert!(!s.step(0.5));
        assert!(!s.step(0.50005));
        assert!(s.step(0.50009));
    }

    #[test]
    fn adamw_skips_frozen_and_decays_weights_only() {
        let mut store = ParamStore::new();
        store.insert("a.w", Mat::from_elem((1, 2), 1.0), true);
        store.insert("a.b", Mat::from_elem((1, 2), 1.0), true);
        store.insert("f.w", Mat::from_elem((1, 2), 1.0), false);
        let mut grads = BTreeMap::new();
        for n in ["a.w", "a.b", "f.w"] {
            grads.insert(n.to_string(), Mat::zeros((1, 2)));
        }
        let mut opt = AdamW::new(0.5);
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.value("a.w")[[0, 0]], 0.95);
        assert_eq!(store.value("a.b")[[0, 0]], 1.0);
        assert_eq!(store.value("f.w")[[0, 0]], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p.w", Mat::from_elem((1, 1), 0.0), true);
        let grads = BTreeMap::from([("p.w".to_string(), Mat::from_elem((1, 1), 3.0))]);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut store, &grads, 0.01);
        assert!((store.value("p.w")[[0, 0]] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Mat::from_elem((1, 1), 3.0)),
            ("b".to_string(), Mat::from_elem((1, 1), 4.0)),
        ]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][[0, 0]] - 0.6).abs() < 1e-9);
        let mut small = BTreeMap::from([("a".to_string(), Mat::from_elem((1, 1), 0.5))]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"][[0, 0]], 0.5);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::desk(0);
        assert!(c.validate().is_ok());
        c.train.factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk(0);
        c.train.patience = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk(0);
        c.train.classes = vec![Diagnosis::AD];
        assert!(c.validate().is_err());
    }

    #[test]
    fn equal_configs_hash_equal() {
        let a = ExperimentConfig::desk(3);
        let b = ExperimentConfig::desk(3);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), ExperimentConfig::desk(4).hash().unwrap());
    }
}
