//! SGD training loop, binary evaluation metrics and checkpoint I/O.

use std::collections::HashMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::abm::AbmConfig;
use crate::error::{Error, Result};
use crate::imagery::{load_color_raster, preprocess, DatasetManifest, Split};
use crate::model::{Backbone, ClassScores, Classifier, Label, Normalization, TinyBackbone, TinyBackboneConfig, TrainMode};
use crate::nn::{softmax, FeatureTensor, Parameterized};
use crate::raster::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            learning_rate: 0.001,
            momentum: 0.9,
            mode: TrainMode::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "training needs epochs, batch_size and learning_rate > 0 and momentum in [0, 1): {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: FeatureTensor,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Binary classification metrics with `hotspot` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryMetrics {
    /// Ratios with an empty denominator are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
        }
    }

    /// From (predicted, actual) pairs.
    pub fn from_predictions(pairs: &[(Label, Label)]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for &(p, a) in pairs {
            match (p, a) {
                (Label::Hotspot, Label::Hotspot) => tp += 1,
                (Label::Hotspot, Label::NonHotspot) => fp += 1,
                (Label::NonHotspot, Label::NonHotspot) => tn += 1,
                (Label::NonHotspot, Label::Hotspot) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }
}

fn cross_entropy(logits: &[f64], label: Label) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[label.index()].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[label.index()] -= 1.0;
    (loss, grad)
}

pub fn predict<B: Backbone>(model: &Classifier<B>, samples: &[Sample]) -> Result<Vec<ClassScores>> {
    samples.iter().map(|s| model.classify(&s.input)).collect()
}

pub fn evaluate<B: Backbone>(model: &Classifier<B>, samples: &[Sample]) -> Result<BinaryMetrics> {
    let pairs: Vec<(Label, Label)> = predict(model, samples)?
        .into_iter()
        .zip(samples)
        .map(|(s, x)| (s.predicted(), x.label))
        .collect();
    Ok(BinaryMetrics::from_predictions(&pairs))
}

/// Mean cross-entropy and accuracy.
pub fn loss_and_accuracy<B: Backbone>(model: &Classifier<B>, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty split"));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for s in samples {
        let logits = model.logits(&s.input)?;
        loss += cross_entropy(&logits, s.label).0;
        if ClassScores::from_logits(&logits).predicted() == s.label {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn buffers(p: &impl Parameterized) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, b| out.push(b.to_vec()));
    out
}

/// Mini-batch SGD with momentum (`v ← μv + g; θ ← θ − ηv`) on the mean
/// cross-entropy of the softmax output. Returns one log entry per epoch;
/// `on_epoch` may stop training early by returning `Break`.
pub fn train<B: Backbone>(
    model: &mut Classifier<B>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    for s in train_set.iter().chain(val_set) {
        model.check_input(&s.input)?;
        if !s.input.is_finite() {
            return Err(Error::invalid("training input contains non-finite values"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = buffers(&model.zeros_like());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                // Inputs were validated up front, so a failure here means the
                // parameters have blown up.
                let cache = model.forward_cached(&train_set[i].input).map_err(|_| Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: f64::NAN,
                })?;
                let (loss, g_logits) = cross_entropy(&cache.logits, train_set[i].label);
                batch_loss += loss;
                model.backward(&cache, &g_logits, &mut grad, cfg.mode);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let grads = buffers(&grad);
            let mut k = 0usize;
            let mut finite = true;
            model.visit_mut("", &mut |name, params| {
                if cfg.mode.is_trainable(name) {
                    let (v, g) = (&mut velocity[k], &grads[k]);
                    for j in 0..params.len() {
                        v[j] = cfg.momentum * v[j] + g[j] * scale;
                        params[j] -= cfg.learning_rate * v[j];
                    }
                    finite &= params.iter().all(|p| p.is_finite());
                }
                k += 1;
            });
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / batch.len() as f64,
                });
            }
        }
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = loss_and_accuracy(model, val_set)?;
            (Some(l), Some(a))
        };
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
            val_acc,
        };
        let flow = on_epoch(&log);
        logs.push(log);
        if flow.is_break() {
            break;
        }
    }
    Ok(logs)
}

/// `epoch,train_loss,val_loss,val_acc`; missing validation values are blank.
pub fn write_training_log<W: Write>(writer: W, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_loss", "val_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for l in logs {
        w.write_record([l.epoch.to_string(), l.train_loss.to_string(), opt(l.val_loss), opt(l.val_acc)])?;
    }
    w.flush()?;
    Ok(())
}

/// Load and preprocess every entry of `split`, resolving paths against `root`.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    root: &Path,
    norm: &Normalization,
    input_size: usize,
) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| {
            let img = load_color_raster(&root.join(&e.path))?;
            Ok(Sample {
                input: preprocess(&img, norm, input_size),
                label: e.label,
            })
        })
        .collect()
}

/// Sidecar stored next to the parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub backbone: String,
    pub widths: Vec<usize>,
    pub abm: AbmConfig,
    pub input_size: usize,
    pub normalization: Normalization,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(model: &Classifier<TinyBackbone>, seed: u64, path: &Path) -> Result<()> {
    let params = model.named_params();
    let bytes: Vec<(String, Vec<u8>)> = params
        .iter()
        .map(|(n, v)| (n.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .zip(&params)
        .map(|((n, b), (_, v))| {
            TensorView::new(Dtype::F64, vec![v.len()], b)
                .map(|t| (n.clone(), t))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = safetensors::tensor::serialize(views, &None).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &data)?;
    let meta = CheckpointMeta {
        backbone: model.backbone.name().to_string(),
        widths: model.backbone.config.widths.clone(),
        abm: model.abm_config,
        input_size: model.input_size,
        normalization: model.backbone.normalization(),
        seed,
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier<TinyBackbone>, CheckpointMeta)> {
    let missing = |p: &Path| Error::MissingArtifact {
        path: p.to_path_buf(),
        hint: "produce it with `train`".into(),
    };
    let side = sidecar_path(path);
    if !path.is_file() {
        return Err(missing(path));
    }
    if !side.is_file() {
        return Err(missing(&side));
    }
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
    if meta.backbone != "tiny" {
        return Err(Error::Checkpoint(format!("unsupported backbone `{}`", meta.backbone)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = TinyBackbone::new(TinyBackboneConfig { widths: meta.widths.clone() }, &mut rng)?;
    let mut model = Classifier::new(backbone, meta.abm, meta.input_size, &mut rng)?;
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut loaded: HashMap<String, Vec<f64>> = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("{name}: expected F64")));
        }
        let v = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(name, v);
    }
    let expected = model.named_params().len();
    if loaded.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", loaded.len())));
    }
    let mut problem = None;
    model.visit_mut("", &mut |name, params| match loaded.get(name) {
        Some(v) if v.len() == params.len() => params.copy_from_slice(v),
        Some(v) => problem = Some(format!("{name}: expected {} values, found {}", params.len(), v.len())),
        None => problem = Some(format!("{name}: missing")),
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    Ok((model, meta))
}
