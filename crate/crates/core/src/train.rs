//! Training loop, loss wiring, checkpointing, and deterministic runs.
//!
//! One Adam step per stack (batch size 1), teacher forcing by default,
//! free-running validation. Everything downstream of (seed, config, dataset)
//! is a pure function; checkpoints from identical inputs are byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::GradGraph;
use crate::nn::{
    forward_pass, AttentionKind, DecodeMode, GlobalAttnParams, GlobalHead, GruParams, HeadParams,
    Model, ModelConfig, ModelParams, SliceEncoderParams, ToeplitzHead, ToeplitzKernel,
    NUM_CLASSES,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::synth::{derive_seed, StackSample};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub teacher_forcing: bool,
    /// Fraction of the dataset held out for per-epoch validation.
    pub val_frac: f64,
    /// Global gradient-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            teacher_forcing: true,
            val_frac: 0.1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::Validation(format!(
                "val_frac must lie in (0, 1), got {}",
                self.val_frac
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Validation("lr must be finite and non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Validation("grad_clip must be finite and positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-epoch training curve. Validation entries are `None` when the split
/// left no validation stacks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<Option<f64>>,
    pub val_accuracy: Vec<Option<f64>>,
}

/// Trained model plus the configuration needed to reproduce it.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
    pub epochs: usize,
}

impl ModelCheckpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.clone(), self.params.clone())
    }

    /// Fail when the checkpoint was trained with a different attention kind
    /// than the caller asked for.
    pub fn expect_attention(&self, kind: AttentionKind) -> Result<()> {
        if self.config.attention != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model but {} was requested",
                self.config.attention, kind
            )));
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn glorot_gru(rng: &mut ChaCha12Rng, input: usize, hidden: usize) -> GruParams {
    GruParams {
        w_z: glorot(rng, input, hidden),
        w_r: glorot(rng, input, hidden),
        w_h: glorot(rng, input, hidden),
        u_z: glorot(rng, hidden, hidden),
        u_r: glorot(rng, hidden, hidden),
        u_h: glorot(rng, hidden, hidden),
        b_z: Tensor::zeros(&[1, hidden]),
        b_r: Tensor::zeros(&[1, hidden]),
        b_h: Tensor::zeros(&[1, hidden]),
    }
}

/// Glorot-uniform weights (scale sqrt(6/(fan_in+fan_out))), zero biases,
/// zero Toeplitz logits (a uniform kernel). Deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let enc = cfg.enc_dim();
    let feed = cfg.feed_dim();
    let slice = SliceEncoderParams {
        w: glorot(&mut rng, cfg.f_raw, cfg.f_enc),
        b: Tensor::zeros(&[1, cfg.f_enc]),
    };
    let enc_fwd = glorot_gru(&mut rng, cfg.f_enc, cfg.h_enc);
    let enc_bwd = glorot_gru(&mut rng, cfg.f_enc, cfg.h_enc);
    let head = match cfg.attention {
        AttentionKind::Global => HeadParams::Global(GlobalHead {
            attn: GlobalAttnParams {
                w: glorot(&mut rng, cfg.h_dec, cfg.h_dec),
                u: glorot(&mut rng, enc, cfg.h_dec),
                b: Tensor::zeros(&[1, cfg.h_dec]),
                v: glorot(&mut rng, cfg.h_dec, 1),
            },
            gru: glorot_gru(&mut rng, enc + feed, cfg.h_dec),
            out_w: glorot(&mut rng, cfg.h_dec, NUM_CLASSES),
            out_b: Tensor::zeros(&[1, NUM_CLASSES]),
        }),
        AttentionKind::Toeplitz => HeadParams::Toeplitz(ToeplitzHead {
            kernel: ToeplitzKernel::uniform(cfg.d),
            out_w: glorot(&mut rng, enc + feed, NUM_CLASSES),
            out_b: Tensor::zeros(&[1, NUM_CLASSES]),
        }),
    };
    Ok(ModelParams { slice, enc_fwd, enc_bwd, head })
}

/// Train a fresh model on `dataset`. The split and the per-epoch visit order
/// are derived from the training seed; returns the checkpoint and history.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &[StackSample],
) -> Result<(ModelCheckpoint, TrainHistory)> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    for stack in dataset {
        stack.validate()?;
    }

    let mut params = init_params(model_cfg, train_cfg.seed)?;
    let adam_cfg = AdamConfig {
        lr: train_cfg.lr,
        beta1: train_cfg.beta1,
        beta2: train_cfg.beta2,
        epsilon: train_cfg.adam_eps,
    };
    let mut adam = {
        let refs: Vec<&Tensor> = params.named().into_iter().map(|(_, t)| t).collect();
        AdamState::new(&refs)
    };

    // count-stratified split on a seed-shuffled order
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut split_rng = ChaCha12Rng::seed_from_u64(derive_seed(train_cfg.seed, u64::MAX));
    order.shuffle(&mut split_rng);
    let mut val_count = ((dataset.len() as f64) * train_cfg.val_frac).round() as usize;
    if val_count >= dataset.len() {
        val_count = dataset.len() - 1;
    }
    let mut val_idx: Vec<usize> = order[..val_count].to_vec();
    val_idx.sort_unstable();
    let train_idx: Vec<usize> = order[val_count..].to_vec();

    let mode = if train_cfg.teacher_forcing {
        DecodeMode::TeacherForcing
    } else {
        DecodeMode::FreeRunning
    };

    let mut history = TrainHistory::default();
    for epoch in 0..train_cfg.epochs {
        let mut epoch_order = train_idx.clone();
        let mut epoch_rng = ChaCha12Rng::seed_from_u64(derive_seed(train_cfg.seed, epoch as u64));
        epoch_order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        for &idx in &epoch_order {
            let stack = &dataset[idx];
            let mut g = GradGraph::new();
            let vars = params.register(&mut g);
            let out = forward_pass(model_cfg, &mut g, &vars, stack, mode)?;
            let loss = g.cross_entropy(out.logits, &stack.labels)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence { epoch, stack_id: stack.id.clone() });
            }
            loss_sum += loss_val;
            g.backward(loss)?;

            let mut grads: Vec<Tensor> = vars
                .all()
                .into_iter()
                .map(|v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
                .collect();
            if let Some(clip) = train_cfg.grad_clip {
                clip_gradients(&mut grads, clip);
            }
            let mut tensors = params.tensors_mut();
            adam_step(&mut tensors, &grads, &mut adam, &adam_cfg)?;
        }
        history.train_loss.push(loss_sum / epoch_order.len().max(1) as f64);

        if val_idx.is_empty() {
            history.val_loss.push(None);
            history.val_accuracy.push(None);
        } else {
            let mut val_loss_sum = 0.0;
            let mut correct = 0usize;
            let mut total = 0usize;
            for &idx in &val_idx {
                let stack = &dataset[idx];
                let mut g = GradGraph::new();
                let vars = params.register(&mut g);
                let out = forward_pass(model_cfg, &mut g, &vars, stack, DecodeMode::FreeRunning)?;
                let loss = g.cross_entropy(out.logits, &stack.labels)?;
                val_loss_sum += g.value(loss).item();
                let logits = g.value(out.logits);
                for (r, &truth) in stack.labels.iter().enumerate() {
                    if crate::nn::argmax_lowest(logits.row(r)) == truth {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            history.val_loss.push(Some(val_loss_sum / val_idx.len() as f64));
            history.val_accuracy.push(Some(correct as f64 / total as f64));
        }
    }

    let ckpt = ModelCheckpoint {
        config: model_cfg.clone(),
        params,
        seed: train_cfg.seed,
        epochs: train_cfg.epochs,
    };
    Ok((ckpt, history))
}

fn clip_gradients(grads: &mut [Tensor], clip: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointPayload {
    config: ModelConfig,
    seed: u64,
    epochs: usize,
    tensors: Vec<NamedTensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    sha256: String,
}

/// Two-line container: a header with format version and payload digest,
/// then the JSON payload itself. Floats serialize losslessly.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let tensors = ckpt
        .params
        .named()
        .into_iter()
        .map(|(name, t)| NamedTensorRecord {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let payload = CheckpointPayload {
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        epochs: ckpt.epochs,
        tensors,
    };
    let payload_json = serde_json::to_string(&payload)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize checkpoint: {e}")))?;
    let digest = hex_digest(payload_json.as_bytes());
    let header = CheckpointHeader { format_version: CHECKPOINT_FORMAT_VERSION, sha256: digest };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize header: {e}")))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header_json.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    file.write_all(payload_json.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Load and verify a checkpoint: format version, payload digest, and
/// parameter names/shapes must all match.
pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header_line, payload_line) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing payload line".into()))?;
    let payload_line = payload_line.strip_suffix('\n').unwrap_or(payload_line);
    let header: CheckpointHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let digest = hex_digest(payload_line.as_bytes());
    if digest != header.sha256 {
        return Err(Error::Checkpoint("integrity check failed: payload digest mismatch".into()));
    }
    let payload: CheckpointPayload = serde_json::from_str(payload_line)
        .map_err(|e| Error::Checkpoint(format!("malformed payload: {e}")))?;

    let mut params = ModelParams::zeros(&payload.config);
    {
        let expected = params.named();
        if expected.len() != payload.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, config implies {}",
                payload.tensors.len(),
                expected.len()
            )));
        }
        for ((name, tensor), record) in expected.iter().zip(&payload.tensors) {
            if &record.name != name {
                return Err(Error::Checkpoint(format!(
                    "unexpected tensor '{}' (expected '{name}')",
                    record.name
                )));
            }
            if record.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    record.shape,
                    tensor.shape()
                )));
            }
        }
    }
    for (slot, record) in params.tensors_mut().into_iter().zip(&payload.tensors) {
        *slot = Tensor::new(record.shape.clone(), record.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", record.name)))?;
    }
    Ok(ModelCheckpoint {
        config: payload.config,
        params,
        seed: payload.seed,
        epochs: payload.epochs,
    })
}
