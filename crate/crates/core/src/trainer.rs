//! Adam optimization, the epoch loop with validation-based model retention,
//! and the versioned binary checkpoint format.

use serde::{Deserialize, Serialize};

use crate::data::{batches, PostResponsePair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelDims, ModelParams};
use crate::objectives::{joint_loss, LossOptions, LossVariant};
use crate::rng;
use crate::scalar::{FloatWidth, Scalar};
use crate::selector::SelectionMode;
use crate::vocab::Vocab;

fn default_matching_weight() -> f64 {
    1.0
}

fn default_clip_norm() -> Option<f64> {
    Some(5.0)
}

/// Every hyperparameter, seed, and loss-variant switch. Serializes as flat
/// JSON for config files and checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub k: usize,
    pub vocab_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub selection_mode: SelectionMode,
    pub max_len: usize,
    pub float_width: FloatWidth,
    /// Weight on the matching loss; `0.0` disables it.
    #[serde(default = "default_matching_weight")]
    pub matching_weight: f64,
    /// Global gradient-norm clip threshold; `null` disables clipping.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
    /// Per-epoch multiplicative temperature decay; unset leaves tau fixed.
    #[serde(default)]
    pub tau_anneal_rate: Option<f64>,
    /// Lower bound for annealed tau.
    #[serde(default)]
    pub tau_floor: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale profile: small enough to train in minutes on one core.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            hidden_size: 64,
            embed_size: 32,
            k: 6,
            vocab_max: 200,
            batch_size: 32,
            learning_rate: 2e-3,
            epochs: 30,
            tau: 0.67,
            seed: 7,
            loss_variant: LossVariant::Standard,
            selection_mode: SelectionMode::Hard,
            max_len: 50,
            float_width: FloatWidth::F32,
            matching_weight: 1.0,
            clip_norm: Some(5.0),
            tau_anneal_rate: None,
            tau_floor: None,
        }
    }

    /// Hyperparameters at the published scale.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            hidden_size: 1024,
            embed_size: 300,
            k: 20,
            vocab_max: 40_000,
            batch_size: 128,
            learning_rate: 2e-4,
            epochs: 10,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("embed_size", self.embed_size),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_max <= 4 {
            return Err(Error::BadConfig("vocab_max must exceed the 4 reserved ids".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::BadConfig("tau must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::BadConfig("learning_rate must be positive".into()));
        }
        if self.matching_weight < 0.0 {
            return Err(Error::BadConfig("matching_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn dims_for(&self, vocab: &Vocab) -> ModelDims {
        ModelDims {
            vocab: vocab.size(),
            embed: self.embed_size,
            hidden: self.hidden_size,
            mappings: self.k,
        }
    }

    pub fn loss_options(&self, tau: f64) -> LossOptions {
        LossOptions {
            tau,
            selection_mode: self.selection_mode,
            variant: self.loss_variant,
            matching_weight: self.matching_weight,
        }
    }

    /// Temperature for one epoch under the (default off) annealing hook.
    pub fn epoch_tau(&self, epoch: usize) -> f64 {
        match self.tau_anneal_rate {
            Some(rate) => {
                let floor = self.tau_floor.unwrap_or(0.1);
                (self.tau * rate.powi(epoch as i32)).max(floor)
            }
            None => self.tau,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

// ---- Adam ------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        AdamState {
            m: params.params().iter().map(|p| vec![S::zero(); p.values.len()]).collect(),
            v: params.params().iter().map(|p| vec![S::zero(); p.values.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Every parameter must have a
/// gradient recorded since the last `zero_grads`.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    if let Some(p) = params.params().iter().find(|p| !p.grad_set) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - BETA1.powi(t);
    let corr2 = 1.0 - BETA2.powi(t);
    let b1 = S::from_f64(BETA1);
    let b2 = S::from_f64(BETA2);
    let one_minus_b1 = S::from_f64(1.0 - BETA1);
    let one_minus_b2 = S::from_f64(1.0 - BETA2);
    let c1 = S::from_f64(1.0 / corr1);
    let c2 = S::from_f64(1.0 / corr2);
    let eps = S::from_f64(ADAM_EPS);
    let step_size = S::from_f64(lr);

    for (pi, p) in params.params_mut().iter_mut().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for i in 0..p.values.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + one_minus_b1 * g;
            v[i] = b2 * v[i] + one_minus_b2 * g * g;
            let m_hat = m[i] * c1;
            let v_hat = v[i] * c2;
            p.values[i] = p.values[i] - step_size * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---- training loop -----------------------------------------------------------

/// Per-epoch log record, one JSON object per line in the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_g: f64,
    pub l_m: f64,
    pub total: f64,
    pub valid_total: f64,
    pub selection_counts: Vec<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub params: ModelParams<S>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

fn params_finite<S: Scalar>(params: &ModelParams<S>) -> bool {
    params
        .params()
        .iter()
        .all(|p| p.values.iter().all(|v| v.is_finite()))
}

/// Evaluate the joint loss over a pair list without touching gradients.
/// Noise streams are freshly seeded so repeated evaluations are identical.
pub fn evaluate_loss<S: Scalar>(
    params: &ModelParams<S>,
    config: &TrainConfig,
    pairs: &[PostResponsePair],
    tau: f64,
    noise_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut gumbel = rng::stream(noise_seed, "valid-gumbel");
    let mut negative = rng::stream(noise_seed, "valid-negative");
    let opts = config.loss_options(tau);
    for batch in batches(pairs, config.batch_size, rng::split_seed(noise_seed, "valid-order"))? {
        let mut g = Graph::<S>::new();
        let refs = params.leaf_into(&mut g, false)?;
        let out = joint_loss(
            &mut g,
            &refs,
            &batch,
            config.hidden_size,
            &opts,
            &mut gumbel,
            &mut negative,
        )?;
        total += out.bundle.total.to_f64() * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// Full training run: Adam over shuffled mini-batches, per-epoch validation,
/// returning the parameters of the best validation epoch. Deterministic for
/// a fixed config (single-threaded).
pub fn train<S: Scalar>(
    config: &TrainConfig,
    vocab: &Vocab,
    train_pairs: &[PostResponsePair],
    valid_pairs: &[PostResponsePair],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train_pairs.is_empty() || valid_pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut params = ModelParams::<S>::init(config.dims_for(vocab), config.seed);
    let mut adam = AdamState::new(&params);
    let mut gumbel = rng::stream(config.seed, "gumbel");
    let mut negative = rng::stream(config.seed, "negative");

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams<S>)> = None;

    for epoch in 0..config.epochs {
        let tau = config.epoch_tau(epoch);
        let opts = config.loss_options(tau);
        let shuffle = rng::split_seed_indexed(config.seed, "shuffle", epoch as u64);

        let mut sum_g = 0.0;
        let mut sum_m = 0.0;
        let mut sum_total = 0.0;
        let mut examples = 0usize;
        let mut selection_counts = vec![0usize; config.k];

        for (batch_idx, batch) in batches(train_pairs, config.batch_size, shuffle)?
            .iter()
            .enumerate()
        {
            if !params_finite(&params) {
                return Err(Error::TrainDiverged { epoch, batch: batch_idx });
            }
            let mut g = Graph::<S>::new();
            let refs = params.leaf_into(&mut g, true)?;
            let out = joint_loss(
                &mut g,
                &refs,
                batch,
                config.hidden_size,
                &opts,
                &mut gumbel,
                &mut negative,
            )?;
            if !out.bundle.total.is_finite() {
                return Err(Error::TrainDiverged { epoch, batch: batch_idx });
            }
            g.backward(out.total_node)?;
            params.accumulate_grads(&g);
            if let Some(limit) = config.clip_norm {
                params.clip_grads(limit);
            }
            adam_step(&mut params, &mut adam, config.learning_rate)?;
            params.zero_grads();

            let n = batch.len() as f64;
            sum_g += out.bundle.l_g.to_f64() * n;
            sum_m += out.bundle.l_m.to_f64() * n;
            sum_total += out.bundle.total.to_f64() * n;
            examples += batch.len();
            for sel in &out.bundle.selections {
                selection_counts[sel.z] += 1;
            }
        }

        let valid_total = evaluate_loss(&params, config, valid_pairs, tau, rng::split_seed(config.seed, "valid"))?;
        if !valid_total.is_finite() {
            return Err(Error::TrainDiverged { epoch, batch: usize::MAX });
        }
        let entry = EpochMetrics {
            epoch,
            l_g: sum_g / examples as f64,
            l_m: sum_m / examples as f64,
            total: sum_total / examples as f64,
            valid_total,
            selection_counts,
        };
        on_epoch(&entry);
        metrics.push(entry);

        if best.as_ref().map_or(true, |(_, v, _)| valid_total < *v) {
            best = Some((epoch, valid_total, params.clone()));
        }
    }

    let (best_epoch, best_valid, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, metrics, best_epoch, best_valid })
}

// ---- checkpoints ----------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MMPMSCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    vocab: Vec<String>,
}

/// Serialize parameters, config, and vocabulary: magic bytes, format
/// version, a JSON meta block, then length-prefixed named parameter records
/// (name, shape, raw little-endian values).
pub fn checkpoint_bytes<S: Scalar>(
    params: &ModelParams<S>,
    config: &TrainConfig,
    vocab: &Vocab,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&CheckpointMeta {
        config: config.clone(),
        vocab: vocab.tokens().to_vec(),
    })?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.params().len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.values.len() as u64).to_le_bytes());
        for &v in &p.values {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(
    params: &ModelParams<S>,
    config: &TrainConfig,
    vocab: &Vocab,
    path: &std::path::Path,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, config, vocab)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_meta<'a>(r: &mut Reader<'a>) -> Result<CheckpointMeta> {
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointBadVersion(version));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    Ok(meta)
}

/// Read just the config and vocabulary (for float-width dispatch).
pub fn read_checkpoint_meta(path: &std::path::Path) -> Result<(TrainConfig, Vocab)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let meta = parse_meta(&mut r)?;
    let vocab = vocab_from_meta(&meta)?;
    Ok((meta.config, vocab))
}

fn vocab_from_meta(meta: &CheckpointMeta) -> Result<Vocab> {
    if meta.vocab.len() < 4 || meta.vocab[..4] != crate::vocab::RESERVED.map(String::from) {
        return Err(Error::CheckpointCorrupt("vocab block missing reserved tokens".into()));
    }
    Ok(Vocab::from_tokens(meta.vocab[4..].iter().cloned()))
}

/// Load a checkpoint at the requested float width, validating every
/// parameter record against the config-derived dimensions.
pub fn load_checkpoint<S: Scalar>(
    path: &std::path::Path,
) -> Result<(ModelParams<S>, TrainConfig, Vocab)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let meta = parse_meta(&mut r)?;
    if meta.config.float_width != S::WIDTH {
        return Err(Error::FloatWidthMismatch {
            stored: meta.config.float_width,
            requested: S::WIDTH,
        });
    }
    let vocab = vocab_from_meta(&meta)?;
    let mut params = ModelParams::<S>::init(meta.config.dims_for(&vocab), meta.config.seed);

    let count = r.u32()? as usize;
    if count != params.params().len() {
        return Err(Error::CheckpointCorrupt(format!(
            "expected {} parameter records, found {count}",
            params.params().len()
        )));
    }
    let width = S::WIDTH.byte_size();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count = r.u64()? as usize;
        let raw = r.take(count * width)?;
        let values: Vec<S> = raw.chunks_exact(width).map(S::read_le).collect();
        params.load_values(&name, &shape, values)?;
    }
    Ok((params, meta.config, vocab))
}
