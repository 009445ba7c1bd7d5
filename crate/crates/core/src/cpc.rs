//! Contrastive predictive head over frozen image encodings.
//!
//! A GRU reads the context encodings in order; its final state `c` feeds one
//! dense predictor per future step, `p_t = W_t c + b_t`. Each prediction is
//! compared with the true target encoding by cosine similarity, the `T` scores
//! are averaged, and the calibrated logit `a · mean + b` is trained with
//! binary cross-entropy against the pair label.

use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{batch_iter, generate_pairs, DataError, ImagePool, SequenceGeometry, SequencePair};
use crate::encoding::{EncodingError, EncodingTable};
use crate::nn::{
    adam_update, checksum, dense, dense_backward, flatten, gru_step, gru_step_backward, unflatten, AdamConfig,
    AdamState, GruCache, GruParams, NnError, Scalar, Tensor,
};

const CHECKPOINT_KIND: &str = "cpc";

#[derive(Debug, Error)]
pub enum CpcError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{what} has zero norm; cosine score undefined")]
    DegenerateEncoding { what: &'static str },
    #[error("invalid CPC configuration: {0}")]
    InvalidParams(String),
    #[error("training diverged in epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpcConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Number of predicted future steps `T`.
    pub steps: usize,
    pub context_len: usize,
    pub gain_init: f64,
    pub bias_init: f64,
}

impl CpcConfig {
    pub fn new(input_dim: usize) -> Self {
        CpcConfig { input_dim, hidden: 256, steps: 4, context_len: 4, gain_init: 5.0, bias_init: 0.0 }
    }

    pub fn validate(&self) -> Result<(), CpcError> {
        if self.input_dim == 0 || self.hidden == 0 || self.steps == 0 || self.context_len == 0 {
            return Err(CpcError::InvalidParams(format!("all sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpcModel<T> {
    pub config: CpcConfig,
    pub gru: GruParams<T>,
    /// `W_t`, each `d × H`.
    pub predictor_weights: Vec<Tensor<T>>,
    pub predictor_biases: Vec<Tensor<T>>,
    /// Logit gain `a`, shape `[1]`.
    pub gain: Tensor<T>,
    /// Logit bias `b`, shape `[1]`.
    pub bias: Tensor<T>,
}

/// A batch laid out step-major: `context[s]` and `targets[t]` are `B × d`.
#[derive(Clone, Debug)]
pub struct CpcBatch<T> {
    pub context: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub probability: f64,
    pub label: bool,
}

impl ScoredSequence {
    pub fn prediction(&self) -> bool {
        self.probability > 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub mean_scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl BatchOutput {
    pub fn correct(&self, labels: &[bool]) -> usize {
        self.probabilities.iter().zip(labels).filter(|(&p, &y)| (p > 0.5) == y).count()
    }
}

/// Gradients in [`CpcModel::parameters`] order.
#[derive(Clone, Debug)]
pub struct CpcGrads<T> {
    pub gru: GruParams<T>,
    pub predictor_weights: Vec<Tensor<T>>,
    pub predictor_biases: Vec<Tensor<T>>,
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> CpcGrads<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.gru.tensors().into_iter().collect();
        v.extend(&self.predictor_weights);
        v.extend(&self.predictor_biases);
        v.push(&self.gain);
        v.push(&self.bias);
        v
    }
}

struct ForwardTrace<T> {
    caches: Vec<GruCache<T>>,
    context_state: Tensor<T>,
    predictions: Vec<Tensor<T>>,
    mean_scores: Vec<f64>,
    logits: Vec<f64>,
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

fn cosine<T: Scalar>(p: &[T], y: &[T]) -> Result<f64, CpcError> {
    let (np, ny) = (norm(p), norm(y));
    if np == 0.0 {
        return Err(CpcError::DegenerateEncoding { what: "prediction" });
    }
    if ny == 0.0 {
        return Err(CpcError::DegenerateEncoding { what: "target encoding" });
    }
    let dot: f64 = p.iter().zip(y).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    Ok(dot / (np * ny))
}

/// Per-step cosine similarities of `predictions[t]` and `targets[t]`, and
/// their mean.
pub fn score(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(Vec<f64>, f64), CpcError> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(NnError::shape("score", format!("{} steps", predictions.len()), targets.len()).into());
    }
    let mut s = Vec::with_capacity(predictions.len());
    for (p, y) in predictions.iter().zip(targets) {
        if p.len() != y.len() {
            return Err(NnError::shape("score", p.len(), y.len()).into());
        }
        s.push(cosine(p, y)?);
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    Ok((s, mean))
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, `max(z,0) − z·y + ln(1 + e^{−|z|})`,
/// and its gradient `(σ(z) − y) / N` with respect to each logit.
pub fn bce_with_logits(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len(), "one label per logit");
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let y = if y { 1.0 } else { 0.0 };
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((stable_sigmoid(z) - y) / n);
    }
    (loss / n, grad)
}

/// Fraction of `probabilities` on the correct side of 0.5 (ties count as
/// negative predictions).
pub fn accuracy(probabilities: &[f64], labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let ok = probabilities.iter().zip(labels).filter(|(&p, &y)| (p > 0.5) == y).count();
    ok as f64 / labels.len() as f64
}

impl<T: Scalar> CpcModel<T> {
    pub fn zeros(config: CpcConfig) -> Result<Self, CpcError> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.hidden);
        Ok(CpcModel {
            gru: GruParams::zeros(d, h),
            predictor_weights: (0..config.steps).map(|_| Tensor::zeros(&[d, h])).collect(),
            predictor_biases: (0..config.steps).map(|_| Tensor::zeros(&[d])).collect(),
            gain: Tensor::zeros(&[1]),
            bias: Tensor::zeros(&[1]),
            config,
        })
    }

    /// GRU and predictors `~ U(±1/√H)`; gain and bias at their configured
    /// initial values.
    pub fn init(config: CpcConfig, rng: &mut impl Rng) -> Result<Self, CpcError> {
        let mut m = Self::zeros(config)?;
        m.gru = GruParams::init(config.input_dim, config.hidden, rng);
        let bound = 1.0 / (config.hidden as f64).sqrt();
        for t in m.predictor_weights.iter_mut().chain(&mut m.predictor_biases) {
            t.data_mut().iter_mut().for_each(|x| *x = T::lit(rng.random_range(-bound..bound)));
        }
        m.gain.data_mut()[0] = T::lit(config.gain_init);
        m.bias.data_mut()[0] = T::lit(config.bias_init);
        Ok(m)
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.gru.tensors().into_iter().collect();
        v.extend(&self.predictor_weights);
        v.extend(&self.predictor_biases);
        v.push(&self.gain);
        v.push(&self.bias);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.gru.tensors_mut().into_iter().collect();
        v.extend(&mut self.predictor_weights);
        v.extend(&mut self.predictor_biases);
        v.push(&mut self.gain);
        v.push(&mut self.bias);
        v
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        flatten(&self.parameters())
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) {
        unflatten(&mut self.parameters_mut(), values);
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.parameters())
    }

    fn check_steps(&self, name: &'static str, xs: &[Tensor<T>], expected: usize) -> Result<usize, CpcError> {
        if xs.len() != expected {
            return Err(NnError::shape(name, format!("{expected} steps"), xs.len()).into());
        }
        let batch = xs[0].rows();
        for x in xs {
            x.expect_shape(name, &[batch, self.config.input_dim])?;
        }
        Ok(batch)
    }

    fn run_context(&self, context: &[Tensor<T>]) -> Result<(Tensor<T>, Vec<GruCache<T>>), CpcError> {
        let batch = self.check_steps("context", context, self.config.context_len)?;
        let mut h = Tensor::zeros(&[batch, self.config.hidden]);
        let mut caches = Vec::with_capacity(context.len());
        for x in context {
            let (next, cache) = gru_step(x, &h, &self.gru)?;
            h = next;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    /// Predicted encodings `p_1..p_T`, each `B × d`.
    pub fn predict_future(&self, context: &[Tensor<T>]) -> Result<Vec<Tensor<T>>, CpcError> {
        let (c, _) = self.run_context(context)?;
        self.predictor_weights.iter().zip(&self.predictor_biases).map(|(w, b)| Ok(dense(&c, w, b)?)).collect()
    }

    fn forward(&self, batch: &CpcBatch<T>) -> Result<ForwardTrace<T>, CpcError> {
        let b = self.check_steps("targets", &batch.targets, self.config.steps)?;
        if batch.labels.len() != b {
            return Err(NnError::shape("labels", b, batch.labels.len()).into());
        }
        let (context_state, caches) = self.run_context(&batch.context)?;
        if context_state.rows() != b {
            return Err(NnError::shape("context batch", b, context_state.rows()).into());
        }
        let predictions: Vec<Tensor<T>> = self
            .predictor_weights
            .iter()
            .zip(&self.predictor_biases)
            .map(|(w, bias)| dense(&context_state, w, bias))
            .collect::<Result<_, _>>()?;
        let (a, c) = (self.gain.data()[0].as_f64(), self.bias.data()[0].as_f64());
        let mut mean_scores = vec![0.0; b];
        for (p, y) in predictions.iter().zip(&batch.targets) {
            for (i, m) in mean_scores.iter_mut().enumerate() {
                *m += cosine(p.row(i), y.row(i))?;
            }
        }
        let steps = self.config.steps as f64;
        mean_scores.iter_mut().for_each(|m| *m /= steps);
        let logits = mean_scores.iter().map(|m| a * m + c).collect();
        Ok(ForwardTrace { caches, context_state, predictions, mean_scores, logits })
    }

    pub fn evaluate_batch(&self, batch: &CpcBatch<T>) -> Result<BatchOutput, CpcError> {
        let f = self.forward(batch)?;
        let (loss, _) = bce_with_logits(&f.logits, &batch.labels);
        let probabilities = f.logits.iter().map(|&z| stable_sigmoid(z)).collect();
        Ok(BatchOutput { loss, logits: f.logits, mean_scores: f.mean_scores, probabilities })
    }

    pub fn loss_and_grad(&self, batch: &CpcBatch<T>) -> Result<(BatchOutput, CpcGrads<T>), CpcError> {
        let f = self.forward(batch)?;
        let (loss, dz) = bce_with_logits(&f.logits, &batch.labels);
        let a = self.gain.data()[0].as_f64();
        let steps = self.config.steps as f64;
        let mut gain = Tensor::zeros(&[1]);
        let mut bias = Tensor::zeros(&[1]);
        gain.data_mut()[0] = T::lit(dz.iter().zip(&f.mean_scores).map(|(g, m)| g * m).sum());
        bias.data_mut()[0] = T::lit(dz.iter().sum());

        let mut d_context = f.context_state.zeros_like();
        let (mut predictor_weights, mut predictor_biases) = (Vec::new(), Vec::new());
        for (t, (p, y)) in f.predictions.iter().zip(&batch.targets).enumerate() {
            let mut dp = p.zeros_like();
            for (i, &dzi) in dz.iter().enumerate() {
                let ds = a * dzi / steps;
                let (pr, yr) = (p.row(i), y.row(i));
                let (np, ny) = (norm(pr), norm(yr));
                let c = cosine(pr, yr)?;
                for (j, g) in dp.row_mut(i).iter_mut().enumerate() {
                    let (pj, yj) = (pr[j].as_f64(), yr[j].as_f64());
                    *g = T::lit(ds * (yj / (np * ny) - c * pj / (np * np)));
                }
            }
            let g = dense_backward(&f.context_state, &self.predictor_weights[t], &dp)?;
            d_context.add_assign(&g.input);
            predictor_weights.push(g.weights);
            predictor_biases.push(g.bias);
        }
        let mut gru = GruParams::zeros(self.config.input_dim, self.config.hidden);
        let mut dh = d_context;
        for cache in f.caches.iter().rev() {
            let (_, dh_prev) = gru_step_backward(cache, &self.gru, &dh, &mut gru)?;
            dh = dh_prev;
        }
        let probabilities = f.logits.iter().map(|&z| stable_sigmoid(z)).collect();
        let out = BatchOutput { loss, logits: f.logits, mean_scores: f.mean_scores, probabilities };
        Ok((out, CpcGrads { gru, predictor_weights, predictor_biases, gain, bias }))
    }
}

impl CpcModel<f32> {
    pub fn score_pair(&self, pair: &SequencePair<'_>, table: &EncodingTable) -> Result<ScoredSequence, CpcError> {
        let batch = assemble_batch(&[pair], table)?;
        let f = self.forward(&batch)?;
        let scores = f
            .predictions
            .iter()
            .zip(&batch.targets)
            .map(|(p, y)| cosine(p.row(0), y.row(0)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScoredSequence {
            scores,
            mean_score: f.mean_scores[0],
            probability: stable_sigmoid(f.logits[0]),
            label: pair.label,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND)
            .with_meta("input_dim", c.input_dim)
            .with_meta("hidden", c.hidden)
            .with_meta("steps", c.steps)
            .with_meta("context_len", c.context_len)
            .with_meta("gain_init", c.gain_init)
            .with_meta("bias_init", c.bias_init);
        for (name, t) in self.named_tensors() {
            ck.push(&name, t.shape(), t.data().iter().map(|&x| x as f64));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CpcError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config = CpcConfig {
            input_dim: ck.meta_parse("input_dim")?,
            hidden: ck.meta_parse("hidden")?,
            steps: ck.meta_parse("steps")?,
            context_len: ck.meta_parse("context_len")?,
            gain_init: ck.meta_parse("gain_init")?,
            bias_init: ck.meta_parse("bias_init")?,
        };
        let mut model = CpcModel::<f32>::zeros(config)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(model.parameters_mut()) {
            let (shape, data) = ck.tensor(name)?;
            if shape != t.shape() {
                return Err(CheckpointError::Format(format!("{name}: shape {shape:?}, expected {:?}", t.shape())).into());
            }
            t.data_mut().iter_mut().zip(data).for_each(|(x, &v)| *x = v as f32);
        }
        Ok(model)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut names = vec!["gru.w_ih".to_string(), "gru.w_hh".into(), "gru.b_ih".into(), "gru.b_hh".into()];
        names.extend((0..self.config.steps).map(|t| format!("predictor.{t}.weight")));
        names.extend((0..self.config.steps).map(|t| format!("predictor.{t}.bias")));
        names.push("gain".into());
        names.push("bias".into());
        names.into_iter().zip(self.parameters()).collect()
    }
}

/// Looks up every context and target image of `pairs` in `table`.
pub fn assemble_batch(pairs: &[&SequencePair<'_>], table: &EncodingTable) -> Result<CpcBatch<f32>, CpcError> {
    let (b, d) = (pairs.len(), table.dim());
    if b == 0 {
        return Err(CpcError::InvalidParams("empty batch".into()));
    }
    let (cl, tl) = (pairs[0].context_images.len(), pairs[0].target_images.len());
    let mut context: Vec<Tensor<f32>> = (0..cl).map(|_| Tensor::zeros(&[b, d])).collect();
    let mut targets: Vec<Tensor<f32>> = (0..tl).map(|_| Tensor::zeros(&[b, d])).collect();
    for (i, pair) in pairs.iter().enumerate() {
        if pair.context_images.len() != cl || pair.target_images.len() != tl {
            return Err(CpcError::InvalidParams("pairs of mixed geometry in one batch".into()));
        }
        for (s, im) in pair.context_images.iter().enumerate() {
            context[s].row_mut(i).copy_from_slice(table.get(im.index)?);
        }
        for (t, im) in pair.target_images.iter().enumerate() {
            targets[t].row_mut(i).copy_from_slice(table.get(im.index)?);
        }
    }
    Ok(CpcBatch { context, targets, labels: pairs.iter().map(|p| p.label).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub train_positives: usize,
    pub train_negatives: usize,
    /// Freshly generated training batches per epoch.
    pub batches_per_epoch: usize,
    pub val_positives: usize,
    pub val_negatives: usize,
    /// Size of the fixed validation set, in batches.
    pub val_batches: usize,
    pub max_epochs: usize,
    /// Epochs without a strictly better validation accuracy before stopping.
    pub early_stop_patience: usize,
    /// Epochs without a strictly lower validation loss before halving the rate.
    pub lr_patience: usize,
    pub lr_factor: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 1e-4,
            train_positives: 32,
            train_negatives: 32,
            batches_per_epoch: 64,
            val_positives: 10,
            val_negatives: 10,
            val_batches: 50,
            max_epochs: 100,
            early_stop_patience: 10,
            lr_patience: 3,
            lr_factor: 0.5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), CpcError> {
        let counts = [
            self.train_positives,
            self.train_negatives,
            self.batches_per_epoch,
            self.val_positives,
            self.val_negatives,
            self.val_batches,
            self.max_epochs,
            self.early_stop_patience,
            self.lr_patience,
        ];
        if counts.contains(&0) {
            return Err(CpcError::InvalidParams(format!("all counts and patience values must be ≥ 1: {self:?}")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(CpcError::InvalidParams("learning_rate ≥ 0 and lr_factor in (0, 1] required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochDecision {
    pub epoch: usize,
    pub learning_rate_used: f64,
    pub next_learning_rate: f64,
    pub lr_halved: bool,
    pub stop: Option<StopReason>,
}

/// Plateau bookkeeping for the learning rate and early stopping. Feed it one
/// `(validation loss, validation accuracy)` pair per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauController {
    schedule: TrainSchedule,
    learning_rate: f64,
    epoch: usize,
    best_loss: f64,
    best_accuracy: f64,
    best_accuracy_epoch: usize,
    loss_stale: usize,
    accuracy_stale: usize,
}

impl PlateauController {
    pub fn new(schedule: &TrainSchedule) -> Self {
        PlateauController {
            schedule: *schedule,
            learning_rate: schedule.learning_rate,
            epoch: 0,
            best_loss: f64::INFINITY,
            best_accuracy: f64::NEG_INFINITY,
            best_accuracy_epoch: 0,
            loss_stale: 0,
            accuracy_stale: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn best_accuracy(&self) -> f64 {
        self.best_accuracy
    }

    pub fn best_accuracy_epoch(&self) -> usize {
        self.best_accuracy_epoch
    }

    pub fn observe(&mut self, val_loss: f64, val_accuracy: f64) -> EpochDecision {
        self.epoch += 1;
        let used = self.learning_rate;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.loss_stale = 0;
        } else {
            self.loss_stale += 1;
        }
        let lr_halved = self.loss_stale >= self.schedule.lr_patience;
        if lr_halved {
            self.learning_rate *= self.schedule.lr_factor;
            self.loss_stale = 0;
        }
        if val_accuracy > self.best_accuracy {
            self.best_accuracy = val_accuracy;
            self.best_accuracy_epoch = self.epoch;
            self.accuracy_stale = 0;
        } else {
            self.accuracy_stale += 1;
        }
        let stop = if self.accuracy_stale >= self.schedule.early_stop_patience {
            Some(StopReason::EarlyStop)
        } else if self.epoch >= self.schedule.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        EpochDecision { epoch: self.epoch, learning_rate_used: used, next_learning_rate: self.learning_rate, lr_halved, stop }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub max_val_accuracy: f64,
    pub best_epoch: usize,
    /// Number of epochs run.
    pub stopping_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainOutcome {
    pub fn validation(&self) -> impl Iterator<Item = &EpochMetrics> {
        self.metrics.iter().filter(|m| m.split == Split::Validation)
    }
}

pub const METRICS_COLUMNS: &str = "epoch,split,loss,accuracy,learning_rate";

pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_COLUMNS}")?;
    for m in metrics {
        writeln!(out, "{},{},{},{},{}", m.epoch, m.split.as_str(), m.loss, m.accuracy, m.learning_rate)?;
    }
    Ok(())
}

/// Mean loss and accuracy of `model` over `pairs`, processed in chunks of
/// `chunk` pairs.
pub fn evaluate(
    model: &CpcModel<f32>,
    table: &EncodingTable,
    pairs: &[&SequencePair<'_>],
    chunk: usize,
) -> Result<(f64, f64), CpcError> {
    if pairs.is_empty() {
        return Err(CpcError::InvalidParams("no pairs to evaluate".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for c in pairs.chunks(chunk.max(1)) {
        let batch = assemble_batch(c, table)?;
        let out = model.evaluate_batch(&batch)?;
        loss += out.loss * c.len() as f64;
        correct += out.correct(&batch.labels);
    }
    Ok((loss / pairs.len() as f64, correct as f64 / pairs.len() as f64))
}

/// Fixed validation set: `val_batches` batches of `val_positives +
/// val_negatives` pairs over `pool`.
pub fn validation_pairs<'a>(
    pool: &ImagePool<'a>,
    schedule: &TrainSchedule,
    geometry: &SequenceGeometry,
    rng: &mut impl Rng,
) -> Result<Vec<SequencePair<'a>>, CpcError> {
    let (p, n) = (schedule.val_positives * schedule.val_batches, schedule.val_negatives * schedule.val_batches);
    Ok(generate_pairs(pool, p, n, geometry, rng)?)
}

/// Adam on pairwise BCE with fresh training pairs every epoch, the plateau
/// learning-rate rule and early stopping. `on_epoch` sees the validation row
/// of each epoch as soon as it is known.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut CpcModel<f32>,
    table: &EncodingTable,
    train_pool: &ImagePool<'_>,
    val_pairs: &[SequencePair<'_>],
    schedule: &TrainSchedule,
    geometry: &SequenceGeometry,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, CpcError> {
    schedule.validate()?;
    let mut controller = PlateauController::new(schedule);
    let mut adam = AdamState::<f32>::new(AdamConfig::with_learning_rate(schedule.learning_rate));
    let val_refs: Vec<&SequencePair> = val_pairs.iter().collect();
    let val_chunk = schedule.val_positives + schedule.val_negatives;
    let mut metrics = Vec::new();
    let (pos, neg) = (schedule.train_positives * schedule.batches_per_epoch, schedule.train_negatives * schedule.batches_per_epoch);

    loop {
        let epoch = metrics.len() / 2 + 1;
        let lr = controller.learning_rate();
        adam.set_learning_rate(lr);
        let pairs = generate_pairs(train_pool, pos, neg, geometry, rng)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in batch_iter(&pairs, schedule.train_positives, schedule.train_negatives, rng) {
            let b = assemble_batch(&batch, table)?;
            let (out, grads) = model.loss_and_grad(&b)?;
            if !out.loss.is_finite() {
                return Err(CpcError::Divergence { epoch, what: "training loss".into() });
            }
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct(&b.labels);
            seen += batch.len();
            adam_update(&mut model.parameters_mut(), &grads.tensors(), &mut adam)
                .map_err(|e| CpcError::Divergence { epoch, what: e.to_string() })?;
        }
        let train_row = EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
            learning_rate: lr,
        };
        let (val_loss, val_acc) = evaluate(model, table, &val_refs, val_chunk)?;
        if !val_loss.is_finite() {
            return Err(CpcError::Divergence { epoch, what: "validation loss".into() });
        }
        let val_row = EpochMetrics { epoch, split: Split::Validation, loss: val_loss, accuracy: val_acc, learning_rate: lr };
        metrics.push(train_row);
        metrics.push(val_row);
        on_epoch(&val_row);
        if let Some(reason) = controller.observe(val_loss, val_acc).stop {
            return Ok(TrainOutcome {
                metrics,
                max_val_accuracy: controller.best_accuracy(),
                best_epoch: controller.best_accuracy_epoch(),
                stopping_epoch: epoch,
                stop_reason: reason,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MnistImage, PIXELS};
    use crate::encoding::random_encoding;
    use crate::nn::{grad_check, sigmoid};
    use crate::seed;

    #[test]
    fn score_of_identical_vectors_is_one() {
        let p = vec![vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, -1.0]];
        let (s, mean) = score(&p, &p).unwrap();
        assert!(s.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        assert!((mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_scores_average_to_zero() {
        let (s, mean) = score(&[vec![1.0, 0.0], vec![0.0, 2.0]], &[vec![0.0, 3.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn hand_vectors_score_half() {
        let (s, mean) = score(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn score_is_symmetric_and_scale_invariant() {
        let mut rng = seed::stream(1, "score", 0);
        let mut v = || (0..4).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).collect::<Vec<_>>();
        let (p, y) = (v(), v());
        let (a, _) = score(&p, &y).unwrap();
        let (b, _) = score(&y, &p).unwrap();
        let scaled: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|x| 3.7 * x).collect()).collect();
        let (c, _) = score(&p, &scaled).unwrap();
        for t in 0..4 {
            assert!((a[t] - b[t]).abs() < 1e-15);
            assert!((a[t] - c[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_norm_is_degenerate() {
        assert!(matches!(score(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]), Err(CpcError::DegenerateEncoding { .. })));
        assert!(matches!(score(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]), Err(CpcError::DegenerateEncoding { .. })));
        assert!(score(&[vec![1.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let (loss, _) = bce_with_logits(&[0.0], &[true]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, g) = bce_with_logits(&[60.0, -60.0], &[true, false]);
        assert!(loss < 1e-20 && loss >= 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-20));
        let (loss, _) = bce_with_logits(&[800.0], &[false]);
        assert!((loss - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = seed::stream(2, "bce", 0);
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
        let (_, g) = bce_with_logits(&z, &y);
        let r = grad_check(|q| bce_with_logits(q, &y).0, &z, &g, 1e-5, 1e-6);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn accuracy_uses_strict_threshold() {
        assert_eq!(accuracy(&[0.9; 4], &[true; 4]), 1.0);
        let labels = [true, false, false, true, false];
        assert_eq!(accuracy(&[0.5; 5], &labels), 0.6);
    }

    fn toy_batch(b: usize, d: usize, steps: usize, rng: &mut impl Rng) -> CpcBatch<f64> {
        let mut t = || Tensor::from_vec(&[b, d], (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        CpcBatch {
            context: (0..4).map(|_| t()).collect(),
            targets: (0..steps).map(|_| t()).collect(),
            labels: (0..b).map(|i| i % 2 == 0).collect(),
        }
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = CpcModel::<f64>::zeros(CpcConfig::new(5)).unwrap();
        let batch = toy_batch(3, 5, 4, &mut seed::stream(3, "toy", 0));
        let p = m.predict_future(&batch.context).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(matches!(m.evaluate_batch(&batch), Err(CpcError::DegenerateEncoding { .. })));
    }

    #[test]
    fn predictions_match_scalar_recurrence() {
        let config = CpcConfig { hidden: 2, ..CpcConfig::new(3) };
        let mut rng = seed::stream(4, "oracle", 0);
        let m = CpcModel::<f64>::init(config, &mut rng).unwrap();
        let batch = toy_batch(1, 3, 4, &mut rng);
        let p = m.predict_future(&batch.context).unwrap();

        let g = &m.gru;
        let (h_dim, d) = (2, 3);
        let wih = |r: usize, c: usize| g.w_ih.data()[r * d + c];
        let whh = |r: usize, c: usize| g.w_hh.data()[r * h_dim + c];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = [0.0f64; 2];
        for x in &batch.context {
            let x = x.row(0);
            let gate = |blk: usize, j: usize, with_h: bool| {
                let row = blk * h_dim + j;
                let xi: f64 = (0..d).map(|c| wih(row, c) * x[c]).sum::<f64>() + g.b_ih.data()[row];
                let hh: f64 = (0..h_dim).map(|c| whh(row, c) * h[c]).sum::<f64>() + g.b_hh.data()[row];
                if with_h { (xi, hh) } else { (xi + hh, 0.0) }
            };
            let mut next = [0.0; 2];
            for j in 0..h_dim {
                let r = sig(gate(0, j, false).0);
                let z = sig(gate(1, j, false).0);
                let (xn, hn) = gate(2, j, true);
                let n = (xn + r * hn).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
        }
        for t in 0..4 {
            let w = m.predictor_weights[t].data();
            for i in 0..d {
                let expected = w[i * h_dim] * h[0] + w[i * h_dim + 1] * h[1] + m.predictor_biases[t].data()[i];
                assert!((p[t].data()[i] - expected).abs() < 1e-14);
            }
        }
        assert_eq!(m.predict_future(&batch.context).unwrap(), p);
    }

    #[test]
    fn probability_is_calibrated_sigmoid_of_mean_score() {
        let mut rng = seed::stream(5, "calib", 0);
        let mut m = CpcModel::<f64>::init(CpcConfig { hidden: 6, ..CpcConfig::new(4) }, &mut rng).unwrap();
        m.gain.data_mut()[0] = 3.0;
        m.bias.data_mut()[0] = -0.4;
        let batch = toy_batch(5, 4, 4, &mut rng);
        let out = m.evaluate_batch(&batch).unwrap();
        for (p, s) in out.probabilities.iter().zip(&out.mean_scores) {
            assert!((p - sigmoid(3.0 * s - 0.4)).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let config = CpcConfig { hidden: 4, steps: 2, ..CpcConfig::new(3) };
        let mut rng = seed::stream(6, "e2e", 0);
        let mut m = CpcModel::<f64>::init(config, &mut rng).unwrap();
        m.bias.data_mut()[0] = 0.3;
        let batch = toy_batch(6, 3, 2, &mut rng);
        let (_, grads) = m.loss_and_grad(&batch).unwrap();
        let mut probe = m.clone();
        let r = grad_check(
            |p| {
                probe.set_flat_parameters(p);
                probe.evaluate_batch(&batch).unwrap().loss
            },
            &m.flat_parameters(),
            &flatten(&grads.tensors()),
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }

    fn scripted(schedule: &TrainSchedule, metrics: &[(f64, f64)]) -> Vec<EpochDecision> {
        let mut c = PlateauController::new(schedule);
        metrics.iter().map(|&(l, a)| c.observe(l, a)).collect()
    }

    #[test]
    fn lr_halves_after_three_stale_epochs() {
        let d = scripted(&TrainSchedule::default(), &[(0.7, 0.5); 8]);
        let halved: Vec<usize> = d.iter().filter(|e| e.lr_halved).map(|e| e.epoch).collect();
        assert_eq!(halved, vec![4, 7]);
        assert_eq!(d[3].learning_rate_used, 1e-4);
        assert_eq!(d[4].learning_rate_used, 5e-5);
        assert_eq!(d[7].learning_rate_used, 2.5e-5);
    }

    #[test]
    fn improvement_resets_lr_counter() {
        let d = scripted(&TrainSchedule::default(), &[(0.7, 0.5), (0.8, 0.5), (0.8, 0.5), (0.6, 0.5), (0.9, 0.5), (0.9, 0.5)]);
        assert!(d.iter().all(|e| !e.lr_halved));
    }

    #[test]
    fn early_stop_after_ten_stale_accuracy_epochs() {
        let mut m: Vec<(f64, f64)> = (0..5).map(|i| (1.0 - 0.1 * i as f64, 0.5 + 0.01 * i as f64)).collect();
        m.extend(std::iter::repeat_n((0.2, 0.54), 20));
        let d = scripted(&TrainSchedule::default(), &m);
        let stop = d.iter().position(|e| e.stop.is_some()).unwrap() + 1;
        assert_eq!(stop, 15);
        assert_eq!(d[14].stop, Some(StopReason::EarlyStop));
        assert!(d[..14].iter().all(|e| e.stop.is_none()));
    }

    #[test]
    fn equal_accuracy_is_not_improvement() {
        let d = scripted(&TrainSchedule::default(), &[(0.5, 0.75); 11]);
        assert_eq!(d[10].stop, Some(StopReason::EarlyStop));
        assert!(d[9].stop.is_none());
    }

    #[test]
    fn max_epochs_bounds_training() {
        let m: Vec<(f64, f64)> = (0..100).map(|i| (1.0 / (i + 1) as f64, i as f64 / 100.0)).collect();
        let d = scripted(&TrainSchedule::default(), &m);
        assert_eq!(d[99].stop, Some(StopReason::MaxEpochs));
        assert!(d[..99].iter().all(|e| e.stop.is_none()));
        let one = scripted(&TrainSchedule { max_epochs: 1, ..Default::default() }, &[(0.1, 0.1)]);
        assert_eq!(one[0].stop, Some(StopReason::MaxEpochs));
    }

    fn synthetic_images(per_class: usize) -> Vec<MnistImage> {
        (0..per_class * 10).map(|i| MnistImage::new(vec![0.0; PIXELS], (i % 10) as u8, i as u32).unwrap()).collect()
    }

    fn tiny_schedule() -> TrainSchedule {
        TrainSchedule {
            train_positives: 4,
            train_negatives: 4,
            batches_per_epoch: 2,
            val_positives: 3,
            val_negatives: 3,
            val_batches: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let imgs = synthetic_images(4);
        let table = random_encoding(&imgs, 6, 1).unwrap();
        let pool = ImagePool::new(&imgs);
        let geometry = SequenceGeometry::default();
        let schedule = TrainSchedule { learning_rate: 0.0, max_epochs: 5, ..tiny_schedule() };
        let val = validation_pairs(&pool, &schedule, &geometry, &mut seed::stream(1, "val", 0)).unwrap();
        let mut m = CpcModel::<f32>::init(CpcConfig { hidden: 5, ..CpcConfig::new(6) }, &mut seed::stream(1, "m", 0)).unwrap();
        let before = m.clone();
        let out = train(&mut m, &table, &pool, &val, &schedule, &geometry, &mut seed::stream(1, "t", 0), |_| {}).unwrap();
        assert_eq!(m, before);
        let accs: Vec<f64> = out.validation().map(|r| r.accuracy).collect();
        assert!(accs.windows(2).all(|w| w[0] == w[1]));
        let halved: Vec<f64> = out.validation().map(|r| r.learning_rate).collect();
        assert!(halved.iter().all(|&lr| lr == 0.0));
    }

    #[test]
    fn max_epochs_one_gives_one_epoch_of_metrics() {
        let imgs = synthetic_images(4);
        let table = random_encoding(&imgs, 6, 2).unwrap();
        let pool = ImagePool::new(&imgs);
        let geometry = SequenceGeometry::default();
        let schedule = TrainSchedule { max_epochs: 1, ..tiny_schedule() };
        let val = validation_pairs(&pool, &schedule, &geometry, &mut seed::stream(2, "val", 0)).unwrap();
        let mut m = CpcModel::<f32>::init(CpcConfig { hidden: 5, ..CpcConfig::new(6) }, &mut seed::stream(2, "m", 0)).unwrap();
        let out = train(&mut m, &table, &pool, &val, &schedule, &geometry, &mut seed::stream(2, "t", 0), |_| {}).unwrap();
        assert_eq!(out.metrics.len(), 2);
        assert_eq!(out.stopping_epoch, 1);
        assert_eq!(out.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let imgs = synthetic_images(20);
        let table = random_encoding(&imgs, 16, 3).unwrap();
        let pool = ImagePool::new(&imgs);
        let pairs = generate_pairs(&pool, 100, 100, &SequenceGeometry::default(), &mut seed::stream(3, "p", 0)).unwrap();
        let refs: Vec<&SequencePair> = pairs.iter().collect();
        let m = CpcModel::<f32>::init(CpcConfig { hidden: 8, ..CpcConfig::new(16) }, &mut seed::stream(3, "m", 0)).unwrap();
        let (_, acc) = evaluate(&m, &table, &refs, 20).unwrap();
        assert!((0.35..=0.65).contains(&acc), "{acc}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = CpcModel::<f32>::init(CpcConfig { hidden: 7, ..CpcConfig::new(5) }, &mut seed::stream(4, "ck", 0)).unwrap();
        let back = CpcModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [EpochMetrics { epoch: 1, split: Split::Validation, loss: 0.5, accuracy: 0.75, learning_rate: 1e-4 }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,split,loss,accuracy,learning_rate\n1,val,0.5,0.75,0.0001\n");
    }
}
