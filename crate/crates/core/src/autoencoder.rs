//! Convolutional LIF encoder and a conventional decoder trained on
//! reconstruction error.
//!
//! Each encoder layer integrates `V[t] = β·V[t−1] + (1−β)·(W ∗ X[t])`, spikes
//! where `V[t] ≥ V_thresh` and subtracts the threshold at spiking sites. The
//! first layer sees the static image at every step; deeper layers see the
//! spikes of the layer below. The latent is the deepest membrane at the last
//! step, after reset.
//!
//! Backpropagation through time replaces the threshold derivative with
//! `1 / (1 + α|V − V_thresh|)²`. The reset term is treated as a constant in
//! the backward pass.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::seed;
use crate::data::{MnistImage, SIDE};
use crate::nn::{
    adam_update, checksum, conv2d, conv2d_backward, flatten, sigmoid, unflatten, upsample2x,
    upsample2x_backward, AdamConfig, AdamState, Conv2dSpec, NnError, Scalar, Tensor,
};

const CHECKPOINT_KIND: &str = "lif-autoencoder";

#[derive(Debug, Error)]
pub enum AutoencoderError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid autoencoder configuration: {0}")]
    InvalidParams(String),
    #[error("training set is empty")]
    EmptySubset,
    #[error("reconstruction loss became non-finite in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("encoder is frozen; parameter updates are rejected")]
    Frozen,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Forward behaviour of the spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeFn {
    /// Exact threshold; the surrogate is used only in the backward pass.
    Heaviside,
    /// Emits `0.5 + x / (1 + α|x|)` (with `x = V − V_thresh`), whose exact
    /// derivative is the surrogate. The reset still uses the exact threshold.
    /// Exists so the multi-layer backward pass can be checked numerically.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub beta: f64,
    pub v_thresh: f64,
    pub t_steps: usize,
    pub surrogate_alpha: f64,
    pub spike_fn: SpikeFn,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig { beta: 0.9, v_thresh: 1.0, t_steps: 25, surrogate_alpha: 2.0, spike_fn: SpikeFn::Heaviside }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<(), AutoencoderError> {
        let bad = |m: &str| Err(AutoencoderError::InvalidParams(m.to_string()));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if !(self.v_thresh > 0.0 && self.v_thresh.is_finite()) {
            return bad("v_thresh must be positive");
        }
        if self.t_steps == 0 {
            return bad("t_steps must be at least 1");
        }
        if !(self.surrogate_alpha > 0.0 && self.surrogate_alpha.is_finite()) {
            return bad("surrogate_alpha must be positive");
        }
        Ok(())
    }
}

pub fn surrogate_derivative(x: f64, alpha: f64) -> f64 {
    let d = 1.0 + alpha * x.abs();
    1.0 / (d * d)
}

fn relaxed_spike(x: f64, alpha: f64) -> f64 {
    0.5 + x / (1.0 + alpha * x.abs())
}

/// One LIF update with soft reset. Returns the post-reset membrane and the
/// binary spike tensor.
pub fn lif_step<T: Scalar>(
    v_prev: &Tensor<T>,
    input: &Tensor<T>,
    beta: T,
    v_thresh: T,
) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    input.expect_shape("lif_step", v_prev.shape())?;
    let mut v = v_prev.clone();
    let mut spikes = v_prev.zeros_like();
    for ((v, &u), s) in v.data_mut().iter_mut().zip(input.data()).zip(spikes.data_mut()) {
        let pre = beta * *v + (T::one() - beta) * u;
        if pre >= v_thresh {
            *s = T::one();
            *v = pre - v_thresh;
        } else {
            *v = pre;
        }
    }
    Ok((v, spikes))
}

/// Encoder and decoder geometry: `channels[0]` is the image channel count and
/// every encoder layer halves the spatial size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_side: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Architecture {
    /// conv(1→8, 3×3, /2) → LIF → conv(8→8, 3×3, /2) → LIF on 28×28 input.
    pub fn mnist() -> Self {
        Architecture { input_side: SIDE, channels: vec![1, 8, 8], kernel: 3 }
    }

    pub fn depth(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn encoder_specs(&self) -> Vec<Conv2dSpec> {
        self.channels
            .windows(2)
            .map(|c| Conv2dSpec { in_channels: c[0], out_channels: c[1], kernel: self.kernel, stride: 2, padding: self.kernel / 2 })
            .collect()
    }

    /// Decoder stage `i` upsamples 2× and maps `channels[L−i] → channels[L−i−1]`.
    pub fn decoder_specs(&self) -> Vec<Conv2dSpec> {
        self.channels
            .windows(2)
            .rev()
            .map(|c| Conv2dSpec { in_channels: c[1], out_channels: c[0], kernel: self.kernel, stride: 1, padding: self.kernel / 2 })
            .collect()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let side = self.input_side >> self.depth();
        [*self.channels.last().unwrap_or(&0), side, side]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn validate(&self) -> Result<(), AutoencoderError> {
        let bad = |m: String| Err(AutoencoderError::InvalidParams(m));
        if self.depth() == 0 || self.channels.contains(&0) {
            return bad("need at least one layer with non-zero channel counts".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        let mut side = self.input_side;
        for spec in self.encoder_specs() {
            match spec.output_size(side, side) {
                Some((h, _)) if 2 * h == side => side = h,
                _ => return bad(format!("side {side} does not halve cleanly")),
            }
        }
        Ok(())
    }
}

/// Encoder weights and neuron constants. Layers have no bias so that a blank
/// image maps to a zero latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLifParams<T> {
    pub config: LifConfig,
    pub layers: Vec<Conv2dSpec>,
    pub weights: Vec<Tensor<T>>,
}

/// Membrane and spike history of one forward pass, kept for BPTT.
struct EncoderTrace<T> {
    input: Tensor<T>,
    /// `[layer][t]` pre-reset membrane.
    pre: Vec<Vec<Tensor<T>>>,
    /// `[layer][t]` spike output fed to the next layer.
    spikes: Vec<Vec<Tensor<T>>>,
    latent: Tensor<T>,
}

impl<T: Scalar> ConvLifParams<T> {
    pub fn validate(&self) -> Result<(), AutoencoderError> {
        self.config.validate()?;
        if self.layers.is_empty() || self.layers.len() != self.weights.len() {
            return Err(AutoencoderError::InvalidParams("one weight tensor per layer required".into()));
        }
        for (l, (spec, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            w.expect_shape("conv-lif weights", &spec.weight_shape())?;
            if l > 0 && self.layers[l - 1].out_channels != spec.in_channels {
                return Err(AutoencoderError::InvalidParams(format!("layer {l} channel chain broken")));
            }
        }
        Ok(())
    }

    /// Final-step membrane of the deepest layer for a `[C, H, W]` input.
    pub fn encode_tensor(&self, input: &Tensor<T>) -> Result<Tensor<T>, AutoencoderError> {
        Ok(self.run(input, false)?.latent)
    }

    fn run(&self, input: &Tensor<T>, keep: bool) -> Result<EncoderTrace<T>, AutoencoderError> {
        let cfg = &self.config;
        let (beta, thresh, alpha) = (T::lit(cfg.beta), T::lit(cfg.v_thresh), cfg.surrogate_alpha);
        let n = self.layers.len();
        let drive = conv2d(input, &self.weights[0], None, &self.layers[0])?;
        let mut v: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut spk: Vec<Tensor<T>> = Vec::with_capacity(n);
        let steps = if keep { cfg.t_steps } else { 0 };
        let mut pre_hist = vec![Vec::with_capacity(steps); n];
        let mut spk_hist = vec![Vec::with_capacity(steps); n];

        for _ in 0..cfg.t_steps {
            for l in 0..n {
                let u = if l == 0 { drive.clone() } else { conv2d(&spk[l - 1], &self.weights[l], None, &self.layers[l])? };
                if v.len() == l {
                    v.push(u.zeros_like());
                    spk.push(u.zeros_like());
                }
                let mut pre = if keep { Some(u.zeros_like()) } else { None };
                let (vl, sl) = (v[l].data_mut(), spk[l].data_mut());
                for i in 0..vl.len() {
                    let p = beta * vl[i] + (T::one() - beta) * u.data()[i];
                    if let Some(pre) = pre.as_mut() {
                        pre.data_mut()[i] = p;
                    }
                    let fired = p >= thresh;
                    vl[i] = if fired { p - thresh } else { p };
                    sl[i] = match cfg.spike_fn {
                        SpikeFn::Heaviside if fired => T::one(),
                        SpikeFn::Heaviside => T::zero(),
                        SpikeFn::Relaxed => T::lit(relaxed_spike((p - thresh).as_f64(), alpha)),
                    };
                }
                if let Some(pre) = pre {
                    pre_hist[l].push(pre);
                    spk_hist[l].push(spk[l].clone());
                }
            }
        }
        if v.iter().any(|t| !t.all_finite()) {
            return Err(NnError::Divergence { what: "encoder membrane".into() }.into());
        }
        let latent = v.pop().expect("at least one layer");
        Ok(EncoderTrace { input: input.clone(), pre: pre_hist, spikes: spk_hist, latent })
    }

    /// BPTT from a latent gradient to the weight gradients.
    fn backward(&self, trace: &EncoderTrace<T>, grad_latent: &Tensor<T>) -> Result<Vec<Tensor<T>>, AutoencoderError> {
        let cfg = &self.config;
        let (beta, thresh, alpha) = (T::lit(cfg.beta), cfg.v_thresh, cfg.surrogate_alpha);
        let n = self.layers.len();
        let mut gv: Vec<Tensor<T>> = trace.pre.iter().map(|h| h[0].zeros_like()).collect();
        gv[n - 1] = grad_latent.clone();
        let mut gw: Vec<Tensor<T>> = self.weights.iter().map(Tensor::zeros_like).collect();
        let mut g_drive = gv[0].zeros_like();

        for t in (0..cfg.t_steps).rev() {
            let mut g_spike: Option<Tensor<T>> = None;
            for l in (0..n).rev() {
                let mut gpre = gv[l].clone();
                if let Some(gs) = g_spike.take() {
                    let pre = trace.pre[l][t].data();
                    for (i, g) in gpre.data_mut().iter_mut().enumerate() {
                        *g += gs.data()[i] * T::lit(surrogate_derivative(pre[i].as_f64() - thresh, alpha));
                    }
                }
                let mut gu = gpre.clone();
                gu.scale(T::one() - beta);
                gpre.scale(beta);
                gv[l] = gpre;
                if l == 0 {
                    g_drive.add_assign(&gu);
                } else {
                    let g = conv2d_backward(&trace.spikes[l - 1][t], &self.weights[l], &gu, &self.layers[l], true)?;
                    gw[l].add_assign(&g.weights);
                    g_spike = Some(g.input);
                }
            }
        }
        gw[0] = conv2d_backward(&trace.input, &self.weights[0], &g_drive, &self.layers[0], false)?.weights;
        Ok(gw)
    }
}

/// Gradients in [`Autoencoder::parameters`] order.
#[derive(Clone, Debug)]
pub struct AutoencoderGrads<T> {
    pub encoder: Vec<Tensor<T>>,
    pub decoder_weights: Vec<Tensor<T>>,
    pub decoder_biases: Vec<Tensor<T>>,
}

impl<T: Scalar> AutoencoderGrads<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.encoder.iter().chain(&self.decoder_weights).chain(&self.decoder_biases).collect()
    }

    fn accumulate(&mut self, other: &AutoencoderGrads<T>) {
        let dst = self.encoder.iter_mut().chain(&mut self.decoder_weights).chain(&mut self.decoder_biases);
        for (d, s) in dst.zip(other.tensors()) {
            d.add_assign(s);
        }
    }

    fn scale(&mut self, factor: T) {
        for t in self.encoder.iter_mut().chain(&mut self.decoder_weights).chain(&mut self.decoder_biases) {
            t.scale(factor);
        }
    }
}

struct DecoderTrace<T> {
    upsampled: Vec<Tensor<T>>,
    pre_act: Vec<Tensor<T>>,
    output: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub arch: Architecture,
    pub encoder: ConvLifParams<T>,
    /// Stage `i`: upsample, conv, then ReLU (sigmoid on the last stage).
    pub decoder_layers: Vec<Conv2dSpec>,
    pub decoder_weights: Vec<Tensor<T>>,
    pub decoder_biases: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f32>,
    pub image_index: u32,
    pub image_label: u8,
}

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn image_tensor<T: Scalar>(image: &MnistImage) -> Tensor<T> {
    let data = image.pixels.iter().map(|&p| T::lit(p as f64)).collect();
    Tensor::from_vec(&[1, SIDE, SIDE], data).expect("image has 784 pixels")
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

impl<T: Scalar> Autoencoder<T> {
    /// Weights `~ U(±√(6/fan_in))`, decoder biases zero. The wide bound makes
    /// the first layer spike on typical strokes from the start.
    pub fn init(arch: Architecture, config: LifConfig, rng: &mut impl Rng) -> Result<Self, AutoencoderError> {
        arch.validate()?;
        config.validate()?;
        let fan = |s: &Conv2dSpec| (6.0 / (s.in_channels * s.kernel * s.kernel) as f64).sqrt();
        let layers = arch.encoder_specs();
        let weights = layers.iter().map(|s| uniform_tensor(&s.weight_shape(), fan(s), rng)).collect();
        let decoder_layers = arch.decoder_specs();
        let decoder_weights = decoder_layers.iter().map(|s| uniform_tensor(&s.weight_shape(), fan(s), rng)).collect();
        let decoder_biases = decoder_layers.iter().map(|s| Tensor::zeros(&[s.out_channels])).collect();
        Ok(Autoencoder { arch, encoder: ConvLifParams { config, layers, weights }, decoder_layers, decoder_weights, decoder_biases })
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.encoder.weights.iter().chain(&self.decoder_weights).chain(&self.decoder_biases).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.encoder.weights.iter_mut().chain(&mut self.decoder_weights).chain(&mut self.decoder_biases).collect()
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

    fn input_shape(&self) -> [usize; 3] {
        [self.arch.channels[0], self.arch.input_side, self.arch.input_side]
    }

    fn run_decoder(&self, latent: &Tensor<T>) -> Result<DecoderTrace<T>, AutoencoderError> {
        latent.expect_shape("decode", &self.arch.latent_shape())?;
        let last = self.decoder_layers.len() - 1;
        let mut h = latent.clone();
        let (mut upsampled, mut pre_act) = (Vec::new(), Vec::new());
        for (i, spec) in self.decoder_layers.iter().enumerate() {
            let up = upsample2x(&h)?;
            let z = conv2d(&up, &self.decoder_weights[i], Some(&self.decoder_biases[i]), spec)?;
            h = z.clone();
            for x in h.data_mut() {
                *x = if i == last { sigmoid(*x) } else { x.max(T::zero()) };
            }
            upsampled.push(up);
            pre_act.push(z);
        }
        Ok(DecoderTrace { upsampled, pre_act, output: h })
    }

    /// Decoder output for a latent of shape [`Architecture::latent_shape`].
    pub fn decode_tensor(&self, latent: &Tensor<T>) -> Result<Tensor<T>, AutoencoderError> {
        Ok(self.run_decoder(latent)?.output)
    }

    pub fn reconstruct(&self, input: &Tensor<T>) -> Result<Tensor<T>, AutoencoderError> {
        self.decode_tensor(&self.encoder.encode_tensor(input)?)
    }

    /// Mean squared error per pixel.
    pub fn reconstruction_loss(&self, input: &Tensor<T>) -> Result<T, AutoencoderError> {
        input.expect_shape("reconstruction_loss", &self.input_shape())?;
        let out = self.reconstruct(input)?;
        Ok(mse(&out, input))
    }

    pub fn loss_and_grad(&self, input: &Tensor<T>) -> Result<(T, AutoencoderGrads<T>), AutoencoderError> {
        input.expect_shape("loss_and_grad", &self.input_shape())?;
        let enc = self.encoder.run(input, true)?;
        let dec = self.run_decoder(&enc.latent)?;
        let loss = mse(&dec.output, input);

        let scale = T::lit(2.0 / input.len() as f64);
        let mut g = dec.output.clone();
        for (gi, &x) in g.data_mut().iter_mut().zip(input.data()) {
            *gi = (*gi - x) * scale;
        }
        let last = self.decoder_layers.len() - 1;
        let mut decoder_weights = Vec::with_capacity(last + 1);
        let mut decoder_biases = Vec::with_capacity(last + 1);
        for i in (0..=last).rev() {
            let z = &dec.pre_act[i];
            for (gi, &zi) in g.data_mut().iter_mut().zip(z.data()) {
                *gi *= if i == last {
                    let y = sigmoid(zi);
                    y * (T::one() - y)
                } else if zi > T::zero() {
                    T::one()
                } else {
                    T::zero()
                };
            }
            let cg = conv2d_backward(&dec.upsampled[i], &self.decoder_weights[i], &g, &self.decoder_layers[i], true)?;
            decoder_weights.push(cg.weights);
            decoder_biases.push(cg.bias);
            g = upsample2x_backward(&cg.input)?;
        }
        decoder_weights.reverse();
        decoder_biases.reverse();
        let encoder = self.encoder.backward(&enc, &g)?;
        Ok((loss, AutoencoderGrads { encoder, decoder_weights, decoder_biases }))
    }
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
    T::lit(sum / a.len() as f64)
}

impl Autoencoder<f32> {
    pub fn encode(&self, image: &MnistImage) -> Result<LatentVector, AutoencoderError> {
        encode_image(&self.encoder, image)
    }

    /// Reconstructed 28×28 image from a latent.
    pub fn decode(&self, latent: &LatentVector) -> Result<Vec<f32>, AutoencoderError> {
        let t = Tensor::from_vec(&self.arch.latent_shape(), latent.values.clone())?;
        Ok(self.decode_tensor(&t)?.into_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.encoder.config;
        let channels: Vec<String> = self.arch.channels.iter().map(|c| c.to_string()).collect();
        let mut ck = Checkpoint::new(CHECKPOINT_KIND)
            .with_meta("input_side", self.arch.input_side)
            .with_meta("channels", channels.join(","))
            .with_meta("kernel", self.arch.kernel)
            .with_meta("beta", c.beta)
            .with_meta("v_thresh", c.v_thresh)
            .with_meta("t_steps", c.t_steps)
            .with_meta("surrogate_alpha", c.surrogate_alpha);
        for (l, w) in self.encoder.weights.iter().enumerate() {
            ck.push(&format!("encoder.{l}.weight"), w.shape(), w.data().iter().map(|&x| x as f64));
        }
        for (i, (w, b)) in self.decoder_weights.iter().zip(&self.decoder_biases).enumerate() {
            ck.push(&format!("decoder.{i}.weight"), w.shape(), w.data().iter().map(|&x| x as f64));
            ck.push(&format!("decoder.{i}.bias"), b.shape(), b.data().iter().map(|&x| x as f64));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AutoencoderError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let channels = ck
            .meta("channels")?
            .split(',')
            .map(|c| c.parse::<usize>().map_err(|_| CheckpointError::Format(format!("bad channel list entry {c:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let arch = Architecture { input_side: ck.meta_parse("input_side")?, channels, kernel: ck.meta_parse("kernel")? };
        let config = LifConfig {
            beta: ck.meta_parse("beta")?,
            v_thresh: ck.meta_parse("v_thresh")?,
            t_steps: ck.meta_parse("t_steps")?,
            surrogate_alpha: ck.meta_parse("surrogate_alpha")?,
            spike_fn: SpikeFn::Heaviside,
        };
        let mut model = Autoencoder::<f32>::init(arch, config, &mut crate::seed::stream(0, "checkpoint", 0))?;
        let load = |name: String, into: &mut Tensor<f32>| -> Result<(), AutoencoderError> {
            let (shape, data) = ck.tensor(&name)?;
            if shape != into.shape() {
                return Err(CheckpointError::Format(format!("{name}: shape {shape:?}, expected {:?}", into.shape())).into());
            }
            into.data_mut().iter_mut().zip(data).for_each(|(x, &v)| *x = v as f32);
            Ok(())
        };
        for (l, w) in model.encoder.weights.iter_mut().enumerate() {
            load(format!("encoder.{l}.weight"), w)?;
        }
        for (i, (w, b)) in model.decoder_weights.iter_mut().zip(&mut model.decoder_biases).enumerate() {
            load(format!("decoder.{i}.weight"), w)?;
            load(format!("decoder.{i}.bias"), b)?;
        }
        Ok(model)
    }
}

fn encode_image(encoder: &ConvLifParams<f32>, image: &MnistImage) -> Result<LatentVector, AutoencoderError> {
    let latent = encoder.encode_tensor(&image_tensor(image))?;
    Ok(LatentVector { values: latent.into_vec(), image_index: image.index, image_label: image.label })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ReconstructionSchedule {
    fn default() -> Self {
        ReconstructionSchedule { epochs: 20, batch_size: 64, learning_rate: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    /// Mean error over the training set before the first update.
    pub initial_loss: f64,
    /// Running mean of minibatch losses in each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean error over the training set after the last update.
    pub final_loss: f64,
}

impl ReconstructionReport {
    /// Trailing moving average; entry `i` averages epochs `i+1−window ..= i`
    /// and is only defined once `window` epochs exist.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.epoch_losses.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

pub fn mean_reconstruction_error(model: &Autoencoder<f32>, images: &[&MnistImage]) -> Result<f64, AutoencoderError> {
    if images.is_empty() {
        return Err(AutoencoderError::EmptySubset);
    }
    let mut total = 0.0;
    for im in images {
        total += model.reconstruction_loss(&image_tensor(im))? as f64;
    }
    Ok(total / images.len() as f64)
}

/// Minibatch Adam on pixel MSE. `on_epoch(epoch, mean_loss)` is called after
/// every epoch, counting from 1.
pub fn train_reconstruction(
    model: &mut Autoencoder<f32>,
    images: &[&MnistImage],
    schedule: &ReconstructionSchedule,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ReconstructionReport, AutoencoderError> {
    if images.is_empty() {
        return Err(AutoencoderError::EmptySubset);
    }
    if schedule.batch_size == 0 || !(schedule.learning_rate >= 0.0) {
        return Err(AutoencoderError::InvalidParams("batch_size ≥ 1 and learning_rate ≥ 0 required".into()));
    }
    let initial_loss = mean_reconstruction_error(model, images)?;
    let mut adam = AdamState::<f32>::new(AdamConfig::with_learning_rate(schedule.learning_rate));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);

    for epoch in 1..=schedule.epochs {
        order.shuffle(rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let mut sum: Option<AutoencoderGrads<f32>> = None;
            for &i in batch {
                let (loss, g) = model.loss_and_grad(&image_tensor(images[i]))?;
                if !loss.is_finite() {
                    return Err(AutoencoderError::Divergence { epoch });
                }
                epoch_total += loss as f64;
                match sum.as_mut() {
                    Some(s) => s.accumulate(&g),
                    None => sum = Some(g),
                }
            }
            let mut grads = sum.expect("chunks are non-empty");
            grads.scale(1.0 / batch.len() as f32);
            adam_update(&mut model.parameters_mut(), &grads.tensors(), &mut adam)
                .map_err(|_| AutoencoderError::Divergence { epoch })?;
        }
        let mean = epoch_total / images.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    let final_loss = mean_reconstruction_error(model, images)?;
    Ok(ReconstructionReport { initial_loss, epoch_losses, final_loss })
}

/// Encoder-only handle. The decoder is dropped and no method mutates the
/// weights.
#[derive(Clone, Debug)]
pub struct FrozenLifEncoder {
    encoder: ConvLifParams<f32>,
    latent_dim: usize,
    checksum_at_freeze: u64,
}

pub fn freeze_encoder(model: Autoencoder<f32>) -> FrozenLifEncoder {
    let latent_dim = model.arch.latent_dim();
    let checksum_at_freeze = checksum(&model.encoder.weights);
    FrozenLifEncoder { encoder: model.encoder, latent_dim, checksum_at_freeze }
}

impl FrozenLifEncoder {
    pub fn encode(&self, image: &MnistImage) -> Result<LatentVector, AutoencoderError> {
        encode_image(&self.encoder, image)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn config(&self) -> &LifConfig {
        &self.encoder.config
    }

    /// Digest recomputed from the current weights.
    pub fn checksum(&self) -> u64 {
        checksum(&self.encoder.weights)
    }

    pub fn checksum_at_freeze(&self) -> u64 {
        self.checksum_at_freeze
    }

    /// Always fails: a frozen encoder accepts no parameter updates.
    pub fn try_update(&mut self, _grads: &[Tensor<f32>]) -> Result<(), AutoencoderError> {
        Err(AutoencoderError::Frozen)
    }
}

/// Latent size of [`Architecture::mnist`].
/// A small random model and input, in `f64`, where every pre-reset membrane
/// stays at least `1e-3` from the threshold and at least one neuron fires.
/// Finite differences are then well defined across the Heaviside forward.
/// Runs 6 steps; encoder weights are scaled by `weight_gain`.
pub fn gradcheck_instance(arch: Architecture, spike_fn: SpikeFn, weight_gain: f64) -> Option<(Autoencoder<f64>, Tensor<f64>)> {
    let side = arch.input_side;
    let config = LifConfig { t_steps: 6, spike_fn, ..LifConfig::default() };
    for attempt in 0..100 {
        let mut rng = seed::stream(attempt, "ae-gradcheck", side as u64);
        let mut model = Autoencoder::<f64>::init(arch.clone(), config, &mut rng).ok()?;
        for w in &mut model.encoder.weights {
            w.scale(weight_gain);
        }
        for b in &mut model.decoder_biases {
            b.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
        let x = Tensor::from_vec(&[1, side, side], (0..side * side).map(|_| rng.random::<f64>()).collect()).ok()?;
        let trace = model.encoder.run(&x, true).ok()?;
        let th = model.encoder.config.v_thresh;
        let pre = trace.pre.iter().flatten().flat_map(|t| t.data().iter().copied());
        let (margin, spikes) = pre.fold((f64::INFINITY, 0), |(m, n), p| ((p - th).abs().min(m), n + (p >= th) as usize));
        if margin >= 1e-3 && spikes > 0 {
            return Some((model, x));
        }
    }
    None
}

pub const MNIST_LATENT_DIM: usize = 8 * 7 * 7;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PIXELS;
    use crate::nn::grad_check;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn lif_step_unit_beta_zero_input_holds_membrane() {
        let v = t1(&[0.2, 1.0, 1.7, -0.4]);
        let (out, s) = lif_step(&v, &v.zeros_like(), 1.0, 1.0).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(out.data(), &[0.2, 0.0, 1.7 - 1.0, -0.4]);
    }

    #[test]
    fn lif_step_spike_and_soft_reset() {
        let (v, s) = lif_step(&t1(&[1.0]), &t1(&[2.0]), 0.5, 1.0).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(v.data(), &[0.5]);
    }

    #[test]
    fn lif_step_leak_only_decreases_subthreshold_membrane() {
        let (v, s) = lif_step(&t1(&[0.999]), &t1(&[0.0]), 0.9, 1.0).unwrap();
        assert_eq!(s.data(), &[0.0]);
        assert!(v.data()[0] < 0.999);
    }

    #[test]
    fn lif_step_threshold_is_inclusive() {
        let (v, s) = lif_step(&t1(&[1.0]), &t1(&[1.0]), 0.5, 1.0).unwrap();
        assert_eq!((s.data()[0], v.data()[0]), (1.0, 0.0));
    }

    #[test]
    fn lif_step_rejects_shape_mismatch() {
        assert!(lif_step(&t1(&[0.0, 0.0]), &t1(&[0.0]), 0.9, 1.0).is_err());
    }

    fn mnist_model(seed_value: u64) -> Autoencoder<f32> {
        Autoencoder::init(Architecture::mnist(), LifConfig::default(), &mut seed::stream(seed_value, "ae-test", 0)).unwrap()
    }

    fn test_image(seed_value: u64) -> MnistImage {
        let mut rng = seed::stream(seed_value, "ae-image", 0);
        let pixels = (0..PIXELS).map(|i| if (i / SIDE + i % SIDE) % 5 < 2 { rng.random::<f32>() } else { 0.0 }).collect();
        MnistImage::new(pixels, 3, seed_value as u32).unwrap()
    }

    #[test]
    fn mnist_geometry_gives_392_latent() {
        let arch = Architecture::mnist();
        assert_eq!(arch.latent_shape(), [8, 7, 7]);
        assert_eq!(arch.latent_dim(), MNIST_LATENT_DIM);
        let m = mnist_model(1);
        let out = m.reconstruct(&image_tensor(&test_image(1))).unwrap();
        assert_eq!(out.shape(), &[1, 28, 28]);
        assert!(out.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn blank_image_encodes_to_zero() {
        let m = mnist_model(2);
        let blank = MnistImage::new(vec![0.0; PIXELS], 0, 0).unwrap();
        let z = m.encode(&blank).unwrap();
        assert_eq!(z.dim(), 392);
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = mnist_model(3);
        let im = test_image(3);
        assert_eq!(m.encode(&im).unwrap(), m.encode(&im).unwrap());
    }

    #[test]
    fn two_step_subthreshold_matches_geometric_sum() {
        let (beta, w) = (0.9f64, 0.7f64);
        let x = [0.3, 0.5, 0.1, 0.9];
        let params = ConvLifParams {
            config: LifConfig { t_steps: 2, ..LifConfig::default() },
            layers: vec![Conv2dSpec { in_channels: 1, out_channels: 1, kernel: 1, stride: 1, padding: 0 }],
            weights: vec![Tensor::from_vec(&[1, 1, 1, 1], vec![w]).unwrap()],
        };
        params.validate().unwrap();
        let z = params.encode_tensor(&Tensor::from_vec(&[1, 2, 2], x.to_vec()).unwrap()).unwrap();
        for (zi, xi) in z.data().iter().zip(x) {
            let expected = beta * (1.0 - beta) * w * xi + (1.0 - beta) * w * xi;
            assert!((zi - expected).abs() < 1e-15, "{zi} vs {expected}");
        }
    }

    #[test]
    fn zero_input_leak_contracts_membrane_norm() {
        let mut rng = seed::stream(4, "leak", 0);
        let mut v = Tensor::from_vec(&[16], (0..16).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap();
        let zero = v.zeros_like();
        let norm = |t: &Tensor<f64>| t.data().iter().map(|x| x * x).sum::<f64>();
        for _ in 0..50 {
            let (next, s) = lif_step(&v, &zero, 0.9, 1.0).unwrap();
            assert!(s.data().iter().all(|&x| x == 0.0));
            assert!(norm(&next) < norm(&v));
            v = next;
        }
    }

    #[test]
    fn zero_latent_decodes_to_half_grey() {
        let m = mnist_model(5);
        let out = m.decode_tensor(&Tensor::zeros(&m.arch.latent_shape())).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.5));
    }

    fn small_images(n: usize) -> Vec<MnistImage> {
        (0..n as u64).map(test_image).collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut m = mnist_model(6);
        let before = m.clone();
        let imgs = small_images(5);
        let refs: Vec<&MnistImage> = imgs.iter().collect();
        let schedule = ReconstructionSchedule { epochs: 1, batch_size: 2, learning_rate: 0.0 };
        train_reconstruction(&mut m, &refs, &schedule, &mut seed::stream(6, "order", 0), |_, _| {}).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let mut m = mnist_model(7);
        let imgs = small_images(8);
        let refs: Vec<&MnistImage> = imgs.iter().collect();
        let schedule = ReconstructionSchedule { epochs: 40, batch_size: 8, learning_rate: 1e-2 };
        let r = train_reconstruction(&mut m, &refs, &schedule, &mut seed::stream(7, "order", 0), |_, _| {}).unwrap();
        assert!(r.final_loss < 0.6 * r.initial_loss, "{r:?}");
    }

    fn check_toy(arch: Architecture, spike_fn: SpikeFn, weight_gain: f64) {
        let (model, x) = gradcheck_instance(arch, spike_fn, weight_gain).expect("toy instance with a clear threshold margin");
        let (_, grads) = model.loss_and_grad(&x).unwrap();
        let mut probe = model.clone();
        let report = grad_check(
            |p| {
                probe.set_flat_parameters(p);
                probe.reconstruction_loss(&x).unwrap()
            },
            &model.flat_parameters(),
            &flatten(&grads.tensors()),
            1e-5,
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn single_layer_gradient_matches_finite_differences() {
        check_toy(Architecture { input_side: 4, channels: vec![1, 2], kernel: 3 }, SpikeFn::Heaviside, 8.0);
    }

    #[test]
    fn two_layer_surrogate_path_matches_finite_differences() {
        check_toy(Architecture { input_side: 8, channels: vec![1, 3, 2], kernel: 3 }, SpikeFn::Relaxed, 3.0);
    }

    #[test]
    fn frozen_encoder_matches_and_rejects_updates() {
        let m = mnist_model(8);
        let im = test_image(8);
        let before = m.encode(&im).unwrap();
        let mut frozen = freeze_encoder(m);
        assert_eq!(frozen.encode(&im).unwrap(), before);
        let c0 = frozen.checksum();
        assert_eq!(c0, frozen.checksum_at_freeze());
        for _ in 0..1000 {
            frozen.encode(&im).unwrap();
        }
        assert_eq!(frozen.checksum(), c0);
        assert!(matches!(frozen.try_update(&[]), Err(AutoencoderError::Frozen)));
        assert_eq!(frozen.checksum(), c0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = mnist_model(9);
        let back = Autoencoder::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(LifConfig { beta: 0.0, ..LifConfig::default() }.validate().is_err());
        assert!(LifConfig { v_thresh: 0.0, ..LifConfig::default() }.validate().is_err());
        assert!(LifConfig { t_steps: 0, ..LifConfig::default() }.validate().is_err());
        assert!(Architecture { input_side: 7, channels: vec![1, 2], kernel: 3 }.validate().is_err());
    }
}
