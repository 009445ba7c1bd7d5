//! Spiking classifier-encoder: Poisson input layer → excitatory LIF layer with
//! one-to-one inhibitory partners (lateral inhibition), trained by unsupervised
//! trace-based STDP with adaptive thresholds. Frozen, it maps an image to the
//! spike count of every excitatory neuron over one presentation window.
//!
//! Units: time in milliseconds, potentials and thresholds in millivolts.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::codec::{adaptive_encode, CodecError, RateCodingParams, SpikeTrain};
use crate::data::{MnistImage, PIXELS};
use crate::nn::fnv_mix;

#[derive(Debug, Error)]
pub enum StdpError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("non-finite membrane potential in {layer} neuron {neuron} at step {step}")]
    NumericalInstability { layer: &'static str, neuron: usize, step: usize },
    #[error("spike train has no materialised spike times")]
    MissingSpikeTimes,
    #[error("input train has {found} channels, network expects {expected}")]
    InputSize { expected: usize, found: usize },
    #[error("invalid network parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StdpParams {
    pub n_input: usize,
    pub n_exc: usize,
    pub dt_ms: f64,

    pub v_rest_exc: f64,
    pub v_reset_exc: f64,
    pub v_thresh_base: f64,
    pub tau_exc_ms: f64,
    pub refractory_exc_ms: f64,

    pub v_rest_inh: f64,
    pub v_reset_inh: f64,
    pub v_thresh_inh: f64,
    pub tau_inh_ms: f64,
    pub refractory_inh_ms: f64,

    /// Lower bound on every membrane potential (inhibitory reversal potential).
    pub v_floor: f64,
    /// Potential jump per input spike and unit weight.
    pub input_gain: f64,
    /// Jump of an inhibitory neuron's potential when its partner fires.
    pub exc_to_inh: f64,
    /// Drop of every other excitatory potential when an inhibitory neuron fires.
    pub inh_to_exc: f64,

    pub tau_trace_ms: f64,
    pub eta_post: f64,
    pub eta_pre: f64,
    pub w_max: f64,
    /// Weight-dependence exponent of the soft bounds.
    pub mu: f64,
    pub theta_plus: f64,
    pub tau_theta_ms: f64,

    pub rest_ms: f64,
    /// Target afferent weight sum of every excitatory neuron.
    pub column_sum: f64,
    /// Initial weights are uniform in `[0, init_weight_max)` before normalisation.
    pub init_weight_max: f64,
}

impl Default for StdpParams {
    fn default() -> Self {
        StdpParams {
            n_input: PIXELS,
            n_exc: 400,
            dt_ms: 1.0,
            v_rest_exc: -65.0,
            v_reset_exc: -60.0,
            v_thresh_base: -52.0,
            tau_exc_ms: 100.0,
            refractory_exc_ms: 5.0,
            v_rest_inh: -60.0,
            v_reset_inh: -45.0,
            v_thresh_inh: -40.0,
            tau_inh_ms: 10.0,
            refractory_inh_ms: 2.0,
            v_floor: -100.0,
            input_gain: 1.0,
            exc_to_inh: 25.0,
            inh_to_exc: 2.0,
            tau_trace_ms: 20.0,
            eta_post: 0.01,
            eta_pre: 0.0001,
            w_max: 1.0,
            mu: 1.0,
            theta_plus: 0.05,
            tau_theta_ms: 1e7,
            rest_ms: 150.0,
            column_sum: 78.4,
            init_weight_max: 0.3,
        }
    }
}

impl StdpParams {
    pub fn validate(&self) -> Result<(), StdpError> {
        let bad = |m: &str| Err(StdpError::InvalidParams(m.to_string()));
        if self.n_input == 0 || self.n_exc == 0 {
            return bad("layer sizes must be positive");
        }
        if [self.dt_ms, self.tau_exc_ms, self.tau_inh_ms, self.tau_trace_ms, self.tau_theta_ms].iter().any(|&t| t <= 0.0) {
            return bad("time constants and dt must be positive");
        }
        if self.w_max <= 0.0 || self.column_sum <= 0.0 || self.column_sum > self.w_max * self.n_input as f64 {
            return bad("column_sum must lie in (0, w_max · n_input]");
        }
        Ok(())
    }

    /// Every real-valued constant, by name.
    pub fn constants(&self) -> [(&'static str, f64); 27] {
        [
            ("dt_ms", self.dt_ms),
            ("v_rest_exc", self.v_rest_exc),
            ("v_reset_exc", self.v_reset_exc),
            ("v_thresh_base", self.v_thresh_base),
            ("tau_exc_ms", self.tau_exc_ms),
            ("refractory_exc_ms", self.refractory_exc_ms),
            ("v_rest_inh", self.v_rest_inh),
            ("v_reset_inh", self.v_reset_inh),
            ("v_thresh_inh", self.v_thresh_inh),
            ("tau_inh_ms", self.tau_inh_ms),
            ("refractory_inh_ms", self.refractory_inh_ms),
            ("v_floor", self.v_floor),
            ("input_gain", self.input_gain),
            ("exc_to_inh", self.exc_to_inh),
            ("inh_to_exc", self.inh_to_exc),
            ("tau_trace_ms", self.tau_trace_ms),
            ("eta_post", self.eta_post),
            ("eta_pre", self.eta_pre),
            ("w_max", self.w_max),
            ("mu", self.mu),
            ("theta_plus", self.theta_plus),
            ("tau_theta_ms", self.tau_theta_ms),
            ("rest_ms", self.rest_ms),
            ("column_sum", self.column_sum),
            ("init_weight_max", self.init_weight_max),
            ("n_input", self.n_input as f64),
            ("n_exc", self.n_exc as f64),
        ]
    }

    /// Sets a constant by name; returns `false` for unknown names.
    pub fn set_constant(&mut self, name: &str, value: f64) -> bool {
        let slot = match name {
            "dt_ms" => &mut self.dt_ms,
            "v_rest_exc" => &mut self.v_rest_exc,
            "v_reset_exc" => &mut self.v_reset_exc,
            "v_thresh_base" => &mut self.v_thresh_base,
            "tau_exc_ms" => &mut self.tau_exc_ms,
            "refractory_exc_ms" => &mut self.refractory_exc_ms,
            "v_rest_inh" => &mut self.v_rest_inh,
            "v_reset_inh" => &mut self.v_reset_inh,
            "v_thresh_inh" => &mut self.v_thresh_inh,
            "tau_inh_ms" => &mut self.tau_inh_ms,
            "refractory_inh_ms" => &mut self.refractory_inh_ms,
            "v_floor" => &mut self.v_floor,
            "input_gain" => &mut self.input_gain,
            "exc_to_inh" => &mut self.exc_to_inh,
            "inh_to_exc" => &mut self.inh_to_exc,
            "tau_trace_ms" => &mut self.tau_trace_ms,
            "eta_post" => &mut self.eta_post,
            "eta_pre" => &mut self.eta_pre,
            "w_max" => &mut self.w_max,
            "mu" => &mut self.mu,
            "theta_plus" => &mut self.theta_plus,
            "tau_theta_ms" => &mut self.tau_theta_ms,
            "rest_ms" => &mut self.rest_ms,
            "column_sum" => &mut self.column_sum,
            "init_weight_max" => &mut self.init_weight_max,
            "n_input" => {
                self.n_input = value as usize;
                return true;
            }
            "n_exc" => {
                self.n_exc = value as usize;
                return true;
            }
            _ => return false,
        };
        *slot = value;
        true
    }

    fn steps(&self, ms: f64) -> u32 {
        (ms / self.dt_ms).round() as u32
    }
}

/// Membrane potentials, traces and refractory counters. Reset to rest at the
/// start of every frozen encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronDynamics {
    pub v_exc: Vec<f64>,
    pub v_inh: Vec<f64>,
    pub x_pre: Vec<f64>,
    pub x_post: Vec<f64>,
    refractory_exc: Vec<u32>,
    refractory_inh: Vec<u32>,
    /// Inhibitory neurons that fired on the previous step.
    inh_fired: Vec<usize>,
    step: usize,
}

impl NeuronDynamics {
    pub fn at_rest(p: &StdpParams) -> Self {
        NeuronDynamics {
            v_exc: vec![p.v_rest_exc; p.n_exc],
            v_inh: vec![p.v_rest_inh; p.n_exc],
            x_pre: vec![0.0; p.n_input],
            x_post: vec![0.0; p.n_exc],
            refractory_exc: vec![0; p.n_exc],
            refractory_inh: vec![0; p.n_exc],
            inh_fired: Vec::new(),
            step: 0,
        }
    }
}

/// Input→excitatory weights (`n_input × n_exc`, row-major by input), adaptive
/// threshold offsets, and the current neuron dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct StdpNetworkState {
    pub params: StdpParams,
    pub weights: Vec<f64>,
    pub theta: Vec<f64>,
    pub dynamics: NeuronDynamics,
}

/// Spike counts of every excitatory neuron over one presentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodingVector400 {
    pub counts: Vec<u32>,
    pub image_index: u32,
    pub image_label: u8,
}

impl StdpNetworkState {
    pub fn new<R: Rng + ?Sized>(params: StdpParams, rng: &mut R) -> Result<Self, StdpError> {
        params.validate()?;
        let weights = (0..params.n_input * params.n_exc).map(|_| rng.random::<f64>() * params.init_weight_max).collect();
        let mut state = StdpNetworkState {
            theta: vec![0.0; params.n_exc],
            dynamics: NeuronDynamics::at_rest(&params),
            weights,
            params,
        };
        state.normalize_columns();
        Ok(state)
    }

    pub fn weight(&self, input: usize, neuron: usize) -> f64 {
        self.weights[input * self.params.n_exc + neuron]
    }

    pub fn column_sum(&self, neuron: usize) -> f64 {
        (0..self.params.n_input).map(|i| self.weight(i, neuron)).sum()
    }

    /// Rescales every afferent column to sum to `column_sum` while keeping
    /// weights inside `[0, w_max]`: weights that would exceed `w_max` are pinned
    /// there and the remainder is spread over the others.
    pub fn normalize_columns(&mut self) {
        let (n_in, n_exc) = (self.params.n_input, self.params.n_exc);
        let (target, w_max) = (self.params.column_sum, self.params.w_max);
        let mut pinned = vec![false; n_in];
        for j in 0..n_exc {
            pinned.iter_mut().for_each(|p| *p = false);
            loop {
                let (mut free_sum, mut n_pinned) = (0.0, 0usize);
                for (i, &pin) in pinned.iter().enumerate() {
                    if pin {
                        n_pinned += 1;
                    } else {
                        free_sum += self.weights[i * n_exc + j];
                    }
                }
                let free_target = target - n_pinned as f64 * w_max;
                let n_free = n_in - n_pinned;
                let mut newly_pinned = false;
                for (i, pin) in pinned.iter_mut().enumerate() {
                    if *pin {
                        self.weights[i * n_exc + j] = w_max;
                        continue;
                    }
                    let w = &mut self.weights[i * n_exc + j];
                    *w = if free_sum > 0.0 { *w * free_target / free_sum } else { free_target / n_free as f64 };
                    if *w > w_max {
                        *pin = true;
                        newly_pinned = true;
                    }
                }
                if !newly_pinned {
                    break;
                }
            }
        }
    }

    /// Trace-based STDP over one step. Traces decay by `exp(−dt/τ_trace)`;
    /// a presynaptic spike depresses `w_ij` by `η_pre · x_post[j] · w^μ` and
    /// bumps `x_pre[i]`; a postsynaptic spike potentiates by
    /// `η_post · x_pre[i] · (w_max − w)^μ` and bumps `x_post[j]`.
    pub fn stdp_step(&mut self, pre_spikes: &[bool], post_spikes: &[bool]) {
        let pre: Vec<usize> = pre_spikes.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect();
        let post: Vec<usize> = post_spikes.iter().enumerate().filter(|(_, &s)| s).map(|(j, _)| j).collect();
        self.plasticity(&pre, &post);
    }

    fn plasticity(&mut self, pre: &[usize], post: &[usize]) {
        let p = &self.params;
        let n_exc = p.n_exc;
        let decay = (-p.dt_ms / p.tau_trace_ms).exp();
        let d = &mut self.dynamics;
        d.x_pre.iter_mut().for_each(|x| *x *= decay);
        d.x_post.iter_mut().for_each(|x| *x *= decay);
        let soft = |w: f64| if p.mu == 1.0 { w } else { w.powf(p.mu) };
        for &i in pre {
            let row = &mut self.weights[i * n_exc..(i + 1) * n_exc];
            for (w, &xp) in row.iter_mut().zip(&d.x_post) {
                if xp > 0.0 {
                    *w = (*w - p.eta_pre * xp * soft(*w)).max(0.0);
                }
            }
            d.x_pre[i] += 1.0;
        }
        for &j in post {
            for (i, &xp) in d.x_pre.iter().enumerate() {
                if xp > 0.0 {
                    let w = &mut self.weights[i * n_exc + j];
                    *w = (*w + p.eta_post * xp * soft(p.w_max - *w)).min(p.w_max);
                }
            }
            d.x_post[j] += 1.0;
        }
    }

    /// Runs one presentation of `train` starting from the current dynamics.
    /// With `learning`, applies STDP and threshold adaptation every step.
    pub fn simulate_presentation(
        &mut self,
        train: &SpikeTrain,
        coding: &RateCodingParams,
        learning: bool,
    ) -> Result<Vec<u32>, StdpError> {
        let raster = self.raster(train, coding)?;
        let mut counts = vec![0u32; self.params.n_exc];
        let mut post = Vec::new();
        for pre in &raster {
            integrate(&self.params, &self.weights, &self.theta, &mut self.dynamics, pre, &mut post)?;
            for &j in &post {
                counts[j] += 1;
            }
            if learning {
                self.plasticity(pre, &post);
                self.adapt_thresholds(&post);
            }
        }
        Ok(counts)
    }

    /// Silent inputs for the configured rest period.
    pub fn rest(&mut self, learning: bool) -> Result<(), StdpError> {
        let mut post = Vec::new();
        for _ in 0..self.params.steps(self.params.rest_ms) {
            integrate(&self.params, &self.weights, &self.theta, &mut self.dynamics, &[], &mut post)?;
            if learning {
                self.plasticity(&[], &post);
                self.adapt_thresholds(&post);
            }
        }
        Ok(())
    }

    fn adapt_thresholds(&mut self, post: &[usize]) {
        let decay = (-self.params.dt_ms / self.params.tau_theta_ms).exp();
        self.theta.iter_mut().for_each(|t| *t *= decay);
        for &j in post {
            self.theta[j] += self.params.theta_plus;
        }
    }

    fn raster(&self, train: &SpikeTrain, coding: &RateCodingParams) -> Result<Vec<Vec<usize>>, StdpError> {
        if train.counts.len() != self.params.n_input {
            return Err(StdpError::InputSize { expected: self.params.n_input, found: train.counts.len() });
        }
        train.step_raster(coding).ok_or(StdpError::MissingSpikeTimes)
    }

    /// Order-dependent digest of weights and thresholds.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &w in self.weights.iter().chain(&self.theta) {
            h = fnv_mix(h, w.to_bits());
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let p = &self.params;
        let mut ck = Checkpoint::new("stdp");
        for (name, value) in p.constants() {
            ck.meta.push((name.to_string(), value.to_string()));
        }
        ck.push("w_input_exc", &[p.n_input, p.n_exc], self.weights.iter().copied());
        ck.push("theta", &[p.n_exc], self.theta.iter().copied());
        ck
    }

    /// Restores weights, thresholds and every network constant.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, StdpError> {
        ck.expect_kind("stdp")?;
        let mut params = StdpParams::default();
        for name in params.constants().map(|(n, _)| n) {
            params.set_constant(name, ck.meta_parse(name)?);
        }
        params.validate()?;
        let (ws, w) = ck.tensor("w_input_exc")?;
        let (ts, t) = ck.tensor("theta")?;
        if ws != [params.n_input, params.n_exc] || ts != [params.n_exc] {
            return Err(CheckpointError::Format("stdp tensor shapes disagree with manifest".into()).into());
        }
        Ok(StdpNetworkState {
            dynamics: NeuronDynamics::at_rest(&params),
            weights: w.to_vec(),
            theta: t.to_vec(),
            params,
        })
    }
}

/// One exponential-Euler step of both layers. Writes the indices of firing
/// excitatory neurons into `post`.
fn integrate(
    p: &StdpParams,
    weights: &[f64],
    theta: &[f64],
    d: &mut NeuronDynamics,
    pre: &[usize],
    post: &mut Vec<usize>,
) -> Result<(), StdpError> {
    let n = p.n_exc;
    let decay_exc = (-p.dt_ms / p.tau_exc_ms).exp();
    let decay_inh = (-p.dt_ms / p.tau_inh_ms).exp();
    let (ref_exc, ref_inh) = (p.steps(p.refractory_exc_ms), p.steps(p.refractory_inh_ms));
    post.clear();

    // Excitatory layer: leak, input drive, lateral inhibition from the previous step.
    let inh_total = d.inh_fired.len() as f64;
    let mut own_partner_fired = vec![false; 0];
    if !d.inh_fired.is_empty() {
        own_partner_fired = vec![false; n];
        for &k in &d.inh_fired {
            own_partner_fired[k] = true;
        }
    }
    for j in 0..n {
        if d.refractory_exc[j] > 0 {
            continue;
        }
        let v = &mut d.v_exc[j];
        *v = p.v_rest_exc + (*v - p.v_rest_exc) * decay_exc;
        if inh_total > 0.0 {
            let others = inh_total - own_partner_fired[j] as u8 as f64;
            *v -= p.inh_to_exc * others;
        }
    }
    for &i in pre {
        let row = &weights[i * n..(i + 1) * n];
        for ((v, &w), &r) in d.v_exc.iter_mut().zip(row).zip(&d.refractory_exc) {
            if r == 0 {
                *v += p.input_gain * w;
            }
        }
    }
    for j in 0..n {
        if d.refractory_exc[j] > 0 {
            d.refractory_exc[j] -= 1;
            d.v_exc[j] = p.v_reset_exc;
            continue;
        }
        let v = &mut d.v_exc[j];
        if !v.is_finite() {
            return Err(StdpError::NumericalInstability { layer: "excitatory", neuron: j, step: d.step });
        }
        *v = v.max(p.v_floor);
        if *v >= p.v_thresh_base + theta[j] {
            *v = p.v_reset_exc;
            d.refractory_exc[j] = ref_exc;
            post.push(j);
        }
    }

    // Inhibitory partners driven one-to-one by this step's excitatory spikes.
    for j in 0..n {
        if d.refractory_inh[j] > 0 {
            d.refractory_inh[j] -= 1;
            d.v_inh[j] = p.v_reset_inh;
            continue;
        }
        let v = &mut d.v_inh[j];
        *v = p.v_rest_inh + (*v - p.v_rest_inh) * decay_inh;
    }
    for &j in post.iter() {
        if d.refractory_inh[j] == 0 {
            d.v_inh[j] += p.exc_to_inh;
        }
    }
    d.inh_fired.clear();
    for j in 0..n {
        if d.refractory_inh[j] > 0 {
            continue;
        }
        let v = &mut d.v_inh[j];
        if !v.is_finite() {
            return Err(StdpError::NumericalInstability { layer: "inhibitory", neuron: j, step: d.step });
        }
        if *v >= p.v_thresh_inh {
            *v = p.v_reset_inh;
            d.refractory_inh[j] = ref_inh;
            d.inh_fired.push(j);
        }
    }
    d.step += 1;
    Ok(())
}

/// Rate coding used with this network: the intensity gain is raised to
/// `k = 64` so that a 350 ms window drives the excitatory layer; the other
/// codec settings keep their defaults.
pub fn default_stdp_coding() -> RateCodingParams {
    RateCodingParams { k: 64.0, ..RateCodingParams::default() }
}

/// Presents every image `epochs` times (order reshuffled per epoch), each for
/// one window followed by the rest period, renormalising afferent columns
/// after every presentation.
pub fn train_unsupervised<R: Rng + ?Sized>(
    images: &[&MnistImage],
    epochs: usize,
    params: StdpParams,
    coding: &RateCodingParams,
    rng: &mut R,
) -> Result<StdpNetworkState, StdpError> {
    let mut state = StdpNetworkState::new(params, rng)?;
    let coding = RateCodingParams { materialize_times: true, ..*coding };
    let mut order: Vec<&MnistImage> = images.to_vec();
    for _ in 0..epochs {
        order.shuffle(rng);
        for im in &order {
            let train = adaptive_encode(im, &coding, rng)?;
            state.simulate_presentation(&train, &coding, true)?;
            state.normalize_columns();
            state.rest(true)?;
        }
    }
    Ok(state)
}

/// Frozen encoding: fresh resting dynamics, learning off. Never mutates `state`.
pub fn encode_image<R: Rng + ?Sized>(
    state: &StdpNetworkState,
    image: &MnistImage,
    coding: &RateCodingParams,
    rng: &mut R,
) -> Result<EncodingVector400, StdpError> {
    let coding = RateCodingParams { materialize_times: true, ..*coding };
    let train = adaptive_encode(image, &coding, rng)?;
    let raster = state.raster(&train, &coding)?;
    let mut d = NeuronDynamics::at_rest(&state.params);
    let mut counts = vec![0u32; state.params.n_exc];
    let mut post = Vec::new();
    for pre in &raster {
        integrate(&state.params, &state.weights, &state.theta, &mut d, pre, &mut post)?;
        for &j in &post {
            counts[j] += 1;
        }
    }
    Ok(EncodingVector400 { counts, image_index: image.index, image_label: image.label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn toy(n_input: usize, n_exc: usize) -> StdpParams {
        StdpParams { n_input, n_exc, column_sum: 0.1 * n_input as f64, ..Default::default() }
    }

    fn train_from_raster(pixels: usize, spikes: &[(usize, f64)], coding: &RateCodingParams) -> SpikeTrain {
        let mut times = vec![Vec::new(); pixels];
        for &(i, t) in spikes {
            times[i].push(t);
        }
        let counts: Vec<u32> = times.iter().map(|t| t.len() as u32).collect();
        SpikeTrain { total: counts.iter().map(|&c| c as u64).sum(), counts, times: Some(times), effective_k: coding.k }
    }

    #[test]
    fn silent_input_stays_at_rest() {
        let coding = RateCodingParams { materialize_times: true, ..Default::default() };
        let mut s = StdpNetworkState::new(toy(10, 4), &mut seed::stream(0, "s", 0)).unwrap();
        let start = [-58.0, -61.0, -70.0, -65.0];
        s.dynamics.v_exc = start.to_vec();
        let counts = s.simulate_presentation(&train_from_raster(10, &[], &coding), &coding, false).unwrap();
        assert!(counts.iter().all(|&c| c == 0));
        for (&v, &v0) in s.dynamics.v_exc.iter().zip(&start) {
            let want = -65.0 + (v0 + 65.0) * (-350.0f64 / 100.0).exp();
            assert!((v - want).abs() < 1e-9, "{v} vs {want}");
        }
    }

    #[test]
    fn decay_only_step_leaves_weights() {
        let mut s = StdpNetworkState::new(toy(5, 3), &mut seed::stream(1, "s", 0)).unwrap();
        s.dynamics.x_pre = vec![1.0; 5];
        s.dynamics.x_post = vec![0.5; 3];
        let w = s.weights.clone();
        s.stdp_step(&[false; 5], &[false; 3]);
        assert_eq!(s.weights, w);
        let k = (-1.0f64 / 20.0).exp();
        assert!(s.dynamics.x_pre.iter().all(|&x| (x - k).abs() < 1e-15));
        assert!(s.dynamics.x_post.iter().all(|&x| (x - 0.5 * k).abs() < 1e-15));
    }

    #[test]
    fn pre_then_post_potentiates() {
        let mut s = StdpNetworkState::new(toy(2, 1), &mut seed::stream(2, "s", 0)).unwrap();
        s.weights = vec![0.4, 0.4];
        s.stdp_step(&[true, false], &[false]);
        // No postsynaptic trace yet: the presynaptic spike cannot depress.
        assert_eq!(s.weights[0], 0.4);
        s.stdp_step(&[false, false], &[true]);
        // Δw = η_post · e^{−1/20} · (1 − 0.4)
        let want = 0.4 + 0.01 * (-1.0f64 / 20.0).exp() * 0.6;
        assert!((s.weights[0] - want).abs() < 1e-15);
        assert_eq!(s.weights[1], 0.4);
    }

    #[test]
    fn post_without_presynaptic_trace_changes_nothing() {
        let mut s = StdpNetworkState::new(toy(6, 2), &mut seed::stream(3, "s", 0)).unwrap();
        let w = s.weights.clone();
        s.stdp_step(&[false; 6], &[true, true]);
        assert_eq!(s.weights, w);
    }

    #[test]
    fn hand_stepped_single_neuron_trace() {
        // One input spiking every step into one excitatory neuron, no plasticity.
        let coding = RateCodingParams { delta_t: 0.02, materialize_times: true, ..Default::default() };
        let mut params = toy(1, 1);
        params.column_sum = 0.8;
        params.input_gain = 3.0;
        let mut s = StdpNetworkState::new(params.clone(), &mut seed::stream(4, "s", 0)).unwrap();
        assert!((s.weights[0] - 0.8).abs() < 1e-15);
        let train = train_from_raster(1, &(0..20).map(|t| (0, t as f64 * 1e-3 + 1e-4)).collect::<Vec<_>>(), &coding);
        let mut fired_at = Vec::new();
        let mut d = NeuronDynamics::at_rest(&params);
        let mut post = Vec::new();
        for (step, pre) in train.step_raster(&coding).unwrap().iter().enumerate() {
            integrate(&params, &s.weights, &s.theta, &mut d, pre, &mut post).unwrap();
            if !post.is_empty() {
                fired_at.push(step);
            }
        }

        let decay = (-1.0f64 / 100.0).exp();
        let (mut v, mut refractory, mut want) = (-65.0f64, 0, Vec::new());
        for step in 0..20 {
            if refractory > 0 {
                refractory -= 1;
                v = -60.0;
                continue;
            }
            v = -65.0 + (v + 65.0) * decay + 3.0 * 0.8;
            if v >= -52.0 {
                want.push(step);
                v = -60.0;
                refractory = 5;
            }
        }
        assert!(!want.is_empty());
        assert_eq!(fired_at, want);
        let counts = s.simulate_presentation(&train, &coding, false).unwrap();
        assert_eq!(counts, vec![want.len() as u32]);
    }

    #[test]
    fn normalisation_respects_bounds_and_target() {
        let mut s = StdpNetworkState::new(toy(20, 3), &mut seed::stream(5, "s", 0)).unwrap();
        // Concentrate mass so plain rescaling would overshoot w_max.
        for i in 0..20 {
            s.weights[i * 3] = if i < 3 { 5.0 } else { 0.01 };
        }
        s.normalize_columns();
        for j in 0..3 {
            assert!((s.column_sum(j) - 2.0).abs() < 1e-9);
        }
        assert!(s.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn lateral_inhibition_suppresses_competitors() {
        let params = toy(2, 2);
        let s = StdpNetworkState::new(params.clone(), &mut seed::stream(6, "s", 0)).unwrap();
        let mut d = NeuronDynamics::at_rest(&params);
        d.v_exc = vec![-51.0, -53.0];
        let mut post = Vec::new();
        integrate(&params, &s.weights, &s.theta, &mut d, &[], &mut post).unwrap();
        assert_eq!(post, vec![0]);
        assert_eq!(d.inh_fired, vec![0]);
        let before = d.v_exc[1];
        integrate(&params, &s.weights, &s.theta, &mut d, &[], &mut post).unwrap();
        let leak_only = -65.0 + (before + 65.0) * (-0.01f64).exp();
        assert!((d.v_exc[1] - (leak_only - params.inh_to_exc)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_potential_is_reported() {
        let params = toy(2, 1);
        let s = StdpNetworkState::new(params.clone(), &mut seed::stream(7, "s", 0)).unwrap();
        let mut d = NeuronDynamics::at_rest(&params);
        d.v_exc[0] = f64::NAN;
        let err = integrate(&params, &s.weights, &s.theta, &mut d, &[], &mut Vec::new()).unwrap_err();
        assert!(matches!(err, StdpError::NumericalInstability { .. }));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = StdpNetworkState::new(toy(8, 3), &mut seed::stream(8, "s", 0)).unwrap();
        let back = StdpNetworkState::from_checkpoint(&Checkpoint::from_bytes(&s.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, s.params);
        assert_eq!(back.weights, s.weights);
        assert_eq!(back.checksum(), s.checksum());
    }
}
