//! Every backward kernel against central finite differences in `f64`.

use rand::Rng;

use crate::autoencoder::{gradcheck_instance, Architecture, SpikeFn};
use crate::cpc::{bce_with_logits, CpcBatch, CpcConfig, CpcModel};
use crate::nn::{
    conv2d, conv2d_backward, dense, dense_backward, flatten, grad_check, gru_step, gru_step_backward, unflatten,
    upsample2x, upsample2x_backward, Conv2dSpec, GradCheckReport, GruParams, Tensor,
};
use crate::seed;

const H: f64 = 1e-5;
const TIGHT: f64 = 1e-6;
const LOOSE: f64 = 1e-4;

pub const CHECK_NAMES: [&str; 7] =
    ["dense", "gru-3-steps", "conv2d", "upsample2x", "surrogate-lif", "sigmoid-bce", "cpc-end-to-end"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteReport {
    pub entries: Vec<GradSuiteEntry>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed)
    }

    pub fn get(&self, name: &str) -> Option<&GradCheckReport> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.report)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>7} {:>12} {:>9}  result\n", "check", "coords", "max rel err", "tol");
        for e in &self.entries {
            let r = &e.report;
            s += &format!(
                "{:<16} {:>7} {:>12.3e} {:>9.0e}  {}\n",
                e.name,
                r.coordinates,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn scaled(mut g: Vec<f64>, fault: f64) -> Vec<f64> {
    g.iter_mut().for_each(|x| *x *= fault);
    g
}

/// `L = ⟨c, dense(x)⟩`; checks input, weight and bias gradients.
fn check_dense(fault: f64) -> GradCheckReport {
    let mut rng = seed::stream(1, "gradsuite-dense", 0);
    let (x, w, b, c) = (random(&[3, 5], &mut rng), random(&[4, 5], &mut rng), random(&[4], &mut rng), random(&[3, 4], &mut rng));
    let g = dense_backward(&x, &w, &c).unwrap();
    let analytic = flatten(&[&g.input, &g.weights, &g.bias]);
    let (mut px, mut pw, mut pb) = (x.clone(), w.clone(), b.clone());
    grad_check(
        |p| {
            unflatten(&mut [&mut px, &mut pw, &mut pb], p);
            dot(&c, &dense(&px, &pw, &pb).unwrap())
        },
        &flatten(&[&x, &w, &b]),
        &scaled(analytic, fault),
        H,
        TIGHT,
    )
}

/// `L = Σ_t ⟨c_t, h_t⟩` over three steps from a non-zero initial state;
/// checks parameters, inputs and the initial state.
fn check_gru(fault: f64) -> GradCheckReport {
    let mut rng = seed::stream(1, "gradsuite-gru", 0);
    let (d, hid, batch, steps) = (3, 4, 2, 3);
    let p = GruParams::<f64>::init(d, hid, &mut rng);
    let xs: Vec<Tensor<f64>> = (0..steps).map(|_| random(&[batch, d], &mut rng)).collect();
    let cs: Vec<Tensor<f64>> = (0..steps).map(|_| random(&[batch, hid], &mut rng)).collect();
    let h0 = random(&[batch, hid], &mut rng);

    let forward = |p: &GruParams<f64>, xs: &[Tensor<f64>], h0: &Tensor<f64>| {
        let (mut h, mut caches, mut loss) = (h0.clone(), Vec::new(), 0.0);
        for (x, c) in xs.iter().zip(&cs) {
            let (next, cache) = gru_step(x, &h, p).unwrap();
            loss += dot(c, &next);
            caches.push(cache);
            h = next;
        }
        (loss, caches)
    };
    let (_, caches) = forward(&p, &xs, &h0);
    let mut grads = GruParams::zeros(d, hid);
    let mut dxs = vec![Tensor::zeros(&[batch, d]); steps];
    let mut dh = Tensor::zeros(&[batch, hid]);
    for t in (0..steps).rev() {
        dh.add_assign(&cs[t]);
        let (dx, dh_prev) = gru_step_backward(&caches[t], &p, &dh, &mut grads).unwrap();
        dxs[t] = dx;
        dh = dh_prev;
    }
    let mut refs: Vec<&Tensor<f64>> = grads.tensors().to_vec();
    refs.extend(&dxs);
    refs.push(&dh);
    let analytic = flatten(&refs);

    let mut probe_p = p.clone();
    let mut probe_x = xs.clone();
    let mut probe_h = h0.clone();
    let mut p0: Vec<&Tensor<f64>> = p.tensors().to_vec();
    p0.extend(&xs);
    p0.push(&h0);
    let p0 = flatten(&p0);
    grad_check(
        |v| {
            let mut slots: Vec<&mut Tensor<f64>> = probe_p.tensors_mut().into_iter().collect();
            slots.extend(probe_x.iter_mut());
            slots.push(&mut probe_h);
            unflatten(&mut slots, v);
            forward(&probe_p, &probe_x, &probe_h).0
        },
        &p0,
        &scaled(analytic, fault),
        H,
        LOOSE,
    )
}

/// Strided, padded convolution; checks input, weight and bias gradients.
fn check_conv(fault: f64) -> GradCheckReport {
    let mut rng = seed::stream(1, "gradsuite-conv", 0);
    let spec = Conv2dSpec::new(2, 3, 3, 2);
    let (x, w, b) = (random(&[2, 6, 6], &mut rng), random(&spec.weight_shape(), &mut rng), random(&[3], &mut rng));
    let y = conv2d(&x, &w, Some(&b), &spec).unwrap();
    let c = random(y.shape(), &mut rng);
    let g = conv2d_backward(&x, &w, &c, &spec, true).unwrap();
    let analytic = flatten(&[&g.input, &g.weights, &g.bias]);
    let (mut px, mut pw, mut pb) = (x.clone(), w.clone(), b.clone());
    grad_check(
        |p| {
            unflatten(&mut [&mut px, &mut pw, &mut pb], p);
            dot(&c, &conv2d(&px, &pw, Some(&pb), &spec).unwrap())
        },
        &flatten(&[&x, &w, &b]),
        &scaled(analytic, fault),
        H,
        LOOSE,
    )
}

fn check_upsample(fault: f64) -> GradCheckReport {
    let mut rng = seed::stream(1, "gradsuite-upsample", 0);
    let x = random(&[2, 3, 3], &mut rng);
    let c = random(&[2, 6, 6], &mut rng);
    let analytic = flatten(&[&upsample2x_backward(&c).unwrap()]);
    let mut px = x.clone();
    grad_check(
        |p| {
            unflatten(&mut [&mut px], p);
            dot(&c, &upsample2x(&px).unwrap())
        },
        x.data(),
        &scaled(analytic, fault),
        H,
        TIGHT,
    )
}

/// Two spiking layers with the relaxed forward so that every parameter
/// reaches the loss smoothly through the surrogate path.
fn check_surrogate_lif(fault: f64) -> GradCheckReport {
    let arch = Architecture { input_side: 8, channels: vec![1, 3, 2], kernel: 3 };
    let (model, x) = gradcheck_instance(arch, SpikeFn::Relaxed, 3.0).expect("surrogate toy instance");
    let (_, grads) = model.loss_and_grad(&x).unwrap();
    let mut probe = model.clone();
    grad_check(
        |p| {
            probe.set_flat_parameters(p);
            probe.reconstruction_loss(&x).unwrap()
        },
        &model.flat_parameters(),
        &scaled(flatten(&grads.tensors()), fault),
        H,
        LOOSE,
    )
}

/// Analytic gradient of the stable logit form against differences of the
/// naive `−y log σ(z) − (1 − y) log(1 − σ(z))`.
fn check_sigmoid_bce(fault: f64) -> GradCheckReport {
    let mut rng = seed::stream(1, "gradsuite-bce", 0);
    let z: Vec<f64> = (0..10).map(|_| rng.random_range(-4.0..4.0)).collect();
    let y: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
    let (_, g) = bce_with_logits(&z, &y);
    let naive = |z: &[f64]| {
        let n = z.len() as f64;
        z.iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / n
    };
    grad_check(naive, &z, &scaled(g, fault), H, TIGHT)
}

/// GRU context → predictors → cosine scores → logit → BCE, all parameters.
fn check_cpc(fault: f64) -> GradCheckReport {
    let mut rng = seed::stream(1, "gradsuite-cpc", 0);
    let config = CpcConfig { hidden: 4, steps: 2, ..CpcConfig::new(3) };
    let mut m = CpcModel::<f64>::init(config, &mut rng).unwrap();
    m.bias.data_mut()[0] = 0.3;
    let batch = CpcBatch {
        context: (0..config.context_len).map(|_| random(&[6, 3], &mut rng)).collect(),
        targets: (0..config.steps).map(|_| random(&[6, 3], &mut rng)).collect(),
        labels: (0..6).map(|i| i % 2 == 0).collect(),
    };
    let (_, grads) = m.loss_and_grad(&batch).unwrap();
    let mut probe = m.clone();
    grad_check(
        |p| {
            probe.set_flat_parameters(p);
            probe.evaluate_batch(&batch).unwrap().loss
        },
        &m.flat_parameters(),
        &scaled(flatten(&grads.tensors()), fault),
        H,
        LOOSE,
    )
}

/// Runs the full suite. `inject` names a check whose analytic gradient is
/// doubled before comparison, as a negative control.
pub fn gradcheck_all(inject: Option<&str>) -> GradSuiteReport {
    let checks: [(&'static str, fn(f64) -> GradCheckReport); 7] = [
        ("dense", check_dense),
        ("gru-3-steps", check_gru),
        ("conv2d", check_conv),
        ("upsample2x", check_upsample),
        ("surrogate-lif", check_surrogate_lif),
        ("sigmoid-bce", check_sigmoid_bce),
        ("cpc-end-to-end", check_cpc),
    ];
    let entries = checks
        .iter()
        .map(|&(name, f)| GradSuiteEntry { name, report: f(if inject == Some(name) { 2.0 } else { 1.0 }) })
        .collect();
    GradSuiteReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let r = gradcheck_all(None);
        assert_eq!(r.entries.len(), CHECK_NAMES.len());
        assert!(r.passed(), "{}", r.render());
        assert_eq!(r.get("dense").unwrap().tolerance, 1e-6);
        assert_eq!(r.get("sigmoid-bce").unwrap().tolerance, 1e-6);
    }

    #[test]
    fn injected_fault_fails_only_its_check() {
        for name in ["dense", "gru-3-steps", "cpc-end-to-end"] {
            let r = gradcheck_all(Some(name));
            for e in &r.entries {
                assert_eq!(e.report.passed, e.name != name, "{}", r.render());
            }
        }
    }

    #[test]
    fn render_lists_every_check_with_its_error() {
        let text = gradcheck_all(None).render();
        for name in CHECK_NAMES {
            let line = text.lines().find(|l| l.starts_with(name)).unwrap();
            assert!(line.ends_with("PASS"), "{line}");
        }
    }
}
