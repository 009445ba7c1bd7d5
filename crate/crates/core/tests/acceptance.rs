//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 3 4 5`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cpc_snn::autoencoder::lif_step;
use cpc_snn::codec::{adaptive_encode, encode_poisson, RateCodingParams};
use cpc_snn::cpc::{PlateauController, StopReason, TrainSchedule};
use cpc_snn::data::{build_subset, load_idx, MnistImage, PIXELS};
use cpc_snn::encoding::{build_table, class_separation, FrozenEncoder, FrozenStdpEncoder};
use cpc_snn::experiment::report::{accuracy_band, ordering_checks, TIER_GAP};
use cpc_snn::experiment::run::{run_experiment_on, seed_dir};
use cpc_snn::experiment::{gradcheck_all, render_table1, Dataset, EncodingKind, ExperimentConfig, RunOptions, Table1Row};
use cpc_snn::nn::Tensor;
use cpc_snn::seed;
use cpc_snn::stdp::{default_stdp_coding, encode_image, train_unsupervised, StdpParams};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn images() -> Vec<MnistImage> {
    let d = root().join("data");
    load_idx(d.join("mnist5k-images-idx3-ubyte"), d.join("mnist5k-labels-idx1-ubyte")).expect("MNIST IDX files in data/")
}

fn out_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&d);
    d
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() <= limit_s, || format!("{what} took {:.1} s, budget {limit_s} s", elapsed.as_secs_f64()))
}

fn table1_config(encoding: EncodingKind) -> ExperimentConfig {
    let d = root().join("data");
    ExperimentConfig {
        dataset: Dataset::Mnist2500,
        encoding,
        images_path: d.join("mnist5k-images-idx3-ubyte"),
        labels_path: d.join("mnist5k-labels-idx1-ubyte"),
        ..ExperimentConfig::default()
    }
}

/// Runs the three MNIST-2500 rows with freshly trained encoders.
fn table1_rows(images: &[MnistImage], dir: &Path) -> Result<Vec<Table1Row>, String> {
    let mut rows = Vec::new();
    for k in EncodingKind::ALL {
        let cfg = table1_config(k);
        let opts = RunOptions { jobs: jobs(), ..RunOptions::new(dir) };
        let t0 = Instant::now();
        let summary = run_experiment_on(&cfg, images, &opts).map_err(|e| e.to_string())?;
        eprintln!("  {} finished in {:.0} s", cfg.run_name(), t0.elapsed().as_secs_f64());
        rows.push(Table1Row { dataset: Dataset::Mnist2500, encoding: k, summary });
    }
    eprint!("{}", render_table1(&rows));
    Ok(rows)
}

fn criterion_1(rows: &[Table1Row]) -> Outcome {
    let check = &ordering_checks(rows)[0];
    let chain: Vec<String> = check.tiers.iter().map(|(k, a)| format!("{} {a:.4}", k.tag())).collect();
    let chain = chain.join(" > ");
    ensure(check.tiers.len() == 3 && check.pass, || format!("ordering with gaps ≥ {TIER_GAP} violated: {chain}"))?;
    Ok(chain)
}

fn criterion_2(rows: &[Table1Row]) -> Outcome {
    let mut detail = Vec::new();
    let mut failed = Vec::new();
    for r in rows {
        let (lo, hi) = accuracy_band(r.encoding);
        let line = format!("{} {:.4} in [{lo:.2}, {hi:.2}]", r.encoding.tag(), r.summary.mean_max_val_accuracy);
        if !r.in_band() {
            failed.push(line.clone());
        }
        detail.push(line);
    }
    ensure(failed.is_empty(), || format!("outside band: {}", failed.join("; ")))?;
    Ok(detail.join("; "))
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let schedule = TrainSchedule::default();

    // Loss improves at epochs 1-2 then stalls: halvings at 5 and 8.
    let mut c = PlateauController::new(&schedule);
    let mut halved = Vec::new();
    for e in 1..=9 {
        let loss = if e <= 2 { 1.0 - 0.1 * e as f64 } else { 0.8 };
        let d = c.observe(loss, 0.5 + 0.01 * e as f64);
        if d.lr_halved {
            halved.push(d.epoch);
        }
    }
    ensure(halved == [5, 8], || format!("lr halved at {halved:?}, expected [5, 8]"))?;
    ensure(c.learning_rate() == schedule.learning_rate / 4.0, || format!("lr {}", c.learning_rate()))?;

    // Accuracy peaks at epoch 7, then ten stale epochs (ties included).
    let mut c = PlateauController::new(&schedule);
    let mut stop = None;
    for e in 1..=40 {
        let acc = if e <= 7 { 0.5 + 0.05 * e as f64 } else { 0.85 };
        let d = c.observe(1.0 / e as f64, acc);
        if d.stop.is_some() {
            stop = Some((d.epoch, d.stop));
            break;
        }
    }
    ensure(stop == Some((17, Some(StopReason::EarlyStop))), || format!("early stop at {stop:?}, expected epoch 17"))?;

    // Ever-improving metrics run to the cap.
    let mut c = PlateauController::new(&schedule);
    let mut last = None;
    for e in 1..=150 {
        let d = c.observe(1.0 / e as f64, e as f64 / 1000.0);
        if d.stop.is_some() {
            last = Some((d.epoch, d.stop));
            break;
        }
    }
    ensure(last == Some((100, Some(StopReason::MaxEpochs))), || format!("cap stop at {last:?}, expected epoch 100"))?;
    within(t0.elapsed(), 1.0, "schedule test")?;
    Ok("halvings at 5, 8; early stop at 17; cap at 100".into())
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let report = gradcheck_all(None);
    eprint!("{}", report.render());
    ensure(report.passed(), || "some gradient check failed".into())?;
    for name in ["dense", "sigmoid-bce"] {
        let tol = report.get(name).map(|r| r.tolerance);
        ensure(tol == Some(1e-6), || format!("{name} tolerance {tol:?}"))?;
    }
    let control = gradcheck_all(Some("gru-3-steps"));
    ensure(!control.get("gru-3-steps").unwrap().passed, || "2× fault went undetected".into())?;
    within(t0.elapsed(), 60.0, "gradient suite")?;
    let worst = report.entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel err {worst:.2e}", report.entries.len()))
}

fn criterion_5(images: &[MnistImage]) -> Outcome {
    let t0 = Instant::now();
    let bright = MnistImage::new(vec![1.0; PIXELS], 0, 0).unwrap();
    let n = 100_000usize;
    let mut detail = Vec::new();
    for lambda in [0.5, 5.0, 35.0] {
        let params = RateCodingParams { k: lambda / 0.35, ..Default::default() };
        let mut rng = seed::stream(5, "acceptance-poisson", (lambda * 10.0) as u64);
        let mut draws = Vec::with_capacity(n + PIXELS);
        while draws.len() < n {
            draws.extend(encode_poisson(&bright, &params, &mut rng).unwrap().counts.iter().map(|&c| c as f64));
        }
        draws.truncate(n);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (lambda / n as f64).sqrt();
        // Var of the sample variance of a Poisson: (μ₄ − σ⁴)/n with μ₄ = λ + 3λ².
        let se_var = ((lambda + 2.0 * lambda * lambda) / n as f64).sqrt();
        ensure((mean - lambda).abs() <= 4.0 * se_mean, || format!("λ={lambda}: mean {mean} off by > 4 SE ({se_mean})"))?;
        ensure((var - lambda).abs() <= 4.0 * se_var, || format!("λ={lambda}: variance {var} off by > 4 SE ({se_var})"))?;
        detail.push(format!("λ={lambda}: mean {mean:.4} var {var:.4}"));
    }
    let subset = build_subset(images, 250, 1).unwrap();
    let coding = RateCodingParams::default();
    let mut fewest = u64::MAX;
    for im in &subset.images {
        let t = adaptive_encode(im, &coding, &mut seed::stream(1, "acceptance-smin", im.index as u64)).map_err(|e| e.to_string())?;
        fewest = fewest.min(t.total);
    }
    ensure(fewest >= coding.s_min, || format!("an image got only {fewest} spikes"))?;
    within(t0.elapsed(), 30.0, "codec statistics")?;
    detail.push(format!("min spikes over 2500 images {fewest}"));
    Ok(detail.join("; "))
}

fn ulps(a: f32, b: f32) -> u64 {
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i64::from(i32::MIN) - i64::from(i)
        } else {
            i64::from(i)
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

fn criterion_6() -> Outcome {
    use rand::Rng;
    let t0 = Instant::now();
    let mut rng = seed::stream(6, "acceptance-lif", 0);
    let n = 100_000;
    let (mut worst, mut worst_scaled) = (0, 0.0f64);
    for beta in [0.9f32, 0.5, 0.95, 0.999] {
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (vt, ut) = (Tensor::from_vec(&[n], v.clone()).unwrap(), Tensor::from_vec(&[n], u.clone()).unwrap());
        let (free, none) = lif_step(&vt, &ut, beta, f32::INFINITY).unwrap();
        ensure(none.data().iter().all(|&s| s == 0.0), || "spike with infinite threshold".into())?;
        for i in 0..n {
            let got = free.data()[i];
            // The formula in the working precision.
            let literal = beta * v[i] + (1.0 - beta) * u[i];
            worst = worst.max(ulps(got, literal));
            // Against exact arithmetic, in ulps of the larger term: the
            // result itself can cancel to zero, the terms cannot.
            let (a, b) = (beta as f64 * v[i] as f64, (1.0 - beta as f64) * u[i] as f64);
            let scale = a.abs().max(b.abs()) as f32;
            let unit = (scale.next_up() - scale) as f64;
            if unit > 0.0 {
                worst_scaled = worst_scaled.max((got as f64 - (a + b)).abs() / unit);
            }
        }
        let (post, spikes) = lif_step(&vt, &ut, beta, 1.0).unwrap();
        for i in 0..n {
            let pre = free.data()[i];
            let fired = pre >= 1.0;
            ensure(spikes.data()[i] == if fired { 1.0 } else { 0.0 }, || format!("spike mismatch at pre {pre}"))?;
            let expect = if fired { pre - 1.0 } else { pre };
            ensure(post.data()[i] == expect, || format!("reset mismatch: {} vs {expect}", post.data()[i]))?;
        }
        // Boundary: a threshold equal to the computed membrane fires, the
        // next float up does not.
        for i in 0..64 {
            let pre = free.data()[i];
            let one = |x: f32| Tensor::from_vec(&[1], vec![x]).unwrap();
            let (p, s) = lif_step(&one(v[i]), &one(u[i]), beta, pre).unwrap();
            ensure(s.data()[0] == 1.0 && p.data()[0] == 0.0, || format!("V = θ = {pre} did not spike"))?;
            let (_, s) = lif_step(&one(v[i]), &one(u[i]), beta, pre.next_up()).unwrap();
            ensure(s.data()[0] == 0.0, || format!("V just below θ spiked at {pre}"))?;
        }
    }
    ensure(worst <= 4, || format!("max error {worst} ulp against the formula"))?;
    ensure(worst_scaled <= 4.0, || format!("max error {worst_scaled:.2} ulp of the larger term against exact arithmetic"))?;
    let (p, s) = lif_step(&Tensor::from_vec(&[1], vec![1.0f32]).unwrap(), &Tensor::from_vec(&[1], vec![1.0]).unwrap(), 0.5, 1.0).unwrap();
    ensure(s.data()[0] == 1.0 && p.data()[0] == 0.0, || "V = V_thresh = 1 did not spike".into())?;
    within(t0.elapsed(), 5.0, "LIF exactness")?;
    Ok(format!("max {worst} ulp (formula), {worst_scaled:.2} ulp of term scale (exact) over {} updates; boundary fires", 4 * n))
}

fn criterion_7(images: &[MnistImage]) -> Outcome {
    let t0 = Instant::now();
    let subset = build_subset(images, 250, 1).unwrap();
    let (train, _) = subset.split_validation(0.1).unwrap();
    let coding = default_stdp_coding();
    let params = StdpParams::default();
    let state = train_unsupervised(&train, 1, params.clone(), &coding, &mut seed::stream(1, "stdp-train", 0)).map_err(|e| e.to_string())?;
    let (lo, hi) = state.weights.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
    ensure(lo >= 0.0 && hi <= params.w_max, || format!("weights span [{lo}, {hi}]"))?;

    let encoder = FrozenStdpEncoder::new(state.clone(), coding, 1);
    let before = encoder.checksum();
    let table = build_table(&encoder, &subset.images).map_err(|e| e.to_string())?;
    ensure(encoder.checksum() == before && encoder.state() == &state, || "encoding mutated the network".into())?;
    let probe = &subset.images[0];
    let again = encoder.encode(probe).map_err(|e| e.to_string())?;
    ensure(again == table.get(probe.index).unwrap(), || "re-encoding an image changed its vector".into())?;
    let direct = encode_image(&state, probe, &coding, &mut seed::stream(1, "stdp-encode", probe.index as u64)).unwrap();
    ensure(direct.counts.iter().map(|&c| c as f32).eq(again.iter().copied()), || "encoder is not keyed by image".into())?;

    let (w, b) = class_separation(&table);
    ensure(w - b >= 0.05, || format!("within {w:.4} − between {b:.4} < 0.05"))?;
    within(t0.elapsed(), 45.0 * 60.0, "STDP training and encoding")?;
    Ok(format!("within {w:.4} between {b:.4} gap {:.4}; weights in [{lo:.3}, {hi:.3}]", w - b))
}

fn metrics_files(dir: &Path, cfg: &ExperimentConfig) -> Vec<(u64, Vec<u8>)> {
    cfg.seeds.iter().map(|&s| (s, fs::read(seed_dir(dir, cfg, s).join("metrics.csv")).unwrap_or_default())).collect()
}

fn criterion_8(images: &[MnistImage], first: Option<&Path>) -> Outcome {
    let random = table1_config(EncodingKind::Random);
    let classifier = ExperimentConfig { seeds: vec![1], ..table1_config(EncodingKind::Classifier) };
    let base = match first {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out_dir("rerun-a");
            for cfg in [&random, &classifier] {
                run_experiment_on(cfg, images, &RunOptions { jobs: jobs(), ..RunOptions::new(&d) }).map_err(|e| e.to_string())?;
            }
            d
        }
    };
    let again = out_dir("rerun-b");
    let mut compared = 0;
    for cfg in [&random, &classifier] {
        run_experiment_on(cfg, images, &RunOptions { jobs: jobs(), ..RunOptions::new(&again) }).map_err(|e| e.to_string())?;
        for ((s, a), (_, b)) in metrics_files(&base, cfg).into_iter().zip(metrics_files(&again, cfg)) {
            ensure(!a.is_empty() && a == b, || format!("{} seed {s}: metrics.csv differs on rerun", cfg.run_name()))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} metrics files byte-identical across reruns"))
}

fn main() {
    let args: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| args.is_empty() || args.contains(&n);
    let names = [
        "Table 1 ordering (MNIST-2500, 3 seeds)",
        "Table 1 accuracy bands",
        "schedule fidelity",
        "gradient suite",
        "Poisson codec statistics",
        "LIF exactness",
        "STDP encoder separability",
        "reproducibility",
    ];
    let needs_images = (1..=8).filter(|&n| wanted(n)).any(|n| [1, 2, 5, 7, 8].contains(&n));
    let imgs = if needs_images { images() } else { Vec::new() };

    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            eprintln!("running criterion {n}: {}", names[n as usize - 1]);
            let t0 = Instant::now();
            let r = f().map(|d| format!("{d} [{:.1} s]", t0.elapsed().as_secs_f64()));
            results.push((n, r));
        }
    };
    run(3, &mut criterion_3);
    run(4, &mut criterion_4);
    run(5, &mut || criterion_5(&imgs));
    run(6, &mut criterion_6);
    run(7, &mut || criterion_7(&imgs));

    let table_dir = out_dir("table1");
    let table = if wanted(1) || wanted(2) { Some(table1_rows(&imgs, &table_dir)) } else { None };
    if let Some(t) = &table {
        run(1, &mut || t.clone().and_then(|rows| criterion_1(&rows)));
        run(2, &mut || t.clone().and_then(|rows| criterion_2(&rows)));
    }
    let base = table.as_ref().filter(|t| t.is_ok()).map(|_| table_dir.as_path());
    run(8, &mut || criterion_8(&imgs, base));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {n}: {}: {d}", names[*n as usize - 1]),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {n}: {}: {e}", names[*n as usize - 1]);
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
