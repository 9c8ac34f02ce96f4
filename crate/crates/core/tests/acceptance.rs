//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit if any hard criterion fails.
//!
//! `cargo test --test acceptance` runs everything; pass criterion numbers
//! (`cargo test --test acceptance -- 2 5 11`) to run a subset.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use soi_core::augment::AugmentationPolicy;
use soi_core::contrastive::{info_nce, momentum_update, EmbeddingQueue, LrSchedule, TrainConfig, Trainer};
use soi_core::data::{fetch, FetchConfig, ManifestProvider};
use soi_core::diversity::{dataset_entropy, MetricKind};
use soi_core::fewshot::{
    embed, evaluate, evaluate_with, fit_classifier, format_table, l2_normalized, sample_episode, ClassIndex, ClassifierKind,
    EvalReport, FitSettings, LabeledDataset, Protocol,
};
use soi_core::nn::{batch_norm, bin, instance_norm, Encoder, EncoderConfig, HeadConfig, Mode, NormKind, NormSettings, NormState, StageConfig};
use soi_core::rng::{derive_seed, rng_for, Rng as SeededRng};
use soi_core::synth::{encode_png, generate, render_shape, write_dataset, ShapeStyle};
use soi_core::tensor::{Graph, Tensor};
use soi_core::verify::gradient_suite;

#[derive(PartialEq)]
enum Outcome {
    Pass,
    Fail,
    /// Directional check that missed but stayed within noise; reported, not failed.
    Within,
}

struct Verdict {
    outcome: Outcome,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    Verdict { outcome: if ok { Outcome::Pass } else { Outcome::Fail }, detail }
}

fn soi() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_soi"));
    c.env("SOI_LOG", "warn");
    c
}

fn run_soi(args: &[&str]) -> i32 {
    soi().args(args).stdout(std::process::Stdio::null()).status().expect("spawn soi").code().unwrap_or(-1)
}

fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    l2_normalized(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
}

fn random_tensor(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Encoder used by the training criteria: four single-block stages of 8-64 channels.
fn micro_encoder(norm_kind: NormKind) -> EncoderConfig {
    EncoderConfig {
        stages: [8, 16, 32, 64].iter().map(|&channels| StageConfig { channels, blocks: 1 }).collect(),
        input_size: [3, 32, 32],
        embed_dim: 64,
        norm_kind,
        ..EncoderConfig::default()
    }
}

fn micro_head() -> HeadConfig {
    HeadConfig { hidden_dim: 128, out_dim: 64 }
}

fn micro_train(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 32, queue_capacity: 1024, total_steps: steps, learning_rate: 0.06, lr_schedule: LrSchedule::Cosine, seed, ..TrainConfig::default() }
}

fn pretrain_encoder(pool: &[Tensor], norm: NormKind, steps: u64, seed: u64) -> Encoder {
    let mut t = Trainer::new(&micro_encoder(norm), micro_head(), micro_train(steps, seed), AugmentationPolicy::default()).unwrap();
    t.run(pool, |_, _| Ok(())).unwrap();
    t.into_frozen_encoder()
}

fn one_shot_lr(enc: &Encoder, ds: &LabeledDataset, seed: u64) -> EvalReport {
    let e = embed(enc, ds.images()).unwrap();
    evaluate(&e, &ds.labels(), Protocol { n_way: 5, k_shot: 1, q_query: 15 }, 600, ClassifierKind::Lr, &FitSettings::default(), seed).unwrap()
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Verdict {
    let t = Instant::now();
    let suite = gradient_suite().unwrap();
    let worst = suite.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let lib_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let code = run_soi(&["--out", dir.path().to_str().unwrap(), "gradcheck"]);
    let cli_secs = t.elapsed().as_secs_f64();
    let names: Vec<&str> = suite.iter().map(|c| c.name.as_str()).collect();
    let covered = ["conv2d", "batch_norm", "instance_norm", "bin(gamma=0)", "bin(gamma=0.3)", "bin(gamma=0.5)", "bin(gamma=1)", "projection_head", "info_nce(queue=1)", "info_nce(queue=8)", "info_nce(queue=64)"]
        .iter()
        .all(|k| names.iter().any(|n| n.starts_with(k)));
    verdict(
        suite.iter().all(|c| c.passed()) && code == 0 && covered && lib_secs.max(cli_secs) < 60.0,
        format!("{} checks, worst {} = {:.2e} (< 1e-4), `soi gradcheck` exit {code}, {:.2}s (< 60s)", suite.len(), worst.name, worst.max_rel_error, lib_secs.max(cli_secs)),
    )
}

// 2 ------------------------------------------------------------------------

fn info_nce_oracle() -> Verdict {
    let mut rng = rng_for(2, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=16);
        let n = rng.random_range(0..=64);
        let tau = rng.random_range(0.05..1.0);
        let q = unit(&mut rng, d);
        let p = unit(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let got = info_nce(&q, &p, &refs, tau, false).unwrap();
        // Plain softmax cross-entropy with the positive as class 0.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let logits: Vec<f64> = std::iter::once(dot(&q, &p)).chain(negs.iter().map(|k| dot(&q, k))).map(|s| s / tau).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let want = -(logits[0].exp() / z).ln();
        worst = worst.max((got - want).abs());
    }
    verdict(worst < 1e-6, format!("1000 instances, max |info_nce - oracle| = {worst:.2e} (< 1e-6)"))
}

// 3 ------------------------------------------------------------------------

fn bin_endpoints() -> Verdict {
    let mut rng = rng_for(3, &[]);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (b, c, h, w) = (rng.random_range(2..5), rng.random_range(1..5), rng.random_range(1..6), rng.random_range(2..6));
        let x = random_tensor(&mut rng, &[b, c, h, w], 3.0);
        let scale = random_tensor(&mut rng, &[c], 2.0);
        let shift = random_tensor(&mut rng, &[c], 2.0);
        for gamma in [1.0, 0.0] {
            let st = NormState::<f64>::new(c, &NormSettings { gamma, ..NormSettings::default() });
            let mut g = Graph::new();
            let (xv, sv, tv) = (g.constant(x.clone()), g.constant(scale.clone()), g.constant(shift.clone()));
            let (mixed, _) = bin(&mut g, xv, sv, tv, &st, Mode::Train).unwrap();
            let reference = if gamma == 1.0 { batch_norm(&mut g, xv, &st, Mode::Train).unwrap().0 } else { instance_norm(&mut g, xv, st.eps).unwrap() };
            let reference = g.channel_affine(reference, sv, tv).unwrap();
            let same = g.value(mixed).data().iter().zip(g.value(reference).data()).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
        }
    }
    verdict(mismatches == 0, format!("100 inputs: BIN(1) vs BN and BIN(0) vs IN, {mismatches} non-bitwise matches"))
}

// 4 ------------------------------------------------------------------------

fn momentum_geometry() -> Verdict {
    let cfg = EncoderConfig { stages: vec![StageConfig { channels: 4, blocks: 1 }], input_size: [3, 8, 8], embed_dim: 8, ..EncoderConfig::default() };
    let online = Encoder::<f64>::init(&cfg, 1).unwrap();
    let start = Encoder::<f64>::init(&cfg, 2).unwrap();
    let dist = |a: &Encoder<f64>, b: &Encoder<f64>| {
        a.params().iter().zip(b.params().iter()).flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q))).sum::<f64>().sqrt()
    };
    let d0 = dist(&start, &online);
    let mut worst = 0.0f64;
    for eta in [0.9, 0.99] {
        let mut target = start.clone();
        for _ in 0..50 {
            momentum_update(target.params_mut(), online.params(), eta).unwrap();
        }
        let rel = (dist(&target, &online) - eta.powi(50) * d0).abs() / (eta.powi(50) * d0);
        worst = worst.max(rel);
    }
    verdict(worst < 1e-6, format!("eta 0.9 and 0.99, t = 50: max relative deviation from eta^t = {worst:.2e} (< 1e-6)"))
}

// 5 ------------------------------------------------------------------------

fn queue_fifo() -> Verdict {
    let mut rng = rng_for(5, &[]);
    let mut bad = 0;
    for _ in 0..10_000 {
        let cap = rng.random_range(1..=32);
        let dim = rng.random_range(1..=6);
        let mut q = EmbeddingQueue::<f64>::new(cap, dim).unwrap();
        let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..rng.random_range(0..80) {
            let e = unit(&mut rng, dim);
            q.enqueue(&e).unwrap();
            oracle.push_back(e);
            if oracle.len() > cap {
                oracle.pop_front();
            }
        }
        let got: Vec<&[f64]> = q.iter().collect();
        let want: Vec<&[f64]> = oracle.iter().map(Vec::as_slice).collect();
        bad += usize::from(got != want || q.len() != oracle.len());
    }
    verdict(bad == 0, format!("10000 random sequences against a replay oracle, {bad} mismatches"))
}

// 6 ------------------------------------------------------------------------

fn shannon() -> Verdict {
    let gray = |v: f32| Tensor::new([3, 2, 2], vec![v; 12]).unwrap();
    let constant: Vec<Tensor> = (0..50).map(|_| gray(0.4)).collect();
    let h_const: Vec<f64> = MetricKind::ALL.iter().map(|&m| dataset_entropy(&constant, m).unwrap()).collect();
    // Gray level k/255 puts every gray statistic in bin k.
    let ramp: Vec<Tensor> = (0..256).map(|k| gray(k as f32 / 255.0)).collect();
    let h_uniform = dataset_entropy(&ramp, MetricKind::Mean).unwrap();
    let h_median = dataset_entropy(&ramp, MetricKind::Median).unwrap();
    let half = [gray(0.0), gray(1.0)];
    let h_half = dataset_entropy(&half, MetricKind::Mean).unwrap();
    verdict(
        h_const.iter().all(|&h| h == 0.0) && (h_uniform - 8.0).abs() < 1e-9 && (h_median - 8.0).abs() < 1e-9 && (h_half - 1.0).abs() < 1e-12,
        format!("constant H = {:?}; uniform 256 bins H = {h_uniform:.12}; two-point H = {h_half:.12}", h_const),
    )
}

// 7 ------------------------------------------------------------------------

fn write_run_config(path: &Path, corpus: &Path, steps: u64) {
    let text = format!(
        "seed = 17\n\
         [data]\ndir = {corpus:?}\n[data.fetch]\nrequests_per_second = 10000.0\n\
         [model.encoder]\nstages = [{{channels = 8, blocks = 1}}, {{channels = 16, blocks = 1}}, {{channels = 32, blocks = 1}}, {{channels = 64, blocks = 1}}]\nembed_dim = 64\n\
         [model.head]\nhidden_dim = 128\nout_dim = 64\n\
         [train]\nbatch_size = 32\nqueue_capacity = 256\ntotal_steps = {steps}\ncheckpoint_every = 20\nlearning_rate = 0.06\nlr_schedule = \"cosine\"\n"
    );
    fs::write(path, text).unwrap();
}

fn determinism() -> Verdict {
    let t = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let corpus = work.path().join("corpus");
    write_dataset(&generate(ShapeStyle::ColoredTexture, 50, 32, 7), &corpus).unwrap();
    let cfg = work.path().join("run.toml");
    let steps = 60;
    write_run_config(&cfg, &corpus, steps);
    let mut codes = Vec::new();
    for run in ["a", "b"] {
        let out = work.path().join(run);
        for cmd in ["ingest", "pretrain"] {
            codes.push(run_soi(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd]));
        }
    }
    let read = |run: &str, rel: &str| fs::read(work.path().join(run).join(rel)).unwrap_or_default();
    let files = ["checkpoints/encoder.soi", "checkpoints/trainer.soi", "reports/loss.csv", "pool/pool.json"];
    let identical = files.iter().all(|f| !read("a", f).is_empty() && read("a", f) == read("b", f));
    let rows = String::from_utf8(read("a", "reports/loss.csv")).unwrap().lines().count();
    verdict(
        codes.iter().all(|&c| c == 0) && identical && rows == steps as usize + 1,
        format!("500 images, 2 x {steps} steps via the CLI: final checkpoints and loss logs bitwise identical = {identical}, exits {codes:?}, {:.0}s (< 600s)", t.elapsed().as_secs_f64()),
    )
}

// 8 and 9 ------------------------------------------------------------------

const E2E_STEPS: u64 = 3000;
const E2E_THRESHOLD: f64 = 0.35;
const ABLATION_STEPS: u64 = 600;

fn end_to_end(colored: &LabeledDataset) -> Verdict {
    let t = Instant::now();
    let pool: Vec<Tensor> = colored.items.iter().map(|i| i.image.clone()).collect();
    let init = Trainer::new(&micro_encoder(NormKind::BatchInstance), micro_head(), micro_train(E2E_STEPS, 5), AugmentationPolicy::default()).unwrap();
    let baseline = one_shot_lr(&init.into_frozen_encoder(), colored, 77);
    let enc = pretrain_encoder(&pool, NormKind::BatchInstance, E2E_STEPS, 5);
    let r = one_shot_lr(&enc, colored, 77);
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    verdict(
        r.mean_accuracy >= E2E_THRESHOLD && minutes <= 30.0,
        format!(
            "2000 shapes, {E2E_STEPS} steps: 5-way 1-shot LR {} over 600 episodes (>= {:.0}%; untrained {}), {minutes:.1} min (<= 30)",
            r.cell(),
            100.0 * E2E_THRESHOLD,
            baseline.cell()
        ),
    )
}

fn bin_ablation(colored: &LabeledDataset) -> Verdict {
    let pool: Vec<Tensor> = colored.items.iter().map(|i| i.image.clone()).collect();
    let held_out = generate(ShapeStyle::Binarized, 60, 32, 2);
    let mut arms = Vec::new();
    for norm in [NormKind::BatchInstance, NormKind::Batch] {
        let mut per_episode = Vec::new();
        let mut means = Vec::new();
        for seed in [11, 12, 13] {
            let r = one_shot_lr(&pretrain_encoder(&pool, norm, ABLATION_STEPS, seed), &held_out, 99);
            means.push(format!("{:.1}", 100.0 * r.mean_accuracy));
            per_episode.extend(r.per_episode);
        }
        arms.push((norm, EvalReport::from_accuracies(norm.label(), Protocol { n_way: 5, k_shot: 1, q_query: 15 }, per_episode), means));
    }
    let (bin_r, bn_r) = (&arms[0].1, &arms[1].1);
    let gap = bin_r.mean_accuracy - bn_r.mean_accuracy;
    let noise = bin_r.ci95_halfwidth.hypot(bn_r.ci95_halfwidth);
    let outcome = if gap >= 0.0 {
        Outcome::Pass
    } else if -gap <= noise {
        Outcome::Within
    } else {
        Outcome::Fail
    };
    Verdict {
        outcome,
        detail: format!(
            "colored -> binarized, 3 seeds x {ABLATION_STEPS} steps: BIN {} (seeds {:?}) vs BN {} (seeds {:?}), gap {:+.2} points, CI {:.2}",
            bin_r.cell(),
            arms[0].2,
            bn_r.cell(),
            arms[1].2,
            100.0 * gap,
            100.0 * noise
        ),
    }
}

// 10 -----------------------------------------------------------------------

/// Coarse-to-fine grid search over `(w0, w1, b)`.
fn grid_minimize(f: impl Fn([f64; 3]) -> f64) -> [f64; 3] {
    let mut center = [0.0; 3];
    let mut half = 16.0;
    let n = 12i32;
    for _ in 0..40 {
        let mut best = (f64::INFINITY, center);
        for i in -n..=n {
            for j in -n..=n {
                for k in -n..=n {
                    let p = [center[0] + half * i as f64 / n as f64, center[1] + half * j as f64 / n as f64, center[2] + half * k as f64 / n as f64];
                    let v = f(p);
                    if v < best.0 {
                        best = (v, p);
                    }
                }
            }
        }
        center = best.1;
        half *= 0.5;
    }
    center
}

/// Independent two-class fits on 2-D points: LR through the difference
/// parameterization, SVM as two one-vs-rest squared-hinge problems, Proto in closed form.
fn brute_force_predict(kind: ClassifierKind, x: &[Vec<f64>], y: &[usize], q: &[Vec<f64>], reg: f64) -> Vec<usize> {
    let score = |p: [f64; 3], v: &[f64]| p[0] * v[0] + p[1] * v[1] + p[2];
    match kind {
        ClassifierKind::Lr => {
            // The optimum has w1 = -w0, so with u = w1 - w0 the penalty is reg/4 |u|^2.
            let p = grid_minimize(|p| {
                let ce: f64 = x.iter().zip(y).map(|(v, &c)| {
                    let s = if c == 1 { 1.0 } else { -1.0 };
                    let m = -s * score(p, v);
                    m.max(0.0) + (-m.abs()).exp().ln_1p()
                }).sum();
                ce + 0.25 * reg * (p[0] * p[0] + p[1] * p[1])
            });
            q.iter().map(|v| usize::from(score(p, v) > 0.0)).collect()
        }
        ClassifierKind::Svm => {
            let fits: Vec<[f64; 3]> = (0..2)
                .map(|class| {
                    grid_minimize(|p| {
                        let loss: f64 = x.iter().zip(y).map(|(v, &c)| {
                            let s = if c == class { 1.0 } else { -1.0 };
                            (1.0 - s * score(p, v)).max(0.0).powi(2)
                        }).sum();
                        loss + 0.5 * reg * (p[0] * p[0] + p[1] * p[1])
                    })
                })
                .collect();
            q.iter().map(|v| usize::from(score(fits[1], v) > score(fits[0], v))).collect()
        }
        _ => {
            let mean = |c: usize| {
                let pts: Vec<&Vec<f64>> = x.iter().zip(y).filter(|(_, &l)| l == c).map(|(v, _)| v).collect();
                [pts.iter().map(|v| v[0]).sum::<f64>() / pts.len() as f64, pts.iter().map(|v| v[1]).sum::<f64>() / pts.len() as f64]
            };
            let (m0, m1) = (mean(0), mean(1));
            let d = |m: [f64; 2], v: &[f64]| (m[0] - v[0]).powi(2) + (m[1] - v[1]).powi(2);
            q.iter().map(|v| usize::from(d(m1, v) < d(m0, v))).collect()
        }
    }
}

fn toy_points(classes: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng_for(seed, &[]);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..classes {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        for _ in 0..per {
            x.push(center.iter().map(|m| m + spread * (rng.random::<f64>() + rng.random::<f64>() - 1.0)).collect());
            y.push(c);
        }
    }
    (x, y)
}

fn classifier_harness() -> Verdict {
    let (x, y) = toy_points(10, 40, 2, 1.5, 10);
    let settings = FitSettings::default();
    let two_way = Protocol { n_way: 2, k_shot: 5, q_query: 15 };
    let mut gaps = Vec::new();
    let mut worst = 0.0f64;
    for kind in [ClassifierKind::Lr, ClassifierKind::Svm, ClassifierKind::Proto] {
        let ours = evaluate(&x, &y, two_way, 50, kind, &settings, 40).unwrap();
        let oracle = evaluate_with(&x, &y, two_way, 50, 40, "oracle", |_, sx, sy, qx| Ok(brute_force_predict(kind, sx, sy, qx, settings.reg))).unwrap();
        let gap = (ours.mean_accuracy - oracle.mean_accuracy).abs();
        worst = worst.max(gap);
        gaps.push(format!("{kind} {:.2}/{:.2}", 100.0 * ours.mean_accuracy, 100.0 * oracle.mean_accuracy));
    }
    let (x5, y5) = toy_points(20, 30, 8, 2.0, 11);
    let mut reports = Vec::new();
    for k in [1, 5] {
        for kind in ClassifierKind::ALL {
            reports.push(evaluate(&x5, &y5, Protocol { n_way: 5, k_shot: k, q_query: 15 }, 100, kind, &settings, 41).unwrap());
        }
    }
    let table = format_table(&reports);
    let shaped = table.lines().count() == 7 && ClassifierKind::ALL.iter().all(|k| table.lines().any(|l| l.starts_with(k.label()))) && table.matches(" ± ").count() == 10;
    for line in table.lines() {
        println!("        {line}");
    }
    verdict(worst <= 0.01 && shaped, format!("50 toy 2-way episodes, ours/brute-force accuracy %: {} (max gap {:.2} <= 1 point); five-kind table emitted", gaps.join(", "), 100.0 * worst))
}

// 11 -----------------------------------------------------------------------

fn k1_coincidence() -> Verdict {
    let (x, y) = toy_points(15, 20, 8, 2.5, 12);
    let x: Vec<Vec<f64>> = x.iter().map(|v| l2_normalized(v)).collect();
    let index = ClassIndex::new(&y);
    let mut rng = rng_for(13, &[]);
    let mut disagreements = 0;
    let mut queries = 0;
    for e in 0..1000u64 {
        let n = rng.random_range(2..=10);
        let ep = sample_episode(&index, Protocol { n_way: n, k_shot: 1, q_query: rng.random_range(1..=19) }, derive_seed(14, &[e])).unwrap();
        let sx: Vec<Vec<f64>> = ep.support.iter().map(|&(i, _)| x[i].clone()).collect();
        let sy: Vec<usize> = ep.support.iter().map(|&(_, l)| l).collect();
        let qx: Vec<Vec<f64>> = ep.query.iter().map(|&(i, _)| x[i].clone()).collect();
        let predict = |kind| fit_classifier(&sx, &sy, n, kind, &FitSettings::default()).unwrap().predict(&qx).unwrap();
        let nn = predict(ClassifierKind::Nn);
        let cos = predict(ClassifierKind::Cosine);
        let proto = predict(ClassifierKind::Proto);
        disagreements += nn.iter().zip(&cos).zip(&proto).filter(|((a, b), c)| !(a == b && b == c)).count();
        queries += qx.len();
    }
    verdict(disagreements == 0, format!("1000 random k = 1 episodes, {queries} queries: NN / Cosine / normalized Proto disagree on {disagreements}"))
}

// 12 -----------------------------------------------------------------------

fn ingestion() -> Verdict {
    let work = tempfile::tempdir().unwrap();
    let corpus = work.path().join("files");
    fs::create_dir_all(&corpus).unwrap();
    for i in 0..95u64 {
        fs::write(corpus.join(format!("img{i:03}.png")), encode_png(&render_shape((i % 10) as usize, ShapeStyle::ColoredTexture, 32, i))).unwrap();
    }
    let good = encode_png(&render_shape(0, ShapeStyle::Binarized, 32, 1000));
    let corrupt: [Vec<u8>; 5] = [good[..good.len() / 2].to_vec(), good[..24].to_vec(), Vec::new(), b"not an image at all".to_vec(), {
        let mut g = good.clone();
        g[0] = b'X';
        g
    }];
    for (i, bytes) in corrupt.iter().enumerate() {
        fs::write(corpus.join(format!("bad{i}.png")), bytes).unwrap();
    }
    let cfg = work.path().join("run.toml");
    fs::write(&cfg, format!("seed = 4\n[data]\ndir = {corpus:?}\n[data.fetch]\nrequests_per_second = 10000.0\n")).unwrap();
    let ingest = |out: &str, seed: Option<&str>| {
        let out = work.path().join(out);
        let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        args.push("ingest");
        let code = run_soi(&args);
        (code, fs::read_to_string(out.join("pool/pool.json")).unwrap_or_default(), fs::read_to_string(out.join("reports/fetch_report.csv")).unwrap_or_default())
    };
    let (c1, pool_a, report) = ingest("a", None);
    let (c2, pool_a2, _) = ingest("a", None);
    let (c3, pool_b, _) = ingest("b", None);
    let (c4, pool_c, _) = ingest("c", Some("5"));
    let pool = soi_core::data::DataPool::load(&work.path().join("a/pool")).unwrap();
    let other = soi_core::data::DataPool::load(&work.path().join("c/pool")).unwrap();
    let order = |p: &soi_core::data::DataPool| p.records().map(|r| r.id.clone()).collect::<Vec<_>>();
    let mut sorted_a = order(&pool);
    let mut sorted_c = order(&other);
    let shuffled = order(&pool) != order(&other) && order(&pool) != pool.insertion_order().iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    sorted_a.sort();
    sorted_c.sort();
    let failures = report.lines().skip(1).filter(|l| !l.contains(",ok,")).count();
    let stable = c1 == 0 && c2 == 0 && c3 == 0 && c4 == 0 && pool_a == pool_a2 && pool_a == pool_b && pool_a != pool_c;

    let manifest_dir = work.path().join("timed");
    fs::create_dir_all(&manifest_dir).unwrap();
    let mut manifest = String::new();
    for i in 0..10u64 {
        let name = format!("t{i}.png");
        fs::write(manifest_dir.join(&name), encode_png(&render_shape(1, ShapeStyle::Binarized, 32, 500 + i))).unwrap();
        manifest.push_str(&format!("{name}\tshape\n"));
    }
    fs::write(manifest_dir.join("manifest.txt"), manifest).unwrap();
    let provider = ManifestProvider { path: manifest_dir.join("manifest.txt") };
    let t = Instant::now();
    let results = fetch(&provider, &FetchConfig { requests_per_second: 2.0, ..FetchConfig::default() }).unwrap();
    let wall = t.elapsed();
    let timed = wall >= Duration::from_secs_f64(4.5) && wall <= Duration::from_secs_f64(4.95) && results.iter().all(|r| r.status.label() == "ok");
    verdict(
        pool.len() == 95 && failures == 5 && stable && shuffled && sorted_a == sorted_c && timed,
        format!(
            "100 files / 5 corrupt -> pool {} with {failures} reported failures; rerun identical = {stable}, shuffled = {shuffled}; 10 entries at 2/s took {:.2}s (4.5-4.95)",
            pool.len(),
            wall.as_secs_f64()
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut colored: Option<LabeledDataset> = None;
    let mut corpus = || colored.get_or_insert_with(|| generate(ShapeStyle::ColoredTexture, 200, 32, 1)).clone();
    let checks: Vec<(usize, &str, Box<dyn FnOnce() -> Verdict>)> = vec![
        (1, "gradient suite", Box::new(gradients)),
        (2, "InfoNCE oracle", Box::new(info_nce_oracle)),
        (3, "BIN endpoints", Box::new(bin_endpoints)),
        (4, "momentum geometry", Box::new(momentum_geometry)),
        (5, "queue FIFO", Box::new(queue_fifo)),
        (6, "Shannon analyzer", Box::new(shannon)),
        (7, "determinism", Box::new(determinism)),
        (8, "desk-scale end-to-end", if run(8) { let c = corpus(); Box::new(move || end_to_end(&c)) } else { Box::new(|| unreachable!()) }),
        (9, "BIN ablation direction", if run(9) { let c = corpus(); Box::new(move || bin_ablation(&c)) } else { Box::new(|| unreachable!()) }),
        (10, "classifier harness", Box::new(classifier_harness)),
        (11, "k=1 coincidence", Box::new(k1_coincidence)),
        (12, "ingestion", Box::new(ingestion)),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in checks {
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        let tag = match v.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Within => "WITHIN-CI",
        };
        println!("criterion {n:>2} {tag:<9} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
        if v.outcome == Outcome::Fail {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria met");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
