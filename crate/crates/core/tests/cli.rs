use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use soi_core::data::DataPool;
use soi_core::synth::{encode_png, render_shape, ShapeStyle};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// A 10-class corpus of 20 shapes each plus a tiny two-stage model config.
    fn new(steps: u64, checkpoint_every: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace { dir };
        let corpus = ws.path("corpus");
        let out = soi(&["synth", corpus.to_str().unwrap(), "--per-class", "20"]);
        assert!(out.status.success());
        let text = format!(
            "seed = 3\n\
             [data]\ndir = {corpus:?}\n[data.fetch]\nrequests_per_second = 10000.0\n\
             [model.encoder]\nstages = [{{channels = 4, blocks = 1}}, {{channels = 8, blocks = 1}}]\nembed_dim = 8\n\
             [model.head]\nhidden_dim = 16\nout_dim = 8\n\
             [train]\nbatch_size = 8\nqueue_capacity = 32\ntotal_steps = {steps}\ncheckpoint_every = {checkpoint_every}\n\
             [eval]\ndataset = {corpus:?}\nepisodes = 20\n"
        );
        fs::write(ws.path("run.toml"), text).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        let out = self.path(out);
        let mut full = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        full.extend_from_slice(args);
        soi(&full)
    }
}

fn soi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soi")).env("SOI_LOG", "warn").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn ingest_skips_corrupt_files_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let files = dir.path().join("files");
    fs::create_dir_all(&files).unwrap();
    let mut manifest = String::new();
    for i in 0..100u64 {
        let name = format!("f{i:03}.png");
        let mut bytes = encode_png(&render_shape((i % 10) as usize, ShapeStyle::ColoredTexture, 32, i));
        if i % 20 == 7 {
            bytes.truncate(bytes.len() / 3);
        }
        fs::write(files.join(&name), bytes).unwrap();
        manifest.push_str(&format!("files/{name}\tshapes\n"));
    }
    fs::write(dir.path().join("manifest.txt"), manifest).unwrap();
    fs::write(dir.path().join("empty.txt"), "# nothing\n").unwrap();
    let cfg = |m: &str| {
        let p = dir.path().join(format!("{m}.toml"));
        fs::write(&p, format!("[data]\nmanifest = {:?}\n[data.fetch]\nrequests_per_second = 10000.0\n", dir.path().join(m))).unwrap();
        p
    };
    let full = cfg("manifest.txt");
    let ingest = |out: &str| {
        let out = dir.path().join(out);
        let o = soi(&["--config", full.to_str().unwrap(), "--out", out.to_str().unwrap(), "ingest"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = ingest("a");
    let b = ingest("b");
    assert_eq!(DataPool::load(&a.join("pool")).unwrap().len(), 95);
    assert_eq!(read(&a.join("pool/pool.json")), read(&b.join("pool/pool.json")));
    let report = String::from_utf8(read(&a.join("reports/fetch_report.csv"))).unwrap();
    assert_eq!(report.lines().count(), 101);
    assert_eq!(report.lines().filter(|l| l.contains(",ok,")).count(), 95);

    let empty = cfg("empty.txt");
    let o = soi(&["--config", empty.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap(), "ingest"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_steps_writes_only_the_initial_state() {
    let ws = Workspace::new(0, 2);
    assert_eq!(code(&ws.run("out", &["ingest"])), 0);
    assert_eq!(code(&ws.run("out", &["pretrain"])), 0);
    let mut names: Vec<String> = fs::read_dir(ws.path("out/checkpoints")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["encoder.soi", "trainer.soi"]);
    let log = String::from_utf8(read(&ws.path("out/reports/loss.csv"))).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn halted_run_resumes_to_the_same_result() {
    let ws = Workspace::new(6, 2);
    for out in ["straight", "split"] {
        assert_eq!(code(&ws.run(out, &["ingest"])), 0);
    }
    assert_eq!(code(&ws.run("straight", &["pretrain"])), 0);
    assert_eq!(code(&ws.run("split", &["pretrain", "--halt-at", "3"])), 0);
    assert!(!ws.path("split/checkpoints/encoder.soi").exists());
    assert_eq!(code(&ws.run("split", &["pretrain", "--resume"])), 0);
    for f in ["checkpoints/encoder.soi", "checkpoints/trainer.soi", "checkpoints/encoder_step00000004.soi", "reports/loss.csv"] {
        assert_eq!(read(&ws.path("straight").join(f)), read(&ws.path("split").join(f)), "{f}");
    }
    let log = String::from_utf8(read(&ws.path("straight/reports/loss.csv"))).unwrap();
    assert_eq!(log.lines().count(), 7);

    // Resuming under a different schedule is refused.
    let o = ws.run("split", &["--set", "train.learning_rate=0.5", "pretrain", "--resume"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_embed_and_analyze() {
    let ws = Workspace::new(4, 0);
    assert_eq!(code(&ws.run("out", &["ingest"])), 0);
    assert_eq!(code(&ws.run("out", &["pretrain"])), 0);
    let first = ws.run("out", &["eval"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let csv = String::from_utf8(read(&ws.path("out/reports/eval.csv"))).unwrap();
    let eval_bytes = csv.clone().into_bytes();
    // Header plus five classifiers for each of the two protocols.
    assert_eq!(csv.lines().count(), 11);
    for kind in ["LR", "SVM", "NN", "Cosine", "Proto"] {
        assert_eq!(csv.lines().filter(|l| l.starts_with(&format!("{kind},"))).count(), 2);
    }
    let table = String::from_utf8(first.stdout).unwrap();
    assert!(table.contains("5-way 1-shot") && table.contains("5-way 5-shot"));
    assert_eq!(code(&ws.run("out", &["eval"])), 0);
    assert_eq!(read(&ws.path("out/reports/eval.csv")), eval_bytes);

    assert_eq!(code(&ws.run("out", &["embed"])), 0);
    let emb = String::from_utf8(read(&ws.path("out/reports/embeddings.csv"))).unwrap();
    assert_eq!(emb.lines().count(), 201);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 2 + 8);

    let corpus = ws.path("corpus");
    let o = ws.run("out", &["analyze", ws.path("out/pool").to_str().unwrap(), corpus.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ws.path("out/reports/diversity_comparison.csv").exists());
}

#[test]
fn configuration_errors_exit_with_one() {
    let ws = Workspace::new(2, 0);
    assert_eq!(code(&ws.run("out", &["--set", "train.no_such_key=1", "ingest"])), 1);
    assert_eq!(code(&ws.run("out", &["--set", "train.temperature=0", "ingest"])), 1);
    let missing = ws.path("absent.toml");
    assert_eq!(code(&soi(&["--config", missing.to_str().unwrap(), "gradcheck"])), 1);
    let ok = soi(&["--out", ws.path("g").to_str().unwrap(), "gradcheck"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8(ok.stdout).unwrap().contains("0 failed"));
}
