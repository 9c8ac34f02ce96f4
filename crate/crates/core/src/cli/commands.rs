use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::{Cli, CliError, Command, ExitStatus, RunConfig};
use crate::contrastive::{batch_indices, encoder_checkpoint, encoder_from_checkpoint, write_loss_row, TrainError, Trainer};
use crate::data::{build_pool, decode_resize, decode_rgb, ingest, write_report, Checkpoint, CheckpointError, DataError, DataPool, DirectoryProvider, ManifestProvider, Provider};
use crate::diversity::{analyze, write_comparison_csv, write_report_csv, DiversityError};
use crate::fewshot::{embed, evaluate, export_embeddings, format_table, write_reports_csv, EvalReport, FewshotError, LabeledDataset};
use crate::nn::Encoder;
use crate::synth::{generate, write_dataset};
use crate::tensor::Tensor;
use crate::verify::{gradient_suite, GRADCHECK_TOLERANCE};

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(ExitStatus::Config, e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(ExitStatus::Io, format!("{}: {e}", path.display()))
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io { .. } => ExitStatus::Io,
            _ => ExitStatus::Data,
        };
        CliError::new(status, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::Config(_) | TrainError::Checkpoint(_) => ExitStatus::Config,
            TrainError::Data(_) | TrainError::Augment { .. } => ExitStatus::Data,
            TrainError::Numeric { .. } => ExitStatus::Numeric,
            TrainError::Persist { .. } => ExitStatus::Io,
        };
        CliError::new(status, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let status = if matches!(e, CheckpointError::Io { .. }) { ExitStatus::Io } else { ExitStatus::Config };
        CliError::new(status, format!("checkpoint: {e}"))
    }
}

impl From<FewshotError> for CliError {
    fn from(e: FewshotError) -> Self {
        let status = match e {
            FewshotError::Io(_) => ExitStatus::Io,
            FewshotError::Data(_) => ExitStatus::Data,
            FewshotError::Protocol(_) | FewshotError::Unfrozen | FewshotError::Encoder(_) => ExitStatus::Config,
        };
        CliError::new(status, e.to_string())
    }
}

impl From<DiversityError> for CliError {
    fn from(e: DiversityError) -> Self {
        CliError::new(ExitStatus::Data, e.to_string())
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.out.join(p)
    }

    fn reports(&self) -> Result<PathBuf> {
        let d = self.path(&self.cfg.paths.reports);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn checkpoints(&self) -> Result<PathBuf> {
        let d = self.path(&self.cfg.paths.checkpoints);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn image_size(&self) -> (usize, usize) {
        let [_, h, w] = self.cfg.model.encoder.input_size;
        (h, w)
    }
}

/// Resolves the config, echoes it into `--out`, then runs the subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed).map_err(config_err)?;
    fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let echo = cli.out.join("effective_config.toml");
    fs::write(&echo, cfg.to_toml()).map_err(io_err(&echo))?;
    let ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Ingest { append } => cmd_ingest(&ctx, append),
        Command::Analyze { datasets } => cmd_analyze(&ctx, &datasets),
        Command::Pretrain { resume, halt_at } => cmd_pretrain(&ctx, resume, halt_at),
        Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint),
        Command::Embed { checkpoint, dataset, output } => cmd_embed(&ctx, checkpoint, dataset, output),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Synth { dir, style, per_class, size } => {
            let ds = generate(style, per_class, size, ctx.cfg.seed);
            write_dataset(&ds, &dir).map_err(io_err(&dir))?;
            info!("wrote {} images under {}", ds.len(), dir.display());
            Ok(())
        }
    }
}

fn cmd_ingest(ctx: &Ctx, append: bool) -> Result<()> {
    let data = &ctx.cfg.data;
    let provider: Box<dyn Provider> = match (&data.manifest, &data.dir) {
        (Some(m), _) => Box::new(ManifestProvider { path: m.clone() }),
        (None, Some(d)) => Box::new(DirectoryProvider { root: d.clone() }),
        (None, None) => return Err(config_err("ingest needs data.manifest or data.dir")),
    };
    let pool_dir = ctx.path(&ctx.cfg.paths.pool);
    let existing = if append && pool_dir.join("pool.json").exists() { Some(DataPool::load(&pool_dir)?) } else { None };
    let known: Vec<String> = existing.iter().flat_map(|p| p.records().map(|r| r.id.clone())).collect();
    let outcome = ingest(provider.as_ref(), &data.fetch, known)?;

    let report = ctx.reports()?.join("fetch_report.csv");
    let mut f = File::create(&report).map_err(io_err(&report))?;
    write_report(&outcome.report, &mut f).map_err(io_err(&report))?;
    let failures = outcome.failures().count();
    info!("{} accepted, {failures} failed; report at {}", outcome.accepted.len(), report.display());

    let pool = match existing {
        Some(mut p) => {
            p.extend(outcome.accepted)?;
            p
        }
        None => {
            if outcome.accepted.is_empty() {
                return Err(CliError::new(ExitStatus::Data, "no records passed the quality check"));
            }
            build_pool(outcome.accepted, ctx.cfg.seed)?
        }
    };
    if !append && pool_dir.exists() {
        fs::remove_dir_all(&pool_dir).map_err(io_err(&pool_dir))?;
    }
    pool.save(&pool_dir)?;
    info!("pool of {} records at {}", pool.len(), pool_dir.display());
    Ok(())
}

/// Images of a pool cache (a directory holding `pool.json`) or of every
/// decodable file under a directory, in sorted path order.
fn load_images(path: &Path) -> Result<Vec<Tensor>> {
    if path.join("pool.json").exists() {
        let pool = DataPool::load(path)?;
        return pool
            .records()
            .map(|r| decode_rgb(&r.bytes).map_err(|e| CliError::new(ExitStatus::Data, format!("{}: {e}", r.id))))
            .collect();
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(&f).map_err(io_err(&f))?;
        match decode_rgb(&bytes) {
            Ok(img) => images.push(img),
            Err(e) => warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(images)
}

fn dataset_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_analyze(ctx: &Ctx, datasets: &[PathBuf]) -> Result<()> {
    let reports_dir = ctx.reports()?;
    let mut reports = Vec::new();
    for path in datasets {
        let images = load_images(path)?;
        if images.is_empty() {
            return Err(CliError::new(ExitStatus::Data, format!("{}: no decodable images", path.display())));
        }
        let report = analyze(&dataset_name(path), &images)?;
        let out = reports_dir.join(format!("diversity_{}.csv", report.dataset));
        let mut f = File::create(&out).map_err(io_err(&out))?;
        write_report_csv(&report, &mut f).map_err(io_err(&out))?;
        info!("{}: {} images -> {}", report.dataset, report.image_count, out.display());
        reports.push(report);
    }
    if let [a, b] = reports.as_slice() {
        let out = reports_dir.join("diversity_comparison.csv");
        let mut f = File::create(&out).map_err(io_err(&out))?;
        write_comparison_csv(a, b, &mut f).map_err(io_err(&out))?;
    }
    Ok(())
}

fn trainer_path(dir: &Path) -> PathBuf {
    dir.join("trainer.soi")
}

/// Rewrites the loss log keeping the header and rows for steps below `keep`.
fn truncate_loss_log(path: &Path, keep: u64) -> Result<()> {
    let mut lines = vec!["step,loss,lr,queue_fill".to_string()];
    if path.exists() {
        let f = File::open(path).map_err(io_err(path))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(io_err(path))?;
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < keep) {
                lines.push(line);
            }
        }
    }
    let n = lines.len() as u64 - 1;
    if n != keep {
        return Err(CliError::new(ExitStatus::Data, format!("loss log has {n} rows before step {keep}")));
    }
    fs::write(path, lines.join("\n") + "\n").map_err(io_err(path))
}

fn cmd_pretrain(ctx: &Ctx, resume: bool, halt_at: Option<u64>) -> Result<()> {
    let cfg = &ctx.cfg;
    let pool = DataPool::load(&ctx.path(&cfg.paths.pool))?;
    if pool.is_empty() {
        return Err(CliError::new(ExitStatus::Data, "pool is empty"));
    }
    let size = ctx.image_size();
    let images: Vec<Tensor> = pool.records().map(|r| decode_resize(r, size)).collect::<std::result::Result<_, _>>()?;
    let ckpt_dir = ctx.checkpoints()?;
    let latest = trainer_path(&ckpt_dir);
    let loss_path = ctx.reports()?.join("loss.csv");

    let mut trainer = if resume && latest.exists() {
        let t = Trainer::from_checkpoint(&Checkpoint::load(&latest)?)?;
        let same = t.config == cfg.train
            && t.policy == cfg.augment
            && t.state().online_encoder.config() == &cfg.model.encoder
            && t.state().online_head.config() == cfg.model.head;
        if !same {
            return Err(config_err(format!("{} was written with a different configuration", latest.display())));
        }
        info!("resuming at step {}", t.step_count());
        t
    } else {
        Trainer::new(&cfg.model.encoder, cfg.model.head, cfg.train.clone(), cfg.augment.clone())?
    };
    truncate_loss_log(&loss_path, trainer.step_count())?;
    let mut log = OpenOptions::new().append(true).open(&loss_path).map_err(io_err(&loss_path))?;

    let total = cfg.train.total_steps;
    let stop = halt_at.map_or(total, |h| h.min(total));
    while trainer.step_count() < stop {
        let step = trainer.step_count();
        let idx = batch_indices(images.len(), cfg.train.batch_size, step, cfg.train.seed);
        let batch: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
        let record = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                // The failed step was rolled back, so this is the last good state.
                trainer.to_checkpoint().save(&latest)?;
                return Err(e.into());
            }
        };
        write_loss_row(&record, &mut log).map_err(io_err(&loss_path))?;
        let done = trainer.step_count();
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < total {
            log.flush().map_err(io_err(&loss_path))?;
            trainer.to_checkpoint().save(&latest)?;
            encoder_checkpoint(&trainer.state().online_encoder).save(&ckpt_dir.join(format!("encoder_step{done:08}.soi")))?;
        }
        if done % 100 == 0 || done == total {
            info!("step {done}/{total} loss {:.4} lr {:.5}", record.loss, record.lr);
        }
    }
    log.flush().map_err(io_err(&loss_path))?;
    trainer.to_checkpoint().save(&latest)?;
    if trainer.step_count() < total {
        info!("halted at step {}; rerun with --resume to continue", trainer.step_count());
        return Ok(());
    }
    let final_path = ckpt_dir.join("encoder.soi");
    encoder_checkpoint(&trainer.into_frozen_encoder()).save(&final_path)?;
    info!("frozen encoder at {}", final_path.display());
    Ok(())
}

fn load_encoder(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<Encoder> {
    let path = match checkpoint {
        Some(p) => p,
        None => ctx.path(&ctx.cfg.paths.checkpoints).join("encoder.soi"),
    };
    let enc = encoder_from_checkpoint(&Checkpoint::load(&path)?)?;
    let want = ctx.cfg.model.encoder.input_size;
    if enc.config().input_size != want {
        return Err(config_err(format!(
            "{} expects inputs {:?}, the configuration provides {want:?}",
            path.display(),
            enc.config().input_size
        )));
    }
    if want[0] != 3 {
        return Err(config_err("labeled datasets are RGB; model.encoder.input_size[0] must be 3"));
    }
    Ok(enc)
}

fn load_labeled(ctx: &Ctx, dataset: Option<PathBuf>) -> Result<LabeledDataset> {
    let dir = dataset.or_else(|| ctx.cfg.eval.dataset.clone()).ok_or_else(|| config_err("no dataset: set eval.dataset"))?;
    let ds = LabeledDataset::load_dir(&dir, ctx.image_size())?;
    if ds.is_empty() {
        return Err(CliError::new(ExitStatus::Data, format!("{}: no images", dir.display())));
    }
    Ok(ds)
}

fn cmd_eval(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let enc = load_encoder(ctx, checkpoint)?;
    let ds = load_labeled(ctx, None)?;
    let emb = embed(&enc, ds.images())?;
    let labels = ds.labels();
    let e = &ctx.cfg.eval;
    let mut reports: Vec<EvalReport> = Vec::new();
    for &p in &e.protocols {
        for &kind in &e.kinds {
            let r = evaluate(&emb, &labels, p, e.episodes, kind, &e.fit, ctx.cfg.seed)?;
            info!("{kind} {}-way {}-shot: {}", p.n_way, p.k_shot, r.cell());
            reports.push(r);
        }
    }
    let dir = ctx.reports()?;
    write_reports_csv(&dir.join("eval.csv"), &reports)?;
    let table = format_table(&reports);
    let tp = dir.join("eval_table.txt");
    fs::write(&tp, &table).map_err(io_err(&tp))?;
    let ep = dir.join("eval_episodes.csv");
    let mut s = String::from("kind,way,shot,episode,accuracy\n");
    for r in &reports {
        for (i, a) in r.per_episode.iter().enumerate() {
            s.push_str(&format!("{},{},{},{i},{a}\n", r.kind, r.n_way, r.k_shot));
        }
    }
    fs::write(&ep, s).map_err(io_err(&ep))?;
    print!("{table}");
    Ok(())
}

fn cmd_embed(ctx: &Ctx, checkpoint: Option<PathBuf>, dataset: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let enc = load_encoder(ctx, checkpoint)?;
    let ds = load_labeled(ctx, dataset)?;
    let out = match output {
        Some(p) => p,
        None => ctx.reports()?.join("embeddings.csv"),
    };
    export_embeddings(&enc, &ds, &out)?;
    info!("{} embeddings at {}", ds.len(), out.display());
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let started = std::time::Instant::now();
    let results = gradient_suite().map_err(|e| CliError::new(ExitStatus::Numeric, e.to_string()))?;
    let mut failed = 0;
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{mark:<4} {:<28} {:.3e}", r.name, r.max_rel_error);
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed, tolerance {GRADCHECK_TOLERANCE:e}, {:.2}s", results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::new(ExitStatus::Numeric, format!("{failed} gradient checks failed")));
    }
    Ok(())
}
