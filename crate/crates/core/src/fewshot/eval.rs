use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use super::classifier::{fit_classifier, ClassifierKind, FitSettings};
use super::dataset::{sample_episode, ClassIndex, Episode, LabeledDataset, Protocol};
use super::FewshotError;
use crate::nn::Encoder;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const EMBED_CHUNK: usize = 64;

/// Encoder outputs for `images` (each `[C, H, W]`), in inference mode.
pub fn embed<'a>(encoder: &Encoder, images: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<Vec<f64>>, FewshotError> {
    if !encoder.is_frozen() {
        return Err(FewshotError::Unfrozen);
    }
    let images: Vec<&Tensor> = images.into_iter().collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
        let batch = Tensor::stack(&owned).map_err(|e| FewshotError::Data(e.to_string()))?;
        let v = encoder.infer(&batch).map_err(|e| FewshotError::Encoder(e.to_string()))?;
        out.extend((0..chunk.len()).map(|i| v.row(i).iter().map(|&x| f64::from(x)).collect::<Vec<f64>>()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub kind: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(kind: &str, p: Protocol, per_episode: Vec<f64>) -> Self {
        let e = per_episode.len() as f64;
        let mean = per_episode.iter().sum::<f64>() / e;
        let ci = if per_episode.len() > 1 {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1.0);
            1.96 * var.sqrt() / e.sqrt()
        } else {
            0.0
        };
        Self {
            kind: kind.to_string(),
            n_way: p.n_way,
            k_shot: p.k_shot,
            q_query: p.q_query,
            mean_accuracy: mean,
            ci95_halfwidth: ci,
            episodes: per_episode.len(),
            per_episode,
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol { n_way: self.n_way, k_shot: self.k_shot, q_query: self.q_query }
    }

    /// `mean ± ci` in percent, two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95_halfwidth)
    }
}

/// Runs `episodes` episodes with seeds `derive_seed(seed, [e])`; `predict`
/// receives the episode plus support and query embeddings with local labels
/// and returns one predicted label per query.
pub fn evaluate_with<F>(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    protocol: Protocol,
    episodes: usize,
    seed: u64,
    name: &str,
    mut predict: F,
) -> Result<EvalReport, FewshotError>
where
    F: FnMut(&Episode, &[Vec<f64>], &[usize], &[Vec<f64>]) -> Result<Vec<usize>, FewshotError>,
{
    if episodes == 0 {
        return Err(FewshotError::Protocol("episodes must be positive".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(FewshotError::Data(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
    }
    let index = ClassIndex::new(labels);
    let mut acc = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let ep = sample_episode(&index, protocol, derive_seed(seed, &[e as u64]))?;
        let sx: Vec<Vec<f64>> = ep.support.iter().map(|&(i, _)| embeddings[i].clone()).collect();
        let sy: Vec<usize> = ep.support.iter().map(|&(_, l)| l).collect();
        let qx: Vec<Vec<f64>> = ep.query.iter().map(|&(i, _)| embeddings[i].clone()).collect();
        let pred = predict(&ep, &sx, &sy, &qx)?;
        if pred.len() != ep.query.len() {
            return Err(FewshotError::Protocol(format!("{} predictions for {} queries", pred.len(), ep.query.len())));
        }
        let hits = pred.iter().zip(&ep.query).filter(|(p, q)| **p == q.1).count();
        acc.push(hits as f64 / ep.query.len() as f64);
    }
    Ok(EvalReport::from_accuracies(name, protocol, acc))
}

/// Fits `kind` on each episode's support set and scores its queries.
pub fn evaluate(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    protocol: Protocol,
    episodes: usize,
    kind: ClassifierKind,
    settings: &FitSettings,
    seed: u64,
) -> Result<EvalReport, FewshotError> {
    evaluate_with(embeddings, labels, protocol, episodes, seed, kind.label(), |ep, sx, sy, qx| {
        fit_classifier(sx, sy, ep.protocol.n_way, kind, settings)?.predict(qx)
    })
}

/// Text table: one row per classifier, one `mean ± ci` column per protocol.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut protocols: Vec<Protocol> = Vec::new();
    let mut kinds: Vec<&str> = Vec::new();
    for r in reports {
        if !protocols.contains(&r.protocol()) {
            protocols.push(r.protocol());
        }
        if !kinds.contains(&r.kind.as_str()) {
            kinds.push(&r.kind);
        }
    }
    let headers: Vec<String> = protocols.iter().map(|p| format!("{}-way {}-shot", p.n_way, p.k_shot)).collect();
    let width = headers.iter().map(|h| h.chars().count()).max().unwrap_or(0).max(14);
    let kw = kinds.iter().map(|k| k.len()).max().unwrap_or(0).max("Classifier".len());
    let mut s = String::new();
    let _ = write!(s, "{:<kw$}", "Classifier");
    for h in &headers {
        let _ = write!(s, " | {h:^width$}");
    }
    s.push('\n');
    let _ = write!(s, "{}", "-".repeat(kw));
    for _ in &headers {
        let _ = write!(s, "-+-{}", "-".repeat(width));
    }
    s.push('\n');
    for k in kinds {
        let _ = write!(s, "{k:<kw$}");
        for p in &protocols {
            let cell = reports.iter().find(|r| r.kind == k && r.protocol() == *p).map_or_else(|| "-".to_string(), EvalReport::cell);
            let _ = write!(s, " | {cell:^width$}");
        }
        s.push('\n');
    }
    s
}

pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<(), FewshotError> {
    let mut s = String::from("kind,way,shot,mean,ci95,episodes\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", r.kind, r.n_way, r.k_shot, r.mean_accuracy, r.ci95_halfwidth, r.episodes);
    }
    fs::write(path, s).map_err(|e| FewshotError::Io(format!("{}: {e}", path.display())))
}

/// CSV `id,class,e0..e{D-1}` with 9 significant digits per value.
pub fn write_embeddings_csv(path: &Path, ids: &[&str], classes: &[&str], embeddings: &[Vec<f64>]) -> Result<(), FewshotError> {
    let io = |e: std::io::Error| FewshotError::Io(format!("{}: {e}", path.display()));
    let d = embeddings.first().map_or(0, Vec::len);
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    let header: Vec<String> = ["id".to_string(), "class".to_string()].into_iter().chain((0..d).map(|i| format!("e{i}"))).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for ((id, class), e) in ids.iter().zip(classes).zip(embeddings) {
        write!(w, "{id},{class}").map_err(io)?;
        for v in e {
            write!(w, ",{v:.8e}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn export_embeddings(encoder: &Encoder, dataset: &LabeledDataset, path: &Path) -> Result<(), FewshotError> {
    let emb = embed(encoder, dataset.images())?;
    let ids: Vec<&str> = dataset.items.iter().map(|i| i.id.as_str()).collect();
    let classes: Vec<&str> = dataset.items.iter().map(|i| dataset.class_names[i.class].as_str()).collect();
    write_embeddings_csv(path, &ids, &classes, &emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fewshot::LabeledItem;
    use crate::nn::{EncoderConfig, NormKind, StageConfig};
    use crate::rng::rng_for;
    use rand::Rng;

    fn gaussian_classes(classes: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_for(seed, &[]);
        let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(m.iter().map(|a| a + spread * rng.random_range(-1.0..1.0)).collect());
                y.push(c);
            }
        }
        (x, y)
    }

    fn tiny_encoder() -> Encoder {
        let cfg = EncoderConfig {
            stages: vec![StageConfig { channels: 4, blocks: 1 }],
            input_size: [3, 8, 8],
            embed_dim: 6,
            norm_kind: NormKind::BatchInstance,
            ..EncoderConfig::default()
        };
        Encoder::init(&cfg, 9).unwrap()
    }

    fn tiny_dataset(n: usize) -> LabeledDataset {
        let mut rng = rng_for(10, &[]);
        let items = (0..n)
            .map(|i| LabeledItem {
                id: format!("c{}/{i}.png", i % 2),
                class: i % 2,
                image: Tensor::new([3, 8, 8], (0..192).map(|_| rng.random::<f32>()).collect()).unwrap(),
            })
            .collect();
        LabeledDataset { items, class_names: vec!["c0".into(), "c1".into()] }
    }

    #[test]
    fn perfect_predictor_has_zero_ci() {
        let (x, y) = gaussian_classes(6, 20, 4, 0.1, 1);
        let p = Protocol { n_way: 5, k_shot: 1, q_query: 5 };
        let r = evaluate_with(&x, &y, p, 30, 2, "oracle", |ep, _, _, _| Ok(ep.query.iter().map(|q| q.1).collect())).unwrap();
        assert_eq!((r.mean_accuracy, r.ci95_halfwidth), (1.0, 0.0));
    }

    #[test]
    fn random_guessing_is_near_chance() {
        let (x, y) = gaussian_classes(20, 20, 4, 0.5, 3);
        let p = Protocol { n_way: 5, k_shot: 1, q_query: 15 };
        let mut rng = rng_for(4, &[]);
        let r = evaluate_with(&x, &y, p, 600, 5, "random", |ep, _, _, qx| Ok(qx.iter().map(|_| rng.random_range(0..ep.protocol.n_way)).collect()))
            .unwrap();
        assert!((r.mean_accuracy - 0.2).abs() < 0.04, "{}", r.mean_accuracy);
    }

    #[test]
    fn reports_are_deterministic_and_ci_recomputes() {
        let (x, y) = gaussian_classes(8, 20, 5, 0.8, 6);
        let p = Protocol { n_way: 5, k_shot: 2, q_query: 5 };
        for kind in ClassifierKind::ALL {
            let a = evaluate(&x, &y, p, 40, kind, &FitSettings::default(), 7).unwrap();
            let b = evaluate(&x, &y, p, 40, kind, &FitSettings::default(), 7).unwrap();
            assert_eq!(a, b);
            let e = a.per_episode.len() as f64;
            let m = a.per_episode.iter().sum::<f64>() / e;
            let sd = (a.per_episode.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (e - 1.0)).sqrt();
            assert!((1.96 * sd / e.sqrt() - a.ci95_halfwidth).abs() < 1e-12);
            assert!(a.mean_accuracy > 0.2, "{kind}: {}", a.mean_accuracy);
        }
    }

    #[test]
    fn table_has_a_row_per_kind() {
        let (x, y) = gaussian_classes(6, 10, 3, 0.5, 8);
        let mut reports = Vec::new();
        for k in [1, 5] {
            let p = Protocol { n_way: 5, k_shot: k, q_query: 3 };
            for kind in ClassifierKind::ALL {
                reports.push(evaluate(&x, &y, p, 5, kind, &FitSettings::default(), 1).unwrap());
            }
        }
        let t = format_table(&reports);
        assert_eq!(t.lines().count(), 2 + 5);
        assert!(t.contains("5-way 1-shot") && t.contains("5-way 5-shot") && t.contains(" ± "));
        let dir = tempfile::tempdir().unwrap();
        write_reports_csv(&dir.path().join("r.csv"), &reports).unwrap();
        let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("kind,way,shot,mean,ci95,episodes\nLR,5,1,"));
    }

    #[test]
    fn embed_requires_frozen_and_is_pure() {
        let enc = tiny_encoder();
        let ds = tiny_dataset(3);
        assert!(matches!(embed(&enc, ds.images()), Err(FewshotError::Unfrozen)));
        let enc = enc.freeze();
        let before = enc.fingerprint();
        let a = embed(&enc, ds.images()).unwrap();
        let b = embed(&enc, ds.images()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 6);
        assert_eq!(before, enc.fingerprint());
    }

    #[test]
    fn embeddings_csv_round_trips() {
        let enc = tiny_encoder().freeze();
        let ds = tiny_dataset(70);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        export_embeddings(&enc, &ds, &pa).unwrap();
        export_embeddings(&enc, &ds, &pb).unwrap();
        let text = fs::read_to_string(&pa).unwrap();
        assert_eq!(text, fs::read_to_string(&pb).unwrap());
        let emb = embed(&enc, ds.images()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), ds.len() + 1);
        assert_eq!(lines[0], "id,class,e0,e1,e2,e3,e4,e5");
        for (line, e) in lines[1..].iter().zip(&emb) {
            let vals: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            for (a, b) in vals.iter().zip(e) {
                assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
            }
        }
    }
}
