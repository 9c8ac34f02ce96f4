use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::FewshotError;
use crate::data::{decode_rgb, resize};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: String,
    pub class: usize,
    pub image: Tensor,
}

/// Images with integer classes; `class_names[c]` names class `c`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.class).collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor> {
        self.items.iter().map(|i| &i.image)
    }

    /// Reads `root/<class>/<image>` (PNG or JPEG), classes and files in
    /// sorted order, resized to `size`.
    pub fn load_dir(root: &Path, size: (usize, usize)) -> Result<Self, FewshotError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |e: std::io::Error| FewshotError::Io(format!("{p}: {e}"))
        };
        let mut classes: Vec<_> = fs::read_dir(root).map_err(io(root))?.collect::<Result<_, _>>().map_err(io(root))?;
        classes.retain(|e| e.path().is_dir());
        classes.sort_by_key(|e| e.file_name());
        let mut ds = LabeledDataset::default();
        for (c, dir) in classes.iter().enumerate() {
            let name = dir.file_name().to_string_lossy().into_owned();
            let mut files: Vec<_> = fs::read_dir(dir.path()).map_err(io(&dir.path()))?.collect::<Result<_, _>>().map_err(io(&dir.path()))?;
            files.retain(|e| e.path().is_file() && !e.file_name().to_string_lossy().starts_with('.'));
            files.sort_by_key(|e| e.file_name());
            for f in files {
                let bytes = fs::read(f.path()).map_err(io(&f.path()))?;
                let img = decode_rgb(&bytes).map_err(|e| FewshotError::Data(format!("{}: {e}", f.path().display())))?;
                ds.items.push(LabeledItem { id: format!("{name}/{}", f.file_name().to_string_lossy()), class: c, image: resize(&img, size) });
            }
            ds.class_names.push(name);
        }
        Ok(ds)
    }
}

/// Item indices per class, classes in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassIndex {
    pub by_class: BTreeMap<usize, Vec<usize>>,
}

impl ClassIndex {
    pub fn new(labels: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        Self { by_class }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_queries")]
    pub q_query: usize,
}

fn default_queries() -> usize {
    15
}

/// One n-way k-shot task. Labels are episode-local (`0..n_way`);
/// `classes[l]` is the original class of local label `l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub protocol: Protocol,
    pub classes: Vec<usize>,
    /// `(item index, local label)`, grouped by label.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Draws `n_way` classes uniformly among those with at least `k + q` items,
/// then `k + q` distinct items per class: the first `k` support, the rest query.
pub fn sample_episode(index: &ClassIndex, p: Protocol, seed: u64) -> Result<Episode, FewshotError> {
    if p.n_way == 0 || p.k_shot == 0 || p.q_query == 0 {
        return Err(FewshotError::Protocol("n_way, k_shot and q_query must be positive".into()));
    }
    let need = p.k_shot + p.q_query;
    let eligible: Vec<usize> = index.by_class.iter().filter(|(_, v)| v.len() >= need).map(|(&c, _)| c).collect();
    if eligible.len() < p.n_way {
        return Err(FewshotError::Protocol(format!(
            "{} classes have at least {need} items, {} needed",
            eligible.len(),
            p.n_way
        )));
    }
    let mut rng = rng_for(seed, &[0xE915]);
    let classes: Vec<usize> = index::sample(&mut rng, eligible.len(), p.n_way).into_iter().map(|i| eligible[i]).collect();
    let mut support = Vec::with_capacity(p.n_way * p.k_shot);
    let mut query = Vec::with_capacity(p.n_way * p.q_query);
    for (label, &c) in classes.iter().enumerate() {
        let mut items = index.by_class[&c].clone();
        let (chosen, _) = items.partial_shuffle(&mut rng, need);
        support.extend(chosen[..p.k_shot].iter().map(|&i| (i, label)));
        query.extend(chosen[p.k_shot..].iter().map(|&i| (i, label)));
    }
    Ok(Episode { protocol: p, classes, support, query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn sizes_and_determinism() {
        let idx = ClassIndex::new(&labels(10, 20));
        let p = Protocol { n_way: 5, k_shot: 1, q_query: 15 };
        let e = sample_episode(&idx, p, 3).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
        assert_eq!(e, sample_episode(&idx, p, 3).unwrap());
        assert_ne!(e, sample_episode(&idx, p, 4).unwrap());
        assert!(sample_episode(&idx, Protocol { n_way: 11, ..p }, 0).is_err());
        assert!(sample_episode(&idx, Protocol { q_query: 20, ..p }, 0).is_err());
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let idx = ClassIndex::new(&labels(20, 3));
        let p = Protocol { n_way: 5, k_shot: 1, q_query: 1 };
        let mut counts = [0usize; 20];
        for s in 0..10_000 {
            for c in sample_episode(&idx, p, s).unwrap().classes {
                counts[c] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{c}");
        }
    }

    #[test]
    fn disjoint_on_many_random_protocols() {
        let lab = labels(12, 9);
        let idx = ClassIndex::new(&lab);
        for s in 0..10_000u64 {
            let p = Protocol { n_way: 1 + (s % 12) as usize, k_shot: 1 + (s % 4) as usize, q_query: 1 + (s / 4 % 5) as usize };
            let e = sample_episode(&idx, p, s).unwrap();
            let sup: HashSet<usize> = e.support.iter().map(|x| x.0).collect();
            assert_eq!(sup.len(), e.support.len());
            assert!(e.query.iter().all(|q| !sup.contains(&q.0)));
            let distinct: HashSet<_> = e.classes.iter().collect();
            assert_eq!(distinct.len(), p.n_way);
            for (item, label) in e.support.iter().chain(&e.query) {
                assert_eq!(lab[*item], e.classes[*label]);
            }
            for l in 0..p.n_way {
                assert_eq!(e.support.iter().filter(|x| x.1 == l).count(), p.k_shot);
                assert_eq!(e.query.iter().filter(|x| x.1 == l).count(), p.q_query);
            }
        }
    }

    proptest! {
        #[test]
        fn ineligible_classes_are_never_drawn(seed in any::<u64>()) {
            let mut lab = labels(6, 5);
            lab.extend([6, 7]);
            let idx = ClassIndex::new(&lab);
            let e = sample_episode(&idx, Protocol { n_way: 6, k_shot: 2, q_query: 2 }, seed).unwrap();
            prop_assert!(e.classes.iter().all(|&c| c < 6));
        }
    }
}
