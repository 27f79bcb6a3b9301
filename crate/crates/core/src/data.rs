//! Seeded synthetic datasets, class-wise forget/retain splits, and the
//! batch sampler feeding the unlearning loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Labeled feature set. `classes` is the label-space size C; a partitioned
/// subset keeps the C of its source.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: SplitTag) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!("{:?} features vs {} labels", features.shape(), labels.len()),
            });
        }
        for &y in &labels {
            if y >= classes {
                return Err(Error::InvalidLabel { label: y, classes });
            }
        }
        Ok(Dataset { features, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows whose label passes the predicate, preserving order.
    pub fn filter_by_class(&self, pred: impl Fn(usize) -> bool) -> Result<Dataset> {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| pred(self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let features = self.features.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.classes, self.split)
    }

    /// Per-class feature means for every class present; `None` for absent
    /// classes.
    pub fn class_means(&self) -> Vec<Option<Vec<f64>>> {
        let d = self.dim();
        let mut sums = vec![vec![0.0; d]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for i in 0..self.len() {
            let y = self.labels[i];
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(self.features.row(i)) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(mut s, c)| {
                if c == 0 {
                    None
                } else {
                    for v in &mut s {
                        *v /= c as f64;
                    }
                    Some(s)
                }
            })
            .collect()
    }

    /// Every class in [0, C) appears at least once.
    pub fn covers_all_classes(&self) -> bool {
        let mut seen = vec![false; self.classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Row-wise concatenation; label spaces must agree.
    pub fn vstack(&self, other: &Dataset) -> Result<Dataset> {
        if self.classes != other.classes || self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                op: "vstack",
                detail: format!(
                    "{}x{} ({} classes) vs {}x{} ({} classes)",
                    self.len(),
                    self.dim(),
                    self.classes,
                    other.len(),
                    other.dim(),
                    other.classes
                ),
            });
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            Tensor::new(&[self.len() + other.len(), self.dim()], data)?,
            labels,
            self.classes,
            self.split,
        )
    }
}

/// Blob-generator parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub sigma: f64,
    pub mean_scale: f64,
}

/// Gaussian blobs: class means drawn once on a sphere of radius
/// `mean_scale`, samples mean + N(0, sigma^2 I). Train and test are drawn
/// independently from the same means.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::InvalidParam(format!("need >= 2 classes, got {}", spec.classes)));
    }
    if spec.dim < 2 {
        return Err(Error::InvalidParam(format!("need dim >= 2, got {}", spec.dim)));
    }
    if !(spec.sigma > 0.0) {
        return Err(Error::InvalidParam(format!("sigma must be > 0, got {}", spec.sigma)));
    }
    if spec.n_per_class == 0 {
        return Err(Error::InvalidParam(String::from("n_per_class must be positive")));
    }
    let mut mean_rng = Rng::derive(seed, 0x6d65_616e); // "mean"
    let mut means = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let raw: Vec<f64> = (0..spec.dim).map(|_| mean_rng.gaussian()).collect();
        let norm = scalar::sqrt(raw.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
        means.push(raw.into_iter().map(|v| v / norm * spec.mean_scale).collect::<Vec<f64>>());
    }
    let draw = |tag: u64| -> Result<Dataset> {
        let mut rng = Rng::derive(seed, tag);
        let n = spec.classes * spec.n_per_class;
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..spec.n_per_class {
                for &m in mean {
                    data.push(m + spec.sigma * rng.gaussian());
                }
                labels.push(c);
            }
        }
        let split = if tag == TRAIN_TAG { SplitTag::Train } else { SplitTag::Test };
        Dataset::new(Tensor::new(&[n, spec.dim], data)?, labels, spec.classes, split)
    };
    Ok((draw(TRAIN_TAG)?, draw(TEST_TAG)?))
}

const TRAIN_TAG: u64 = 0x7472_6169;
const TEST_TAG: u64 = 0x7465_7374;

/// Forget/retain class partition. Retain classes are the complement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    forget: Vec<usize>,
    classes: usize,
}

impl SplitSpec {
    /// `forget` must be a non-empty proper subset of [0, C).
    pub fn new(mut forget: Vec<usize>, classes: usize) -> Result<Self> {
        forget.sort_unstable();
        forget.dedup();
        if forget.is_empty() {
            return Err(Error::InvalidParam(String::from("forget set of classes is empty")));
        }
        if forget.len() >= classes {
            return Err(Error::InvalidParam(String::from(
                "forget classes must be a proper subset",
            )));
        }
        if let Some(&bad) = forget.iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidLabel { label: bad, classes });
        }
        Ok(SplitSpec { forget, classes })
    }

    pub fn forget_classes(&self) -> &[usize] {
        &self.forget
    }

    pub fn retain_classes(&self) -> Vec<usize> {
        (0..self.classes).filter(|c| !self.is_forget(*c)).collect()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_forget(&self, class: usize) -> bool {
        self.forget.binary_search(&class).is_ok()
    }
}

/// The four evaluation parts induced by a class split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub forget_train: Dataset,
    pub retain_train: Dataset,
    pub forget_test: Dataset,
    pub retain_test: Dataset,
}

pub fn split_by_classes(train: &Dataset, test: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    if spec.classes() != train.classes || spec.classes() != test.classes {
        return Err(Error::InvalidParam(format!(
            "split spec is over {} classes, dataset has {}",
            spec.classes(),
            train.classes
        )));
    }
    Ok(Splits {
        forget_train: train.filter_by_class(|c| spec.is_forget(c))?,
        retain_train: train.filter_by_class(|c| !spec.is_forget(c))?,
        forget_test: test.filter_by_class(|c| spec.is_forget(c))?,
        retain_test: test.filter_by_class(|c| !spec.is_forget(c))?,
    })
}

/// Forget-class selection strategy.
pub enum SelectStrategy<'a> {
    /// k classes uniformly without replacement.
    Random { k: usize, seed: u64 },
    /// k classes whose train-feature class means sit closest (smallest mean
    /// Euclidean distance) to the downstream dataset's class means.
    TopSimilarity { k: usize, downstream: &'a Dataset },
}

pub fn select_forget_classes(dataset: &Dataset, strategy: SelectStrategy<'_>) -> Result<SplitSpec> {
    match strategy {
        SelectStrategy::Random { k, seed } => {
            if k == 0 || k >= dataset.classes {
                return Err(Error::InvalidParam(format!(
                    "k = {k} out of range for {} classes",
                    dataset.classes
                )));
            }
            let mut rng = Rng::derive(seed, 0x7365_6c65); // "sele"
            let picked = rng.sample_indices(dataset.classes, k);
            SplitSpec::new(picked, dataset.classes)
        }
        SelectStrategy::TopSimilarity { k, downstream } => {
            if k == 0 || k >= dataset.classes {
                return Err(Error::InvalidParam(format!(
                    "k = {k} out of range for {} classes",
                    dataset.classes
                )));
            }
            if downstream.dim() != dataset.dim() {
                return Err(Error::ShapeMismatch {
                    op: "select_forget_classes",
                    detail: format!("dim {} vs downstream {}", dataset.dim(), downstream.dim()),
                });
            }
            let source_means = dataset.class_means();
            let down_means: Vec<Vec<f64>> =
                downstream.class_means().into_iter().flatten().collect();
            if down_means.is_empty() {
                return Err(Error::EmptySet("downstream dataset"));
            }
            let mut scored: Vec<(f64, usize)> = Vec::new();
            for (c, mean) in source_means.iter().enumerate() {
                let Some(mean) = mean else {
                    return Err(Error::InvalidParam(format!("class {c} absent from dataset")));
                };
                let mut total = 0.0;
                for dm in &down_means {
                    total += scalar::sqrt(
                        mean.iter().zip(dm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                    );
                }
                scored.push((total / down_means.len() as f64, c));
            }
            // ties break toward the smaller class index
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let picked = scored.into_iter().take(k).map(|(_, c)| c).collect();
            SplitSpec::new(picked, dataset.classes)
        }
    }
}

/// Batch-plan for the unlearning loop: forget batches cover the forget set
/// exactly once per epoch; each is paired with `omega` freshly drawn retain
/// batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub forget_batch: usize,
    pub retain_batch: usize,
    pub omega: usize,
}

#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepBatch {
    pub forget: MiniBatch,
    pub retain: Vec<MiniBatch>,
}

impl StepBatch {
    /// The omega retain batches concatenated into one pool.
    pub fn retain_pool(&self) -> Result<MiniBatch> {
        let parts: Vec<&Tensor> = self.retain.iter().map(|b| &b.features).collect();
        let mut features = self.retain[0].features.clone();
        if parts.len() > 1 {
            let mut data = Vec::new();
            for p in &parts {
                data.extend_from_slice(p.data());
            }
            features = Tensor::new(&[data.len() / parts[0].cols(), parts[0].cols()], data)?;
        }
        let labels = self.retain.iter().flat_map(|b| b.labels.iter().copied()).collect();
        Ok(MiniBatch { features, labels })
    }
}

fn batch_of(ds: &Dataset, idx: &[usize]) -> Result<MiniBatch> {
    Ok(MiniBatch {
        features: ds.features.select_rows(idx)?,
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
    })
}

/// One epoch of paired batches. The forget indices are a seeded shuffle
/// chunked so every forget sample appears exactly once; retain batches are
/// drawn without replacement, independently per draw.
pub fn sample_batches(
    plan: &BatchPlan,
    forget: &Dataset,
    retain: &Dataset,
    epoch_seed: u64,
) -> Result<Vec<StepBatch>> {
    if forget.is_empty() {
        return Err(Error::EmptySet("forget split"));
    }
    if retain.is_empty() {
        return Err(Error::EmptySet("retain split"));
    }
    if plan.omega == 0 {
        return Err(Error::InvalidParam(String::from("omega must be >= 1")));
    }
    if plan.forget_batch == 0 || plan.forget_batch > forget.len() {
        return Err(Error::InvalidParam(format!(
            "forget batch {} vs split size {}",
            plan.forget_batch,
            forget.len()
        )));
    }
    if plan.retain_batch == 0 || plan.retain_batch > retain.len() {
        return Err(Error::InvalidParam(format!(
            "retain batch {} vs split size {}",
            plan.retain_batch,
            retain.len()
        )));
    }
    let mut rng = Rng::derive(epoch_seed, 0x6261_7463); // "batc"
    let mut order: Vec<usize> = (0..forget.len()).collect();
    rng.shuffle(&mut order);
    let mut out = Vec::new();
    for chunk in order.chunks(plan.forget_batch) {
        let fb = batch_of(forget, chunk)?;
        let mut rbs = Vec::with_capacity(plan.omega);
        for _ in 0..plan.omega {
            let idx = rng.sample_indices(retain.len(), plan.retain_batch);
            rbs.push(batch_of(retain, &idx)?);
        }
        out.push(StepBatch { forget: fb, retain: rbs });
    }
    Ok(out)
}

/// Plain shuffled minibatches over one dataset (classifier training).
pub fn shuffled_batches(ds: &Dataset, batch: usize, epoch_seed: u64) -> Result<Vec<MiniBatch>> {
    if ds.is_empty() {
        return Err(Error::EmptySet("dataset"));
    }
    if batch == 0 {
        return Err(Error::InvalidParam(String::from("batch must be positive")));
    }
    let mut rng = Rng::derive(epoch_seed, 0x7368_7566); // "shuf"
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(|chunk| batch_of(ds, chunk)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BlobSpec {
        BlobSpec { classes: 4, dim: 3, n_per_class: 10, sigma: 0.2, mean_scale: 3.0 }
    }

    #[test]
    fn same_seed_same_data() {
        let (a_train, a_test) = gen_blobs(&spec(), 5).unwrap();
        let (b_train, b_test) = gen_blobs(&spec(), 5).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (c_train, _) = gen_blobs(&spec(), 6).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn sigma_limit_pins_samples_to_means() {
        let tight = BlobSpec { sigma: 1e-12, ..spec() };
        let (train, _) = gen_blobs(&tight, 9).unwrap();
        let means = train.class_means();
        for i in 0..train.len() {
            let m = means[train.labels[i]].as_ref().unwrap();
            for (a, b) in train.features.row(i).iter().zip(m) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_params_rejected() {
        assert!(gen_blobs(&BlobSpec { classes: 1, ..spec() }, 0).is_err());
        assert!(gen_blobs(&BlobSpec { dim: 1, ..spec() }, 0).is_err());
        assert!(gen_blobs(&BlobSpec { sigma: 0.0, ..spec() }, 0).is_err());
        assert!(gen_blobs(&BlobSpec { sigma: -1.0, ..spec() }, 0).is_err());
    }

    #[test]
    fn train_covers_all_classes() {
        let (train, test) = gen_blobs(&spec(), 1).unwrap();
        assert!(train.covers_all_classes());
        assert!(test.covers_all_classes());
        assert_eq!(train.split, SplitTag::Train);
        assert_eq!(test.split, SplitTag::Test);
    }

    #[test]
    fn split_spec_rejects_improper_sets() {
        assert!(SplitSpec::new(vec![], 4).is_err());
        assert!(SplitSpec::new(vec![0, 1, 2, 3], 4).is_err());
        assert!(SplitSpec::new(vec![4], 4).is_err());
        assert!(SplitSpec::new(vec![1, 2], 4).is_ok());
    }

    #[test]
    fn partition_law() {
        let (train, test) = gen_blobs(&spec(), 2).unwrap();
        let sp = SplitSpec::new(vec![0, 2], 4).unwrap();
        let splits = split_by_classes(&train, &test, &sp).unwrap();
        assert_eq!(splits.forget_train.len() + splits.retain_train.len(), train.len());
        assert_eq!(splits.forget_test.len() + splits.retain_test.len(), test.len());
        assert_eq!(splits.forget_train.len(), 2 * 10);
        assert!(splits.forget_train.labels.iter().all(|&y| y == 0 || y == 2));
        assert!(splits.retain_train.labels.iter().all(|&y| y == 1 || y == 3));
    }

    #[test]
    fn random_selection_boundary() {
        let (train, _) = gen_blobs(&spec(), 3).unwrap();
        let sp = select_forget_classes(&train, SelectStrategy::Random { k: 3, seed: 1 }).unwrap();
        assert_eq!(sp.forget_classes().len(), 3);
        assert_eq!(sp.retain_classes().len(), 1);
        assert!(select_forget_classes(&train, SelectStrategy::Random { k: 4, seed: 1 }).is_err());
        assert!(select_forget_classes(&train, SelectStrategy::Random { k: 0, seed: 1 }).is_err());
    }

    #[test]
    fn top_similarity_planted_case() {
        let (train, _) = gen_blobs(&spec(), 7).unwrap();
        // downstream = copies of classes 1 and 3, relabeled 0/1
        let planted = train.filter_by_class(|c| c == 1 || c == 3).unwrap();
        let labels: Vec<usize> = planted.labels.iter().map(|&y| usize::from(y == 3)).collect();
        let downstream =
            Dataset::new(planted.features.clone(), labels, 2, SplitTag::Train).unwrap();
        let sp = select_forget_classes(
            &train,
            SelectStrategy::TopSimilarity { k: 2, downstream: &downstream },
        )
        .unwrap();
        assert_eq!(sp.forget_classes(), &[1, 3]);
    }

    #[test]
    fn top_similarity_self_identity() {
        let (train, _) = gen_blobs(&spec(), 8).unwrap();
        let sp = select_forget_classes(
            &train,
            SelectStrategy::TopSimilarity { k: 2, downstream: &train },
        )
        .unwrap();
        // all classes have the same mean distance to the full mean set, so
        // ties break by class index
        assert_eq!(sp.forget_classes().len(), 2);
    }

    #[test]
    fn top_similarity_is_permutation_equivariant() {
        let (train, _) = gen_blobs(&spec(), 11).unwrap();
        let (down, _) = gen_blobs(
            &BlobSpec { classes: 2, dim: 3, n_per_class: 6, sigma: 0.2, mean_scale: 2.0 },
            99,
        )
        .unwrap();
        let sp = select_forget_classes(
            &train,
            SelectStrategy::TopSimilarity { k: 2, downstream: &down },
        )
        .unwrap();
        // relabel classes with the permutation c -> (c + 1) % 4
        let perm = |c: usize| (c + 1) % 4;
        let relabeled = Dataset::new(
            train.features.clone(),
            train.labels.iter().map(|&y| perm(y)).collect(),
            4,
            SplitTag::Train,
        )
        .unwrap();
        let sp2 = select_forget_classes(
            &relabeled,
            SelectStrategy::TopSimilarity { k: 2, downstream: &down },
        )
        .unwrap();
        let mut expect: Vec<usize> = sp.forget_classes().iter().map(|&c| perm(c)).collect();
        expect.sort_unstable();
        assert_eq!(sp2.forget_classes(), expect.as_slice());
    }

    #[test]
    fn sampler_counts_and_coverage() {
        let (train, test) = gen_blobs(&spec(), 4).unwrap();
        let sp = SplitSpec::new(vec![0], 4).unwrap();
        let splits = split_by_classes(&train, &test, &sp).unwrap();
        let plan = BatchPlan { forget_batch: 5, retain_batch: 6, omega: 2 };
        let steps = sample_batches(&plan, &splits.forget_train, &splits.retain_train, 17).unwrap();
        assert_eq!(steps.len(), 2); // |D_f| = 10, batch 5
        for s in &steps {
            assert_eq!(s.retain.len(), 2);
            for rb in &s.retain {
                assert_eq!(rb.labels.len(), 6);
            }
        }
        // epoch coverage: emitted forget rows equal D_f exactly (as multisets)
        let mut seen: Vec<Vec<u64>> = steps
            .iter()
            .flat_map(|s| {
                (0..s.forget.labels.len())
                    .map(|i| s.forget.features.row(i).iter().map(|v| v.to_bits()).collect())
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut expect: Vec<Vec<u64>> = (0..splits.forget_train.len())
            .map(|i| splits.forget_train.features.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let (train, test) = gen_blobs(&spec(), 4).unwrap();
        let sp = SplitSpec::new(vec![0], 4).unwrap();
        let splits = split_by_classes(&train, &test, &sp).unwrap();
        let plan = BatchPlan { forget_batch: 4, retain_batch: 3, omega: 2 };
        let a = sample_batches(&plan, &splits.forget_train, &splits.retain_train, 5).unwrap();
        let b = sample_batches(&plan, &splits.forget_train, &splits.retain_train, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.forget.features, y.forget.features);
            assert_eq!(x.retain[0].features, y.retain[0].features);
        }
        let c = sample_batches(&plan, &splits.forget_train, &splits.retain_train, 6).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.forget.features != y.forget.features));
    }

    #[test]
    fn sampler_rejects_oversized_batches() {
        let (train, test) = gen_blobs(&spec(), 4).unwrap();
        let sp = SplitSpec::new(vec![0], 4).unwrap();
        let splits = split_by_classes(&train, &test, &sp).unwrap();
        let plan = BatchPlan { forget_batch: 11, retain_batch: 6, omega: 2 };
        assert!(sample_batches(&plan, &splits.forget_train, &splits.retain_train, 0).is_err());
    }

    #[test]
    fn retain_pool_concatenates_omega_batches() {
        let (train, test) = gen_blobs(&spec(), 4).unwrap();
        let sp = SplitSpec::new(vec![0], 4).unwrap();
        let splits = split_by_classes(&train, &test, &sp).unwrap();
        let plan = BatchPlan { forget_batch: 5, retain_batch: 4, omega: 3 };
        let steps = sample_batches(&plan, &splits.forget_train, &splits.retain_train, 2).unwrap();
        let pool = steps[0].retain_pool().unwrap();
        assert_eq!(pool.labels.len(), 12);
        assert_eq!(pool.features.shape(), &[12, 3]);
    }
}
