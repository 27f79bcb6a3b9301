//! Representation-level evaluation suite: accuracy metrics, linear CKA,
//! probe-based IDI, k-NN transfer, the linear-probing attack, and the
//! H-Mean aggregate with its normalized scores.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward_taps, Affine, ModelBundle};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Guard threshold (percentage points) under which the IDI denominator is
/// considered too small to define the index.
pub const IDI_GUARD: f64 = 2.0;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the final logits, in percent.
pub fn accuracy(bundle: &ModelBundle, part: &Dataset) -> Result<f64> {
    if part.is_empty() {
        return Err(Error::EmptySet("evaluation part"));
    }
    let (_, logits) = forward_taps(bundle, &part.features)?;
    let correct = part
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(100.0 * correct as f64 / part.len() as f64)
}

// ---------------------------------------------------------------------------
// Linear CKA
// ---------------------------------------------------------------------------

fn center_columns(x: &Tensor) -> Vec<f64> {
    let (n, p) = (x.rows(), x.cols());
    let mut means = vec![0.0; p];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            out.push(v - means[j]);
        }
    }
    out
}

/// Squared Frobenius norm of A^T B for column-centered matrices held as
/// flat row-major slices.
fn cross_gram_sq(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let mut s = 0.0;
            for r in 0..n {
                s += a[r * p + i] * b[r * q + j];
            }
            total += s * s;
        }
    }
    total
}

/// Linear centered kernel alignment between two feature matrices with the
/// same row count. Returns a value in [0, 1]; symmetric, invariant to
/// orthogonal transforms and isotropic scaling of either argument.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.rows() != y.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    if x.rows() < 2 {
        return Err(Error::InvalidParam(String::from("CKA needs at least 2 rows")));
    }
    let (n, p, q) = (x.rows(), x.cols(), y.cols());
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = cross_gram_sq(&yc, &xc, n, q, p);
    let xx = cross_gram_sq(&xc, &xc, n, p, p);
    let yy = cross_gram_sq(&yc, &yc, n, q, q);
    if scalar::sqrt(xx) < 1e-12 || scalar::sqrt(yy) < 1e-12 {
        return Err(Error::ZeroVariance);
    }
    // clamp: self-similarity must come out at exactly 1 despite rounding
    Ok((cross / scalar::sqrt(xx * yy)).min(1.0))
}

/// Per-tap CKA between two bundles' raw backbone features on one dataset.
/// `taps` lists tap indices; an empty list means every tap.
pub fn layerwise_cka(
    bundle_a: &ModelBundle,
    bundle_b: &ModelBundle,
    part: &Dataset,
    taps: &[usize],
) -> Result<Vec<f64>> {
    check_arch_compatible(bundle_a, bundle_b)?;
    let (taps_a, _) = forward_taps(bundle_a, &part.features)?;
    let (taps_b, _) = forward_taps(bundle_b, &part.features)?;
    let indices: Vec<usize> = if taps.is_empty() {
        (0..taps_a.len()).collect()
    } else {
        taps.to_vec()
    };
    let mut out = Vec::with_capacity(indices.len());
    for &i in &indices {
        if i >= taps_a.len() {
            return Err(Error::InvalidParam(format!("tap {i} out of range")));
        }
        out.push(linear_cka(&taps_a[i], &taps_b[i])?);
    }
    Ok(out)
}

/// Backbones must agree structurally for representation comparisons; EC
/// modules may differ (they are not part of the compared features).
pub fn check_arch_compatible(a: &ModelBundle, b: &ModelBundle) -> Result<()> {
    let same = a.dims.input_dim == b.dims.input_dim
        && a.dims.stage_widths == b.dims.stage_widths
        && a.dims.classes == b.dims.classes
        && a.dims.split_final == b.dims.split_final;
    if !same {
        return Err(Error::ShapeMismatch {
            op: "check_arch_compatible",
            detail: format!("{:?} vs {:?}", a.dims, b.dims),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear probes (IDI and the probing attack)
// ---------------------------------------------------------------------------

/// Deterministic multinomial-logistic probe settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { iters: 300, lr: 0.05 }
    }
}

struct Standardizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Tensor) -> Self {
        let (n, p) = (x.rows(), x.cols());
        let mut means = vec![0.0; p];
        for i in 0..n {
            for (m, v) in means.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut stds = vec![0.0; p];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                let d = v - means[j];
                stds[j] += d * d;
            }
        }
        for s in &mut stds {
            *s = scalar::sqrt(*s / n as f64);
            if *s < 1e-8 {
                *s = 1.0;
            }
        }
        Standardizer { means, stds }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (n, p) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(n * p);
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                out.push((v - self.means[j]) / self.stds[j]);
            }
        }
        Tensor::new(&[n, p], out).expect("standardize shape")
    }
}

/// Zero-initialized multinomial logistic regression trained full-batch;
/// deterministic for fixed inputs and config (the objective is convex).
fn train_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Affine, Standardizer)> {
    let standardizer = Standardizer::fit(features);
    let x = standardizer.apply(features);
    let d = x.cols();
    let mut head = Affine {
        weight: Tensor::zeros(&[d, classes]),
        bias: Tensor::zeros(&[classes]),
    };
    let mut opt = Optimizer::new(OptimizerKind::adam_default(), cfg.lr, 2);
    for _ in 0..cfg.iters {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let w = tape.param(0, head.weight.clone(), true)?;
        let b = tape.param(1, head.bias.clone(), true)?;
        let prod = tape.matmul(xv, w)?;
        let bias = tape.expand_rows(b, x.rows())?;
        let logits = tape.add(prod, bias)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        let gw = grads.of_slot(0).cloned();
        let gb = grads.of_slot(1).cloned();
        let refs = [gw.as_ref(), gb.as_ref()];
        opt.step(&mut [&mut head.weight, &mut head.bias], &refs)?;
    }
    Ok((head, standardizer))
}

fn probe_accuracy(
    head: &Affine,
    standardizer: &Standardizer,
    features: &Tensor,
    labels: &[usize],
) -> f64 {
    let x = standardizer.apply(features);
    let (n, d) = (x.rows(), x.cols());
    let c = head.d_out();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..c {
            let mut v = head.bias.data()[j];
            for k in 0..d {
                v += x.row(i)[k] * head.weight.data()[k * c + j];
            }
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    100.0 * correct as f64 / n as f64
}

/// Concatenated raw features from the last min(3, #taps) taps.
pub fn probe_features(bundle: &ModelBundle, part: &Dataset) -> Result<Tensor> {
    let (taps, _) = forward_taps(bundle, &part.features)?;
    let take = taps.len().min(3);
    let chosen: Vec<&Tensor> = taps[taps.len() - take..].iter().collect();
    Tensor::hcat(&chosen)
}

fn forget_class_labels(part: &Dataset) -> (Vec<usize>, usize) {
    let mut classes: Vec<usize> = part.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let index: BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    (part.labels.iter().map(|y| index[y]).collect(), classes.len())
}

/// Probe accuracy on the test forget set of a probe trained to recover
/// forget-class labels from one bundle's intermediate features.
fn probe_forget_accuracy(
    bundle: &ModelBundle,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (train_labels, k) = forget_class_labels(train);
    let (test_labels, _) = forget_class_labels(test);
    let feats_train = probe_features(bundle, train)?;
    let feats_test = probe_features(bundle, test)?;
    let (head, standardizer) = train_probe(&feats_train, &train_labels, k, cfg)?;
    Ok(probe_accuracy(&head, &standardizer, &feats_test, &test_labels))
}

/// Probe-based information difference index. A per-bundle logistic probe
/// maps forget-set intermediate features to forget-class labels;
/// IDI = (A_u - A_r) / (A_o - A_r), so the original model sits at 1 and the
/// retrained oracle at 0 by construction. An |A_o - A_r| below
/// [`IDI_GUARD`] percentage points leaves the index undefined.
pub fn idi_probe(
    original: &ModelBundle,
    unlearned: &ModelBundle,
    retrained: &ModelBundle,
    forget_train: &Dataset,
    forget_test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    check_arch_compatible(original, unlearned)?;
    check_arch_compatible(original, retrained)?;
    if forget_train.is_empty() || forget_test.is_empty() {
        return Err(Error::EmptySet("forget split"));
    }
    let (_, distinct) = forget_class_labels(forget_train);
    if distinct < 2 {
        return Err(Error::InvalidParam(String::from(
            "IDI needs at least two forget classes for its probes",
        )));
    }
    let a_o = probe_forget_accuracy(original, forget_train, forget_test, cfg)?;
    let a_r = probe_forget_accuracy(retrained, forget_train, forget_test, cfg)?;
    let gap = a_o - a_r;
    if gap.abs() < IDI_GUARD {
        return Err(Error::IdiUndefined { gap });
    }
    let a_u = probe_forget_accuracy(unlearned, forget_train, forget_test, cfg)?;
    Ok((a_u - a_r) / gap)
}

/// Linear probing attack: freeze the backbone, train a fresh C-way head on
/// the full training set's penultimate features, and report the forget
/// accuracy the head recovers on the test forget set.
pub fn probe_attack(
    bundle: &ModelBundle,
    full_train: &Dataset,
    forget_test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if full_train.is_empty() || forget_test.is_empty() {
        return Err(Error::EmptySet("probe attack data"));
    }
    let (taps_train, _) = forward_taps(bundle, &full_train.features)?;
    let (taps_test, _) = forward_taps(bundle, &forget_test.features)?;
    let feats_train = taps_train.last().expect("at least one stage");
    let feats_test = taps_test.last().expect("at least one stage");
    let (head, standardizer) =
        train_probe(feats_train, &full_train.labels, full_train.classes, cfg)?;
    Ok(probe_accuracy(&head, &standardizer, feats_test, &forget_test.labels))
}

// ---------------------------------------------------------------------------
// k-NN transfer
// ---------------------------------------------------------------------------

/// k-nearest-neighbor accuracy on a downstream dataset over frozen
/// penultimate features. Euclidean distance, majority vote, ties broken by
/// the smaller summed distance (then smaller class id).
pub fn knn_transfer(
    bundle: &ModelBundle,
    down_train: &Dataset,
    down_test: &Dataset,
    k: usize,
) -> Result<f64> {
    if down_train.is_empty() || down_test.is_empty() {
        return Err(Error::EmptySet("downstream dataset"));
    }
    if k == 0 || k > down_train.len() {
        return Err(Error::InvalidParam(format!(
            "k = {k} out of range for {} training rows",
            down_train.len()
        )));
    }
    let (taps_train, _) = forward_taps(bundle, &down_train.features)?;
    let (taps_test, _) = forward_taps(bundle, &down_test.features)?;
    let train_feats = taps_train.last().expect("at least one stage");
    let test_feats = taps_test.last().expect("at least one stage");
    let d = train_feats.cols();
    let mut correct = 0usize;
    for i in 0..down_test.len() {
        let row = test_feats.row(i);
        let mut dists: Vec<(f64, usize)> = (0..down_train.len())
            .map(|j| {
                let mut s = 0.0;
                for (a, b) in row.iter().zip(train_feats.row(j)) {
                    let diff = a - b;
                    s += diff * diff;
                }
                let _ = d;
                (scalar::sqrt(s), down_train.labels[j])
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(dist, label) in dists.iter().take(k) {
            let e = votes.entry(label).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += dist;
        }
        let mut best: Option<(usize, usize, f64)> = None; // (label, count, sum)
        for (&label, &(count, sum)) in &votes {
            let better = match best {
                None => true,
                Some((_, bc, bs)) => count > bc || (count == bc && sum < bs),
            };
            if better {
                best = Some((label, count, sum));
            }
        }
        if best.expect("k >= 1").0 == down_test.labels[i] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / down_test.len() as f64)
}

// ---------------------------------------------------------------------------
// Normalized scores and H-Mean
// ---------------------------------------------------------------------------

/// Normalized [0, 100] higher-is-better scores.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scores {
    pub s_fa: f64,
    pub s_tfa: f64,
    pub s_cka: f64,
    pub s_ra: f64,
    pub s_tra: f64,
    pub s_knn: Vec<f64>,
    pub s_idi: f64,
}

impl Scores {
    pub fn all(&self) -> Vec<f64> {
        let mut v = vec![self.s_fa, self.s_tfa, self.s_cka, self.s_ra, self.s_tra];
        v.extend_from_slice(&self.s_knn);
        v.push(self.s_idi);
        v
    }
}

/// Raw metrics feeding the H-Mean. `cka` is a percentage; `idi` is signed.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMetrics {
    pub fa: f64,
    pub ra: f64,
    pub tfa: f64,
    pub tra: f64,
    pub cka: f64,
    pub idi: f64,
    pub knn_gaps: Vec<f64>,
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

pub fn normalized_scores(raw: &RawMetrics) -> Scores {
    Scores {
        s_fa: 100.0 - raw.fa,
        s_tfa: 100.0 - raw.tfa,
        s_cka: 100.0 - raw.cka,
        s_ra: raw.ra,
        s_tra: raw.tra,
        s_knn: raw.knn_gaps.iter().map(|g| 100.0 - g.abs()).collect(),
        s_idi: 100.0 * clip(1.0 - raw.idi.abs(), 0.1, 1.0),
    }
}

/// Harmonic mean over the normalized scores (N = 5 + #knn + 1). Errors if
/// any score is non-positive.
pub fn hmean(raw: &RawMetrics) -> Result<f64> {
    let scores = normalized_scores(raw);
    hmean_of(&scores)
}

pub fn hmean_of(scores: &Scores) -> Result<f64> {
    let all = scores.all();
    let names =
        ["s_fa", "s_tfa", "s_cka", "s_ra", "s_tra"];
    let mut denom = 0.0;
    for (i, &s) in all.iter().enumerate() {
        // treat rounding residue (self-CKA at exactly 100) as zero
        if s <= 1e-9 {
            let name = names.get(i).copied().unwrap_or(if i + 1 == all.len() {
                "s_idi"
            } else {
                "s_knn"
            });
            return Err(Error::NonPositiveScore { name, value: s });
        }
        denom += 1.0 / s;
    }
    Ok(all.len() as f64 / denom)
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KnnEntry {
    pub accuracy: f64,
    pub gap: f64,
}

/// One method's full evaluation row.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub method: String,
    pub fa: f64,
    pub ra: f64,
    pub tfa: f64,
    pub tra: f64,
    /// Final-tap CKA against the original model, percent.
    pub cka: f64,
    /// Signed probe IDI (original = 1, retrained = 0).
    pub idi: f64,
    pub knn: Vec<KnnEntry>,
    /// Forget accuracy a fresh linear head recovers from frozen features.
    pub probe_recovered_tfa: f64,
    /// Per-tap CKA against the original model, percent.
    pub layer_cka: Vec<f64>,
    pub scores: Scores,
    pub h_mean: Option<f64>,
}

/// Evaluation options for report assembly.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub knn_k: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { knn_k: 5, probe: ProbeConfig::default() }
    }
}

/// Assemble the full per-method report from the three bundles, the class
/// splits, and zero or more downstream train/test pairs.
#[allow(clippy::too_many_arguments)]
pub fn assemble_report(
    method: &str,
    original: &ModelBundle,
    unlearned: &ModelBundle,
    retrained: &ModelBundle,
    splits: &crate::data::Splits,
    full_train: &Dataset,
    downstream: &[(Dataset, Dataset)],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_arch_compatible(original, unlearned)?;
    check_arch_compatible(original, retrained)?;
    let fa = accuracy(unlearned, &splits.forget_train)?;
    let ra = accuracy(unlearned, &splits.retain_train)?;
    let tfa = accuracy(unlearned, &splits.forget_test)?;
    let tra = accuracy(unlearned, &splits.retain_test)?;
    let layer_cka: Vec<f64> = layerwise_cka(unlearned, original, &splits.forget_test, &[])?
        .into_iter()
        .map(|v| 100.0 * v)
        .collect();
    let cka = *layer_cka.last().expect("at least one tap");
    let idi = idi_probe(
        original,
        unlearned,
        retrained,
        &splits.forget_train,
        &splits.forget_test,
        &opts.probe,
    )?;
    let mut knn = Vec::with_capacity(downstream.len());
    for (train, test) in downstream {
        let acc = knn_transfer(unlearned, train, test, opts.knn_k)?;
        let acc_retrained = knn_transfer(retrained, train, test, opts.knn_k)?;
        knn.push(KnnEntry { accuracy: acc, gap: (acc - acc_retrained).abs() });
    }
    let probe_recovered_tfa =
        probe_attack(unlearned, full_train, &splits.forget_test, &opts.probe)?;
    let raw = RawMetrics {
        fa,
        ra,
        tfa,
        tra,
        cka,
        idi,
        knn_gaps: knn.iter().map(|e| e.gap).collect(),
    };
    let scores = normalized_scores(&raw);
    let h_mean = hmean_of(&scores).ok();
    Ok(EvalReport {
        method: String::from(method),
        fa,
        ra,
        tfa,
        tra,
        cka,
        idi,
        knn,
        probe_recovered_tfa,
        layer_cka,
        scores,
        h_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split_by_classes, BlobSpec, SplitSpec, SplitTag};
    use crate::nn::{build_backbone, ModelDims};
    use crate::rng::Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 4,
            stage_widths: vec![16, 16],
            classes: 4,
            d_proj: 8,
            split_final: false,
        }
    }

    #[test]
    fn accuracy_constant_logits_hits_first_class_rate() {
        let mut bundle = build_backbone(&dims(), 1).unwrap();
        // zero classifier: logits constant, argmax = class 0
        bundle.backbone.classifier.weight = Tensor::zeros(&[16, 4]);
        bundle.backbone.classifier.bias = Tensor::zeros(&[4]);
        let spec = BlobSpec { classes: 4, dim: 4, n_per_class: 25, sigma: 0.3, mean_scale: 2.0 };
        let (train, _) = gen_blobs(&spec, 3).unwrap();
        let acc = accuracy(&bundle, &train).unwrap();
        assert!((acc - 25.0).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn accuracy_single_correct_sample() {
        let bundle = build_backbone(&dims(), 2).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let (_, logits) = forward_taps(&bundle, &x).unwrap();
        let label = argmax(logits.row(0));
        let ds = Dataset::new(x, vec![label], 4, SplitTag::Test).unwrap();
        assert_eq!(accuracy(&bundle, &ds).unwrap(), 100.0);
    }

    #[test]
    fn accuracy_empty_part_errors() {
        let bundle = build_backbone(&dims(), 2).unwrap();
        let ds = Dataset::new(Tensor::new(&[0, 4], vec![]).unwrap(), vec![], 4, SplitTag::Test)
            .unwrap();
        assert!(matches!(accuracy(&bundle, &ds), Err(Error::EmptySet(_))));
    }

    fn random_matrix(rng: &mut Rng, n: usize, p: usize) -> Tensor {
        Tensor::new(&[n, p], (0..n * p).map(|_| rng.gaussian()).collect()).unwrap()
    }

    /// Random orthogonal matrix via Gram-Schmidt on a Gaussian.
    fn random_orthogonal(rng: &mut Rng, p: usize) -> Vec<f64> {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < p {
            let mut v: Vec<f64> = (0..p).map(|_| rng.gaussian()).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= dot * ci;
                }
            }
            let norm = scalar::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if norm > 1e-6 {
                for vi in &mut v {
                    *vi /= norm;
                }
                cols.push(v);
            }
        }
        let mut q = vec![0.0; p * p];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..p {
                q[i * p + j] = c[i];
            }
        }
        q
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let mut rng = Rng::new(4);
        let x = random_matrix(&mut rng, 40, 6);
        let v = linear_cka(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn cka_invariances() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 30, 5);
            let q = random_orthogonal(&mut rng, 5);
            // x @ Q
            let mut rotated = vec![0.0; 30 * 5];
            for i in 0..30 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for k in 0..5 {
                        s += x.row(i)[k] * q[k * 5 + j];
                    }
                    rotated[i * 5 + j] = s;
                }
            }
            let xr = Tensor::new(&[30, 5], rotated).unwrap();
            assert!((linear_cka(&x, &xr).unwrap() - 1.0).abs() < 1e-8);
            // isotropic scaling
            let xs =
                Tensor::new(&[30, 5], x.data().iter().map(|v| -3.7 * v).collect()).unwrap();
            assert!((linear_cka(&x, &xs).unwrap() - 1.0).abs() < 1e-8);
            // column permutation (rotate columns by one)
            let mut permuted = vec![0.0; 30 * 5];
            for i in 0..30 {
                for j in 0..5 {
                    permuted[i * 5 + j] = x.row(i)[(j + 1) % 5];
                }
            }
            let xp = Tensor::new(&[30, 5], permuted).unwrap();
            assert!((linear_cka(&x, &xp).unwrap() - 1.0).abs() < 1e-8);
            // symmetry
            let y = random_matrix(&mut rng, 30, 7);
            let ab = linear_cka(&x, &y).unwrap();
            let ba = linear_cka(&y, &x).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
    }

    #[test]
    fn cka_independent_gaussians_near_zero() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(1000 + seed);
            let x = random_matrix(&mut rng, 1000, 10);
            let y = random_matrix(&mut rng, 1000, 10);
            let v = linear_cka(&x, &y).unwrap();
            assert!(v < 0.05, "seed {seed}: {v}");
        }
    }

    #[test]
    fn cka_zero_variance_errors() {
        let x = Tensor::new(&[4, 2], vec![1.0; 8]).unwrap();
        let y = Tensor::new(&[4, 2], vec![0.5, 0.2, 0.1, 0.9, 0.3, 0.4, 0.8, 0.7]).unwrap();
        assert!(matches!(linear_cka(&x, &y), Err(Error::ZeroVariance)));
    }

    #[test]
    fn hmean_reproduces_published_rows() {
        // ImageNet-1K random-100 rows (nine scores each)
        let ec = RawMetrics {
            fa: 0.0,
            ra: 72.63,
            tfa: 0.0,
            tra: 73.84,
            cka: 38.68,
            idi: 0.051,
            knn_gaps: vec![1.50, 4.03, 2.23],
        };
        assert!((hmean(&ec).unwrap() - 85.75).abs() < 0.02);
        let cu = RawMetrics {
            fa: 0.0,
            ra: 75.83,
            tfa: 0.0,
            tra: 75.49,
            cka: 69.52,
            idi: 0.403,
            knn_gaps: vec![2.29, 9.50, 0.62],
        };
        assert!((hmean(&cu).unwrap() - 70.68).abs() < 0.02);
        let duck = RawMetrics {
            fa: 0.04,
            ra: 71.21,
            tfa: 0.02,
            tra: 72.34,
            cka: 90.15,
            idi: 0.538,
            knn_gaps: vec![0.34, 2.96, 1.62],
        };
        assert!((hmean(&duck).unwrap() - 44.65).abs() < 0.02);
        // CIFAR-100 EC row (six scores, no k-NN entries)
        let ec_cifar = RawMetrics {
            fa: 0.0,
            ra: 95.63,
            tfa: 0.0,
            tra: 74.80,
            cka: 61.98,
            idi: 0.291,
            knn_gaps: vec![],
        };
        assert!((hmean(&ec_cifar).unwrap() - 71.23).abs() < 0.02);
    }

    #[test]
    fn hmean_is_monotone_in_each_metric() {
        let base = RawMetrics {
            fa: 5.0,
            ra: 70.0,
            tfa: 4.0,
            tra: 68.0,
            cka: 55.0,
            idi: 0.4,
            knn_gaps: vec![3.0, 8.0],
        };
        let h0 = hmean(&base).unwrap();
        let mut better = base.clone();
        better.fa = 1.0;
        assert!(hmean(&better).unwrap() > h0);
        let mut better = base.clone();
        better.ra = 80.0;
        assert!(hmean(&better).unwrap() > h0);
        let mut better = base.clone();
        better.cka = 40.0;
        assert!(hmean(&better).unwrap() > h0);
        let mut better = base.clone();
        better.idi = 0.1;
        assert!(hmean(&better).unwrap() > h0);
        let mut better = base.clone();
        better.knn_gaps[1] = 2.0;
        assert!(hmean(&better).unwrap() > h0);
    }

    #[test]
    fn hmean_never_exceeds_arithmetic_mean() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let raw = RawMetrics {
                fa: rng.uniform(0.0, 30.0),
                ra: rng.uniform(40.0, 99.0),
                tfa: rng.uniform(0.0, 30.0),
                tra: rng.uniform(40.0, 99.0),
                cka: rng.uniform(1.0, 99.0),
                idi: rng.uniform(-0.5, 1.2),
                knn_gaps: vec![rng.uniform(0.0, 40.0)],
            };
            let scores = normalized_scores(&raw);
            let h = hmean_of(&scores).unwrap();
            let all = scores.all();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            assert!(h <= mean + 1e-12);
            assert!(scores.s_idi >= 10.0 - 1e-12 && scores.s_idi <= 100.0 + 1e-12);
        }
    }

    #[test]
    fn hmean_rejects_non_positive_scores() {
        let raw = RawMetrics {
            fa: 100.0,
            ra: 70.0,
            tfa: 0.0,
            tra: 70.0,
            cka: 50.0,
            idi: 0.0,
            knn_gaps: vec![],
        };
        assert!(matches!(hmean(&raw), Err(Error::NonPositiveScore { name: "s_fa", .. })));
    }

    fn tiny_world() -> (ModelBundle, ModelBundle, crate::data::Splits, Dataset) {
        // blobs overlap enough that retrained features lose forget-class
        // separability (the IDI denominator needs a real gap)
        let spec = BlobSpec { classes: 4, dim: 4, n_per_class: 15, sigma: 1.0, mean_scale: 2.0 };
        let (train, test) = gen_blobs(&spec, 23).unwrap();
        let split = SplitSpec::new(vec![1, 3], 4).unwrap();
        let splits = split_by_classes(&train, &test, &split).unwrap();
        let sched = crate::unlearn::TrainSchedule {
            epochs: 15,
            lr: 0.05,
            batch: 20,
            optimizer: OptimizerKind::sgd(0.9),
        };
        let (original, _) = crate::unlearn::train_original(&dims(), &train, &sched, 5).unwrap();
        let (retrained, _) =
            crate::unlearn::retrain_oracle(&dims(), &splits.retain_train, &sched, 5).unwrap();
        (original, retrained, splits, train)
    }

    #[test]
    fn idi_anchor_identities() {
        let (original, retrained, splits, _) = tiny_world();
        let cfg = ProbeConfig::default();
        let one = idi_probe(
            &original,
            &original,
            &retrained,
            &splits.forget_train,
            &splits.forget_test,
            &cfg,
        )
        .unwrap();
        assert_eq!(one, 1.0, "original anchor must be exactly 1");
        let zero = idi_probe(
            &original,
            &retrained,
            &retrained,
            &splits.forget_train,
            &splits.forget_test,
            &cfg,
        )
        .unwrap();
        assert_eq!(zero, 0.0, "retrained anchor must be exactly 0");
    }

    #[test]
    fn idi_guard_fires_when_models_agree() {
        let (original, _, splits, _) = tiny_world();
        let cfg = ProbeConfig::default();
        let res = idi_probe(
            &original,
            &original,
            &original,
            &splits.forget_train,
            &splits.forget_test,
            &cfg,
        );
        assert!(matches!(res, Err(Error::IdiUndefined { .. })));
    }

    #[test]
    fn knn_self_train_k1_is_perfect() {
        let (original, _, _, train) = tiny_world();
        let acc = knn_transfer(&original, &train, &train, 1).unwrap();
        assert_eq!(acc, 100.0);
    }

    #[test]
    fn knn_separable_downstream_is_perfect() {
        let (original, retrained, _, _) = tiny_world();
        let spec = BlobSpec { classes: 2, dim: 4, n_per_class: 20, sigma: 0.05, mean_scale: 4.0 };
        let (dtrain, dtest) = gen_blobs(&spec, 777).unwrap();
        let acc = knn_transfer(&original, &dtrain, &dtest, 5).unwrap();
        assert_eq!(acc, 100.0);
        // gap of retrained vs itself is zero
        let a = knn_transfer(&retrained, &dtrain, &dtest, 5).unwrap();
        let b = knn_transfer(&retrained, &dtrain, &dtest, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let (original, _, _, train) = tiny_world();
        assert!(knn_transfer(&original, &train, &train, train.len() + 1).is_err());
    }

    #[test]
    fn report_of_original_vs_itself() {
        let (original, retrained, splits, train) = tiny_world();
        let report = assemble_report(
            "original",
            &original,
            &original,
            &retrained,
            &splits,
            &train,
            &[],
            &EvalOptions::default(),
        )
        .unwrap();
        assert!((report.cka - 100.0).abs() < 1e-9, "cka = {}", report.cka);
        assert_eq!(report.idi, 1.0);
        assert!(report.layer_cka.iter().all(|&v| (v - 100.0).abs() < 1e-9));
        // s_cka = 0 leaves the harmonic mean undefined for this row
        assert!(report.h_mean.is_none());
    }
}
