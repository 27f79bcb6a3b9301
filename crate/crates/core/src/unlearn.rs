//! Unlearning objectives and procedures: SupCon pretraining of the EC
//! modules, the layer-wise contrastive-unlearning loop, the baselines
//! (retrain oracle, final-layer CU, random labeling, gradient ascent,
//! fine-tuning), ablation variants, and the plug-in wrapper that adds
//! multi-layer supervision to any base objective.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{sample_batches, shuffled_batches, BatchPlan, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::nn::{ModelBundle, ModelDims, Provenance, TapedBundle, TrainScope};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ablation variants of the layer-wise unlearning loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Cross-entropy only at the final layer; CU still at every layer.
    NoLayerwiseCe,
    /// No EC modules: embeddings are normalized raw taps, CE final-only.
    NoEcModules,
    /// Extra supervision point at the mid tap inside the split final stage.
    PlusFinalBlocks,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLayerwiseCe => "no-layerwise-ce",
            Variant::NoEcModules => "no-ec-modules",
            Variant::PlusFinalBlocks => "plus-final-blocks",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-layerwise-ce" => Ok(Variant::NoLayerwiseCe),
            "no-ec-modules" => Ok(Variant::NoEcModules),
            "plus-final-blocks" => Ok(Variant::PlusFinalBlocks),
            other => Err(Error::InvalidParam(format!("unknown variant {other:?}"))),
        }
    }
}

/// Hyperparameters of the unlearning stage.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnConfig {
    /// Per-layer weights w_l, length equal to the logical depth.
    pub weights: Vec<f64>,
    pub lambda_cu: f64,
    pub lambda_ce: f64,
    pub temperature: f64,
    pub omega: usize,
    pub epochs: usize,
    pub lr: f64,
    pub forget_batch: usize,
    pub retain_batch: usize,
    pub optimizer: OptimizerKind,
    pub variant: Variant,
}

impl UnlearnConfig {
    /// Defaults mirroring the published unlearning settings at desk scale.
    pub fn desk_default(depth: usize) -> Self {
        let mut weights = vec![0.0; depth];
        let template = [0.2, 0.4, 0.8, 1.0];
        for (i, w) in weights.iter_mut().enumerate() {
            *w = template[i.min(template.len() - 1)];
        }
        if depth == 4 {
            weights.copy_from_slice(&template);
        }
        UnlearnConfig {
            weights,
            lambda_cu: 1.5,
            lambda_ce: 1.5,
            temperature: 0.07,
            omega: 2,
            epochs: 20,
            lr: 2e-4,
            forget_batch: 32,
            retain_batch: 32,
            optimizer: OptimizerKind::adam_default(),
            variant: Variant::Full,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.weights.len() != depth {
            return Err(Error::LengthMismatch {
                op: "unlearn_config",
                left: self.weights.len(),
                right: depth,
            });
        }
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParam(String::from("layer weights must be >= 0")));
        }
        if !self.weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidParam(String::from("at least one layer weight must be > 0")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParam(String::from("temperature must be > 0")));
        }
        if self.lambda_cu < 0.0 || self.lambda_ce < 0.0 {
            return Err(Error::InvalidParam(String::from("lambdas must be >= 0")));
        }
        if self.omega == 0 {
            return Err(Error::InvalidParam(String::from("omega must be >= 1")));
        }
        Ok(())
    }

    fn plan(&self) -> BatchPlan {
        BatchPlan {
            forget_batch: self.forget_batch,
            retain_batch: self.retain_batch,
            omega: self.omega,
        }
    }
}

/// Per-step loss record for one supervision point list.
#[derive(Clone, Debug)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub cu: Vec<f64>,
    pub ce: Vec<Option<f64>>,
    pub total: f64,
}

/// Loss log with one column group per supervision point.
#[derive(Clone, Debug, Default)]
pub struct UnlearnLog {
    pub points: Vec<String>,
    pub rows: Vec<LossRow>,
}

/// Plain training log: (epoch, step, loss).
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<(usize, usize, f64)>,
}

// ---------------------------------------------------------------------------
// Loss builders
// ---------------------------------------------------------------------------

/// Contrastive unlearning loss at one layer, batch form:
/// -(1/(m r)) sum_{i,j} log sim(z_i, z_j; tau) with sim = exp(dot/tau),
/// which reduces exactly to -(1/(m r tau)) sum_{i,j} z_i . z_j.
pub fn cu_loss_layer(tape: &mut Tape, z_forget: Var, z_retain: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParam(format!("temperature must be > 0, got {tau}")));
    }
    for (side, z) in [("forget", z_forget), ("retain", z_retain)] {
        let t = tape.value(z);
        if t.ndim() != 2 || t.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "cu_loss_layer",
                detail: format!("{side} embeddings {:?}", t.shape()),
            });
        }
        for i in 0..t.rows() {
            let norm = crate::scalar::sqrt(t.row(i).iter().map(|v| v * v).sum::<f64>());
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized { row: i, norm });
            }
        }
    }
    let zr_t = tape.transpose(z_retain)?;
    let sims = tape.matmul(z_forget, zr_t)?;
    let mean = tape.mean(sims)?;
    tape.scale(mean, -1.0 / tau)
}

/// Retain-set cross-entropy at one layer. When a split is given, any
/// forget-class label in the batch is rejected.
pub fn ce_loss_layer(
    tape: &mut Tape,
    aux_logits: Var,
    labels: &[usize],
    split: Option<&SplitSpec>,
) -> Result<Var> {
    if let Some(spec) = split {
        if let Some(&bad) = labels.iter().find(|&&y| spec.is_forget(y)) {
            return Err(Error::InvalidLabel { label: bad, classes: spec.classes() });
        }
    }
    tape.softmax_cross_entropy(aux_logits, labels)
}

/// Weighted multi-layer total: sum_l w_l (lambda_cu L_CU^l + lambda_ce L_CE^l).
pub fn total_loss(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    weights: &[f64],
    lambda_cu: f64,
    lambda_ce: f64,
) -> Result<Var> {
    if pairs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            op: "total_loss",
            left: pairs.len(),
            right: weights.len(),
        });
    }
    let terms: Vec<(f64, Var, Option<Var>)> =
        pairs.iter().zip(weights).map(|(&(cu, ce), &w)| (w, cu, Some(ce))).collect();
    fold_weighted_terms(tape, &terms, lambda_cu, lambda_ce)
}

fn fold_weighted_terms(
    tape: &mut Tape,
    terms: &[(f64, Var, Option<Var>)],
    lambda_cu: f64,
    lambda_ce: f64,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, cu, ce) in terms {
        let cu_part = tape.scale(cu, lambda_cu)?;
        let combined = match ce {
            Some(ce) => {
                let ce_part = tape.scale(ce, lambda_ce)?;
                tape.add(cu_part, ce_part)?
            }
            None => cu_part,
        };
        let weighted = tape.scale(combined, w)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, weighted)?,
            None => weighted,
        });
    }
    acc.ok_or(Error::EmptySet("supervision points"))
}

/// Supervised contrastive loss over one batch of normalized embeddings.
/// Anchors need at least one positive and one negative; anchors without
/// either are skipped, and a batch where every anchor is skipped errors.
pub fn supcon_loss(tape: &mut Tape, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = tape.value(z).rows();
    if n != labels.len() {
        return Err(Error::LengthMismatch { op: "supcon_loss", left: n, right: labels.len() });
    }
    let mut valid = Vec::new();
    for i in 0..n {
        let pos = (0..n).any(|j| j != i && labels[j] == labels[i]);
        let neg = (0..n).any(|j| labels[j] != labels[i]);
        if pos && neg {
            valid.push(i);
        }
    }
    if valid.is_empty() {
        return Err(Error::AllAnchorsSkipped);
    }
    let v = valid.len();

    let zt = tape.transpose(z)?;
    let sims = tape.matmul(z, zt)?;
    let sims = tape.scale(sims, 1.0 / tau)?;

    // selection matrix picking the valid anchor rows
    let mut sel = vec![0.0; v * n];
    for (r, &i) in valid.iter().enumerate() {
        sel[r * n + i] = 1.0;
    }
    let sel = tape.leaf(Tensor::new(&[v, n], sel)?)?;
    let s_valid = tape.matmul(sel, sims)?;

    // constant per-row max over non-self columns; subtracting a constant
    // shift leaves both the value and the gradient of log-sum-exp exact
    let sv = tape.value(s_valid).clone();
    let mut shift = vec![0.0; v * n];
    let mut offdiag = vec![0.0; v * n];
    let mut positives = vec![0.0; v * n];
    let mut inv_counts = vec![0.0; v];
    for (r, &i) in valid.iter().enumerate() {
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                m = m.max(sv.row(r)[j]);
            }
        }
        let mut count = 0usize;
        for j in 0..n {
            shift[r * n + j] = m;
            if j != i {
                offdiag[r * n + j] = 1.0;
                if labels[j] == labels[i] {
                    positives[r * n + j] = 1.0;
                    count += 1;
                }
            }
        }
        inv_counts[r] = 1.0 / count as f64;
    }
    let shift = tape.leaf(Tensor::new(&[v, n], shift)?)?;
    let offdiag = tape.leaf(Tensor::new(&[v, n], offdiag)?)?;
    let positives = tape.leaf(Tensor::new(&[v, n], positives)?)?;
    let inv_counts = tape.leaf(Tensor::new(&[v, 1], inv_counts)?)?;
    let ones = tape.leaf(Tensor::new(&[n, 1], vec![1.0; n])?)?;

    let shifted = tape.sub(s_valid, shift)?;
    let exp = tape.exp(shifted)?;
    let exp_masked = tape.mul(exp, offdiag)?;
    let denom = tape.matmul(exp_masked, ones)?;
    let log_denom = tape.log(denom)?;

    let pos_sims = tape.mul(shifted, positives)?;
    let pos_sums = tape.matmul(pos_sims, ones)?;
    let pos_mean = tape.mul(pos_sums, inv_counts)?;

    let per_anchor = tape.sub(pos_mean, log_denom)?;
    let total = tape.sum(per_anchor)?;
    tape.scale(total, -1.0 / v as f64)
}

// ---------------------------------------------------------------------------
// Supervision plan
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PointKind {
    /// EC-module path at logical layer l < L.
    Module(usize),
    /// Normalized raw tap at logical layer l < L (no-ec-modules variant).
    RawTap(usize),
    /// Mid tap inside the split final stage, with its own aux head.
    Mid,
    /// Final layer: normalized final tap + final classifier.
    Final,
}

#[derive(Clone, Copy, Debug)]
struct Point {
    kind: PointKind,
    weight: f64,
    with_ce: bool,
}

fn plan_points(bundle: &ModelBundle, cfg: &UnlearnConfig) -> Result<Vec<Point>> {
    let depth = bundle.backbone.logical_depth();
    cfg.validate(depth)?;
    let w = &cfg.weights;
    let mut points = Vec::new();
    match cfg.variant {
        Variant::Full | Variant::NoLayerwiseCe | Variant::PlusFinalBlocks => {
            if bundle.ec_modules.is_empty() {
                return Err(Error::InvalidParam(String::from(
                    "variant requires attached EC modules (pretrain them first)",
                )));
            }
            let layerwise_ce = cfg.variant != Variant::NoLayerwiseCe;
            for l in 1..depth {
                if bundle.module_at(l).is_none() {
                    return Err(Error::MissingModule { stage: l });
                }
                points.push(Point {
                    kind: PointKind::Module(l),
                    weight: w[l - 1],
                    with_ce: layerwise_ce,
                });
            }
            if cfg.variant == Variant::PlusFinalBlocks {
                if !bundle.backbone.split_final {
                    return Err(Error::InvalidParam(String::from(
                        "plus-final-blocks needs a split-final architecture",
                    )));
                }
                points.push(Point {
                    kind: PointKind::Mid,
                    weight: w[depth - 1],
                    with_ce: layerwise_ce,
                });
            }
            points.push(Point { kind: PointKind::Final, weight: w[depth - 1], with_ce: true });
        }
        Variant::NoEcModules => {
            for l in 1..depth {
                points.push(Point { kind: PointKind::RawTap(l), weight: w[l - 1], with_ce: false });
            }
            points.push(Point { kind: PointKind::Final, weight: w[depth - 1], with_ce: true });
        }
    }
    Ok(points)
}

fn point_label(kind: PointKind, depth: usize) -> String {
    match kind {
        PointKind::Module(l) | PointKind::RawTap(l) => format!("l{l}"),
        PointKind::Mid => String::from("mid"),
        PointKind::Final => format!("l{depth}"),
    }
}

/// Forward the stage chain only (no classifier logits).
fn forward_stage_taps(taped: &TapedBundle, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
    let mut taps = Vec::with_capacity(taped.stages.len());
    let mut h = x;
    for (aff, act) in &taped.stages {
        h = taped.affine(tape, h, aff)?;
        if *act == crate::nn::Activation::Relu {
            h = tape.relu(h)?;
        }
        taps.push(h);
    }
    Ok(taps)
}

/// Embedding-only module path (blocks + normalize), no aux logits.
fn module_embedding(
    taped: &TapedBundle,
    tape: &mut Tape,
    taps: &[Var],
    l: usize,
) -> Result<Var> {
    let m = taped
        .modules
        .iter()
        .find(|m| m.stage == l)
        .ok_or(Error::MissingModule { stage: l })?;
    let mut h = taps[l - 1];
    let last = m.blocks.len() - 1;
    for (i, blk) in m.blocks.iter().enumerate() {
        h = taped.affine(tape, h, blk)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    tape.l2_normalize(h, 1)
}

struct TermOutput {
    cu: Var,
    ce: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn build_point_term(
    taped: &TapedBundle,
    tape: &mut Tape,
    point: &Point,
    taps_f: &[Var],
    taps_r: &[Var],
    y_r: &[usize],
    tau: f64,
    mid_tap: Option<usize>,
) -> Result<TermOutput> {
    let (z_f, z_r, logits_r) = match point.kind {
        PointKind::Module(l) => {
            let (z_f, _) = taped.embed(tape, taps_f, l)?;
            let (z_r, logits) = taped.embed(tape, taps_r, l)?;
            (z_f, z_r, Some(logits))
        }
        PointKind::Final => {
            let depth = taped.logical_depth();
            let (z_f, _) = taped.embed(tape, taps_f, depth)?;
            let (z_r, logits) = taped.embed(tape, taps_r, depth)?;
            (z_f, z_r, Some(logits))
        }
        PointKind::RawTap(l) => {
            let z_f = tape.l2_normalize(taps_f[l - 1], 1)?;
            let z_r = tape.l2_normalize(taps_r[l - 1], 1)?;
            (z_f, z_r, None)
        }
        PointKind::Mid => {
            let idx = mid_tap.ok_or(Error::InvalidParam(String::from("no mid tap")))?;
            let aux = taped
                .mid_aux
                .as_ref()
                .ok_or(Error::InvalidParam(String::from("no mid aux head")))?;
            let z_f = tape.l2_normalize(taps_f[idx], 1)?;
            let z_r = tape.l2_normalize(taps_r[idx], 1)?;
            let logits = taped.affine(tape, taps_r[idx], aux)?;
            (z_f, z_r, Some(logits))
        }
    };
    let cu = cu_loss_layer(tape, z_f, z_r, tau)?;
    let ce = if point.with_ce {
        let logits = logits_r.ok_or(Error::InvalidParam(String::from(
            "cross-entropy requested at a point with no classifier",
        )))?;
        Some(ce_loss_layer(tape, logits, y_r, None)?)
    } else {
        None
    };
    Ok(TermOutput { cu, ce })
}

// ---------------------------------------------------------------------------
// Step driver
// ---------------------------------------------------------------------------

fn collect_slot_grads(bundle: &ModelBundle, grads: &Gradients) -> Vec<Option<Tensor>> {
    (0..bundle.param_count()).map(|s| grads.of_slot(s).cloned()).collect()
}

fn apply_grads(
    bundle: &mut ModelBundle,
    opt: &mut Optimizer,
    mut slot_grads: Vec<Option<Tensor>>,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(max_norm) = clip {
        clip_grad_norm(&mut slot_grads, max_norm);
    }
    let refs: Vec<Option<&Tensor>> = slot_grads.iter().map(|g| g.as_ref()).collect();
    let mut params = bundle.params_mut();
    opt.step(&mut params, &refs)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(13)
}

/// Gradient clip for the no-ec-modules ablation. Contrastive pressure on
/// raw backbone taps is unstable (the adapters normally buffer it); without
/// a clip the run aborts on a dead relu row.
const RAW_TAP_CLIP: f64 = 12.0;

fn run_supervised_loop(
    bundle: &mut ModelBundle,
    forget: &Dataset,
    retain: &Dataset,
    cfg: &UnlearnConfig,
    points: &[Point],
    seed: u64,
    mut observer: impl FnMut(usize, &ModelBundle),
) -> Result<UnlearnLog> {
    if forget.is_empty() {
        return Err(Error::EmptySet("forget split"));
    }
    if retain.is_empty() {
        return Err(Error::EmptySet("retain split"));
    }
    let depth = bundle.backbone.logical_depth();
    let labels = points.iter().map(|p| point_label(p.kind, depth)).collect();
    let mut log = UnlearnLog { points: labels, rows: Vec::new() };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, bundle.param_count());
    let mut step_index = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = sample_batches(&cfg.plan(), forget, retain, epoch_seed(seed, epoch))?;
        for batch in batches {
            let pool = batch.retain_pool()?;
            let mut tape = Tape::new();
            let taped = TapedBundle::insert(&mut tape, bundle, TrainScope::All)?;
            let x_f = tape.leaf(batch.forget.features.clone())?;
            let x_r = tape.leaf(pool.features.clone())?;
            let taps_f = forward_stage_taps(&taped, &mut tape, x_f)?;
            let taps_r = forward_stage_taps(&taped, &mut tape, x_r)?;
            let mid_tap = bundle.backbone.mid_tap_index();
            let mut terms = Vec::with_capacity(points.len());
            let mut row = LossRow {
                epoch,
                step: step_index,
                cu: Vec::with_capacity(points.len()),
                ce: Vec::with_capacity(points.len()),
                total: 0.0,
            };
            for point in points {
                let term = build_point_term(
                    &taped,
                    &mut tape,
                    point,
                    &taps_f,
                    &taps_r,
                    &pool.labels,
                    cfg.temperature,
                    mid_tap,
                )?;
                row.cu.push(tape.value(term.cu).item()?);
                row.ce.push(match term.ce {
                    Some(ce) => Some(tape.value(ce).item()?),
                    None => None,
                });
                terms.push((point.weight, term.cu, term.ce));
            }
            let loss = fold_weighted_terms(&mut tape, &terms, cfg.lambda_cu, cfg.lambda_ce)?;
            row.total = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let slot_grads = collect_slot_grads(bundle, &grads);
            let clip = (cfg.variant == Variant::NoEcModules).then_some(RAW_TAP_CLIP);
            apply_grads(bundle, &mut opt, slot_grads, clip)?;
            step_index += 1;
            observer(step_index, bundle);
            log.rows.push(row);
        }
    }
    Ok(log)
}

/// Build the full per-step loss of the layer-wise loop on a caller-owned
/// tape: every supervision point's CU and CE term folded with the config's
/// weights and lambdas. Parameters are inserted grad-flagged, so the caller
/// can differentiate the returned scalar.
pub fn build_ec_step_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    cfg: &UnlearnConfig,
    forget: &crate::data::MiniBatch,
    retain_pool: &crate::data::MiniBatch,
) -> Result<Var> {
    let points = plan_points(bundle, cfg)?;
    let taped = TapedBundle::insert(tape, bundle, TrainScope::All)?;
    let x_f = tape.leaf(forget.features.clone())?;
    let x_r = tape.leaf(retain_pool.features.clone())?;
    let taps_f = forward_stage_taps(&taped, tape, x_f)?;
    let taps_r = forward_stage_taps(&taped, tape, x_r)?;
    let mid_tap = bundle.backbone.mid_tap_index();
    let mut terms = Vec::with_capacity(points.len());
    for point in &points {
        let term = build_point_term(
            &taped,
            tape,
            point,
            &taps_f,
            &taps_r,
            &retain_pool.labels,
            cfg.temperature,
            mid_tap,
        )?;
        terms.push((point.weight, term.cu, term.ce));
    }
    fold_weighted_terms(tape, &terms, cfg.lambda_cu, cfg.lambda_ce)
}

/// Layer-wise contrastive unlearning (the full loop over supervision points),
/// updating backbone, classifier, and EC modules jointly.
pub fn ec_unlearn(
    bundle: &mut ModelBundle,
    forget: &Dataset,
    retain: &Dataset,
    cfg: &UnlearnConfig,
    seed: u64,
    observer: impl FnMut(usize, &ModelBundle),
) -> Result<UnlearnLog> {
    let points = plan_points(bundle, cfg)?;
    let log = run_supervised_loop(bundle, forget, retain, cfg, &points, seed, observer)?;
    bundle.meta.provenance = Provenance::Unlearned(format!("ec:{}", cfg.variant.as_str()));
    Ok(log)
}

/// Final-layer-only contrastive unlearning: CU on the normalized final tap
/// plus CE through the final classifier, nothing else.
pub fn cu_baseline(
    bundle: &mut ModelBundle,
    forget: &Dataset,
    retain: &Dataset,
    cfg: &UnlearnConfig,
    seed: u64,
    observer: impl FnMut(usize, &ModelBundle),
) -> Result<UnlearnLog> {
    let points = [Point { kind: PointKind::Final, weight: 1.0, with_ce: true }];
    let log = run_supervised_loop(bundle, forget, retain, cfg, &points, seed, observer)?;
    bundle.meta.provenance = Provenance::Unlearned(String::from("cu"));
    Ok(log)
}

// ---------------------------------------------------------------------------
// Classifier training (original, retrain, fine-tune, random labels)
// ---------------------------------------------------------------------------

/// Plain cross-entropy training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
}

impl TrainSchedule {
    pub fn desk_default() -> Self {
        TrainSchedule {
            epochs: 40,
            lr: 0.05,
            batch: 64,
            optimizer: OptimizerKind::sgd(0.9),
        }
    }
}

/// Minibatch cross-entropy training of backbone + final classifier.
pub fn train_classifier(
    bundle: &mut ModelBundle,
    data: &Dataset,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::EmptySet("training data"));
    }
    let mut opt = Optimizer::new(sched.optimizer, sched.lr, bundle.param_count());
    let mut log = TrainLog::default();
    let mut step_index = 0usize;
    for epoch in 0..sched.epochs {
        for batch in shuffled_batches(data, sched.batch, epoch_seed(seed, epoch))? {
            let mut tape = Tape::new();
            let taped = TapedBundle::insert(&mut tape, bundle, TrainScope::Backbone)?;
            let x = tape.leaf(batch.features.clone())?;
            let (_, logits) = taped.forward_taps(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let slot_grads = collect_slot_grads(bundle, &grads);
            apply_grads(bundle, &mut opt, slot_grads, None)?;
            log.rows.push((epoch, step_index, value));
            step_index += 1;
        }
    }
    Ok(log)
}

/// Original model f_o: fresh backbone trained on the full dataset.
pub fn train_original(
    dims: &ModelDims,
    data: &Dataset,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<(ModelBundle, TrainLog)> {
    let mut bundle = crate::nn::build_backbone(dims, seed)?;
    let log = train_classifier(&mut bundle, data, sched, seed)?;
    bundle.meta.provenance = Provenance::Original;
    Ok((bundle, log))
}

/// Retrained oracle f_r: fresh backbone trained on the retain set only.
/// The head stays C-way; forget-class logits simply never receive gradient.
pub fn retrain_oracle(
    dims: &ModelDims,
    retain: &Dataset,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<(ModelBundle, TrainLog)> {
    if retain.is_empty() {
        return Err(Error::EmptySet("retain split"));
    }
    let mut bundle = crate::nn::build_backbone(dims, seed)?;
    let log = train_classifier(&mut bundle, retain, sched, seed)?;
    bundle.meta.provenance = Provenance::Retrained;
    Ok((bundle, log))
}

/// Fine-tuning baseline: continue CE training on the retain set only.
pub fn finetune_baseline(
    bundle: &mut ModelBundle,
    retain: &Dataset,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainLog> {
    let log = train_classifier(bundle, retain, sched, seed)?;
    bundle.meta.provenance = Provenance::Unlearned(String::from("finetune"));
    Ok(log)
}

/// Random-labeling baseline: forget labels are resampled uniformly from the
/// retain classes each epoch, then CE runs on relabeled-forget + retain.
pub fn random_label_baseline(
    bundle: &mut ModelBundle,
    forget: &Dataset,
    retain: &Dataset,
    split: &SplitSpec,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<TrainLog> {
    if forget.is_empty() {
        return Err(Error::EmptySet("forget split"));
    }
    if retain.is_empty() {
        return Err(Error::EmptySet("retain split"));
    }
    let retain_classes = split.retain_classes();
    let mut opt = Optimizer::new(sched.optimizer, sched.lr, bundle.param_count());
    let mut log = TrainLog::default();
    let mut step_index = 0usize;
    for epoch in 0..sched.epochs {
        let mut rng = Rng::derive(epoch_seed(seed, epoch), 0x726c_6162); // "rlab"
        let relabeled: Vec<usize> =
            forget.labels.iter().map(|_| retain_classes[rng.below(retain_classes.len())]).collect();
        let relabeled_forget =
            Dataset::new(forget.features.clone(), relabeled, forget.classes, forget.split)?;
        let combined = relabeled_forget.vstack(retain)?;
        for batch in shuffled_batches(&combined, sched.batch, epoch_seed(seed, epoch))? {
            let mut tape = Tape::new();
            let taped = TapedBundle::insert(&mut tape, bundle, TrainScope::Backbone)?;
            let x = tape.leaf(batch.features.clone())?;
            let (_, logits) = taped.forward_taps(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let slot_grads = collect_slot_grads(bundle, &grads);
            apply_grads(bundle, &mut opt, slot_grads, None)?;
            log.rows.push((epoch, step_index, value));
            step_index += 1;
        }
    }
    bundle.meta.provenance = Provenance::Unlearned(String::from("rl"));
    Ok(log)
}

// ---------------------------------------------------------------------------
// Objective-driven unlearning (gradient ascent and the plug-in wrapper)
// ---------------------------------------------------------------------------

/// A per-step scalar objective over paired forget/retain batches.
pub trait StepObjective {
    fn name(&self) -> &'static str;

    fn build(
        &self,
        tape: &mut Tape,
        taped: &TapedBundle,
        taps_f: &[Var],
        y_f: &[usize],
        taps_r: &[Var],
        y_r: &[usize],
    ) -> Result<Var>;

    /// Global gradient-norm clip, if the method needs one.
    fn clip(&self) -> Option<f64> {
        None
    }
}

/// Gradient-ascent baseline objective: CE(retain) - CE(forget), with the
/// gradient clipped at norm 5.0 to keep the ascent from diverging.
pub struct GradientAscentObjective;

impl StepObjective for GradientAscentObjective {
    fn name(&self) -> &'static str {
        "ga"
    }

    fn build(
        &self,
        tape: &mut Tape,
        taped: &TapedBundle,
        taps_f: &[Var],
        y_f: &[usize],
        taps_r: &[Var],
        y_r: &[usize],
    ) -> Result<Var> {
        let logits_f = {
            let t = taps_f[taps_f.len() - 1];
            taped.affine(tape, t, &taped.classifier)?
        };
        let logits_r = {
            let t = taps_r[taps_r.len() - 1];
            taped.affine(tape, t, &taped.classifier)?
        };
        let ce_f = tape.softmax_cross_entropy(logits_f, y_f)?;
        let ce_r = tape.softmax_cross_entropy(logits_r, y_r)?;
        tape.sub(ce_r, ce_f)
    }

    fn clip(&self) -> Option<f64> {
        Some(5.0)
    }
}

/// Final-layer CU + CE as a standalone objective (what `cu_baseline` runs,
/// packaged for composition tests).
pub struct FinalCuObjective {
    pub lambda_cu: f64,
    pub lambda_ce: f64,
    pub temperature: f64,
}

impl StepObjective for FinalCuObjective {
    fn name(&self) -> &'static str {
        "cu"
    }

    fn build(
        &self,
        tape: &mut Tape,
        taped: &TapedBundle,
        taps_f: &[Var],
        _y_f: &[usize],
        taps_r: &[Var],
        y_r: &[usize],
    ) -> Result<Var> {
        let depth = taped.logical_depth();
        let (z_f, _) = taped.embed(tape, taps_f, depth)?;
        let (z_r, logits_r) = taped.embed(tape, taps_r, depth)?;
        let cu = cu_loss_layer(tape, z_f, z_r, self.temperature)?;
        let ce = ce_loss_layer(tape, logits_r, y_r, None)?;
        fold_weighted_terms(tape, &[(1.0, cu, Some(ce))], self.lambda_cu, self.lambda_ce)
    }
}

/// Plug-in wrapper: base objective plus the multi-layer supervision terms
/// for every l < L (the final-layer terms stay owned by the base method).
pub struct PluginObjective<'a, B: StepObjective + ?Sized> {
    pub base: &'a B,
    pub cfg: &'a UnlearnConfig,
}

/// Compose a base objective with EC's intermediate-layer supervision.
pub fn plugin_augment<'a, B: StepObjective + ?Sized>(
    base: &'a B,
    cfg: &'a UnlearnConfig,
) -> PluginObjective<'a, B> {
    PluginObjective { base, cfg }
}

impl<B: StepObjective + ?Sized> StepObjective for PluginObjective<'_, B> {
    fn name(&self) -> &'static str {
        "plugin"
    }

    fn build(
        &self,
        tape: &mut Tape,
        taped: &TapedBundle,
        taps_f: &[Var],
        y_f: &[usize],
        taps_r: &[Var],
        y_r: &[usize],
    ) -> Result<Var> {
        let base = self.base.build(tape, taped, taps_f, y_f, taps_r, y_r)?;
        let depth = taped.logical_depth();
        let mut terms = Vec::new();
        for l in 1..depth {
            let point = Point { kind: PointKind::Module(l), weight: self.cfg.weights[l - 1], with_ce: true };
            let term = build_point_term(
                taped,
                tape,
                &point,
                taps_f,
                taps_r,
                y_r,
                self.cfg.temperature,
                None,
            )?;
            terms.push((point.weight, term.cu, term.ce));
        }
        let layers =
            fold_weighted_terms(tape, &terms, self.cfg.lambda_cu, self.cfg.lambda_ce)?;
        tape.add(base, layers)
    }

    fn clip(&self) -> Option<f64> {
        self.base.clip()
    }
}

/// Run any [`StepObjective`] over paired forget/retain batches.
pub fn objective_unlearn(
    bundle: &mut ModelBundle,
    forget: &Dataset,
    retain: &Dataset,
    objective: &dyn StepObjective,
    cfg: &UnlearnConfig,
    seed: u64,
    mut observer: impl FnMut(usize, &ModelBundle),
) -> Result<TrainLog> {
    if forget.is_empty() {
        return Err(Error::EmptySet("forget split"));
    }
    if retain.is_empty() {
        return Err(Error::EmptySet("retain split"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, bundle.param_count());
    let mut log = TrainLog::default();
    let mut step_index = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = sample_batches(&cfg.plan(), forget, retain, epoch_seed(seed, epoch))?;
        for batch in batches {
            let pool = batch.retain_pool()?;
            let mut tape = Tape::new();
            let taped = TapedBundle::insert(&mut tape, bundle, TrainScope::All)?;
            let x_f = tape.leaf(batch.forget.features.clone())?;
            let x_r = tape.leaf(pool.features.clone())?;
            let taps_f = forward_stage_taps(&taped, &mut tape, x_f)?;
            let taps_r = forward_stage_taps(&taped, &mut tape, x_r)?;
            let loss = objective.build(
                &mut tape,
                &taped,
                &taps_f,
                &batch.forget.labels,
                &taps_r,
                &pool.labels,
            )?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let slot_grads = collect_slot_grads(bundle, &grads);
            apply_grads(bundle, &mut opt, slot_grads, objective.clip())?;
            log.rows.push((epoch, step_index, value));
            step_index += 1;
            observer(step_index, bundle);
        }
    }
    bundle.meta.provenance = Provenance::Unlearned(String::from(objective.name()));
    Ok(log)
}

/// Gradient-ascent baseline over paired batches.
pub fn gradient_ascent_baseline(
    bundle: &mut ModelBundle,
    forget: &Dataset,
    retain: &Dataset,
    cfg: &UnlearnConfig,
    seed: u64,
) -> Result<TrainLog> {
    objective_unlearn(bundle, forget, retain, &GradientAscentObjective, cfg, seed, |_, _| {})
}

// ---------------------------------------------------------------------------
// SupCon pretraining of EC-module blocks
// ---------------------------------------------------------------------------

/// Gradient-norm clip for SupCon pretraining. Projection-head gradients
/// scale like 1/|h| through l2_normalize; without the clip a shrinking row
/// can blow up and wander into the all-dead relu cone.
const SUPCON_CLIP: f64 = 1.0;

/// Train the EC-module blocks with supervised contrastive learning on the
/// full dataset. Backbone, final classifier, and aux classifiers stay
/// bit-frozen; only block parameters move.
pub fn supcon_pretrain(
    bundle: &mut ModelBundle,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch: usize,
    tau: f64,
    seed: u64,
) -> Result<TrainLog> {
    if bundle.ec_modules.is_empty() {
        return Err(Error::InvalidParam(String::from("no EC modules to pretrain")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParam(String::from("temperature must be > 0")));
    }
    let module_stages: Vec<usize> = bundle.ec_modules.iter().map(|m| m.stage).collect();
    let mut opt = Optimizer::new(OptimizerKind::adam_default(), lr, bundle.param_count());
    let mut log = TrainLog::default();
    let mut step_index = 0usize;
    for epoch in 0..epochs {
        for batch_data in shuffled_batches(data, batch, epoch_seed(seed, epoch))? {
            let mut tape = Tape::new();
            let taped = TapedBundle::insert(&mut tape, bundle, TrainScope::EcBlocks)?;
            let x = tape.leaf(batch_data.features.clone())?;
            let taps = forward_stage_taps(&taped, &mut tape, x)?;
            let mut loss: Option<Var> = None;
            for &l in &module_stages {
                let z = module_embedding(&taped, &mut tape, &taps, l)?;
                let term = supcon_loss(&mut tape, z, &batch_data.labels, tau)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            let loss = loss.expect("at least one EC module");
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let slot_grads = collect_slot_grads(bundle, &grads);
            apply_grads(bundle, &mut opt, slot_grads, Some(SUPCON_CLIP))?;
            log.rows.push((epoch, step_index, value));
            step_index += 1;
        }
    }
    bundle.meta.ec_pretrained = true;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{attach_ec_modules, build_backbone, fingerprint, fingerprint_filtered};
    use crate::tensor::Tensor;

    fn tiny_dims() -> ModelDims {
        // wide enough that He-init relu rows essentially never all die
        ModelDims {
            input_dim: 4,
            stage_widths: vec![16, 16, 16, 16],
            classes: 4,
            d_proj: 16,
            split_final: false,
        }
    }

    fn tiny_data(seed: u64) -> (Dataset, Dataset) {
        let spec = crate::data::BlobSpec {
            classes: 4,
            dim: 4,
            n_per_class: 12,
            sigma: 0.3,
            mean_scale: 2.5,
        };
        crate::data::gen_blobs(&spec, seed).unwrap()
    }

    #[test]
    fn cu_loss_identical_vectors() {
        let mut tape = Tape::new();
        let z = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let zf = tape.leaf(z.clone()).unwrap();
        let zr = tape.leaf(z).unwrap();
        let loss = cu_loss_layer(&mut tape, zf, zr, 0.07).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - (-1.0 / 0.07)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn cu_loss_orthogonal_pairs() {
        let mut tape = Tape::new();
        let zf = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let zr = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap()).unwrap();
        let loss = cu_loss_layer(&mut tape, zf, zr, 0.07).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cu_loss_mixed_example() {
        // Z_f = {(1,0)}, Z_r = {(0,1), (sqrt2/2, sqrt2/2)}, tau = 1
        //   -> -(0 + sqrt2/2)/2 = -0.35355339
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let mut tape = Tape::new();
        let zf = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let zr = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 1.0, s, s]).unwrap()).unwrap();
        let loss = cu_loss_layer(&mut tape, zf, zr, 1.0).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - (-s / 2.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn cu_loss_rejects_unnormalized_rows() {
        let mut tape = Tape::new();
        let zf = tape.leaf(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap()).unwrap();
        let zr = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(
            cu_loss_layer(&mut tape, zf, zr, 1.0),
            Err(Error::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn cu_gradient_pulls_antipodal_vectors_together() {
        // One step on two (near-)antipodal unit vectors strictly increases
        // cosine. Exactly antipodal is the saddle where the projected
        // gradient vanishes, so the check perturbs by a small angle.
        let eps = 1e-3;
        let mut tape = Tape::new();
        let zf_raw = tape.leaf_grad(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let zr_raw = tape.leaf_grad(Tensor::matrix(1, 2, vec![-1.0, eps]).unwrap()).unwrap();
        let zf = tape.l2_normalize(zf_raw, 1).unwrap();
        let zr = tape.l2_normalize(zr_raw, 1).unwrap();
        let loss = cu_loss_layer(&mut tape, zf, zr, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        let step = 0.1;
        let f: Vec<f64> = [1.0, 0.0]
            .iter()
            .zip(grads.of(zf_raw).unwrap().data())
            .map(|(v, g)| v - step * g)
            .collect();
        let r: Vec<f64> = [-1.0, eps]
            .iter()
            .zip(grads.of(zr_raw).unwrap().data())
            .map(|(v, g)| v - step * g)
            .collect();
        let cos_before = -1.0 / (1.0 + eps * eps).sqrt();
        let dot = f[0] * r[0] + f[1] * r[1];
        let nf = (f[0] * f[0] + f[1] * f[1]).sqrt();
        let nr = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let cos_after = dot / (nf * nr);
        assert!(cos_after > cos_before, "cosine did not increase: {cos_after} vs {cos_before}");
    }

    #[test]
    fn ce_loss_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 90])).unwrap();
        let loss = ce_loss_layer(&mut tape, logits, &[4, 10, 89], None).unwrap();
        assert!((tape.value(loss).item().unwrap() - (90.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_perfect_logits_near_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 4];
        data[2] = 500.0;
        data[4 + 1] = 500.0;
        let logits = tape.leaf(Tensor::matrix(2, 4, data).unwrap()).unwrap();
        let loss = ce_loss_layer(&mut tape, logits, &[2, 1], None).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn total_loss_matches_scalar_oracle_on_random_inputs() {
        let mut rng = crate::rng::Rng::new(31);
        for _ in 0..25 {
            let mut tape = Tape::new();
            let mut pairs = Vec::new();
            let mut raw = Vec::new();
            for _ in 0..4 {
                let (a, b) = (rng.gaussian(), rng.gaussian());
                let cu = tape.leaf(Tensor::scalar(a)).unwrap();
                let ce = tape.leaf(Tensor::scalar(b)).unwrap();
                pairs.push((cu, ce));
                raw.push((a, b));
            }
            let w: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, 2.0)).collect();
            let (lcu, lce) = (rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0));
            let total = total_loss(&mut tape, &pairs, &w, lcu, lce).unwrap();
            let got = tape.value(total).item().unwrap();
            let expect: f64 =
                raw.iter().zip(&w).map(|(&(a, b), wl)| wl * (lcu * a + lce * b)).sum();
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn plugin_over_gradient_ascent_runs_five_epochs_without_nan() {
        let (train, test) = tiny_data(16);
        let split = SplitSpec::new(vec![0], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let mut bundle =
            attach_ec_modules(build_backbone(&tiny_dims(), 16).unwrap(), 16, 16).unwrap();
        let mut cfg = UnlearnConfig::desk_default(4);
        cfg.epochs = 5;
        cfg.forget_batch = 6;
        cfg.retain_batch = 6;
        cfg.lr = 1e-3;
        let base = GradientAscentObjective;
        let plugin = plugin_augment(&base, &cfg);
        let log = objective_unlearn(
            &mut bundle,
            &splits.forget_train,
            &splits.retain_train,
            &plugin,
            &cfg,
            9,
            |_, _| {},
        )
        .unwrap();
        assert!(log.rows.iter().all(|(_, _, v)| v.is_finite()));
        assert!(bundle.named_params().iter().all(|(_, t)| t.all_finite()));
    }

    #[test]
    fn ce_loss_rejects_forget_labels() {
        let split = SplitSpec::new(vec![0], 4).unwrap();
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(
            ce_loss_layer(&mut tape, logits, &[1, 0], Some(&split)),
            Err(Error::InvalidLabel { label: 0, .. })
        ));
    }

    #[test]
    fn total_loss_linearity() {
        // all pairs equal (a, b), weights (0.2, 0.4, 0.8, 1.0), lambdas 1.5
        //   -> 1.5 (a + b) * 2.4
        let (a, b) = (0.7, -0.3);
        let mut tape = Tape::new();
        let mut pairs = Vec::new();
        for _ in 0..4 {
            let cu = tape.leaf(Tensor::scalar(a)).unwrap();
            let ce = tape.leaf(Tensor::scalar(b)).unwrap();
            pairs.push((cu, ce));
        }
        let w = [0.2, 0.4, 0.8, 1.0];
        let total = total_loss(&mut tape, &pairs, &w, 1.5, 1.5).unwrap();
        let v = tape.value(total).item().unwrap();
        assert!((v - 1.5 * (a + b) * 2.4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn total_loss_masking() {
        let mut tape = Tape::new();
        let mut pairs = Vec::new();
        for i in 0..4 {
            let cu = tape.leaf(Tensor::scalar(i as f64)).unwrap();
            let ce = tape.leaf(Tensor::scalar(10.0 * i as f64)).unwrap();
            pairs.push((cu, ce));
        }
        let total = total_loss(&mut tape, &pairs, &[0.0, 0.0, 0.0, 1.0], 2.0, 3.0).unwrap();
        let v = tape.value(total).item().unwrap();
        assert!((v - (2.0 * 3.0 + 3.0 * 30.0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_length_mismatch() {
        let mut tape = Tape::new();
        let cu = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let ce = tape.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(total_loss(&mut tape, &[(cu, ce)], &[1.0, 1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn supcon_matches_scalar_oracle() {
        // two anchors per class, two classes, hand-placed unit embeddings
        let z = Tensor::matrix(
            4,
            2,
            vec![1.0, 0.0, 0.9701425001453319, 0.24253562503633297, 0.0, 1.0, -0.6, 0.8],
        )
        .unwrap();
        let labels = [0usize, 0, 1, 1];
        let tau = 0.5;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone()).unwrap();
        let loss = supcon_loss(&mut tape, zv, &labels, tau).unwrap();
        let got = tape.value(loss).item().unwrap();

        // independent scalar evaluation of the SupCon formula
        let dot = |i: usize, j: usize| {
            z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau
        };
        let mut total = 0.0;
        for i in 0..4 {
            let mut denom = 0.0;
            for j in 0..4 {
                if j != i {
                    denom += dot(i, j).exp();
                }
            }
            let mut inner = 0.0;
            let mut count = 0;
            for j in 0..4 {
                if j != i && labels[j] == labels[i] {
                    inner += (dot(i, j).exp() / denom).ln();
                    count += 1;
                }
            }
            total += -inner / count as f64;
        }
        let expect = total / 4.0;
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn supcon_single_class_batch_errors() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            supcon_loss(&mut tape, z, &[2, 2, 2], 0.5),
            Err(Error::AllAnchorsSkipped)
        ));
    }

    #[test]
    fn supcon_skips_lonely_anchor() {
        // one sample of class 1 has no positive: skipped, others still score
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap())
            .unwrap();
        let loss = supcon_loss(&mut tape, z, &[0, 0, 1], 0.5).unwrap();
        assert!(tape.value(loss).item().unwrap().is_finite());
    }

    #[test]
    fn supcon_pretrain_freezes_everything_but_blocks() {
        let (train, _) = tiny_data(3);
        let bundle = build_backbone(&tiny_dims(), 3).unwrap();
        let mut bundle = attach_ec_modules(bundle, 6, 3).unwrap();
        let frozen_before = fingerprint_filtered(&bundle, |n| !n.contains(".block"));
        let blocks_before = fingerprint_filtered(&bundle, |n| n.contains(".block"));
        supcon_pretrain(&mut bundle, &train, 2, 1e-2, 16, 0.1, 5).unwrap();
        let frozen_after = fingerprint_filtered(&bundle, |n| !n.contains(".block"));
        let blocks_after = fingerprint_filtered(&bundle, |n| n.contains(".block"));
        assert_eq!(frozen_before, frozen_after, "backbone/classifier/aux moved");
        assert_ne!(blocks_before, blocks_after, "blocks did not train");
        assert!(bundle.meta.ec_pretrained);
    }

    #[test]
    fn supcon_zero_epochs_is_noop() {
        let (train, _) = tiny_data(4);
        let bundle = attach_ec_modules(build_backbone(&tiny_dims(), 4).unwrap(), 16, 4).unwrap();
        let mut trained = bundle.clone();
        supcon_pretrain(&mut trained, &train, 0, 1e-2, 16, 0.1, 5).unwrap();
        assert_eq!(fingerprint(&bundle), fingerprint(&trained));
    }

    #[test]
    fn ec_unlearn_zero_lambdas_leaves_params_unchanged() {
        let (train, test) = tiny_data(6);
        let split = SplitSpec::new(vec![0], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let bundle = attach_ec_modules(build_backbone(&tiny_dims(), 6).unwrap(), 16, 6).unwrap();
        let mut cfg = UnlearnConfig::desk_default(4);
        cfg.lambda_cu = 0.0;
        cfg.lambda_ce = 0.0;
        cfg.epochs = 2;
        cfg.forget_batch = 6;
        cfg.retain_batch = 6;
        let before = fingerprint(&bundle);
        let mut unlearned = bundle.clone();
        ec_unlearn(&mut unlearned, &splits.forget_train, &splits.retain_train, &cfg, 9, |_, _| {})
            .unwrap();
        assert_eq!(before, fingerprint(&unlearned));
    }

    #[test]
    fn ec_unlearn_is_seed_deterministic() {
        let (train, test) = tiny_data(7);
        let split = SplitSpec::new(vec![1], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let base = attach_ec_modules(build_backbone(&tiny_dims(), 7).unwrap(), 16, 7).unwrap();
        let mut cfg = UnlearnConfig::desk_default(4);
        cfg.epochs = 2;
        cfg.forget_batch = 6;
        cfg.retain_batch = 6;
        cfg.lr = 1e-3;
        let mut a = base.clone();
        let mut b = base.clone();
        ec_unlearn(&mut a, &splits.forget_train, &splits.retain_train, &cfg, 11, |_, _| {})
            .unwrap();
        ec_unlearn(&mut b, &splits.forget_train, &splits.retain_train, &cfg, 11, |_, _| {})
            .unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn ec_final_only_weights_match_cu_trajectory() {
        let (train, test) = tiny_data(8);
        let split = SplitSpec::new(vec![2], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let base = attach_ec_modules(build_backbone(&tiny_dims(), 8).unwrap(), 16, 8).unwrap();
        let mut cfg = UnlearnConfig::desk_default(4);
        cfg.weights = vec![0.0, 0.0, 0.0, 1.0];
        cfg.epochs = 3;
        cfg.forget_batch = 6;
        cfg.retain_batch = 6;
        cfg.lr = 1e-3;
        let mut ec_hashes = Vec::new();
        let mut cu_hashes = Vec::new();
        let mut a = base.clone();
        ec_unlearn(&mut a, &splits.forget_train, &splits.retain_train, &cfg, 13, |_, b| {
            ec_hashes.push(fingerprint(b))
        })
        .unwrap();
        let mut b = base.clone();
        cu_baseline(&mut b, &splits.forget_train, &splits.retain_train, &cfg, 13, |_, bb| {
            cu_hashes.push(fingerprint(bb))
        })
        .unwrap();
        assert_eq!(ec_hashes.len(), cu_hashes.len());
        assert_eq!(ec_hashes, cu_hashes, "per-step parameter trajectories diverged");
    }

    #[test]
    fn random_label_single_retain_class_is_deterministic() {
        let (train, test) = tiny_data(9);
        let split = SplitSpec::new(vec![0, 1, 2], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let mut bundle = build_backbone(&tiny_dims(), 9).unwrap();
        let sched = TrainSchedule { epochs: 1, lr: 1e-2, batch: 12, optimizer: OptimizerKind::sgd(0.0) };
        // with |C_r| = 1 every relabel lands on class 3
        random_label_baseline(
            &mut bundle,
            &splits.forget_train,
            &splits.retain_train,
            &split,
            &sched,
            3,
        )
        .unwrap();
        assert_eq!(bundle.meta.provenance, Provenance::Unlearned(String::from("rl")));
    }

    #[test]
    fn plugin_with_zero_base_equals_intermediate_terms() {
        struct ZeroObjective;
        impl StepObjective for ZeroObjective {
            fn name(&self) -> &'static str {
                "zero"
            }
            fn build(
                &self,
                tape: &mut Tape,
                _taped: &TapedBundle,
                _taps_f: &[Var],
                _y_f: &[usize],
                _taps_r: &[Var],
                _y_r: &[usize],
            ) -> Result<Var> {
                tape.leaf_grad(Tensor::scalar(0.0))
            }
        }

        let (train, test) = tiny_data(10);
        let split = SplitSpec::new(vec![0], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let bundle = attach_ec_modules(build_backbone(&tiny_dims(), 10).unwrap(), 16, 10).unwrap();
        let cfg = UnlearnConfig::desk_default(4);

        let batch = sample_batches(
            &BatchPlan { forget_batch: 4, retain_batch: 4, omega: 2 },
            &splits.forget_train,
            &splits.retain_train,
            1,
        )
        .unwrap()
        .remove(0);
        let pool = batch.retain_pool().unwrap();

        // composite with zero base
        let mut tape = Tape::new();
        let taped = TapedBundle::insert(&mut tape, &bundle, TrainScope::Frozen).unwrap();
        let xf = tape.leaf(batch.forget.features.clone()).unwrap();
        let xr = tape.leaf(pool.features.clone()).unwrap();
        let tf = forward_stage_taps(&taped, &mut tape, xf).unwrap();
        let tr = forward_stage_taps(&taped, &mut tape, xr).unwrap();
        let zero = ZeroObjective;
        let plugin = plugin_augment(&zero, &cfg);
        let composite = plugin
            .build(&mut tape, &taped, &tf, &batch.forget.labels, &tr, &pool.labels)
            .unwrap();
        let composite_value = tape.value(composite).item().unwrap();

        // intermediate-layer terms alone
        let mut tape2 = Tape::new();
        let taped2 = TapedBundle::insert(&mut tape2, &bundle, TrainScope::Frozen).unwrap();
        let xf2 = tape2.leaf(batch.forget.features.clone()).unwrap();
        let xr2 = tape2.leaf(pool.features.clone()).unwrap();
        let tf2 = forward_stage_taps(&taped2, &mut tape2, xf2).unwrap();
        let tr2 = forward_stage_taps(&taped2, &mut tape2, xr2).unwrap();
        let mut terms = Vec::new();
        for l in 1..4 {
            let point = Point { kind: PointKind::Module(l), weight: cfg.weights[l - 1], with_ce: true };
            let term = build_point_term(
                &taped2,
                &mut tape2,
                &point,
                &tf2,
                &tr2,
                &pool.labels,
                cfg.temperature,
                None,
            )
            .unwrap();
            terms.push((point.weight, term.cu, term.ce));
        }
        let layers =
            fold_weighted_terms(&mut tape2, &terms, cfg.lambda_cu, cfg.lambda_ce).unwrap();
        let layers_value = tape2.value(layers).item().unwrap();

        assert!((composite_value - layers_value).abs() < 1e-12);
    }

    #[test]
    fn plugin_on_final_cu_reassembles_full_ec_loss() {
        let (train, test) = tiny_data(12);
        let split = SplitSpec::new(vec![3], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let bundle = attach_ec_modules(build_backbone(&tiny_dims(), 12).unwrap(), 16, 12).unwrap();
        let cfg = UnlearnConfig::desk_default(4);

        let batch = sample_batches(
            &BatchPlan { forget_batch: 4, retain_batch: 4, omega: 2 },
            &splits.forget_train,
            &splits.retain_train,
            2,
        )
        .unwrap()
        .remove(0);
        let pool = batch.retain_pool().unwrap();

        // full EC loss
        let points = plan_points(&bundle, &cfg).unwrap();
        let mut tape = Tape::new();
        let taped = TapedBundle::insert(&mut tape, &bundle, TrainScope::Frozen).unwrap();
        let xf = tape.leaf(batch.forget.features.clone()).unwrap();
        let xr = tape.leaf(pool.features.clone()).unwrap();
        let tf = forward_stage_taps(&taped, &mut tape, xf).unwrap();
        let tr = forward_stage_taps(&taped, &mut tape, xr).unwrap();
        let mut terms = Vec::new();
        for p in &points {
            let term = build_point_term(
                &taped,
                &mut tape,
                p,
                &tf,
                &tr,
                &pool.labels,
                cfg.temperature,
                None,
            )
            .unwrap();
            terms.push((p.weight, term.cu, term.ce));
        }
        let full = fold_weighted_terms(&mut tape, &terms, cfg.lambda_cu, cfg.lambda_ce).unwrap();
        let full_value = tape.value(full).item().unwrap();

        // plugin(base = w_L-weighted final CU+CE)
        let base = FinalCuObjective {
            lambda_cu: cfg.weights[3] * cfg.lambda_cu,
            lambda_ce: cfg.weights[3] * cfg.lambda_ce,
            temperature: cfg.temperature,
        };
        let plugin = plugin_augment(&base, &cfg);
        let mut tape2 = Tape::new();
        let taped2 = TapedBundle::insert(&mut tape2, &bundle, TrainScope::Frozen).unwrap();
        let xf2 = tape2.leaf(batch.forget.features.clone()).unwrap();
        let xr2 = tape2.leaf(pool.features.clone()).unwrap();
        let tf2 = forward_stage_taps(&taped2, &mut tape2, xf2).unwrap();
        let tr2 = forward_stage_taps(&taped2, &mut tape2, xr2).unwrap();
        let composite = plugin
            .build(&mut tape2, &taped2, &tf2, &batch.forget.labels, &tr2, &pool.labels)
            .unwrap();
        let composite_value = tape2.value(composite).item().unwrap();

        assert!(
            (full_value - composite_value).abs() < 1e-10,
            "{full_value} vs {composite_value}"
        );
    }

    #[test]
    fn weight_scaling_matches_lr_division_for_sgd() {
        // scaling all w by c and dividing lr by c gives the same trajectory
        let (train, test) = tiny_data(14);
        let split = SplitSpec::new(vec![0], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let base = attach_ec_modules(build_backbone(&tiny_dims(), 14).unwrap(), 16, 14).unwrap();
        let c = 4.0;
        let mut cfg_a = UnlearnConfig::desk_default(4);
        cfg_a.epochs = 2;
        cfg_a.forget_batch = 6;
        cfg_a.retain_batch = 6;
        cfg_a.lr = 2e-3;
        cfg_a.optimizer = OptimizerKind::sgd(0.0);
        let mut cfg_b = cfg_a.clone();
        for w in &mut cfg_b.weights {
            *w *= c;
        }
        cfg_b.lr = cfg_a.lr / c;
        let mut a = base.clone();
        let mut b = base.clone();
        ec_unlearn(&mut a, &splits.forget_train, &splits.retain_train, &cfg_a, 21, |_, _| {})
            .unwrap();
        ec_unlearn(&mut b, &splits.forget_train, &splits.retain_train, &cfg_b, 21, |_, _| {})
            .unwrap();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn ga_baseline_clips_and_runs() {
        let (train, test) = tiny_data(15);
        let split = SplitSpec::new(vec![1], 4).unwrap();
        let splits = crate::data::split_by_classes(&train, &test, &split).unwrap();
        let mut bundle = build_backbone(&tiny_dims(), 15).unwrap();
        let mut cfg = UnlearnConfig::desk_default(4);
        cfg.epochs = 2;
        cfg.forget_batch = 6;
        cfg.retain_batch = 6;
        cfg.lr = 1e-2;
        let log =
            gradient_ascent_baseline(&mut bundle, &splits.forget_train, &splits.retain_train, &cfg, 5)
                .unwrap();
        assert!(!log.rows.is_empty());
        assert!(log.rows.iter().all(|(_, _, v)| v.is_finite()));
    }
}
