//! Stage-tapped backbone, EC modules, and the taped forward pass.
//!
//! The backbone is an ordered list of affine(+ReLU) stages with a final
//! affine classifier. An EC module attached after stage k carries (L-k)
//! affine+ReLU blocks projecting into `d_proj` dimensions plus an
//! auxiliary classifier, so that contrastive and cross-entropy supervision
//! can be applied at every depth.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Weight [d_in x d_out] plus bias [d_out].
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Bias init for relu-followed affines. Slightly positive so that no unit
/// row starts (or easily drifts) fully dead, which would zero an embedding
/// and trip the zero-norm guard in l2_normalize.
const RELU_BIAS_INIT: f64 = 0.05;

impl Affine {
    /// He-uniform weights, seeded, with a constant bias.
    pub fn he_uniform(d_in: usize, d_out: usize, bias_init: f64, rng: &mut Rng) -> Self {
        let limit = scalar::sqrt(6.0 / d_in as f64);
        let data = (0..d_in * d_out).map(|_| rng.uniform(-limit, limit)).collect();
        Affine {
            weight: Tensor::new(&[d_in, d_out], data).expect("init shape"),
            bias: Tensor::new(&[d_out], alloc::vec![bias_init; d_out]).expect("init shape"),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub affine: Affine,
    pub activation: Activation,
}

/// Backbone h_theta plus final classifier g_phi.
///
/// With `split_final` the last logical stage is realized as two sub-affines
/// (hidden -> hidden/2 -> hidden) so that a supervision point exists inside
/// the final stage; `stages` then holds logical_depth + 1 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Stage>,
    pub classifier: Affine,
    pub split_final: bool,
}

impl Backbone {
    pub fn logical_depth(&self) -> usize {
        self.stages.len() - usize::from(self.split_final)
    }

    /// Tap index carrying logical layer l (1-based).
    pub fn tap_index(&self, l: usize) -> usize {
        if self.split_final && l == self.logical_depth() {
            self.stages.len() - 1
        } else {
            l - 1
        }
    }

    /// Tap index of the extra mid-stage tap, when the final stage is split.
    pub fn mid_tap_index(&self) -> Option<usize> {
        self.split_final.then(|| self.stages.len() - 2)
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].affine.d_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.d_in()
    }

    pub fn classes(&self) -> usize {
        self.classifier.d_out()
    }
}

/// EC module: (L-k) affine+ReLU blocks plus an auxiliary classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EcModule {
    /// Logical stage index k in [1, L-1] the module is attached after.
    pub stage: usize,
    pub blocks: Vec<Affine>,
    pub aux: Affine,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Retrained,
    Unlearned(String),
}

impl Provenance {
    pub fn as_string(&self) -> String {
        match self {
            Provenance::Original => String::from("original"),
            Provenance::Retrained => String::from("retrained"),
            Provenance::Unlearned(m) => format!("unlearned:{m}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "original" {
            Ok(Provenance::Original)
        } else if s == "retrained" {
            Ok(Provenance::Retrained)
        } else if let Some(m) = s.strip_prefix("unlearned:") {
            Ok(Provenance::Unlearned(String::from(m)))
        } else {
            Err(Error::InvalidParam(format!("unknown provenance tag {s:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleMeta {
    pub seed: u64,
    pub config_hash: String,
    pub provenance: Provenance,
    pub ec_pretrained: bool,
}

/// Architecture dimensions, sufficient to rebuild a bundle structurally.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelDims {
    pub input_dim: usize,
    /// Output width of each logical stage; length is the logical depth L.
    pub stage_widths: Vec<usize>,
    pub classes: usize,
    pub d_proj: usize,
    pub split_final: bool,
}

impl ModelDims {
    pub fn logical_depth(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() < 2 {
            return Err(Error::InvalidParam(String::from("need at least 2 stages")));
        }
        if self.input_dim == 0
            || self.classes == 0
            || self.d_proj == 0
            || self.stage_widths.contains(&0)
        {
            return Err(Error::InvalidParam(String::from("zero dimension")));
        }
        if self.split_final && !self.stage_widths.last().unwrap().is_multiple_of(2) {
            return Err(Error::InvalidParam(String::from(
                "split_final needs an even final stage width",
            )));
        }
        Ok(())
    }
}

/// Backbone, EC modules, and metadata: everything one experiment owns.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub backbone: Backbone,
    pub ec_modules: Vec<EcModule>,
    /// Aux classifier for the mid-stage tap when the final stage is split.
    pub mid_aux: Option<Affine>,
    pub meta: BundleMeta,
}

/// Fresh backbone-only bundle with seeded He-uniform parameters.
pub fn build_backbone(dims: &ModelDims, seed: u64) -> Result<ModelBundle> {
    dims.validate()?;
    let mut rng = Rng::derive(seed, 0x6261_636b); // "back"
    let mut stages = Vec::new();
    let depth = dims.logical_depth();
    let mut d_in = dims.input_dim;
    for (i, &w) in dims.stage_widths.iter().enumerate() {
        if dims.split_final && i == depth - 1 {
            let half = w / 2;
            stages.push(Stage {
                affine: Affine::he_uniform(d_in, half, RELU_BIAS_INIT, &mut rng),
                activation: Activation::Relu,
            });
            stages.push(Stage {
                affine: Affine::he_uniform(half, w, RELU_BIAS_INIT, &mut rng),
                activation: Activation::Relu,
            });
        } else {
            stages.push(Stage {
                affine: Affine::he_uniform(d_in, w, RELU_BIAS_INIT, &mut rng),
                activation: Activation::Relu,
            });
        }
        d_in = w;
    }
    let classifier = Affine::he_uniform(d_in, dims.classes, 0.0, &mut rng);
    Ok(ModelBundle {
        dims: dims.clone(),
        backbone: Backbone { stages, classifier, split_final: dims.split_final },
        ec_modules: Vec::new(),
        mid_aux: None,
        meta: BundleMeta {
            seed,
            config_hash: String::new(),
            provenance: Provenance::Original,
            ec_pretrained: false,
        },
    })
}

/// Attach EC modules after stages 1..L-1 (plus the mid-stage aux head when
/// the final stage is split). Modules carry (L-k) blocks each; their
/// parameters are seeded and the aux classifiers stay untrained until the
/// unlearning stage.
pub fn attach_ec_modules(mut bundle: ModelBundle, d_proj: usize, seed: u64) -> Result<ModelBundle> {
    if !bundle.ec_modules.is_empty() {
        return Err(Error::InvalidParam(String::from("EC modules already attached")));
    }
    if d_proj == 0 {
        return Err(Error::InvalidParam(String::from("d_proj must be positive")));
    }
    let depth = bundle.backbone.logical_depth();
    let classes = bundle.backbone.classes();
    let mut rng = Rng::derive(seed, 0x6563_6d6f); // "ecmo"
    let mut modules = Vec::new();
    for k in 1..depth {
        let width = bundle.dims.stage_widths[k - 1];
        let mut blocks = Vec::new();
        let mut d_in = width;
        for _ in 0..(depth - k) {
            blocks.push(Affine::he_uniform(d_in, d_proj, RELU_BIAS_INIT, &mut rng));
            d_in = d_proj;
        }
        let aux = Affine::he_uniform(d_proj, classes, 0.0, &mut rng);
        modules.push(EcModule { stage: k, blocks, aux });
    }
    if bundle.backbone.split_final {
        let half = bundle.dims.stage_widths[depth - 1] / 2;
        bundle.mid_aux = Some(Affine::he_uniform(half, classes, 0.0, &mut rng));
    }
    bundle.dims.d_proj = d_proj;
    bundle.ec_modules = modules;
    validate_bundle(&bundle)?;
    Ok(bundle)
}

/// Structural invariants: module stage indices strictly increasing in
/// [1, L-1], block count equal to L-k, aux head width equal to C.
pub fn validate_bundle(bundle: &ModelBundle) -> Result<()> {
    let depth = bundle.backbone.logical_depth();
    let classes = bundle.backbone.classes();
    let mut prev = 0;
    for m in &bundle.ec_modules {
        if m.stage < 1 || m.stage >= depth {
            return Err(Error::InvalidParam(format!("EC module stage {} out of range", m.stage)));
        }
        if m.stage <= prev {
            return Err(Error::InvalidParam(String::from(
                "EC module stages must be strictly increasing",
            )));
        }
        prev = m.stage;
        if m.blocks.len() != depth - m.stage {
            return Err(Error::InvalidParam(format!(
                "EC module at stage {} has {} blocks, expected {}",
                m.stage,
                m.blocks.len(),
                depth - m.stage
            )));
        }
        if m.aux.d_out() != classes {
            return Err(Error::InvalidParam(format!(
                "aux classifier at stage {} is {}-way, expected {}",
                m.stage,
                m.aux.d_out(),
                classes
            )));
        }
    }
    Ok(())
}

impl ModelBundle {
    pub fn module_at(&self, stage: usize) -> Option<&EcModule> {
        self.ec_modules.iter().find(|m| m.stage == stage)
    }

    /// Parameters in canonical order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.backbone.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.weight"), &s.affine.weight));
            out.push((format!("backbone.stage{i}.bias"), &s.affine.bias));
        }
        out.push((String::from("backbone.classifier.weight"), &self.backbone.classifier.weight));
        out.push((String::from("backbone.classifier.bias"), &self.backbone.classifier.bias));
        if let Some(aux) = &self.mid_aux {
            out.push((String::from("mid_aux.weight"), &aux.weight));
            out.push((String::from("mid_aux.bias"), &aux.bias));
        }
        for m in &self.ec_modules {
            for (j, b) in m.blocks.iter().enumerate() {
                out.push((format!("ec{}.block{j}.weight", m.stage), &b.weight));
                out.push((format!("ec{}.block{j}.bias", m.stage), &b.bias));
            }
            out.push((format!("ec{}.aux.weight", m.stage), &m.aux.weight));
            out.push((format!("ec{}.aux.bias", m.stage), &m.aux.bias));
        }
        out
    }

    /// Mutable parameter references, same canonical order as `named_params`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.backbone.stages {
            out.push(&mut s.affine.weight);
            out.push(&mut s.affine.bias);
        }
        out.push(&mut self.backbone.classifier.weight);
        out.push(&mut self.backbone.classifier.bias);
        if let Some(aux) = &mut self.mid_aux {
            out.push(&mut aux.weight);
            out.push(&mut aux.bias);
        }
        for m in &mut self.ec_modules {
            for b in &mut m.blocks {
                out.push(&mut b.weight);
                out.push(&mut b.bias);
            }
            out.push(&mut m.aux.weight);
            out.push(&mut m.aux.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let stage = self.backbone.stages.len() * 2;
        let mid = if self.mid_aux.is_some() { 2 } else { 0 };
        let modules: usize = self.ec_modules.iter().map(|m| m.blocks.len() * 2 + 2).sum();
        stage + 2 + mid + modules
    }
}

/// FNV-1a over names and raw f64 bit patterns: cheap bit-exact fingerprint.
pub fn fingerprint_filtered(bundle: &ModelBundle, pred: impl Fn(&str) -> bool) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for (name, tensor) in bundle.named_params() {
        if !pred(&name) {
            continue;
        }
        for b in name.as_bytes() {
            eat(*b);
        }
        eat(0xff);
        for v in tensor.data() {
            for b in v.to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

pub fn fingerprint(bundle: &ModelBundle) -> u64 {
    fingerprint_filtered(bundle, |_| true)
}

/// Which parameters receive gradients in the current phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Inference only.
    Frozen,
    /// theta, phi, psi jointly (the unlearning stage).
    All,
    /// Backbone stages and final classifier (pretraining and baselines).
    Backbone,
    /// EC-module blocks only (SupCon pretraining).
    EcBlocks,
}

enum ParamRole {
    Stage,
    Classifier,
    MidAux,
    Block,
    Aux,
}

fn trainable(scope: TrainScope, role: &ParamRole) -> bool {
    match scope {
        TrainScope::Frozen => false,
        TrainScope::All => true,
        TrainScope::Backbone => matches!(role, ParamRole::Stage | ParamRole::Classifier),
        TrainScope::EcBlocks => matches!(role, ParamRole::Block),
    }
}

#[derive(Clone, Copy)]
pub struct TapedAffine {
    pub weight: Var,
    pub bias: Var,
}

pub struct TapedModule {
    pub stage: usize,
    pub blocks: Vec<TapedAffine>,
    pub aux: TapedAffine,
}

/// One bundle's parameters inserted on a tape for a single forward pass.
pub struct TapedBundle {
    pub stages: Vec<(TapedAffine, Activation)>,
    pub classifier: TapedAffine,
    pub mid_aux: Option<TapedAffine>,
    pub modules: Vec<TapedModule>,
    pub split_final: bool,
    logical_depth: usize,
}

impl TapedBundle {
    /// Insert every parameter as a tape leaf; slot indices follow the
    /// bundle's canonical parameter order.
    pub fn insert(tape: &mut Tape, bundle: &ModelBundle, scope: TrainScope) -> Result<Self> {
        let mut slot = 0usize;
        let mut put = |tape: &mut Tape, t: &Tensor, role: ParamRole| -> Result<Var> {
            let v = tape.param(slot, t.clone(), trainable(scope, &role))?;
            slot += 1;
            Ok(v)
        };
        let mut stages = Vec::new();
        for s in &bundle.backbone.stages {
            let w = put(tape, &s.affine.weight, ParamRole::Stage)?;
            let b = put(tape, &s.affine.bias, ParamRole::Stage)?;
            stages.push((TapedAffine { weight: w, bias: b }, s.activation));
        }
        let cw = put(tape, &bundle.backbone.classifier.weight, ParamRole::Classifier)?;
        let cb = put(tape, &bundle.backbone.classifier.bias, ParamRole::Classifier)?;
        let mid_aux = match &bundle.mid_aux {
            Some(aux) => {
                let w = put(tape, &aux.weight, ParamRole::MidAux)?;
                let b = put(tape, &aux.bias, ParamRole::MidAux)?;
                Some(TapedAffine { weight: w, bias: b })
            }
            None => None,
        };
        let mut modules = Vec::new();
        for m in &bundle.ec_modules {
            let mut blocks = Vec::new();
            for blk in &m.blocks {
                let w = put(tape, &blk.weight, ParamRole::Block)?;
                let b = put(tape, &blk.bias, ParamRole::Block)?;
                blocks.push(TapedAffine { weight: w, bias: b });
            }
            let aw = put(tape, &m.aux.weight, ParamRole::Aux)?;
            let ab = put(tape, &m.aux.bias, ParamRole::Aux)?;
            modules.push(TapedModule {
                stage: m.stage,
                blocks,
                aux: TapedAffine { weight: aw, bias: ab },
            });
        }
        Ok(TapedBundle {
            stages,
            classifier: TapedAffine { weight: cw, bias: cb },
            mid_aux,
            modules,
            split_final: bundle.backbone.split_final,
            logical_depth: bundle.backbone.logical_depth(),
        })
    }

    pub fn logical_depth(&self) -> usize {
        self.logical_depth
    }

    pub fn affine(&self, tape: &mut Tape, x: Var, aff: &TapedAffine) -> Result<Var> {
        let n = tape.value(x).rows();
        let prod = tape.matmul(x, aff.weight)?;
        let bias = tape.expand_rows(aff.bias, n)?;
        tape.add(prod, bias)
    }

    /// Raw per-stage taps plus final-classifier logits.
    pub fn forward_taps(&self, tape: &mut Tape, x: Var) -> Result<(Vec<Var>, Var)> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (aff, act) in &self.stages {
            h = self.affine(tape, h, aff)?;
            if *act == Activation::Relu {
                h = tape.relu(h)?;
            }
            taps.push(h);
        }
        let logits = self.affine(tape, h, &self.classifier)?;
        Ok((taps, logits))
    }

    fn module_for(&self, l: usize) -> Option<&TapedModule> {
        self.modules.iter().find(|m| m.stage == l)
    }

    /// Normalized embedding and aux logits at logical layer l: the EC-module
    /// path for l < L, the identity path (final tap + final classifier) for
    /// l = L.
    pub fn embed(&self, tape: &mut Tape, taps: &[Var], l: usize) -> Result<(Var, Var)> {
        let depth = self.logical_depth;
        if l == depth {
            let t = taps[taps.len() - 1];
            let z = tape.l2_normalize(t, 1)?;
            let logits = self.affine(tape, t, &self.classifier)?;
            return Ok((z, logits));
        }
        let m = self.module_for(l).ok_or(Error::MissingModule { stage: l })?;
        let mut h = taps[l - 1];
        // interior blocks are affine+relu; the last block ends affine so the
        // normalized embedding is not confined to the relu cone
        let last = m.blocks.len() - 1;
        for (i, blk) in m.blocks.iter().enumerate() {
            h = self.affine(tape, h, blk)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let z = tape.l2_normalize(h, 1)?;
        let logits = self.affine(tape, h, &m.aux)?;
        Ok((z, logits))
    }
}

/// Plain (no-gradient) forward pass: per-stage taps and final logits.
pub fn forward_taps(bundle: &ModelBundle, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    if x.ndim() != 2 || x.cols() != bundle.backbone.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward_taps",
            detail: format!(
                "input {:?} vs stage-1 width {}",
                x.shape(),
                bundle.backbone.input_dim()
            ),
        });
    }
    let mut tape = Tape::new();
    let taped = TapedBundle::insert(&mut tape, bundle, TrainScope::Frozen)?;
    let xv = tape.leaf(x.clone())?;
    let (taps, logits) = taped.forward_taps(&mut tape, xv)?;
    let tap_values = taps.iter().map(|&t| tape.value(t).clone()).collect();
    let logit_values = tape.value(logits).clone();
    Ok((tap_values, logit_values))
}

/// Plain (no-gradient) embedding at logical layer l, from a raw tap.
pub fn ec_embed(bundle: &ModelBundle, tap: &Tensor, l: usize) -> Result<(Tensor, Tensor)> {
    let depth = bundle.backbone.logical_depth();
    if l == 0 || l > depth {
        return Err(Error::InvalidParam(format!("layer {l} out of range 1..={depth}")));
    }
    let mut tape = Tape::new();
    let tv = tape.leaf(tap.clone())?;
    if l == depth {
        let z = tape.l2_normalize(tv, 1)?;
        let w = tape.leaf(bundle.backbone.classifier.weight.clone())?;
        let b = tape.leaf(bundle.backbone.classifier.bias.clone())?;
        let prod = tape.matmul(tv, w)?;
        let bias = tape.expand_rows(b, tap.rows())?;
        let logits = tape.add(prod, bias)?;
        return Ok((tape.value(z).clone(), tape.value(logits).clone()));
    }
    let m = bundle.module_at(l).ok_or(Error::MissingModule { stage: l })?;
    let mut h = tv;
    let last = m.blocks.len() - 1;
    for (i, blk) in m.blocks.iter().enumerate() {
        let w = tape.leaf(blk.weight.clone())?;
        let b = tape.leaf(blk.bias.clone())?;
        let prod = tape.matmul(h, w)?;
        let bias = tape.expand_rows(b, tap.rows())?;
        h = tape.add(prod, bias)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    let z = tape.l2_normalize(h, 1)?;
    let w = tape.leaf(m.aux.weight.clone())?;
    let b = tape.leaf(m.aux.bias.clone())?;
    let prod = tape.matmul(h, w)?;
    let bias = tape.expand_rows(b, tap.rows())?;
    let logits = tape.add(prod, bias)?;
    Ok((tape.value(z).clone(), tape.value(logits).clone()))
}
