//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by the engine, model, data, unlearning, and eval layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named op.
    ShapeMismatch { op: &'static str, detail: String },
    /// An op produced a NaN or infinite value or gradient.
    NonFinite { op: &'static str },
    /// A slice along the normalization axis has zero norm.
    ZeroNorm { op: &'static str },
    /// backward() was called on a non-scalar value.
    NonScalarLoss,
    /// backward() was called on a value with no grad-flagged ancestors.
    DetachedLoss,
    /// A class label is outside [0, C) or otherwise invalid.
    InvalidLabel { label: usize, classes: usize },
    /// A required input set (batch, split, dataset part) is empty.
    EmptySet(&'static str),
    /// A parameter is out of its documented range.
    InvalidParam(String),
    /// No EC module is attached at the requested stage.
    MissingModule { stage: usize },
    /// Embedding rows fed to the contrastive loss are not unit-norm.
    NotNormalized { row: usize, norm: f64 },
    /// Every anchor in a contrastive batch was skipped.
    AllAnchorsSkipped,
    /// The IDI denominator |A_o - A_r| fell below the guard threshold.
    IdiUndefined { gap: f64 },
    /// CKA input has (numerically) zero variance.
    ZeroVariance,
    /// A normalized score is <= 0, so the harmonic mean is undefined.
    NonPositiveScore { name: &'static str, value: f64 },
    /// Two sequences that must align have different lengths.
    LengthMismatch { op: &'static str, left: usize, right: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::ZeroNorm { op } => write!(f, "zero norm along axis in {op}"),
            Error::NonScalarLoss => write!(f, "backward requires a scalar loss"),
            Error::DetachedLoss => write!(f, "loss is not connected to any grad-flagged leaf"),
            Error::InvalidLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::EmptySet(what) => write!(f, "empty {what}"),
            Error::InvalidParam(msg) => write!(f, "invalid parameter: {msg}"),
            Error::MissingModule { stage } => write!(f, "no EC module attached at stage {stage}"),
            Error::NotNormalized { row, norm } => {
                write!(f, "row {row} is not unit-norm (|v| = {norm})")
            }
            Error::AllAnchorsSkipped => write!(f, "all contrastive anchors skipped"),
            Error::IdiUndefined { gap } => {
                write!(f, "IDI undefined: |A_o - A_r| = {gap} below guard threshold")
            }
            Error::ZeroVariance => write!(f, "CKA input has zero variance"),
            Error::NonPositiveScore { name, value } => {
                write!(f, "normalized score {name} = {value} is not positive")
            }
            Error::LengthMismatch { op, left, right } => {
                write!(f, "length mismatch in {op}: {left} vs {right}")
            }
        }
    }
}

impl core::error::Error for Error {}
