use std::collections::BTreeMap;

use super::NumericsError;

/// Fill value used by causal masking. Large and finite so that downstream
/// softmax rows stay finite.
pub const MASK_FILL: f64 = -1.0e9;

/// Attribute value for name-based primitive construction.
#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Float(f64),
    Int(usize),
    Bool(bool),
    Ints(Vec<usize>),
    Bools(Vec<bool>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// A differentiable primitive and its attributes.
///
/// Matrices are row-major `[rows, cols]`; 1-D tensors act as a single row
/// where a primitive works row-wise.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `op(a) * op(b)` where `op` optionally transposes.
    MatMul { transpose_a: bool, transpose_b: bool },
    /// Elementwise sum; the right operand may be a single row broadcast over
    /// every row of the left operand.
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    Logistic,
    /// `log(logistic(x))`, evaluated without overflow.
    LogLogistic,
    /// Tanh-approximated GELU.
    Gelu,
    Softmax,
    LogSoftmax,
    /// Inputs: `x [m, n]`, `gain [n]`, `bias [n]`.
    LayerNorm { eps: f64 },
    /// Input: table `[vocab, dim]`; output `[ids.len(), dim]`.
    Embedding { ids: Vec<usize> },
    /// Replace entries where `mask` is true by `value`.
    MaskedFill { mask: Vec<bool>, value: f64 },
    Sum,
    Mean,
    /// Select rows of a matrix.
    IndexSelect { rows: Vec<usize> },
    /// Pick one column per row: output `[rows]`.
    Gather { cols: Vec<usize> },
    SliceCols { start: usize, len: usize },
    ConcatCols,
    /// Multi-head causal self-attention over packed sequences.
    ///
    /// Inputs `q, k, v` are `[rows, dim]`; `segments` are the lengths of the
    /// consecutive sequences packed into the rows. Heads split the columns
    /// evenly and scores are scaled by `1/sqrt(dim / heads)`.
    CausalAttention { heads: usize, segments: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Logistic => "logistic",
            Primitive::LogLogistic => "log_logistic",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Embedding { .. } => "embedding",
            Primitive::MaskedFill { .. } => "masked_fill",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::IndexSelect { .. } => "index_select",
            Primitive::Gather { .. } => "gather",
            Primitive::SliceCols { .. } => "slice_cols",
            Primitive::ConcatCols => "concat_cols",
            Primitive::CausalAttention { .. } => "causal_attention",
        }
    }

    /// Build a primitive from its name and an attribute map.
    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Self, NumericsError> {
        let prim = match name {
            "matmul" => Primitive::MatMul {
                transpose_a: opt_bool(attrs, "transpose_a")?.unwrap_or(false),
                transpose_b: opt_bool(attrs, "transpose_b")?.unwrap_or(false),
            },
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "scale" => Primitive::Scale(req_float(name, attrs, "factor")?),
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "tanh" => Primitive::Tanh,
            "logistic" => Primitive::Logistic,
            "log_logistic" => Primitive::LogLogistic,
            "gelu" => Primitive::Gelu,
            "softmax" => Primitive::Softmax,
            "log_softmax" => Primitive::LogSoftmax,
            "layer_norm" => Primitive::LayerNorm {
                eps: opt_float(attrs, "eps")?.unwrap_or(1e-5),
            },
            "embedding" => Primitive::Embedding {
                ids: req_ints(name, attrs, "ids")?,
            },
            "masked_fill" => Primitive::MaskedFill {
                mask: match attrs.get("mask") {
                    Some(AttrValue::Bools(m)) => m.clone(),
                    Some(_) => return Err(bad_attr(name, "mask")),
                    None => return Err(missing_attr(name, "mask")),
                },
                value: opt_float(attrs, "value")?.unwrap_or(MASK_FILL),
            },
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "index_select" => Primitive::IndexSelect {
                rows: req_ints(name, attrs, "rows")?,
            },
            "gather" => Primitive::Gather {
                cols: req_ints(name, attrs, "cols")?,
            },
            "slice_cols" => Primitive::SliceCols {
                start: req_int(name, attrs, "start")?,
                len: req_int(name, attrs, "len")?,
            },
            "concat_cols" => Primitive::ConcatCols,
            "causal_attention" => Primitive::CausalAttention {
                heads: req_int(name, attrs, "heads")?,
                segments: req_ints(name, attrs, "segments")?,
            },
            other => return Err(NumericsError::UnknownPrimitive(other.to_string())),
        };
        Ok(prim)
    }
}

fn missing_attr(prim: &str, key: &str) -> NumericsError {
    NumericsError::MissingAttribute {
        primitive: prim.to_string(),
        key: key.to_string(),
    }
}

fn bad_attr(prim: &str, key: &str) -> NumericsError {
    NumericsError::BadAttribute {
        primitive: prim.to_string(),
        key: key.to_string(),
    }
}

fn opt_bool(attrs: &Attrs, key: &str) -> Result<Option<bool>, NumericsError> {
    match attrs.get(key) {
        None => Ok(None),
        Some(AttrValue::Bool(b)) => Ok(Some(*b)),
        Some(_) => Err(bad_attr("matmul", key)),
    }
}

fn opt_float(attrs: &Attrs, key: &str) -> Result<Option<f64>, NumericsError> {
    match attrs.get(key) {
        None => Ok(None),
        Some(AttrValue::Float(v)) => Ok(Some(*v)),
        Some(AttrValue::Int(v)) => Ok(Some(*v as f64)),
        Some(_) => Err(bad_attr("float", key)),
    }
}

fn req_float(prim: &str, attrs: &Attrs, key: &str) -> Result<f64, NumericsError> {
    opt_float(attrs, key)?.ok_or_else(|| missing_attr(prim, key))
}

fn req_int(prim: &str, attrs: &Attrs, key: &str) -> Result<usize, NumericsError> {
    match attrs.get(key) {
        Some(AttrValue::Int(v)) => Ok(*v),
        Some(_) => Err(bad_attr(prim, key)),
        None => Err(missing_attr(prim, key)),
    }
}

fn req_ints(prim: &str, attrs: &Attrs, key: &str) -> Result<Vec<usize>, NumericsError> {
    match attrs.get(key) {
        Some(AttrValue::Ints(v)) => Ok(v.clone()),
        Some(_) => Err(bad_attr(prim, key)),
        None => Err(missing_attr(prim, key)),
    }
}

/// Causal mask for a `[len, len]` score matrix: true above the diagonal.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            mask[i * len + j] = true;
        }
    }
    mask
}
