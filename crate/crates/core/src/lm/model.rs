use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LmError;
use crate::numerics::Tensor;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            context_length: DEFAULT_CONTEXT,
            model_dim: 64,
            num_layers: 2,
            num_heads: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.context_length == 0 || self.model_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return bad("context_length, model_dim, num_layers and num_heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// Long enough for six demonstrations, the instruction and a full
/// generation budget.
pub const DEFAULT_CONTEXT: usize = 192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleTag {
    Pretrained,
    Base,
    Reference,
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

impl AdapterSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank deltas for the attention query and value projections.
///
/// For a weight `W` the adapted map is `x W + (alpha/rank) x down up`; `up`
/// starts at zero so a fresh set changes nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub spec: AdapterSpec,
    /// Keyed by the adapted base weight name: `(down [dim, rank], up [rank, dim])`.
    pub pairs: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdapterSet {
    pub fn num_parameters(&self) -> usize {
        self.pairs.values().map(|(d, u)| d.numel() + u.numel()).sum()
    }
}

/// Full parameter set of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    pub config: ModelConfig,
    pub base: BTreeMap<String, Tensor>,
    pub adapters: Option<AdapterSet>,
    pub role: RoleTag,
}

pub fn layer_key(layer: usize, name: &str) -> String {
    format!("blocks.{}.{}", layer, name)
}

pub fn adapter_targets(config: &ModelConfig) -> Vec<String> {
    (0..config.num_layers)
        .flat_map(|l| [layer_key(l, "attn.wq"), layer_key(l, "attn.wv")])
        .collect()
}

fn normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape")
}

fn filled(shape: Vec<usize>, v: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![v; n]).expect("shape")
}

/// Fresh model with seeded weights: embeddings `N(0, 0.02^2)`, projections
/// `N(0, 1/fan_in)` with residual outputs shrunk by `1/sqrt(2 layers)`.
pub fn init_model(config: &ModelConfig) -> Result<ModelHandle, LmError> {
    config.validate()?;
    let d = config.model_dim;
    let f = config.mlp_dim();
    let mut rng = seeds::rng(config.seed, "init", 0);
    let resid = 1.0 / ((2 * config.num_layers) as f64).sqrt();
    let mut base = BTreeMap::new();
    base.insert("tok_emb".to_string(), normal(&mut rng, vec![config.vocab_size, d], 0.02));
    base.insert("pos_emb".to_string(), normal(&mut rng, vec![config.context_length, d], 0.02));
    for l in 0..config.num_layers {
        let inv = 1.0 / (d as f64).sqrt();
        base.insert(layer_key(l, "ln1.gain"), filled(vec![d], 1.0));
        base.insert(layer_key(l, "ln1.bias"), filled(vec![d], 0.0));
        base.insert(layer_key(l, "attn.wq"), normal(&mut rng, vec![d, d], inv));
        base.insert(layer_key(l, "attn.wk"), normal(&mut rng, vec![d, d], inv));
        base.insert(layer_key(l, "attn.wv"), normal(&mut rng, vec![d, d], inv));
        base.insert(layer_key(l, "attn.wo"), normal(&mut rng, vec![d, d], inv * resid));
        base.insert(layer_key(l, "ln2.gain"), filled(vec![d], 1.0));
        base.insert(layer_key(l, "ln2.bias"), filled(vec![d], 0.0));
        base.insert(layer_key(l, "mlp.w1"), normal(&mut rng, vec![d, f], inv));
        base.insert(layer_key(l, "mlp.b1"), filled(vec![f], 0.0));
        base.insert(layer_key(l, "mlp.w2"), normal(&mut rng, vec![f, d], resid / (f as f64).sqrt()));
        base.insert(layer_key(l, "mlp.b2"), filled(vec![d], 0.0));
    }
    base.insert("ln_f.gain".to_string(), filled(vec![d], 1.0));
    base.insert("ln_f.bias".to_string(), filled(vec![d], 0.0));
    Ok(ModelHandle {
        config: config.clone(),
        base,
        adapters: None,
        role: RoleTag::Pretrained,
    })
}

/// Attach zero-delta adapters to every query and value projection.
pub fn attach_adapters(model: &ModelHandle, spec: &AdapterSpec, seed: u64) -> Result<ModelHandle, LmError> {
    if model.adapters.is_some() {
        return Err(LmError::AdaptersAttached);
    }
    if spec.rank == 0 || spec.alpha <= 0.0 || !(0.0..1.0).contains(&spec.dropout) {
        return Err(LmError::InvalidConfig(format!("adapter spec {:?}", spec)));
    }
    let d = model.config.model_dim;
    let mut rng = seeds::rng(seed, "adapters", 0);
    let mut pairs = BTreeMap::new();
    for target in adapter_targets(&model.config) {
        let down = normal(&mut rng, vec![d, spec.rank], 1.0 / (d as f64).sqrt());
        let up = filled(vec![spec.rank, d], 0.0);
        pairs.insert(target, (down, up));
    }
    let mut out = model.clone();
    out.adapters = Some(AdapterSet {
        spec: spec.clone(),
        pairs,
    });
    out.role = RoleTag::Base;
    Ok(out)
}

impl ModelHandle {
    pub fn with_role(mut self, role: RoleTag) -> Self {
        self.role = role;
        self
    }

    pub fn num_base_parameters(&self) -> usize {
        self.base.values().map(|t| t.numel()).sum()
    }

    /// Base weights with adapter deltas folded in.
    pub fn effective_weights(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.base.clone();
        if let Some(ad) = &self.adapters {
            let s = ad.spec.scale() as f32;
            for (name, (down, up)) in &ad.pairs {
                let w = out.get_mut(name).expect("adapter target exists");
                let (d, r) = down.dims2();
                let (_, n) = up.dims2();
                let wd = w.data_mut();
                for i in 0..d {
                    for k in 0..r {
                        let a = s * down.data()[i * r + k];
                        if a == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            wd[i * n + j] += a * up.data()[k * n + j];
                        }
                    }
                }
            }
        }
        out
    }

    /// Euclidean distance between the effective weights of two models of the
    /// same architecture.
    pub fn parameter_distance(&self, other: &ModelHandle) -> Result<f64, LmError> {
        if self.config != other.config {
            return Err(LmError::InvalidConfig("distance between different architectures".into()));
        }
        let a = self.effective_weights();
        let b = other.effective_weights();
        let mut sq = 0.0f64;
        for (name, ta) in &a {
            let tb = &b[name];
            for (x, y) in ta.data().iter().zip(tb.data()) {
                let d = *x as f64 - *y as f64;
                sq += d * d;
            }
        }
        Ok(sq.sqrt())
    }
}
