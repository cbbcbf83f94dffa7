use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::{layer_key, ModelConfig, ModelHandle};
use super::LmError;
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::world::TokenId;

const LN_EPS: f64 = 1e-5;

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// A model's parameters registered on a tape.
pub struct ParamVars {
    config: ModelConfig,
    base: BTreeMap<String, Var>,
    adapters: BTreeMap<String, (Var, Var)>,
    scale: f64,
    dropout: f64,
    trainable: Vec<Var>,
}

fn adapter_name(target: &str, part: &str) -> String {
    format!("adapter.{}.{}", target, part)
}

/// Trainable tensors in registration order.
pub fn trainable_tensors(model: &ModelHandle, trainable: Trainable) -> Vec<(String, Tensor)> {
    match trainable {
        Trainable::Nothing => Vec::new(),
        Trainable::Base => model.base.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        Trainable::Adapters => model
            .adapters
            .iter()
            .flat_map(|ad| ad.pairs.iter())
            .flat_map(|(k, (d, u))| [(adapter_name(k, "down"), d.clone()), (adapter_name(k, "up"), u.clone())])
            .collect(),
    }
}

/// Write updated trainable tensors back into a model.
pub fn set_trainable(model: &mut ModelHandle, trainable: Trainable, values: Vec<Tensor>) {
    match trainable {
        Trainable::Nothing => {}
        Trainable::Base => {
            for (slot, v) in model.base.values_mut().zip(values) {
                *slot = v.with_requires_grad(false);
            }
        }
        Trainable::Adapters => {
            let ad = model.adapters.as_mut().expect("adapters attached");
            let mut it = values.into_iter();
            for (d, u) in ad.pairs.values_mut() {
                *d = it.next().expect("down").with_requires_grad(false);
                *u = it.next().expect("up").with_requires_grad(false);
            }
        }
    }
}

impl ParamVars {
    /// Register every parameter; trainable ones become gradient leaves.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, model: &ModelHandle, trainable: Trainable) -> Self {
        let vars: Vec<Var> = trainable_tensors(model, trainable)
            .into_iter()
            .map(|(_, t)| tape.leaf(t.cast::<T>().with_requires_grad(true)))
            .collect();
        Self::bind(tape, model, trainable, &vars)
    }

    /// Register frozen parameters as constants and take the trainable ones
    /// from `vars`, in [`trainable_tensors`] order.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, model: &ModelHandle, trainable: Trainable, vars: &[Var]) -> Self {
        let mut given = vars.iter().copied();
        let mut base = BTreeMap::new();
        for (k, t) in &model.base {
            let v = if trainable == Trainable::Base {
                given.next().expect("trainable var")
            } else {
                tape.constant(t.cast::<T>())
            };
            base.insert(k.clone(), v);
        }
        let mut adapters = BTreeMap::new();
        let (mut scale, mut dropout) = (0.0, 0.0);
        if let Some(ad) = &model.adapters {
            scale = ad.spec.scale();
            dropout = ad.spec.dropout;
            for (k, (d, u)) in &ad.pairs {
                let pair = if trainable == Trainable::Adapters {
                    (given.next().expect("down var"), given.next().expect("up var"))
                } else {
                    (tape.constant(d.cast::<T>()), tape.constant(u.cast::<T>()))
                };
                adapters.insert(k.clone(), pair);
            }
        }
        Self {
            config: model.config.clone(),
            base,
            adapters,
            scale,
            dropout,
            trainable: vars.to_vec(),
        }
    }

    /// Gradient leaves in [`trainable_tensors`] order.
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }

    fn get(&self, name: &str) -> Var {
        self.base[name]
    }
}

/// Sequences packed row-wise for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
}

impl Packed {
    pub fn push(&mut self, seq: &[TokenId]) {
        self.ids.extend(seq.iter().map(|&t| t as usize));
        self.segments.push(seq.len());
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

fn check_sequence(config: &ModelConfig, seq_len: usize, ids: &[usize]) -> Result<(), LmError> {
    if seq_len == 0 {
        return Err(LmError::EmptyInput);
    }
    if seq_len > config.context_length {
        return Err(LmError::TooLong {
            len: seq_len,
            max: config.context_length,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(LmError::OutOfVocabulary(bad));
    }
    Ok(())
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    x: Var,
    name: &str,
    dropout: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var, LmError> {
    let y = tape.matmul(x, pv.get(name))?;
    let Some(&(down, up)) = pv.adapters.get(name) else {
        return Ok(y);
    };
    let xin = match dropout.as_deref_mut() {
        Some(rng) if pv.dropout > 0.0 => {
            let shape = tape.value(x).shape().to_vec();
            let keep = 1.0 - pv.dropout;
            let inv = T::from_f64(1.0 / keep);
            let n: usize = shape.iter().product();
            let mask: Vec<T> = (0..n)
                .map(|_| if rng.gen::<f64>() < keep { inv } else { T::zero() })
                .collect();
            let m = tape.constant(Tensor::new(shape, mask)?);
            tape.mul(x, m)?
        }
        _ => x,
    };
    let h = tape.matmul(xin, down)?;
    let h = tape.matmul(h, up)?;
    let h = tape.scale(h, pv.scale)?;
    Ok(tape.add(y, h)?)
}

/// Final-layer hidden states `[rows, dim]` after the final layer norm.
///
/// Passing a generator enables adapter dropout (training mode).
pub fn forward_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    packed: &Packed,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, LmError> {
    let cfg = &pv.config;
    let mut off = 0;
    let mut positions = Vec::with_capacity(packed.rows());
    for &n in &packed.segments {
        check_sequence(cfg, n, &packed.ids[off..off + n])?;
        positions.extend(0..n);
        off += n;
    }
    if off != packed.rows() || off == 0 {
        return Err(LmError::EmptyInput);
    }
    let tok = tape.embedding(pv.get("tok_emb"), packed.ids.clone())?;
    let pos = tape.embedding(pv.get("pos_emb"), positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.num_layers {
        let k = |n: &str| layer_key(l, n);
        let h = tape.layer_norm(x, pv.get(&k("ln1.gain")), pv.get(&k("ln1.bias")), LN_EPS)?;
        let q = linear(tape, pv, h, &k("attn.wq"), &mut dropout)?;
        let kk = linear(tape, pv, h, &k("attn.wk"), &mut dropout)?;
        let v = linear(tape, pv, h, &k("attn.wv"), &mut dropout)?;
        let a = tape.causal_attention(q, kk, v, cfg.num_heads, packed.segments.clone())?;
        let a = tape.matmul(a, pv.get(&k("attn.wo")))?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, pv.get(&k("ln2.gain")), pv.get(&k("ln2.bias")), LN_EPS)?;
        let m = tape.matmul(h, pv.get(&k("mlp.w1")))?;
        let m = tape.add(m, pv.get(&k("mlp.b1")))?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, pv.get(&k("mlp.w2")))?;
        let m = tape.add(m, pv.get(&k("mlp.b2")))?;
        x = tape.add(x, m)?;
    }
    Ok(tape.layer_norm(x, pv.get("ln_f.gain"), pv.get("ln_f.bias"), LN_EPS)?)
}

/// Logits `[rows, vocab]` through the tied unembedding.
pub fn logits<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, hidden: Var) -> Result<Var, LmError> {
    Ok(tape.matmul_t(hidden, pv.get("tok_emb"), false, true)?)
}

/// Log-probabilities of `targets[i]` under the prediction made at
/// `rows[i]`, as a `[rows.len()]` vector.
pub fn target_logprobs<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    hidden: Var,
    rows: Vec<usize>,
    targets: Vec<usize>,
) -> Result<Var, LmError> {
    let h = tape.index_select(hidden, rows)?;
    let z = logits(tape, pv, h)?;
    let lp = tape.log_softmax(z)?;
    Ok(tape.gather(lp, targets)?)
}

/// `(prompt, continuation)` scoring request. BOS is prepended to the prompt.
pub struct ScoreItem<'a> {
    pub prompt: &'a [TokenId],
    pub continuation: &'a [TokenId],
}

/// Packed sequences plus, per continuation token, the predicting row, the
/// realized token and the owning item.
pub(crate) fn pack_items(bos: TokenId, items: &[ScoreItem]) -> Result<(Packed, Vec<usize>, Vec<usize>, Vec<usize>), LmError> {
    let mut packed = Packed::default();
    let (mut rows, mut targets, mut owner) = (Vec::new(), Vec::new(), Vec::new());
    for (i, it) in items.iter().enumerate() {
        if it.continuation.is_empty() {
            return Err(LmError::EmptyContinuation);
        }
        let start = packed.rows();
        let mut seq = Vec::with_capacity(1 + it.prompt.len() + it.continuation.len());
        seq.push(bos);
        seq.extend_from_slice(it.prompt);
        let first = seq.len();
        seq.extend_from_slice(it.continuation);
        for j in 0..it.continuation.len() {
            rows.push(start + first + j - 1);
            targets.push(it.continuation[j] as usize);
            owner.push(i);
        }
        packed.push(&seq);
    }
    Ok((packed, rows, targets, owner))
}

/// Summed continuation log-probabilities per item, as a `[1, items]` row.
pub fn continuation_logprobs<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    bos: TokenId,
    items: &[ScoreItem],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, LmError> {
    if items.is_empty() {
        return Err(LmError::EmptyInput);
    }
    let (packed, rows, targets, owner) = pack_items(bos, items)?;
    let hidden = forward_hidden(tape, pv, &packed, dropout)?;
    let lp = target_logprobs(tape, pv, hidden, rows, targets)?;
    let mut ind = vec![T::zero(); items.len() * owner.len()];
    for (j, &i) in owner.iter().enumerate() {
        ind[i * owner.len() + j] = T::one();
    }
    let ind = tape.constant(Tensor::new(vec![items.len(), owner.len()], ind)?);
    Ok(tape.matmul_t(lp, ind, false, true)?)
}

/// Mean next-token negative log-likelihood over every position of every
/// window except the last.
pub fn next_token_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    windows: &[Vec<TokenId>],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, LmError> {
    let mut packed = Packed::default();
    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    for w in windows {
        if w.len() < 2 {
            return Err(LmError::EmptyContinuation);
        }
        let start = packed.rows();
        for j in 0..w.len() - 1 {
            rows.push(start + j);
            targets.push(w[j + 1] as usize);
        }
        packed.push(w);
    }
    if rows.is_empty() {
        return Err(LmError::EmptyInput);
    }
    let hidden = forward_hidden(tape, pv, &packed, dropout)?;
    let lp = target_logprobs(tape, pv, hidden, rows, targets)?;
    let m = tape.mean(lp)?;
    Ok(tape.scale(m, -1.0)?)
}
