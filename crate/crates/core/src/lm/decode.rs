use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::model::{layer_key, ModelHandle};
use super::LmError;
use crate::numerics::gelu;
use crate::world::TokenId;

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    /// Zero means greedy decoding.
    pub temperature: f64,
    /// Nucleus mass in `(0, 1]`.
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Token sequences that end generation; the marker itself is dropped.
    pub stop: Vec<Vec<TokenId>>,
}

impl SamplingPolicy {
    pub fn new(stop: Vec<Vec<TokenId>>) -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.95,
            max_new_tokens: 32,
            stop,
        }
    }

    pub fn greedy(mut self) -> Self {
        self.temperature = 0.0;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Marker,
    Budget,
    /// The context filled up; output ends at the last token that fit.
    ContextFull,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
}

struct Layer {
    ln1: (Vec<f32>, Vec<f32>),
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ln2: (Vec<f32>, Vec<f32>),
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// Inference-only weights with adapters folded in, decoding one token at a
/// time against cached keys and values.
pub struct Decoder {
    vocab: usize,
    context: usize,
    dim: usize,
    heads: usize,
    mlp: usize,
    tok: Vec<f32>,
    pos: Vec<f32>,
    layers: Vec<Layer>,
    lnf: (Vec<f32>, Vec<f32>),
    bos: TokenId,
}

/// Cached keys/values of a decoded prefix and the logits after its last token.
#[derive(Clone, Debug)]
pub struct DecoderState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    logits: Vec<f32>,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }
}

fn vecmat(x: &[f32], w: &[f32], cols: usize, out: &mut [f32]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

fn layer_norm(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rstd * g[j] + b[j];
    }
}

impl Decoder {
    pub fn new(model: &ModelHandle, bos: TokenId) -> Self {
        let w = model.effective_weights();
        let take = |k: &str| w[k].data().to_vec();
        let cfg = &model.config;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let k = |n: &str| layer_key(l, n);
                Layer {
                    ln1: (take(&k("ln1.gain")), take(&k("ln1.bias"))),
                    wq: take(&k("attn.wq")),
                    wk: take(&k("attn.wk")),
                    wv: take(&k("attn.wv")),
                    wo: take(&k("attn.wo")),
                    ln2: (take(&k("ln2.gain")), take(&k("ln2.bias"))),
                    w1: take(&k("mlp.w1")),
                    b1: take(&k("mlp.b1")),
                    w2: take(&k("mlp.w2")),
                    b2: take(&k("mlp.b2")),
                }
            })
            .collect();
        Self {
            vocab: cfg.vocab_size,
            context: cfg.context_length,
            dim: cfg.model_dim,
            heads: cfg.num_heads,
            mlp: cfg.mlp_dim(),
            tok: take("tok_emb"),
            pos: take("pos_emb"),
            layers,
            lnf: (take("ln_f.gain"), take("ln_f.bias")),
            bos,
        }
    }

    /// State after decoding BOS followed by `prompt`.
    pub fn start(&self, prompt: &[TokenId]) -> Result<DecoderState, LmError> {
        let mut st = DecoderState {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
            logits: Vec::new(),
        };
        self.feed(&mut st, &[self.bos])?;
        self.feed(&mut st, prompt)?;
        Ok(st)
    }

    pub fn feed(&self, st: &mut DecoderState, tokens: &[TokenId]) -> Result<(), LmError> {
        if st.len + tokens.len() > self.context {
            return Err(LmError::TooLong {
                len: st.len + tokens.len(),
                max: self.context,
            });
        }
        for &t in tokens {
            if t as usize >= self.vocab {
                return Err(LmError::OutOfVocabulary(t as usize));
            }
            self.step(st, t);
        }
        Ok(())
    }

    fn step(&self, st: &mut DecoderState, token: TokenId) {
        let d = self.dim;
        let dh = d / self.heads;
        let p = st.len;
        let mut x: Vec<f32> = (0..d)
            .map(|j| self.tok[token as usize * d + j] + self.pos[p * d + j])
            .collect();
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut kv = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut hid = vec![0.0; self.mlp];
        let scale = 1.0 / (dh as f32).sqrt();
        for (l, w) in self.layers.iter().enumerate() {
            layer_norm(&x, &w.ln1.0, &w.ln1.1, &mut h);
            vecmat(&h, &w.wq, d, &mut q);
            vecmat(&h, &w.wk, d, &mut kv);
            st.keys[l].extend_from_slice(&kv);
            vecmat(&h, &w.wv, d, &mut kv);
            st.values[l].extend_from_slice(&kv);
            let (keys, values) = (&st.keys[l], &st.values[l]);
            let mut scores = vec![0.0f32; p + 1];
            for hd in 0..self.heads {
                let c = hd * dh;
                for (i, s) in scores.iter_mut().enumerate() {
                    let kr = &keys[i * d + c..i * d + c + dh];
                    *s = q[c..c + dh].iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = scores.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for j in 0..dh {
                    att[c + j] = scores
                        .iter()
                        .enumerate()
                        .map(|(i, &s)| s * values[i * d + c + j])
                        .sum::<f32>()
                        / z;
                }
            }
            vecmat(&att, &w.wo, d, &mut proj);
            for j in 0..d {
                x[j] += proj[j];
            }
            layer_norm(&x, &w.ln2.0, &w.ln2.1, &mut h);
            vecmat(&h, &w.w1, self.mlp, &mut hid);
            for (v, b) in hid.iter_mut().zip(&w.b1) {
                *v = gelu(*v + b);
            }
            vecmat(&hid, &w.w2, d, &mut proj);
            for j in 0..d {
                x[j] += proj[j] + w.b2[j];
            }
        }
        layer_norm(&x, &self.lnf.0, &self.lnf.1, &mut h);
        st.logits = (0..self.vocab)
            .map(|v| h.iter().zip(&self.tok[v * d..(v + 1) * d]).map(|(a, b)| a * b).sum())
            .collect();
        st.len += 1;
    }

    /// Continue sampling from `st` until a stop marker, the token budget or
    /// the context limit.
    pub fn generate(&self, mut st: DecoderState, policy: &SamplingPolicy, seed: u64) -> Result<Generation, LmError> {
        if policy.max_new_tokens == 0 {
            return Err(LmError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<TokenId> = Vec::new();
        for _ in 0..policy.max_new_tokens {
            let t = sample_next(&st.logits, policy, &mut rng);
            out.push(t);
            if let Some(stop) = policy.stop.iter().find(|s| !s.is_empty() && out.ends_with(s)) {
                out.truncate(out.len() - stop.len());
                return Ok(Generation {
                    tokens: out,
                    stop: StopReason::Marker,
                });
            }
            if st.len >= self.context {
                return Ok(Generation {
                    tokens: out,
                    stop: StopReason::ContextFull,
                });
            }
            self.step(&mut st, t);
        }
        Ok(Generation {
            tokens: out,
            stop: StopReason::Budget,
        })
    }
}

/// Draw one token: greedy at temperature 0, otherwise temperature-scaled
/// softmax restricted to the smallest most-probable set with mass `top_p`.
pub fn sample_next(logits: &[f32], policy: &SamplingPolicy, rng: &mut ChaCha8Rng) -> TokenId {
    if policy.temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let t = policy.temperature;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, ((v as f64 - max) / t).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for p in &probs {
        kept += 1;
        mass += p.1;
        if mass >= policy.top_p {
            break;
        }
    }
    let u = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for p in &probs[..kept] {
        acc += p.1;
        if u < acc {
            return p.0 as TokenId;
        }
    }
    probs[kept - 1].0 as TokenId
}
