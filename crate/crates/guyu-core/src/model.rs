//! Decoder-only transformer: token + learned positional embeddings, L blocks
//! of masked multi-head self-attention and FFN with post-norm residuals, a
//! final layer norm, and an output projection tied to the token embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const ATTN_MASK: f64 = -1e30;

fn default_d_ff() -> usize {
    0 // patched to 4 * d_model in validate()
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    pub max_positions: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            max_positions: 512,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validated(mut self) -> Result<Self> {
        if self.d_ff == 0 {
            self.d_ff = 4 * self.d_model;
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "d_model, n_heads, n_layers must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config(
                "vocab_size must cover the special tokens".into(),
            ));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Total trainable parameters implied by a config (tied output projection).
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let per_layer = 4 * d * d      // wq, wk, wv, wo
        + 2 * d                    // ln1 gain/bias
        + d * f + f                // ffn w1/b1
        + f * d + d                // ffn w2/b2
        + 2 * d; // ln2 gain/bias
    cfg.vocab_size * d + cfg.max_positions * d + cfg.n_layers * per_layer + 2 * d
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    final_gain: usize,
    final_bias: usize,
}

/// Per-call tape handles for the lifted parameters. The token embedding node
/// serves as both input table and output projection, so tying holds by
/// construction: there is exactly one storage for both roles.
pub struct Bound {
    tok_emb: NodeId,
    pos_emb: NodeId,
    layers: Vec<BoundLayer>,
    final_gain: NodeId,
    final_bias: NodeId,
}

struct BoundLayer {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization: weight matrices ~ Normal(0, 0.02) drawn
    /// in canonical parameter order from cfg.seed; layer-norm gains 1,
    /// all biases 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let config = config.validated()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let f = config.d_ff;
        let mut params = ParamStore::new();

        let tok_emb = params.add(
            "tok_emb",
            Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng),
        );
        let pos_emb = params.add(
            "pos_emb",
            Tensor::randn(&[config.max_positions, d], INIT_STD, &mut rng),
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let layer = LayerIds {
                wq: params.add(
                    format!("layer{l}.attn.wq"),
                    Tensor::randn(&[d, d], INIT_STD, &mut rng),
                ),
                wk: params.add(
                    format!("layer{l}.attn.wk"),
                    Tensor::randn(&[d, d], INIT_STD, &mut rng),
                ),
                wv: params.add(
                    format!("layer{l}.attn.wv"),
                    Tensor::randn(&[d, d], INIT_STD, &mut rng),
                ),
                wo: params.add(
                    format!("layer{l}.attn.wo"),
                    Tensor::randn(&[d, d], INIT_STD, &mut rng),
                ),
                ln1_gain: params.add(format!("layer{l}.ln1.gain"), Tensor::full(&[d], T::one())),
                ln1_bias: params.add(format!("layer{l}.ln1.bias"), Tensor::zeros(&[d])),
                ffn_w1: params.add(
                    format!("layer{l}.ffn.w1"),
                    Tensor::randn(&[d, f], INIT_STD, &mut rng),
                ),
                ffn_b1: params.add(format!("layer{l}.ffn.b1"), Tensor::zeros(&[f])),
                ffn_w2: params.add(
                    format!("layer{l}.ffn.w2"),
                    Tensor::randn(&[f, d], INIT_STD, &mut rng),
                ),
                ffn_b2: params.add(format!("layer{l}.ffn.b2"), Tensor::zeros(&[d])),
                ln2_gain: params.add(format!("layer{l}.ln2.gain"), Tensor::full(&[d], T::one())),
                ln2_bias: params.add(format!("layer{l}.ln2.bias"), Tensor::zeros(&[d])),
            };
            layers.push(layer);
        }
        let final_gain = params.add("final_ln.gain", Tensor::full(&[d], T::one()));
        let final_bias = params.add("final_ln.bias", Tensor::zeros(&[d]));

        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            final_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            final_gain: self.final_gain,
            final_bias: self.final_bias,
        }
    }

    /// Lifts every parameter onto the tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            tok_emb: tape.param(&self.params, self.tok_emb),
            pos_emb: tape.param(&self.params, self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    wq: tape.param(&self.params, l.wq),
                    wk: tape.param(&self.params, l.wk),
                    wv: tape.param(&self.params, l.wv),
                    wo: tape.param(&self.params, l.wo),
                    ln1_gain: tape.param(&self.params, l.ln1_gain),
                    ln1_bias: tape.param(&self.params, l.ln1_bias),
                    ffn_w1: tape.param(&self.params, l.ffn_w1),
                    ffn_b1: tape.param(&self.params, l.ffn_b1),
                    ffn_w2: tape.param(&self.params, l.ffn_w2),
                    ffn_b2: tape.param(&self.params, l.ffn_b2),
                    ln2_gain: tape.param(&self.params, l.ln2_gain),
                    ln2_bias: tape.param(&self.params, l.ln2_bias),
                })
                .collect(),
            final_gain: tape.param(&self.params, self.final_gain),
            final_bias: tape.param(&self.params, self.final_bias),
        }
    }

    /// Taped forward over a rectangular id matrix, yielding logits
    /// [B, T, vocab]. Position t's logits depend only on ids[..=t]. Dropout
    /// fires only when a `dropout_rng` is supplied (training mode).
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        ids: &[Vec<u32>],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<NodeId> {
        let b = ids.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let t = ids[0].len();
        if ids.iter().any(|row| row.len() != t) {
            return Err(Error::Shape("ragged batch rows".into()));
        }
        if t == 0 {
            return Err(Error::Contract("empty rows".into()));
        }
        if t > self.config.max_positions {
            return Err(Error::Length(format!(
                "sequence length {} exceeds max_positions {}",
                t, self.config.max_positions
            )));
        }
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let bound = self.bind(tape);

        let flat: Vec<usize> = ids.iter().flatten().map(|&id| id as usize).collect();
        if let Some(&bad) = flat.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {} >= vocab_size {}",
                bad, self.config.vocab_size
            )));
        }
        let tok = tape.gather(bound.tok_emb, flat)?;
        let tok = tape.reshape(tok, &[b, t, d])?;
        let pos = tape.gather(bound.pos_emb, (0..t).collect())?;
        let mut h = tape.add(tok, pos)?;
        h = self.dropout(tape, h, &mut dropout_rng);

        let mask = tape.constant(causal_mask::<T>(t));
        let inv_sqrt_dh = T::from_f64(1.0 / (dh as f64).sqrt());

        for layer in &bound.layers {
            // masked multi-head self-attention, then post-norm residual
            let q = tape.matmul(h, layer.wq)?;
            let k = tape.matmul(h, layer.wk)?;
            let v = tape.matmul(h, layer.wv)?;
            let split = |tape: &mut Tape<T>, x: NodeId| -> Result<NodeId> {
                let x = tape.reshape(x, &[b, t, heads, dh])?;
                tape.permute(x, vec![0, 2, 1, 3])
            };
            let q = split(tape, q)?;
            let k = split(tape, k)?;
            let v = split(tape, v)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, inv_sqrt_dh);
            let scores = tape.add(scores, mask)?;
            let mut probs = tape.softmax_last(scores)?;
            probs = self.dropout(tape, probs, &mut dropout_rng);
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.permute(ctx, vec![0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b, t, d])?;
            let attn_out = tape.matmul(ctx, layer.wo)?;
            let res = tape.add(h, attn_out)?;
            h = tape.layer_norm(res, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;

            // position-wise FFN, then post-norm residual
            let inner = tape.matmul(h, layer.ffn_w1)?;
            let inner = tape.add(inner, layer.ffn_b1)?;
            let inner = tape.gelu(inner);
            let out = tape.matmul(inner, layer.ffn_w2)?;
            let mut out = tape.add(out, layer.ffn_b2)?;
            out = self.dropout(tape, out, &mut dropout_rng);
            let res = tape.add(h, out)?;
            h = tape.layer_norm(res, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
        }

        let h = tape.layer_norm(h, bound.final_gain, bound.final_bias, LN_EPS)?;
        tape.matmul_nt(h, bound.tok_emb) // tied output projection
    }

    fn dropout<R: Rng>(&self, tape: &mut Tape<T>, x: NodeId, rng: &mut Option<&mut R>) -> NodeId {
        let rate = self.config.dropout_rate;
        let Some(rng) = rng.as_deref_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = tape.value(x).shape().to_vec();
        let numel: usize = shape.iter().product();
        let mask_data: Vec<T> = (0..numel)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    T::from_f64(keep)
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(&shape, mask_data).expect("mask shape"));
        tape.mul(x, mask).expect("same-shape dropout mask")
    }

    /// Untaped hidden states [T, d_model] for one prefix (inference mode,
    /// no dropout). Row-for-row identical to the taped forward.
    pub fn hidden_states(&self, prefix: &[u32]) -> Result<Tensor<T>> {
        if prefix.is_empty() {
            return Err(Error::Contract("prefix must be non-empty".into()));
        }
        let t = prefix.len();
        if t > self.config.max_positions {
            return Err(Error::Length(format!(
                "prefix length {} exceeds max_positions {}",
                t, self.config.max_positions
            )));
        }
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let p = |id: usize| &self.params.get(id).value;

        let flat: Vec<usize> = prefix.iter().map(|&id| id as usize).collect();
        if let Some(&bad) = flat.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {} >= vocab_size {}",
                bad, self.config.vocab_size
            )));
        }
        let tok = ops::gather_rows(p(self.tok_emb), &flat)?;
        let pos = ops::gather_rows(p(self.pos_emb), &(0..t).collect::<Vec<_>>())?;
        let mut h = ops::add(&tok, &pos)?;
        let mask = causal_mask::<T>(t);
        let inv_sqrt_dh = T::from_f64(1.0 / (dh as f64).sqrt());

        for layer in &self.layers {
            let split = |x: &Tensor<T>| -> Result<Tensor<T>> {
                ops::permute(&x.reshaped(&[t, heads, dh])?, &[1, 0, 2])
            };
            let q = split(&ops::matmul(&h, p(layer.wq))?)?;
            let k = split(&ops::matmul(&h, p(layer.wk))?)?;
            let v = split(&ops::matmul(&h, p(layer.wv))?)?;
            let scores = ops::scale(&ops::matmul_nt(&q, &k)?, inv_sqrt_dh);
            let scores = ops::add(&scores, &mask)?;
            let probs = ops::softmax_last(&scores)?;
            let ctx = ops::matmul(&probs, &v)?;
            let ctx = ops::permute(&ctx, &[1, 0, 2])?.reshaped(&[t, d])?;
            let attn_out = ops::matmul(&ctx, p(layer.wo))?;
            let res = ops::add(&h, &attn_out)?;
            h = ops::layer_norm(&res, p(layer.ln1_gain), p(layer.ln1_bias), LN_EPS)?;

            let inner = ops::gelu(&ops::add(
                &ops::matmul(&h, p(layer.ffn_w1))?,
                p(layer.ffn_b1),
            )?);
            let out = ops::add(&ops::matmul(&inner, p(layer.ffn_w2))?, p(layer.ffn_b2))?;
            let res = ops::add(&h, &out)?;
            h = ops::layer_norm(&res, p(layer.ln2_gain), p(layer.ln2_bias), LN_EPS)?;
        }
        ops::layer_norm(&h, p(self.final_gain), p(self.final_bias), LN_EPS)
    }

    /// Softmax over the final position's logits; bitwise equal to the taped
    /// forward's last-row softmax on the same prefix.
    pub fn next_token_distribution(&self, prefix: &[u32]) -> Result<Vec<T>> {
        let h = self.hidden_states(prefix)?;
        let d = self.config.d_model;
        let t = prefix.len();
        let last = &h.data()[(t - 1) * d..t * d];
        let logits = ops::project_row(last, &self.params.get(self.tok_emb).value)?;
        let dist = ops::softmax_last(&Tensor::new(&[logits.len()], logits)?)?;
        Ok(dist.data().to_vec())
    }
}

/// [t, t] additive mask: 0 at or below the diagonal, a large negative value
/// strictly above it (future positions).
fn causal_mask<T: Scalar>(t: usize) -> Tensor<T> {
    let mut mask = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            mask.data_mut()[i * t + j] = T::from_f64(ATTN_MASK);
        }
    }
    mask
}
