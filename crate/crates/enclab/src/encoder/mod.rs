//! Compact BERT-style bidirectional encoder.
//!
//! Post-norm residual blocks: attention -> add & norm -> FFN(gelu) ->
//! add & norm, over token + position + segment embeddings, with a single
//! linear classification head and a linear masked-token head.

pub mod params;
pub mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, TensorId};
use params::{name_stream, ParamSet};
use vocab::{EncodedInput, Vocabulary, SEP_ID};

/// Additive logit applied to masked key positions.
const MASK_LOGIT: f64 = -1e9;
/// LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-12;
/// Standard deviation of the fresh-parameter initializer.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    /// Position-0 ([CLS]) hidden state.
    Cls,
    /// Arithmetic mean over non-[CLS], non-[PAD] positions. Whether [SEP]
    /// participates is configurable; it does by default.
    MeanNonCls { include_sep: bool },
}

impl Default for PoolingStrategy {
    fn default() -> Self {
        PoolingStrategy::Cls
    }
}

impl std::fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolingStrategy::Cls => write!(f, "cls"),
            PoolingStrategy::MeanNonCls { include_sep: true } => write!(f, "mean"),
            PoolingStrategy::MeanNonCls { include_sep: false } => write!(f, "mean_no_sep"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub num_classes: usize,
}

fn default_ffn_multiplier() -> usize {
    4
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Model("num_layers must be >= 1".into()));
        }
        if self.hidden == 0 || self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return Err(Error::Model(format!(
                "hidden {} must be a positive multiple of num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Model("max_len must be >= 2 for [CLS],[SEP]".into()));
        }
        if self.vocab_size < 6 {
            return Err(Error::Model("vocab_size must cover the 5 reserved tokens".into()));
        }
        if self.ffn_multiplier == 0 || self.num_classes == 0 {
            return Err(Error::Model("ffn_multiplier and num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// 4-layer toy model; 25% corruption steps resolve to whole layers.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden: 64,
            num_heads: 4,
            ffn_multiplier: 4,
            max_len: 64,
            vocab_size: 128,
            dropout: 0.1,
            num_classes: 2,
        }
    }

    /// 8-layer desk-scale model.
    pub fn small() -> Self {
        ModelConfig {
            num_layers: 8,
            hidden: 128,
            num_heads: 4,
            max_len: 128,
            ..Self::tiny()
        }
    }

    /// 12-layer model mirroring the Base layer count.
    pub fn mini_base() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden: 128,
            num_heads: 4,
            max_len: 128,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "mini-base" | "mini_base" => Ok(Self::mini_base()),
            other => Err(Error::Config(format!(
                "unknown model preset {other}; expected tiny, small, or mini-base"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_multiplier
    }

    /// Canonical parameter census: names and shapes, in storage order.
    /// Parameter count is a pure function of the config.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        let (h, v) = (self.hidden, self.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embeddings.token.weight".into(), vec![v, h]),
            ("embeddings.position.weight".into(), vec![self.max_len, h]),
            ("embeddings.segment.weight".into(), vec![2, h]),
            ("embeddings.ln.weight".into(), vec![h]),
            ("embeddings.ln.bias".into(), vec![h]),
        ];
        for i in 1..=self.num_layers {
            for comp in ["attn_q", "attn_k", "attn_v", "attn_out"] {
                out.push((format!("layer.{i}.{comp}.weight"), vec![h, h]));
                out.push((format!("layer.{i}.{comp}.bias"), vec![h]));
            }
            out.push((format!("layer.{i}.ffn1.weight"), vec![h, self.ffn_dim()]));
            out.push((format!("layer.{i}.ffn1.bias"), vec![self.ffn_dim()]));
            out.push((format!("layer.{i}.ffn2.weight"), vec![self.ffn_dim(), h]));
            out.push((format!("layer.{i}.ffn2.bias"), vec![h]));
            for ln in ["ln1", "ln2"] {
                out.push((format!("layer.{i}.{ln}.weight"), vec![h]));
                out.push((format!("layer.{i}.{ln}.bias"), vec![h]));
            }
        }
        out.push(("cls_head.weight".into(), vec![h, self.num_classes]));
        out.push(("cls_head.bias".into(), vec![self.num_classes]));
        out.push(("mlm_head.weight".into(), vec![h, v]));
        out.push(("mlm_head.bias".into(), vec![v]));
        out
    }
}

/// Encoder configuration, vocabulary, and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

impl EncoderModel {
    /// Fresh model: LayerNorm weights 1, biases 0, everything else drawn
    /// from N(0, 0.02) on a per-parameter stream derived from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.size() != config.vocab_size {
            return Err(Error::Model(format!(
                "vocabulary size {} does not match config vocab_size {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamSet::new();
        for (name, shape) in config.census() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; numel]
            } else if name.contains(".ln.") || name.contains(".ln1.") || name.contains(".ln2.") {
                vec![1.0; numel]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(name_stream(seed, &name));
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            params.insert(name, data, shape)?;
        }
        Ok(EncoderModel {
            config,
            vocab,
            params,
        })
    }

    /// Assemble from existing parts, verifying the parameter census.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let census = config.census();
        if params.len() != census.len() {
            return Err(Error::Model(format!(
                "parameter count {} does not match census {}",
                params.len(),
                census.len()
            )));
        }
        for ((name, shape), param) in census.iter().zip(params.iter()) {
            if param.name != *name || param.shape != *shape {
                return Err(Error::Model(format!(
                    "census mismatch at {}: expected {name} {shape:?}, found {:?}",
                    param.name, param.shape
                )));
            }
        }
        Ok(EncoderModel {
            config,
            vocab,
            params,
        })
    }

    /// Names of the classification-head parameters (the only trainable set
    /// in linear-probe mode).
    pub fn head_param_names() -> [&'static str; 2] {
        ["cls_head.weight", "cls_head.bias"]
    }

    pub fn is_head_param(name: &str) -> bool {
        Self::head_param_names().contains(&name)
    }
}

/// Parameter leaves bound into a graph for one forward/backward pass.
pub struct Bindings {
    ids: Vec<TensorId>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Bindings {
    /// Pair existing graph leaves with parameter names (used by the
    /// gradient checker, which owns its own leaves).
    pub fn from_ids(names: &[String], ids: &[TensorId]) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Bindings {
            ids: ids.to_vec(),
            names: names.to_vec(),
            index,
        }
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.names.iter().map(String::as_str).zip(self.ids.iter().copied())
    }
}

/// Bind every parameter as a graph leaf; `trainable` decides which leaves
/// track gradients.
pub fn bind_params<T: Element>(
    g: &mut Graph<T>,
    params: &ParamSet,
    trainable: impl Fn(&str) -> bool,
) -> Result<Bindings> {
    let mut ids = Vec::with_capacity(params.len());
    let mut names = Vec::with_capacity(params.len());
    let mut index = HashMap::with_capacity(params.len());
    for p in params.iter() {
        let data: Vec<T> = p.data.iter().map(|&v| T::from_f64(f64::from(v))).collect();
        let id = g.leaf(data, &p.shape, trainable(&p.name))?;
        index.insert(p.name.clone(), ids.len());
        ids.push(id);
        names.push(p.name.clone());
    }
    Ok(Bindings { ids, names, index })
}

/// Dropout state for one training pass.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

fn apply_dropout<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<TensorId> {
    let Some(ctx) = dropout.as_mut() else {
        return Ok(x);
    };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    use rand::Rng;
    let keep = 1.0 - ctx.rate;
    let scale = T::from_f64(1.0 / keep);
    let numel = g.numel(x);
    let mask: Vec<T> = (0..numel)
        .map(|_| {
            if ctx.rng.gen::<f64>() < keep {
                scale
            } else {
                T::ZERO
            }
        })
        .collect();
    let shape = g.shape(x).to_vec();
    let m = g.constant(mask, &shape)?;
    g.mul(x, m)
}

impl EncoderModel {
    /// Hidden states for one example: `(T, H)`.
    pub fn encode_sequence<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        input: &EncodedInput,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<TensorId> {
        let t = input.ids.len();
        if t > self.config.max_len {
            return Err(Error::Model(format!(
                "sequence length {t} exceeds model max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Model(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }

        let tok_idx: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let pos_idx: Vec<usize> = (0..t).collect();
        let seg_idx: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();

        let tok = g.gather_rows(binds.id("embeddings.token.weight"), &tok_idx)?;
        let pos = g.gather_rows(binds.id("embeddings.position.weight"), &pos_idx)?;
        let seg = g.gather_rows(binds.id("embeddings.segment.weight"), &seg_idx)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let mut x = g.layer_norm(
            sum,
            binds.id("embeddings.ln.weight"),
            binds.id("embeddings.ln.bias"),
            LN_EPS,
        )?;
        x = apply_dropout(g, x, dropout)?;

        for layer in 1..=self.config.num_layers {
            let attn = self.multi_head_attention(g, binds, x, &input.mask, layer)?;
            let attn = apply_dropout(g, attn, dropout)?;
            let res = g.add(x, attn)?;
            x = g.layer_norm(
                res,
                binds.id(&format!("layer.{layer}.ln1.weight")),
                binds.id(&format!("layer.{layer}.ln1.bias")),
                LN_EPS,
            )?;

            let h1 = linear(g, binds, x, &format!("layer.{layer}.ffn1"))?;
            let h1 = g.gelu(h1);
            let h2 = linear(g, binds, h1, &format!("layer.{layer}.ffn2"))?;
            let h2 = apply_dropout(g, h2, dropout)?;
            let res = g.add(x, h2)?;
            x = g.layer_norm(
                res,
                binds.id(&format!("layer.{layer}.ln2.weight")),
                binds.id(&format!("layer.{layer}.ln2.bias")),
                LN_EPS,
            )?;
        }
        Ok(x)
    }

    /// Batched hidden states, shape `(B, T, H)`. All inputs must share one
    /// sequence length.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        batch: &[EncodedInput],
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::Model("forward on an empty batch".into()));
        }
        let t = batch[0].ids.len();
        if batch.iter().any(|e| e.ids.len() != t) {
            return Err(Error::Model("forward batch has mixed sequence lengths".into()));
        }
        let per: Vec<TensorId> = batch
            .iter()
            .map(|e| self.encode_sequence(g, binds, e, dropout))
            .collect::<Result<_>>()?;
        let stacked = g.concat_rows(&per)?;
        g.reshape(stacked, &[batch.len(), t, self.config.hidden])
    }

    /// Scaled dot-product attention over all heads of one layer, with
    /// additive masking of [PAD] key positions.
    pub fn multi_head_attention<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        hidden: TensorId,
        mask: &[u8],
        layer: usize,
    ) -> Result<TensorId> {
        self.attention_with_probs(g, binds, hidden, mask, layer)
            .map(|(out, _)| out)
    }

    /// Attention output plus the per-head probability matrices `(T, T)`,
    /// for inspection.
    pub fn attention_with_probs<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        hidden: TensorId,
        mask: &[u8],
        layer: usize,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let t = g.shape(hidden)[0];
        if mask.len() != t {
            return Err(Error::Model(format!(
                "mask length {} does not match sequence length {t}",
                mask.len()
            )));
        }
        if mask.iter().all(|&m| m == 0) {
            return Err(Error::Model("attention over a fully masked sequence".into()));
        }
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let q = linear(g, binds, hidden, &format!("layer.{layer}.attn_q"))?;
        let k = linear(g, binds, hidden, &format!("layer.{layer}.attn_k"))?;
        let v = linear(g, binds, hidden, &format!("layer.{layer}.attn_v"))?;

        let mask_row: Vec<T> = mask
            .iter()
            .map(|&m| if m == 1 { T::ZERO } else { T::from_f64(MASK_LOGIT) })
            .collect();
        let mask_add = g.constant(mask_row, &[t])?;

        let mut heads = Vec::with_capacity(self.config.num_heads);
        let mut probs = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.mul_scalar(scores, scale);
            let scores = g.add(scores, mask_add)?;
            let attn = g.softmax(scores, 1)?;
            probs.push(attn);
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        let out = linear(g, binds, merged, &format!("layer.{layer}.attn_out"))?;
        Ok((out, probs))
    }

    /// Pool one example's hidden states `(T, H)` to a `(1, H)` vector.
    pub fn pool<T: Element>(
        &self,
        g: &mut Graph<T>,
        hidden: TensorId,
        input: &EncodedInput,
        strategy: PoolingStrategy,
    ) -> Result<TensorId> {
        match strategy {
            PoolingStrategy::Cls => g.slice_rows(hidden, 0, 1),
            PoolingStrategy::MeanNonCls { include_sep } => {
                let t = g.shape(hidden)[0];
                let eligible: Vec<usize> = (1..t)
                    .filter(|&p| {
                        input.mask[p] == 1 && (include_sep || input.ids[p] != SEP_ID)
                    })
                    .collect();
                if eligible.is_empty() {
                    return Err(Error::Model(
                        "mean pooling found no eligible positions".into(),
                    ));
                }
                let w = T::from_f64(1.0 / eligible.len() as f64);
                let mut row = vec![T::ZERO; t];
                for p in eligible {
                    row[p] = w;
                }
                let weights = g.constant(row, &[1, t])?;
                g.matmul(weights, hidden)
            }
        }
    }

    /// Classification logits for pooled vectors `(B, H) -> (B, C)`.
    pub fn classify<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        pooled: TensorId,
    ) -> Result<TensorId> {
        linear(g, binds, pooled, "cls_head")
    }

    /// Vocabulary-sized logits at each masked position.
    pub fn mlm_logits<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        hidden: TensorId,
        positions: &[usize],
    ) -> Result<TensorId> {
        let t = g.shape(hidden)[0];
        if let Some(&bad) = positions.iter().find(|&&p| p >= t) {
            return Err(Error::Model(format!(
                "masked position {bad} out of range for sequence length {t}"
            )));
        }
        let sel = g.gather_rows(hidden, positions)?;
        linear(g, binds, sel, "mlm_head")
    }

    /// Pooled logits for a batch: encode, pool, stack, classify.
    pub fn batch_logits<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        batch: &[EncodedInput],
        pooling: PoolingStrategy,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let mut pooled = Vec::with_capacity(batch.len());
        for e in batch {
            let hidden = self.encode_sequence(g, binds, e, dropout)?;
            pooled.push(self.pool(g, hidden, e, pooling)?);
        }
        let stacked = g.concat_rows(&pooled)?;
        self.classify(g, binds, stacked)
    }
}

/// `x . W + b` using the `<prefix>.weight` / `<prefix>.bias` pair.
fn linear<T: Element>(
    g: &mut Graph<T>,
    binds: &Bindings,
    x: TensorId,
    prefix: &str,
) -> Result<TensorId> {
    let w = binds.id(&format!("{prefix}.weight"));
    let b = binds.id(&format!("{prefix}.bias"));
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

/// Finite-difference check of every model parameter through a combined
/// classification + masked-token loss, in 64-bit with dropout off.
pub fn grad_check_model(
    model: &EncoderModel,
    batch: &[EncodedInput],
    step: f64,
    tolerance: f64,
) -> Result<crate::tensor::GradCheckReport> {
    use crate::tensor::{grad_check, GradCheckParam};

    if batch.is_empty() {
        return Err(Error::Model("grad_check_model needs at least one example".into()));
    }
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let params: Vec<GradCheckParam> = model
        .params
        .iter()
        .map(|p| {
            GradCheckParam::new(
                &p.name,
                p.data.iter().map(|&v| f64::from(v)).collect(),
                &p.shape,
            )
        })
        .collect();
    let targets: Vec<usize> = (0..batch.len())
        .map(|i| i % model.config.num_classes)
        .collect();
    // Any real (non-reserved) token works as the masked-position target.
    let mlm_target = 5.min(model.config.vocab_size - 1);

    grad_check(
        |g, ids| {
            let binds = Bindings::from_ids(&names, ids);
            let mut dropout = None;
            let logits = model.batch_logits(g, &binds, batch, PoolingStrategy::Cls, &mut dropout)?;
            let cls_loss = g.cross_entropy(logits, &targets)?;
            let hidden = model.encode_sequence(g, &binds, &batch[0], &mut dropout)?;
            let mlm = model.mlm_logits(g, &binds, hidden, &[1])?;
            let mlm_loss = g.cross_entropy(mlm, &[mlm_target])?;
            g.add(cls_loss, mlm_loss)
        },
        &params,
        step,
        tolerance,
    )
}
