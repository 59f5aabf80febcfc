//! Post-norm Transformer encoder with per-layer localness gating and a per-token classifier.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_localness, AttentionTrace, BiasMode, HeadParams, LocalnessParams, MultiHeadParams, Span,
    WindowParams, WindowStrategy,
};
use crate::error::{config, Error, Result};
use crate::rng::{stream_rng, RngStream};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn default_layers() -> usize {
    6
}

fn default_localness_layers() -> BTreeSet<usize> {
    BTreeSet::from([1, 2, 3])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// 1-based indices of layers that apply the localness bias.
    #[serde(default = "default_localness_layers")]
    pub localness_layers: BTreeSet<usize>,
    #[serde(default)]
    pub strategy: WindowStrategy,
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale experiment default: vocab 16, d_model 64, 4 heads, 4 layers, localness on 1-2.
    pub fn micro() -> Self {
        Self {
            vocab_size: 16,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            layers: 4,
            localness_layers: BTreeSet::from([1, 2]),
            strategy: WindowStrategy::QuerySpecific,
            max_len: 32,
            seed: 1,
        }
    }

    /// Gradient-check size: vocab 11, d_model 8, d_ff 16, 2 heads, 2 layers.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 11,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            layers: 2,
            localness_layers: BTreeSet::from([1, 2]),
            strategy: WindowStrategy::QuerySpecific,
            max_len: 8,
            seed: 1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(config("model.vocab_size must be positive"));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(config(format!(
                "model.d_model must be positive and even, got {}",
                self.d_model
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(config(format!(
                "model.heads ({}) must divide model.d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_ff == 0 {
            return Err(config("model.d_ff must be positive"));
        }
        if self.layers == 0 {
            return Err(config("model.layers must be positive"));
        }
        if let Some(bad) = self.localness_layers.iter().find(|&&l| l == 0 || l > self.layers) {
            return Err(config(format!(
                "model.localness_layers contains {bad}, outside 1..={}",
                self.layers
            )));
        }
        if self.max_len == 0 {
            return Err(config("model.max_len must be positive"));
        }
        self.strategy.validate()
    }
}

/// Entry `(pos, 2k) = sin(pos / 10000^(2k / d))`, `(pos, 2k + 1) = cos(same)`.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    if len == 0 {
        return Err(Error::Input("positional encoding needs at least one position".into()));
    }
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for k in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
            data[pos * d_model + 2 * k] = angle.sin();
            data[pos * d_model + 2 * k + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, d_model], data)?)
}

pub mod names {
    pub const EMBEDDING: &str = "embedding";
    pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
    pub const CLASSIFIER_BIAS: &str = "classifier.bias";

    pub fn layer(l: usize, rest: &str) -> String {
        format!("layers.{l}.{rest}")
    }

    pub fn head(l: usize, m: usize, rest: &str) -> String {
        format!("layers.{l}.attn.heads.{m}.{rest}")
    }

    pub fn localness(l: usize, m: usize, rest: &str) -> String {
        format!("layers.{l}.attn.heads.{m}.localness.{rest}")
    }

    /// True for parameters of the localness bias.
    pub fn is_localness(name: &str) -> bool {
        name.contains(".localness.")
    }
}

/// Parameter names and shapes implied by a configuration.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dh, v) = (cfg.d_model, cfg.d_head(), cfg.vocab_size);
    let mut shapes = vec![
        (names::EMBEDDING.to_string(), vec![v, d]),
        (names::CLASSIFIER_WEIGHT.to_string(), vec![d, v]),
        (names::CLASSIFIER_BIAS.to_string(), vec![v]),
    ];
    for l in 1..=cfg.layers {
        for m in 0..cfg.heads {
            for w in ["w_q", "w_k", "w_v"] {
                shapes.push((names::head(l, m, w), vec![d, dh]));
            }
            if cfg.localness_layers.contains(&l) {
                for (n, s) in cfg.strategy.param_shapes(dh) {
                    shapes.push((names::localness(l, m, n), s));
                }
            }
        }
        shapes.push((names::layer(l, "attn.w_o"), vec![cfg.heads * dh, d]));
        shapes.push((names::layer(l, "norm1.gain"), vec![d]));
        shapes.push((names::layer(l, "norm1.bias"), vec![d]));
        shapes.push((names::layer(l, "ffn.w1"), vec![d, cfg.d_ff]));
        shapes.push((names::layer(l, "ffn.b1"), vec![cfg.d_ff]));
        shapes.push((names::layer(l, "ffn.w2"), vec![cfg.d_ff, d]));
        shapes.push((names::layer(l, "ffn.b2"), vec![d]));
        shapes.push((names::layer(l, "norm2.gain"), vec![d]));
        shapes.push((names::layer(l, "norm2.bias"), vec![d]));
    }
    shapes
}

/// Parameters of an encoder bound to one tape.
#[derive(Debug, Clone, Default)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub positions: bool,
    pub bias: BiasMode,
    pub collect_traces: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            positions: true,
            bias: BiasMode::Learned,
            collect_traces: true,
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[N x vocab_size]` over the packed sequences.
    pub logits: Var,
    pub spans: Vec<Span>,
    pub traces: Vec<AttentionTrace>,
}

/// Configuration and parameters of an encoder, addressed by dotted names.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: BTreeMap<String, Tensor>,
}

fn xavier(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = fan_in * fan_out;
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl Encoder {
    /// Seeded initialization: matrices uniform in `+-sqrt(6 / (fan_in + fan_out))`,
    /// except the classifier weight, which starts at zero so the untrained model
    /// predicts uniformly. Localness vectors and scalars are zero, norm gains one,
    /// biases zero.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, RngStream::Init);
        let mut params = BTreeMap::new();
        let shapes: BTreeMap<String, Vec<usize>> = param_shapes(&config).into_iter().collect();
        for (name, shape) in shapes {
            let t = if name == names::CLASSIFIER_WEIGHT {
                Tensor::zeros(shape)
            } else if shape.len() == 2 {
                xavier(&mut rng, &shape)
            } else if name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds an encoder from stored parameters, checking names and shapes.
    pub fn from_params(cfg: EncoderConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let expected: BTreeMap<String, Vec<usize>> = param_shapes(&cfg).into_iter().collect();
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(config(format!("parameter `{name}` is not finite")));
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config: cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams::from_pairs(self.params.iter().map(|(name, t)| {
            let var = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (name.clone(), var)
        }))
    }

    fn layer_params(&self, p: &BoundParams, l: usize) -> Result<MultiHeadParams> {
        let enabled = self.config.localness_layers.contains(&l);
        let mut heads = Vec::with_capacity(self.config.heads);
        for m in 0..self.config.heads {
            let localness = if enabled {
                let loc = |n: &str| p.get(&names::localness(l, m, n));
                let window = match self.config.strategy {
                    WindowStrategy::Fixed { .. } => WindowParams::Fixed,
                    WindowStrategy::LayerSpecific => WindowParams::LayerSpecific {
                        w_d: loc("w_d")?,
                        u_d: loc("u_d")?,
                    },
                    WindowStrategy::QuerySpecific => WindowParams::QuerySpecific { u_d: loc("u_d")? },
                    WindowStrategy::HeadSpecific => WindowParams::HeadSpecific { z: loc("z")? },
                };
                Some(LocalnessParams {
                    w_p: loc("w_p")?,
                    u_p: loc("u_p")?,
                    window,
                })
            } else {
                None
            };
            heads.push(HeadParams {
                w_q: p.get(&names::head(l, m, "w_q"))?,
                w_k: p.get(&names::head(l, m, "w_k"))?,
                w_v: p.get(&names::head(l, m, "w_v"))?,
                localness,
            });
        }
        Ok(MultiHeadParams {
            heads,
            w_o: p.get(&names::layer(l, "attn.w_o"))?,
        })
    }

    /// One encoder layer: attention sublayer then feed-forward sublayer, each
    /// followed by a residual add and layer norm.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape,
        h: Var,
        layer: usize,
        p: &BoundParams,
        spans: &[Span],
        options: &ForwardOptions,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        let enabled = self.config.localness_layers.contains(&layer);
        let mh = self.layer_params(p, layer)?;
        let att = multi_head_localness(tape, h, &mh, &self.config.strategy, enabled, spans, options.bias)?;
        let mut traces = Vec::new();
        if options.collect_traces && enabled {
            for (m, per_span) in att.attention.iter().enumerate() {
                for (s, a) in per_span.iter().enumerate() {
                    traces.extend(a.trace(tape, layer, m, s));
                }
            }
        }
        let res1 = tape.add(h, att.output)?;
        let h1 = tape.layer_norm(
            res1,
            p.get(&names::layer(layer, "norm1.gain"))?,
            p.get(&names::layer(layer, "norm1.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let f1 = tape.matmul(h1, p.get(&names::layer(layer, "ffn.w1"))?)?;
        let f1 = tape.add_row_broadcast(f1, p.get(&names::layer(layer, "ffn.b1"))?)?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, p.get(&names::layer(layer, "ffn.w2"))?)?;
        let f2 = tape.add_row_broadcast(f2, p.get(&names::layer(layer, "ffn.b2"))?)?;
        let res2 = tape.add(h1, f2)?;
        let out = tape.layer_norm(
            res2,
            p.get(&names::layer(layer, "norm2.gain"))?,
            p.get(&names::layer(layer, "norm2.bias"))?,
            LAYER_NORM_EPS,
        )?;
        Ok((out, traces))
    }

    /// Runs the encoder over several sequences packed row-wise into one matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        sequences: &[&[usize]],
        options: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if sequences.is_empty() {
            return Err(Error::Input("no sequences to encode".into()));
        }
        let mut spans = Vec::with_capacity(sequences.len());
        let mut ids = Vec::new();
        let mut longest = 0;
        for (s, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Input(format!("sequence {s} is empty")));
            }
            if seq.len() > cfg.max_len {
                return Err(Error::Input(format!(
                    "sequence {s} has length {} > max_len {}",
                    seq.len(),
                    cfg.max_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} in sequence {s} is outside the vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            spans.push(Span {
                start: ids.len(),
                len: seq.len(),
            });
            ids.extend_from_slice(seq);
            longest = longest.max(seq.len());
        }

        let emb = tape.gather_rows(p.get(names::EMBEDDING)?, &ids)?;
        let mut h = tape.scale(emb, (cfg.d_model as f64).sqrt());
        if options.positions {
            let table = sinusoidal_positions(longest, cfg.d_model)?;
            let mut packed = Vec::with_capacity(ids.len() * cfg.d_model);
            for span in &spans {
                packed.extend_from_slice(&table.data()[..span.len * cfg.d_model]);
            }
            let pos = tape.constant(Tensor::new(vec![ids.len(), cfg.d_model], packed)?);
            h = tape.add(h, pos)?;
        }
        let mut traces = Vec::new();
        for layer in 1..=cfg.layers {
            let (next, t) = self.encoder_layer(tape, h, layer, p, &spans, options)?;
            h = next;
            traces.extend(t);
        }
        let logits = tape.matmul(h, p.get(names::CLASSIFIER_WEIGHT)?)?;
        let logits = tape.add_row_broadcast(logits, p.get(names::CLASSIFIER_BIAS)?)?;
        Ok(ForwardOutput { logits, spans, traces })
    }

    /// Per-token logits `[I x vocab_size]` and the traces of every localness layer and head.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Tensor, Vec<AttentionTrace>)> {
        self.encode_with(tokens, &ForwardOptions::default())
    }

    pub fn encode_with(&self, tokens: &[usize], options: &ForwardOptions) -> Result<(Tensor, Vec<AttentionTrace>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, &[tokens], options)?;
        Ok((tape.value(out.logits).clone(), out.traces))
    }
}
