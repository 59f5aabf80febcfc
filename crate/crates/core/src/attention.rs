//! Scaled dot-product self-attention with a learnable Gaussian localness bias.
//!
//! Each query `i` predicts a center `P_i` and a window `D_i` (both in token-index
//! units). The bias `G[i][j] = -(j - P_i)^2 / (2 sigma_i^2)` with
//! `sigma_i = max(D_i / 2, SIGMA_FLOOR)` is added to the energies before the
//! softmax, which multiplies each attention weight by `exp(G[i][j])` and
//! renormalizes.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Lower bound on the Gaussian standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Window used by [`WindowStrategy::Fixed`] unless configured otherwise.
pub const DEFAULT_FIXED_WINDOW: f64 = 10.0;
/// Scale `N` of the head-specific window `D = N * sigmoid(z)`.
pub const HEAD_WINDOW_SCALE: f64 = 50.0;

const fn default_fixed_window() -> f64 {
    DEFAULT_FIXED_WINDOW
}

/// How each query's window size `D_i` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowStrategy {
    /// A constant window shared by every query.
    Fixed {
        #[serde(default = "default_fixed_window")]
        window: f64,
    },
    /// One window per sequence, predicted from the mean of the keys.
    LayerSpecific,
    /// One window per query, sharing the center predictor's hidden projection.
    #[default]
    QuerySpecific,
    /// One trainable scalar per head.
    HeadSpecific,
}

impl WindowStrategy {
    pub fn fixed() -> Self {
        Self::Fixed {
            window: DEFAULT_FIXED_WINDOW,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fixed { .. } => "fixed",
            Self::LayerSpecific => "layer_specific",
            Self::QuerySpecific => "query_specific",
            Self::HeadSpecific => "head_specific",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fixed" => Ok(Self::fixed()),
            "layer_specific" => Ok(Self::LayerSpecific),
            "query_specific" => Ok(Self::QuerySpecific),
            "head_specific" => Ok(Self::HeadSpecific),
            other => Err(config(format!("unknown window strategy `{other}`"))),
        }
    }

    /// Whether `D` is produced as `I * sigmoid(.)` and hence bounded by the length.
    pub fn is_length_scaled(&self) -> bool {
        matches!(self, Self::LayerSpecific | Self::QuerySpecific)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed { window } if !(window.is_finite() && *window > 0.0) => Err(config(format!(
                "strategy.window must be positive and finite, got {window}"
            ))),
            _ => Ok(()),
        }
    }

    /// Per-head localness parameter names and shapes for head width `d_head`.
    pub fn param_shapes(&self, d_head: usize) -> Vec<(&'static str, Vec<usize>)> {
        let mut shapes = vec![("w_p", vec![d_head, d_head]), ("u_p", vec![d_head])];
        match self {
            Self::Fixed { .. } => {}
            Self::LayerSpecific => {
                shapes.push(("w_d", vec![d_head, d_head]));
                shapes.push(("u_d", vec![d_head]));
            }
            Self::QuerySpecific => shapes.push(("u_d", vec![d_head])),
            Self::HeadSpecific => shapes.push(("z", vec![1])),
        }
        shapes
    }
}

/// Window-size parameters of one head; the variant must match the strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowParams {
    Fixed,
    LayerSpecific { w_d: Var, u_d: Var },
    QuerySpecific { u_d: Var },
    HeadSpecific { z: Var },
}

/// Localness parameters of one attention head, bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalnessParams {
    pub w_p: Var,
    pub u_p: Var,
    pub window: WindowParams,
}

/// Test hooks replacing the learned bias.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BiasMode {
    #[default]
    Learned,
    /// Inject `G = 0`.
    Zero,
    /// Use the learned centers with this constant standard deviation.
    Sigma(f64),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionOptions<'a> {
    /// Real (unpadded) sequence length; defaults to the number of key rows.
    pub length: Option<usize>,
    /// `[I x I]` row-major, `false` excludes a key for a query.
    pub mask: Option<&'a [bool]>,
    pub bias: BiasMode,
}

/// Center prediction and the shared hidden state `tanh(W_p Q_i)`.
#[derive(Debug, Clone, Copy)]
pub struct CenterPrediction {
    pub center: Var,
    pub hidden: Var,
}

/// Recorded per-head result of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct HeadAttention {
    pub output: Var,
    pub weights: Var,
    pub center: Option<Var>,
    pub window: Option<Var>,
    pub bias: Option<Var>,
}

/// Centers, windows, and weights of one head on one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub seq: usize,
    pub center: Vec<f64>,
    pub window: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl HeadAttention {
    /// Copies recorded values off the tape. Returns `None` for vanilla heads.
    pub fn trace(&self, tape: &Tape, layer: usize, head: usize, seq: usize) -> Option<AttentionTrace> {
        let (center, window) = (self.center?, self.window?);
        let w = tape.value(self.weights);
        let (rows, _) = w.dims2()?;
        Some(AttentionTrace {
            layer,
            head,
            seq,
            center: tape.data(center).to_vec(),
            window: tape.data(window).to_vec(),
            weights: (0..rows).map(|i| w.row(i).to_vec()).collect(),
        })
    }
}

/// `Q K^T / sqrt(d_head)`
pub fn attention_energy(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d_head = tape.shape(q).get(1).copied().unwrap_or(1);
    let raw = tape.matmul_nt(q, k)?;
    Ok(tape.scale(raw, 1.0 / (d_head as f64).sqrt()))
}

/// `P_i = I * sigmoid(U_p^T tanh(W_p Q_i))`
pub fn predict_center(tape: &mut Tape, q: Var, w_p: Var, u_p: Var, length: usize) -> Result<CenterPrediction> {
    if length == 0 {
        return Err(Error::Input("sequence length must be at least 1".into()));
    }
    let pre = tape.matmul_nt(q, w_p)?;
    let hidden = tape.tanh(pre);
    let p = tape.matvec(hidden, u_p)?;
    let s = tape.sigmoid(p);
    let center = tape.scale(s, length as f64);
    Ok(CenterPrediction { center, hidden })
}

/// Window sizes `D` for every query row of `q`.
pub fn predict_window(
    tape: &mut Tape,
    strategy: &WindowStrategy,
    q: Var,
    k: Var,
    params: &LocalnessParams,
    length: usize,
) -> Result<Var> {
    let pre = tape.matmul_nt(q, params.w_p)?;
    let hidden = tape.tanh(pre);
    window_from_hidden(tape, strategy, hidden, k, params, length)
}

fn window_from_hidden(
    tape: &mut Tape,
    strategy: &WindowStrategy,
    hidden: Var,
    k: Var,
    params: &LocalnessParams,
    length: usize,
) -> Result<Var> {
    let rows = tape.shape(hidden)[0];
    let scale = length as f64;
    match (strategy, params.window) {
        (WindowStrategy::Fixed { window }, WindowParams::Fixed) => {
            Ok(tape.constant(Tensor::filled(vec![rows], *window)))
        }
        (WindowStrategy::LayerSpecific, WindowParams::LayerSpecific { w_d, u_d }) => {
            let key_rows = tape.shape(k)[0];
            let keys = if key_rows > length {
                tape.slice_rows(k, 0, length)?
            } else {
                k
            };
            let mean = tape.mean_rows(keys)?;
            let proj = tape.matvec(w_d, mean)?;
            let h = tape.tanh(proj);
            let z = tape.dot(u_d, h)?;
            let s = tape.sigmoid(z);
            let d = tape.scale(s, scale);
            Ok(tape.broadcast(d, rows)?)
        }
        (WindowStrategy::QuerySpecific, WindowParams::QuerySpecific { u_d }) => {
            let z = tape.matvec(hidden, u_d)?;
            let s = tape.sigmoid(z);
            Ok(tape.scale(s, scale))
        }
        (WindowStrategy::HeadSpecific, WindowParams::HeadSpecific { z }) => {
            let s = tape.sigmoid(z);
            let d = tape.scale(s, HEAD_WINDOW_SCALE);
            Ok(tape.broadcast(d, rows)?)
        }
        (s, p) => Err(config(format!(
            "window parameters {p:?} do not match strategy `{}`",
            s.name()
        ))),
    }
}

fn check_ranges(tape: &Tape, strategy: &WindowStrategy, center: Var, window: Var, length: usize) -> Result<()> {
    let len = length as f64;
    if let Some(p) = tape.data(center).iter().find(|&&p| !(p > 0.0 && p < len)) {
        return Err(Error::Range(format!("center {p} outside (0, {len})")));
    }
    let upper = match strategy {
        WindowStrategy::Fixed { .. } => return Ok(()),
        WindowStrategy::HeadSpecific => HEAD_WINDOW_SCALE,
        WindowStrategy::LayerSpecific | WindowStrategy::QuerySpecific => len,
    };
    if let Some(d) = tape.data(window).iter().find(|&&d| !(d > 0.0 && d < upper)) {
        return Err(Error::Range(format!("window {d} outside (0, {upper})")));
    }
    Ok(())
}

/// Single-head attention; `localness = None` gives vanilla attention.
pub fn localness_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    localness: Option<&LocalnessParams>,
    strategy: &WindowStrategy,
    options: &AttentionOptions<'_>,
) -> Result<HeadAttention> {
    let key_rows = tape.shape(k)[0];
    let length = options.length.unwrap_or(key_rows);
    if length == 0 || length > key_rows {
        return Err(Error::Input(format!("length {length} invalid for {key_rows} keys")));
    }
    let energy = attention_energy(tape, q, k)?;
    let (logits, center, window, bias) = match (localness, options.bias) {
        (Some(params), mode) if mode != BiasMode::Zero => {
            let pred = predict_center(tape, q, params.w_p, params.u_p, length)?;
            let window = window_from_hidden(tape, strategy, pred.hidden, k, params, length)?;
            check_ranges(tape, strategy, pred.center, window, length)?;
            let sigma_override = match mode {
                BiasMode::Sigma(s) => Some(s),
                _ => None,
            };
            let g = tape.gaussian_bias(pred.center, window, key_rows, SIGMA_FLOOR, sigma_override)?;
            let logits = tape.add(energy, g)?;
            (logits, Some(pred.center), Some(window), Some(g))
        }
        _ => (energy, None, None, None),
    };
    let weights = tape.rowwise_softmax(logits, options.mask)?;
    let output = tape.matmul(weights, v)?;
    Ok(HeadAttention {
        output,
        weights,
        center,
        window,
        bias,
    })
}

/// Projections of one head, plus its localness parameters when the layer has them.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub localness: Option<LocalnessParams>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Var,
}

/// A sequence occupying rows `start..start + len` of a packed state matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    /// `[N x d_model]` after the output projection.
    pub output: Var,
    /// Per-head `[N x d_head]` outputs before concatenation.
    pub head_outputs: Vec<Var>,
    /// `attention[head][span]`
    pub attention: Vec<Vec<HeadAttention>>,
}

/// Multi-head self-attention over packed sequences, each head with its own bias.
pub fn multi_head_localness(
    tape: &mut Tape,
    h: Var,
    params: &MultiHeadParams,
    strategy: &WindowStrategy,
    localness_enabled: bool,
    spans: &[Span],
    bias: BiasMode,
) -> Result<MultiHeadOutput> {
    let (rows, d_model) = tape
        .value(h)
        .dims2()
        .ok_or_else(|| Error::Input("attention input must be a matrix".into()))?;
    let m = params.heads.len();
    if m == 0 {
        return Err(config("at least one attention head is required"));
    }
    let d_head = tape.shape(params.heads[0].w_q)[1];
    if m * d_head != d_model {
        return Err(config(format!(
            "{m} heads of width {d_head} do not cover d_model {d_model}"
        )));
    }
    if tape.shape(params.w_o) != [m * d_head, d_model] {
        return Err(config(format!(
            "output projection has shape {:?}, expected [{}, {d_model}]",
            tape.shape(params.w_o),
            m * d_head
        )));
    }
    if spans.iter().map(|s| s.len).sum::<usize>() != rows {
        return Err(Error::Input(format!("spans do not cover the {rows} packed rows")));
    }

    let mut head_outputs = Vec::with_capacity(m);
    let mut attention = Vec::with_capacity(m);
    for head in &params.heads {
        for w in [head.w_q, head.w_k, head.w_v] {
            if tape.shape(w) != [d_model, d_head] {
                return Err(config(format!(
                    "head projection has shape {:?}, expected [{d_model}, {d_head}]",
                    tape.shape(w)
                )));
            }
        }
        let localness = if localness_enabled {
            Some(head.localness.as_ref().ok_or_else(|| {
                config("localness is enabled but the head has no localness parameters")
            })?)
        } else {
            None
        };
        let q_all = tape.matmul(h, head.w_q)?;
        let k_all = tape.matmul(h, head.w_k)?;
        let v_all = tape.matmul(h, head.w_v)?;
        let mut per_span = Vec::with_capacity(spans.len());
        let mut outputs = Vec::with_capacity(spans.len());
        for span in spans {
            let (q, k, v) = if spans.len() == 1 {
                (q_all, k_all, v_all)
            } else {
                (
                    tape.slice_rows(q_all, span.start, span.len)?,
                    tape.slice_rows(k_all, span.start, span.len)?,
                    tape.slice_rows(v_all, span.start, span.len)?,
                )
            };
            let options = AttentionOptions {
                length: Some(span.len),
                mask: None,
                bias,
            };
            let att = localness_attention(tape, q, k, v, localness, strategy, &options)?;
            outputs.push(att.output);
            per_span.push(att);
        }
        let out = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_rows(&outputs)?
        };
        head_outputs.push(out);
        attention.push(per_span);
    }
    let concat = if m == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)?
    };
    let output = tape.matmul(concat, params.w_o)?;
    Ok(MultiHeadOutput {
        output,
        head_outputs,
        attention,
    })
}
