//! Model layers and assemblies: slice encoder, bidirectional GRU encoder,
//! global attention, Toeplitz attention, and the two decoders with input
//! feeding.
//!
//! Sequence-step vectors are `[1, n]` row matrices so every step is a plain
//! matrix product against `[in, out]` weight matrices. Parameters are
//! immutable during forward and predict; training owns the only mutable
//! reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{check_kernel_len, conv_band_forward, softmax_row, Boundary, GradGraph, Var};
use crate::synth::StackSample;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Global,
    Toeplitz,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttentionKind::Global),
            "toeplitz" => Ok(AttentionKind::Toeplitz),
            other => Err(Error::Config(format!(
                "unknown attention kind '{other}' (expected global or toeplitz)"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::Global => "global",
            AttentionKind::Toeplitz => "toeplitz",
        })
    }
}

/// What the decoder receives from its own previous step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeeding {
    /// Previous softmax probabilities (uniform at the first step).
    Probabilities,
    /// No feedback channel at all.
    Off,
}

impl std::str::FromStr for InputFeeding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilities" => Ok(InputFeeding::Probabilities),
            "off" => Ok(InputFeeding::Off),
            other => Err(Error::Config(format!(
                "unknown input feeding form '{other}' (expected probabilities or off)"
            ))),
        }
    }
}

impl std::fmt::Display for InputFeeding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputFeeding::Probabilities => "probabilities",
            InputFeeding::Off => "off",
        })
    }
}

/// Decoder unrolling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Feed the one-hot true label of the previous slice.
    TeacherForcing,
    /// Feed the model's own previous softmax output.
    FreeRunning,
}

/// Model hyperparameters. `d` and `boundary` only matter for Toeplitz
/// attention; `h_dec` only for global attention.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    /// Kernel half-width; the Toeplitz kernel has support 2d+1.
    pub d: usize,
    pub boundary: Boundary,
    pub f_raw: usize,
    pub f_enc: usize,
    pub h_enc: usize,
    pub h_dec: usize,
    pub input_feeding: InputFeeding,
    /// Ablation: encode every slice from a zero recurrent state, so the
    /// encoder sees exactly one slice per decision.
    pub slice_context_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            attention: AttentionKind::Toeplitz,
            d: 1,
            boundary: Boundary::ZeroPad,
            f_raw: 8,
            f_enc: 12,
            h_enc: 16,
            h_dec: 16,
            input_feeding: InputFeeding::Probabilities,
            slice_context_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_raw", self.f_raw),
            ("f_enc", self.f_enc),
            ("h_enc", self.h_enc),
            ("h_dec", self.h_dec),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the encoding rows: forward and backward states concatenated.
    pub fn enc_dim(&self) -> usize {
        2 * self.h_enc
    }

    /// Width of the previous-output channel appended to decoder inputs.
    pub fn feed_dim(&self) -> usize {
        match self.input_feeding {
            InputFeeding::Probabilities => NUM_CLASSES,
            InputFeeding::Off => 0,
        }
    }

    pub fn kernel_len(&self) -> usize {
        2 * self.d + 1
    }
}

/// Gated recurrent unit weights, row-vector convention: inputs multiply
/// `[in, hidden]` matrices from the left.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(&[input, hidden]),
            w_r: Tensor::zeros(&[input, hidden]),
            w_h: Tensor::zeros(&[input, hidden]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[1, hidden]),
            b_r: Tensor::zeros(&[1, hidden]),
            b_h: Tensor::zeros(&[1, hidden]),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (k, t) in self.fields() {
            out.push((format!("{prefix}.{k}"), t));
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
        ]
    }

    pub fn register(&self, g: &mut GradGraph) -> GruVars {
        GruVars {
            w_z: g.leaf(self.w_z.clone()),
            w_r: g.leaf(self.w_r.clone()),
            w_h: g.leaf(self.w_h.clone()),
            u_z: g.leaf(self.u_z.clone()),
            u_r: g.leaf(self.u_r.clone()),
            u_h: g.leaf(self.u_h.clone()),
            b_z: g.leaf(self.b_z.clone()),
            b_r: g.leaf(self.b_r.clone()),
            b_h: g.leaf(self.b_h.clone()),
        }
    }
}

/// Graph handles for one GRU's parameters.
#[derive(Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    fn all(&self) -> [Var; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

/// Learnable logits whose softmax is the convex attention kernel; convexity
/// is structural, never a constraint to check during optimization.
#[derive(Clone, Debug)]
pub struct ToeplitzKernel {
    logits: Tensor,
}

impl ToeplitzKernel {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 1 || logits.shape()[0] % 2 == 0 {
            return Err(Error::Dimension(format!(
                "kernel logits must be a 1-D tensor of odd length, got {:?}",
                logits.shape()
            )));
        }
        Ok(ToeplitzKernel { logits })
    }

    /// Zero logits: the uniform kernel of half-width `d`.
    pub fn uniform(d: usize) -> Self {
        ToeplitzKernel { logits: Tensor::zeros(&[2 * d + 1]) }
    }

    pub fn d(&self) -> usize {
        (self.logits.shape()[0] - 1) / 2
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor {
        &mut self.logits
    }

    /// Softmax of the logits: non-negative, sums to one.
    pub fn weights(&self) -> Tensor {
        let mut data = self.logits.data().to_vec();
        softmax_row(&mut data);
        Tensor::vector(data)
    }
}

#[derive(Clone, Debug)]
pub struct SliceEncoderParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct GlobalAttnParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct GlobalHead {
    pub attn: GlobalAttnParams,
    pub gru: GruParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct ToeplitzHead {
    pub kernel: ToeplitzKernel,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    Global(GlobalHead),
    Toeplitz(ToeplitzHead),
}

/// All learnable tensors of one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub slice: SliceEncoderParams,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub head: HeadParams,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let enc = cfg.enc_dim();
        let feed = cfg.feed_dim();
        let head = match cfg.attention {
            AttentionKind::Global => HeadParams::Global(GlobalHead {
                attn: GlobalAttnParams {
                    w: Tensor::zeros(&[cfg.h_dec, cfg.h_dec]),
                    u: Tensor::zeros(&[enc, cfg.h_dec]),
                    b: Tensor::zeros(&[1, cfg.h_dec]),
                    v: Tensor::zeros(&[cfg.h_dec, 1]),
                },
                gru: GruParams::zeros(enc + feed, cfg.h_dec),
                out_w: Tensor::zeros(&[cfg.h_dec, NUM_CLASSES]),
                out_b: Tensor::zeros(&[1, NUM_CLASSES]),
            }),
            AttentionKind::Toeplitz => HeadParams::Toeplitz(ToeplitzHead {
                kernel: ToeplitzKernel::uniform(cfg.d),
                out_w: Tensor::zeros(&[enc + feed, NUM_CLASSES]),
                out_b: Tensor::zeros(&[1, NUM_CLASSES]),
            }),
        };
        ModelParams {
            slice: SliceEncoderParams {
                w: Tensor::zeros(&[cfg.f_raw, cfg.f_enc]),
                b: Tensor::zeros(&[1, cfg.f_enc]),
            },
            enc_fwd: GruParams::zeros(cfg.f_enc, cfg.h_enc),
            enc_bwd: GruParams::zeros(cfg.f_enc, cfg.h_enc),
            head,
        }
    }

    /// Named tensors in the canonical enumeration order used everywhere:
    /// checkpoints, gradient collection, and optimizer state all align on it.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("slice.w".to_string(), &self.slice.w));
        out.push(("slice.b".to_string(), &self.slice.b));
        self.enc_fwd.named("enc_fwd", &mut out);
        self.enc_bwd.named("enc_bwd", &mut out);
        match &self.head {
            HeadParams::Global(h) => {
                out.push(("head.attn.w".to_string(), &h.attn.w));
                out.push(("head.attn.u".to_string(), &h.attn.u));
                out.push(("head.attn.b".to_string(), &h.attn.b));
                out.push(("head.attn.v".to_string(), &h.attn.v));
                for (k, t) in h.gru.fields() {
                    out.push((format!("head.gru.{k}"), t));
                }
                out.push(("head.out.w".to_string(), &h.out_w));
                out.push(("head.out.b".to_string(), &h.out_b));
            }
            HeadParams::Toeplitz(h) => {
                out.push(("head.kernel.logits".to_string(), h.kernel.logits()));
                out.push(("head.out.w".to_string(), &h.out_w));
                out.push(("head.out.b".to_string(), &h.out_b));
            }
        }
        out
    }

    /// Mutable references in the same canonical order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.slice.w);
        out.push(&mut self.slice.b);
        for (_, t) in self.enc_fwd.fields_mut() {
            out.push(t);
        }
        for (_, t) in self.enc_bwd.fields_mut() {
            out.push(t);
        }
        match &mut self.head {
            HeadParams::Global(h) => {
                out.push(&mut h.attn.w);
                out.push(&mut h.attn.u);
                out.push(&mut h.attn.b);
                out.push(&mut h.attn.v);
                for (_, t) in h.gru.fields_mut() {
                    out.push(t);
                }
                out.push(&mut h.out_w);
                out.push(&mut h.out_b);
            }
            HeadParams::Toeplitz(h) => {
                out.push(h.kernel.logits_mut());
                out.push(&mut h.out_w);
                out.push(&mut h.out_b);
            }
        }
        out
    }

    pub fn register(&self, g: &mut GradGraph) -> ModelVars {
        let head = match &self.head {
            HeadParams::Global(h) => HeadVars::Global {
                attn_w: g.leaf(h.attn.w.clone()),
                attn_u: g.leaf(h.attn.u.clone()),
                attn_b: g.leaf(h.attn.b.clone()),
                attn_v: g.leaf(h.attn.v.clone()),
                gru: h.gru.register(g),
                out_w: g.leaf(h.out_w.clone()),
                out_b: g.leaf(h.out_b.clone()),
            },
            HeadParams::Toeplitz(h) => HeadVars::Toeplitz {
                logits: g.leaf(h.kernel.logits().clone()),
                out_w: g.leaf(h.out_w.clone()),
                out_b: g.leaf(h.out_b.clone()),
            },
        };
        ModelVars {
            slice_w: g.leaf(self.slice.w.clone()),
            slice_b: g.leaf(self.slice.b.clone()),
            enc_fwd: self.enc_fwd.register(g),
            enc_bwd: self.enc_bwd.register(g),
            head,
        }
    }
}

#[derive(Clone, Copy)]
pub enum HeadVars {
    Global {
        attn_w: Var,
        attn_u: Var,
        attn_b: Var,
        attn_v: Var,
        gru: GruVars,
        out_w: Var,
        out_b: Var,
    },
    Toeplitz {
        logits: Var,
        out_w: Var,
        out_b: Var,
    },
}

/// Graph handles for every model parameter, in canonical order.
#[derive(Clone, Copy)]
pub struct ModelVars {
    pub slice_w: Var,
    pub slice_b: Var,
    pub enc_fwd: GruVars,
    pub enc_bwd: GruVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.slice_w, self.slice_b];
        out.extend(self.enc_fwd.all());
        out.extend(self.enc_bwd.all());
        match self.head {
            HeadVars::Global { attn_w, attn_u, attn_b, attn_v, gru, out_w, out_b } => {
                out.extend([attn_w, attn_u, attn_b, attn_v]);
                out.extend(gru.all());
                out.extend([out_w, out_b]);
            }
            HeadVars::Toeplitz { logits, out_w, out_b } => {
                out.extend([logits, out_w, out_b]);
            }
        }
        out
    }
}

/// Reassemble `ModelVars` from a flat leaf list in canonical order, e.g.
/// leaves created from the tensors of [`ModelParams::named`]. Used by the
/// finite-difference checks, which work over flat parameter lists.
pub fn vars_from_flat(cfg: &ModelConfig, vars: &[Var]) -> ModelVars {
    let mut it = vars.iter().copied();
    let mut next = move || it.next().expect("flat var list too short for config");
    let slice_w = next();
    let slice_b = next();
    let gru = |next: &mut dyn FnMut() -> Var| GruVars {
        w_z: next(),
        w_r: next(),
        w_h: next(),
        u_z: next(),
        u_r: next(),
        u_h: next(),
        b_z: next(),
        b_r: next(),
        b_h: next(),
    };
    let enc_fwd = gru(&mut next);
    let enc_bwd = gru(&mut next);
    let head = match cfg.attention {
        AttentionKind::Global => HeadVars::Global {
            attn_w: next(),
            attn_u: next(),
            attn_b: next(),
            attn_v: next(),
            gru: gru(&mut next),
            out_w: next(),
            out_b: next(),
        },
        AttentionKind::Toeplitz => {
            HeadVars::Toeplitz { logits: next(), out_w: next(), out_b: next() }
        }
    };
    ModelVars { slice_w, slice_b, enc_fwd, enc_bwd, head }
}

/// One-hidden-layer perceptron over each slice: `tanh(x·W + b)`, applied to
/// all rows of a `[T, F_raw]` batch at once.
pub fn slice_encode(g: &mut GradGraph, raw: Var, w: Var, b: Var) -> Result<Var> {
    let lin = g.matmul(raw, w)?;
    let shifted = g.add_row(lin, b)?;
    Ok(g.tanh(shifted))
}

/// Standard GRU cell in the `h = (1-z)*h_prev + z*h_cand` convention.
pub fn gru_cell(g: &mut GradGraph, x: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let zx = g.matmul(x, p.w_z)?;
    let zh = g.matmul(h_prev, p.u_z)?;
    let z_pre = g.add(zx, zh)?;
    let z_pre = g.add(z_pre, p.b_z)?;
    let z = g.sigmoid(z_pre);

    let rx = g.matmul(x, p.w_r)?;
    let rh = g.matmul(h_prev, p.u_r)?;
    let r_pre = g.add(rx, rh)?;
    let r_pre = g.add(r_pre, p.b_r)?;
    let r = g.sigmoid(r_pre);

    let hx = g.matmul(x, p.w_h)?;
    let gated = g.hadamard(r, h_prev)?;
    let hh = g.matmul(gated, p.u_h)?;
    let h_pre = g.add(hx, hh)?;
    let h_pre = g.add(h_pre, p.b_h)?;
    let h_cand = g.tanh(h_pre);

    let keep = g.scale(z, -1.0, 1.0);
    let old = g.hadamard(keep, h_prev)?;
    let new = g.hadamard(z, h_cand)?;
    g.add(old, new)
}

/// Bidirectional GRU over `[T, F]` features. Row t of the result is the
/// forward state after slices 0..=t concatenated with the backward state
/// after slices T-1..=t; initial states are zero. With `per_slice` set, both
/// directions restart from zero at every slice, ablating sequence context.
pub fn bi_gru_encode(
    g: &mut GradGraph,
    features: Var,
    fwd: &GruVars,
    bwd: &GruVars,
    hidden: usize,
    per_slice: bool,
) -> Result<Var> {
    let t = g.value(features).rows();
    if t == 0 {
        return Err(Error::Validation("cannot encode an empty sequence".into()));
    }
    let zero = g.leaf(Tensor::zeros(&[1, hidden]));

    let mut fwd_rows = Vec::with_capacity(t);
    let mut state = zero;
    for i in 0..t {
        let x = g.slice_rows(features, i, 1)?;
        let prev = if per_slice { zero } else { state };
        state = gru_cell(g, x, prev, fwd)?;
        fwd_rows.push(state);
    }

    let mut bwd_rows = vec![zero; t];
    let mut state = zero;
    for i in (0..t).rev() {
        let x = g.slice_rows(features, i, 1)?;
        let prev = if per_slice { zero } else { state };
        state = gru_cell(g, x, prev, bwd)?;
        bwd_rows[i] = state;
    }

    let f_stack = g.concat_rows(&fwd_rows)?;
    let b_stack = g.concat_rows(&bwd_rows)?;
    g.concat_cols(&[f_stack, b_stack])
}

/// Graph handles for the additive attention parameters.
pub struct GlobalAttnVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub v: Var,
}

/// One step of additive global attention: scores every encoding against the
/// previous decoder state, softmaxes them into `alpha`, and returns the
/// context `c = alpha · H` together with `alpha` itself.
pub fn global_attention_step(
    g: &mut GradGraph,
    encodings: Var,
    s_prev: Var,
    attn: &GlobalAttnVars,
) -> Result<(Var, Var)> {
    let t = g.value(encodings).rows();
    let proj_s = g.matmul(s_prev, attn.w)?;
    let proj_s = g.add(proj_s, attn.b)?;
    let proj_h = g.matmul(encodings, attn.u)?;
    let pre = g.add_row(proj_h, proj_s)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, attn.v)?;
    let flat = g.reshape(scores, &[1, t])?;
    let alpha = g.softmax(flat)?;
    let context = g.matmul(alpha, encodings)?;
    Ok((context, alpha))
}

/// Toeplitz attention: every slice applies the same convex kernel around its
/// own position, computed as a banded convolution over the encodings.
pub fn toeplitz_attention_step(
    g: &mut GradGraph,
    encodings: Var,
    kernel_weights: Var,
    boundary: Boundary,
) -> Result<Var> {
    g.conv1d_band(encodings, kernel_weights, boundary)
}

fn uniform_leaf(g: &mut GradGraph) -> Var {
    g.leaf(Tensor::filled(&[1, NUM_CLASSES], 1.0 / NUM_CLASSES as f64))
}

fn one_hot_leaf(g: &mut GradGraph, class: usize) -> Var {
    let mut row = vec![0.0; NUM_CLASSES];
    row[class] = 1.0;
    g.leaf(Tensor::from_parts(vec![1, NUM_CLASSES], row))
}

fn check_teacher_labels(labels: Option<&[usize]>, t: usize, mode: DecodeMode) -> Result<()> {
    if mode == DecodeMode::TeacherForcing {
        let Some(labels) = labels else {
            return Err(Error::Usage("teacher forcing needs ground-truth labels".into()));
        };
        if labels.len() != t {
            return Err(Error::Validation(format!(
                "teacher labels length {} does not match {t} slices",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= NUM_CLASSES) {
            return Err(Error::Validation("teacher label outside 0..=2".into()));
        }
    }
    Ok(())
}

/// Global-attention decoder: a GRU over attended contexts followed by a
/// fully connected readout, with the previous step's output appended to the
/// GRU input. Returns per-slice logits and the attention row of every step.
#[allow(clippy::too_many_arguments)]
pub fn decode_global(
    g: &mut GradGraph,
    encodings: Var,
    attn: &GlobalAttnVars,
    gru: &GruVars,
    out_w: Var,
    out_b: Var,
    h_dec: usize,
    feeding: InputFeeding,
    mode: DecodeMode,
    labels: Option<&[usize]>,
) -> Result<(Var, Vec<Var>)> {
    let t = g.value(encodings).rows();
    check_teacher_labels(labels, t, mode)?;
    let mut s = g.leaf(Tensor::zeros(&[1, h_dec]));
    let mut y_prev = uniform_leaf(g);
    let mut logit_rows = Vec::with_capacity(t);
    let mut alpha_rows = Vec::with_capacity(t);
    for step in 0..t {
        let (context, alpha) = global_attention_step(g, encodings, s, attn)?;
        alpha_rows.push(alpha);
        let input = match feeding {
            InputFeeding::Probabilities => g.concat_cols(&[context, y_prev])?,
            InputFeeding::Off => context,
        };
        s = gru_cell(g, input, s, gru)?;
        let lin = g.matmul(s, out_w)?;
        let logit = g.add(lin, out_b)?;
        logit_rows.push(logit);
        if feeding == InputFeeding::Probabilities {
            y_prev = match mode {
                DecodeMode::TeacherForcing => one_hot_leaf(g, labels.unwrap()[step]),
                DecodeMode::FreeRunning => g.softmax(logit)?,
            };
        }
    }
    let logits = g.concat_rows(&logit_rows)?;
    Ok((logits, alpha_rows))
}

/// Toeplitz decoder: a fully connected layer over each attended context,
/// with the previous step's output appended to its input.
pub fn decode_toeplitz(
    g: &mut GradGraph,
    contexts: Var,
    out_w: Var,
    out_b: Var,
    feeding: InputFeeding,
    mode: DecodeMode,
    labels: Option<&[usize]>,
) -> Result<Var> {
    let t = g.value(contexts).rows();
    check_teacher_labels(labels, t, mode)?;
    let mut y_prev = uniform_leaf(g);
    let mut logit_rows = Vec::with_capacity(t);
    for step in 0..t {
        let context = g.slice_rows(contexts, step, 1)?;
        let input = match feeding {
            InputFeeding::Probabilities => g.concat_cols(&[context, y_prev])?,
            InputFeeding::Off => context,
        };
        let lin = g.matmul(input, out_w)?;
        let logit = g.add(lin, out_b)?;
        logit_rows.push(logit);
        if feeding == InputFeeding::Probabilities {
            y_prev = match mode {
                DecodeMode::TeacherForcing => one_hot_leaf(g, labels.unwrap()[step]),
                DecodeMode::FreeRunning => g.softmax(logit)?,
            };
        }
    }
    g.concat_rows(&logit_rows)
}

/// Attention weights recorded during one forward pass.
pub enum AttentionTrace {
    /// One `[1, T]` softmax row per decode step.
    Global(Vec<Var>),
    /// The normalized kernel weights.
    Toeplitz(Var),
}

pub struct ForwardOutput {
    /// `[T, 3]` per-slice class logits.
    pub logits: Var,
    pub attention: AttentionTrace,
}

impl ForwardOutput {
    /// Assemble the `[T, T]` attention map realized on this input.
    pub fn attention_map(&self, g: &GradGraph, boundary: Boundary) -> Result<Tensor> {
        let t = g.value(self.logits).rows();
        match &self.attention {
            AttentionTrace::Global(rows) => {
                let mut data = Vec::with_capacity(t * t);
                for row in rows {
                    data.extend_from_slice(g.value(*row).data());
                }
                Tensor::new(vec![t, t], data)
            }
            AttentionTrace::Toeplitz(weights) => {
                build_attention_map(g.value(*weights), t, boundary)
            }
        }
    }
}

/// Full pipeline on already-registered parameter vars: slice encoder, then
/// the bidirectional GRU, then the configured attention and decoder.
/// Training uses this directly so gradients land on the leaves it registered.
pub fn forward_pass(
    cfg: &ModelConfig,
    g: &mut GradGraph,
    vars: &ModelVars,
    stack: &StackSample,
    mode: DecodeMode,
) -> Result<ForwardOutput> {
    stack.validate()?;
    if stack.feature_dim() != cfg.f_raw {
        return Err(Error::Dimension(format!(
            "stack {} has feature dimension {}, model expects {}",
            stack.id,
            stack.feature_dim(),
            cfg.f_raw
        )));
    }
    let raw = g.leaf(stack.features_tensor()?);
    let encoded = slice_encode(g, raw, vars.slice_w, vars.slice_b)?;
    let encodings = bi_gru_encode(
        g,
        encoded,
        &vars.enc_fwd,
        &vars.enc_bwd,
        cfg.h_enc,
        cfg.slice_context_only,
    )?;
    let labels = Some(stack.labels.as_slice());
    match vars.head {
        HeadVars::Global { attn_w, attn_u, attn_b, attn_v, gru, out_w, out_b } => {
            let attn = GlobalAttnVars { w: attn_w, u: attn_u, b: attn_b, v: attn_v };
            let (logits, alphas) = decode_global(
                g,
                encodings,
                &attn,
                &gru,
                out_w,
                out_b,
                cfg.h_dec,
                cfg.input_feeding,
                mode,
                labels,
            )?;
            Ok(ForwardOutput { logits, attention: AttentionTrace::Global(alphas) })
        }
        HeadVars::Toeplitz { logits: kernel_logits, out_w, out_b } => {
            let weights = g.softmax(kernel_logits)?;
            let contexts = toeplitz_attention_step(g, encodings, weights, cfg.boundary)?;
            let logits =
                decode_toeplitz(g, contexts, out_w, out_b, cfg.input_feeding, mode, labels)?;
            Ok(ForwardOutput { logits, attention: AttentionTrace::Toeplitz(weights) })
        }
    }
}

/// A configured model plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &params)?;
        Ok(Model { config, params })
    }

    /// Encode the stack and decode per-slice logits on the given graph.
    pub fn forward(
        &self,
        g: &mut GradGraph,
        stack: &StackSample,
        mode: DecodeMode,
    ) -> Result<ForwardOutput> {
        let vars = self.params.register(g);
        forward_pass(&self.config, g, &vars, stack, mode)
    }

    /// Mean cross-entropy of the stack under the given decode mode.
    pub fn loss(
        &self,
        g: &mut GradGraph,
        vars: &ModelVars,
        stack: &StackSample,
        mode: DecodeMode,
    ) -> Result<(Var, ForwardOutput)> {
        let out = forward_pass(&self.config, g, vars, stack, mode)?;
        let loss = g.cross_entropy(out.logits, &stack.labels)?;
        Ok((loss, out))
    }

    /// Free-running per-slice argmax labels; ties break to the lowest class.
    pub fn predict(&self, stack: &StackSample) -> Result<Vec<usize>> {
        let mut g = GradGraph::new();
        let out = self.forward(&mut g, stack, DecodeMode::FreeRunning)?;
        let logits = g.value(out.logits);
        Ok((0..logits.rows()).map(|r| argmax_lowest(logits.row(r))).collect())
    }

    /// The kernel of a Toeplitz model, if this is one.
    pub fn toeplitz_kernel(&self) -> Option<&ToeplitzKernel> {
        match &self.params.head {
            HeadParams::Toeplitz(h) => Some(&h.kernel),
            HeadParams::Global(_) => None,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Check every parameter tensor against the shapes implied by the config.
pub fn check_shapes(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let reference = ModelParams::zeros(cfg);
    let expected = reference.named();
    let actual = params.named();
    if expected.len() != actual.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: expected {}, got {}",
            expected.len(),
            actual.len()
        )));
    }
    for ((en, et), (an, at)) in expected.iter().zip(&actual) {
        if en != an {
            return Err(Error::Checkpoint(format!(
                "parameter name mismatch: expected {en}, got {an}"
            )));
        }
        if et.shape() != at.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {en} has shape {:?}, expected {:?}",
                at.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}

/// Explicit `[T, T]` attention map of a Toeplitz kernel: row t holds the
/// kernel centered on t, zero outside the band. With renormalization, each
/// row is rescaled to sum to one.
pub fn build_attention_map(weights: &Tensor, t: usize, boundary: Boundary) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Dimension("attention map needs T >= 1".into()));
    }
    if weights.shape().len() != 1 || weights.shape()[0] % 2 == 0 {
        return Err(Error::Dimension(format!(
            "kernel weights must be a 1-D tensor of odd length, got {:?}",
            weights.shape()
        )));
    }
    let w = weights.data();
    let d = (w.len() - 1) / 2;
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i.saturating_sub(d)..=(i + d).min(t - 1) {
            data[i * t + j] = w[j + d - i];
        }
        if boundary == Boundary::Renormalize {
            let row = &mut data[i * t..(i + 1) * t];
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::Validation(format!(
                    "cannot renormalize attention-map row {i}: weights sum to zero"
                )));
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    Tensor::new(vec![t, t], data)
}

/// Plain (non-graph) Toeplitz attention over a `[T, E]` encoding matrix.
pub fn toeplitz_attention(h: &Tensor, weights: &Tensor, boundary: Boundary) -> Result<Tensor> {
    if h.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "toeplitz_attention needs a 2-D encoding matrix, got {:?}",
            h.shape()
        )));
    }
    if weights.shape().len() != 1 || weights.shape()[0] % 2 == 0 {
        return Err(Error::Dimension(format!(
            "kernel weights must be a 1-D tensor of odd length, got {:?}",
            weights.shape()
        )));
    }
    let (t, e) = (h.rows(), h.cols());
    check_kernel_len(weights.shape()[0], t)?;
    let mut out = vec![0.0; t * e];
    conv_band_forward(h.data(), t, e, weights.data(), boundary, &mut out)?;
    Tensor::new(vec![t, e], out)
}
