//! Expert-gate fusion of the two modality vectors and the MLP classifier.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// `w` is `[2·d_model × 2]`, `b` is `[2]`; column 0 scores audio, column 1 text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
    pub d_model: usize,
}

impl GateParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (2 * d_model + 2) as f32).sqrt();
        Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform(&[2 * d_model, 2], bound, rng),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[2])),
            d_model,
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Two-layer perceptron: `relu(h·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub n_classes: usize,
}

impl ClassifierParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_hidden: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b1 = (6.0 / (d_model + d_hidden) as f32).sqrt();
        let b2 = (6.0 / (d_hidden + n_classes) as f32).sqrt();
        Self {
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::uniform(&[d_model, d_hidden], b1, rng),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::uniform(&[d_hidden, n_classes], b2, rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[n_classes])),
            n_classes,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

fn check_row(tape: &Tape, v: Var, d: usize, op: &'static str) -> Result<()> {
    if tape.shape(v) != [1, d] {
        return Err(Error::shape(op, tape.shape(v), &[1, d]));
    }
    Ok(())
}

/// `(g_a, g_t) = softmax([h_a, h_t]·w + b)`, each a `[1×1]` value.
pub fn gate(
    tape: &mut Tape,
    store: &ParamStore,
    audio: Var,
    text: Var,
    params: &GateParams,
) -> Result<(Var, Var)> {
    check_row(tape, audio, params.d_model, "gate")?;
    check_row(tape, text, params.d_model, "gate")?;
    let joined = tape.concat_cols(&[audio, text])?;
    let w = tape.param(store, params.w);
    let b = tape.param(store, params.b);
    let scores = tape.matmul(joined, w)?;
    let scores = tape.add_bias(scores, b)?;
    let g = tape.softmax(scores, 1)?;
    Ok((tape.slice_cols(g, 0, 1)?, tape.slice_cols(g, 1, 1)?))
}

/// `g_a·h_a + g_t·h_t` with scalar gates.
pub fn fuse(tape: &mut Tape, audio: Var, text: Var, g_audio: Var, g_text: Var) -> Result<Var> {
    let a = tape.mul_scalar(audio, g_audio)?;
    let t = tape.mul_scalar(text, g_text)?;
    tape.add(a, t)
}

/// Returns `(logits, p)`, both `[1 × N]` for a `[1 × d]` input (or `[M × N]`
/// for a stacked batch).
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    fused: Var,
    params: &ClassifierParams,
) -> Result<(Var, Var)> {
    let w1 = tape.param(store, params.w1);
    let b1 = tape.param(store, params.b1);
    let w2 = tape.param(store, params.w2);
    let b2 = tape.param(store, params.b2);
    let h = tape.matmul(fused, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add_bias(logits, b2)?;
    let p = tape.softmax(logits, 1)?;
    Ok((logits, p))
}
