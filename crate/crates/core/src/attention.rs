//! Scaled dot-product multi-head attention.
//!
//! Used in two places: the cross-modal pair, where each modality queries the
//! other, and label enhancement, where label embeddings are the queries.
//! There are no positional encodings and no masks; sequences are processed
//! one sample at a time.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Projection weights of one attention block. All four matrices are
/// `[d_model × d_model]`; `head_dim = d_model / n_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MhaParams {
    /// Glorot-uniform initialised projections registered under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(d_model, n_heads)?;
        let bound = (6.0 / (2.0 * d_model as f32)).sqrt();
        let mut mat = |name: &str| {
            store.add(
                format!("{prefix}.{name}"),
                Tensor::uniform(&[d_model, d_model], bound, rng),
            )
        };
        Ok(Self {
            w_q: mat("w_q"),
            w_k: mat("w_k"),
            w_v: mat("w_v"),
            w_o: mat("w_o"),
            n_heads,
            d_model,
        })
    }

    /// Registers explicit projection matrices.
    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        [w_q, w_k, w_v, w_o]: [Tensor; 4],
        n_heads: usize,
    ) -> Result<Self> {
        let (d_model, _) = w_q.dims2()?;
        check_heads(d_model, n_heads)?;
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d_model, d_model] {
                return Err(Error::shape("mha", &[d_model, d_model], w.shape()));
            }
        }
        Ok(Self {
            w_q: store.add(format!("{prefix}.w_q"), w_q),
            w_k: store.add(format!("{prefix}.w_k"), w_k),
            w_v: store.add(format!("{prefix}.w_v"), w_v),
            w_o: store.add(format!("{prefix}.w_o"), w_o),
            n_heads,
            d_model,
        })
    }

    /// Identity projections, handy for reductions to closed forms.
    pub fn identity(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        let eye = Tensor::eye(d_model);
        Self::from_tensors(
            store,
            prefix,
            [eye.clone(), eye.clone(), eye.clone(), eye],
            n_heads,
        )
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

fn check_heads(d_model: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::invalid(
            "mha",
            format!("d_model {d_model} is not divisible by n_heads {n_heads}"),
        ));
    }
    Ok(())
}

/// Attention output together with the per-head `[q × k]` weight matrices.
#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `concat_h(softmax((Q W_q)_h (K W_k)_hᵀ / √head_dim) (V W_v)_h) · W_o`
pub fn mha_with_weights(
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    key: Var,
    value: Var,
    params: &MhaParams,
) -> Result<MhaOutput> {
    let d = params.d_model;
    let (_, qd) = dims(tape, query)?;
    let (kn, kd) = dims(tape, key)?;
    let (vn, vd) = dims(tape, value)?;
    if qd != d || kd != d || vd != d {
        return Err(Error::invalid(
            "mha",
            format!("inputs must have d_model = {d} columns, got q {qd}, k {kd}, v {vd}"),
        ));
    }
    if kn != vn {
        return Err(Error::shape("mha", tape.shape(key), tape.shape(value)));
    }

    let w_q = tape.param(store, params.w_q);
    let w_k = tape.param(store, params.w_k);
    let w_v = tape.param(store, params.w_v);
    let w_o = tape.param(store, params.w_o);
    let q = tape.matmul(query, w_q)?;
    let k = tape.matmul(key, w_k)?;
    let v = tape.matmul(value, w_v)?;

    let hd = params.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    let mut weights = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let output = tape.matmul(joined, w_o)?;
    Ok(MhaOutput { output, weights })
}

pub fn mha(
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    key: Var,
    value: Var,
    params: &MhaParams,
) -> Result<Var> {
    Ok(mha_with_weights(tape, store, query, key, value, params)?.output)
}

/// Text attends over audio and audio attends over text, giving
/// `(H_t1, H_a1)` with the row counts of their respective queries.
pub fn cross_modal_pair(
    tape: &mut Tape,
    store: &ParamStore,
    text: Var,
    audio: Var,
    text_params: &MhaParams,
    audio_params: &MhaParams,
) -> Result<(Var, Var)> {
    let text_enriched = mha(tape, store, text, audio, audio, text_params)?;
    let audio_enriched = mha(tape, store, audio, text, text, audio_params)?;
    Ok((text_enriched, audio_enriched))
}

fn dims(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(
            "mha",
            format!("expected a matrix, got {s:?}"),
        )),
    }
}
