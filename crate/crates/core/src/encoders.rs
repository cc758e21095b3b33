//! Modality encoders: a bidirectional LSTM over text features, summation of
//! the two audio streams, an affine audio projection and temporal pooling.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Width of ingested text features.
pub const TEXT_DIM: usize = 768;
/// Width of ingested audio features.
pub const AUDIO_DIM: usize = 1024;

/// One LSTM direction. Gate blocks are packed column-wise in the order
/// input, forget, cell candidate, output: `w` is `[d_in × 4h]`, `u` is
/// `[h × 4h]`, `b` is `[4h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_hidden as f32).sqrt();
        Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform(&[d_in, 4 * d_hidden], bound, rng),
            ),
            u: store.add(
                format!("{prefix}.u"),
                Tensor::uniform(&[d_hidden, 4 * d_hidden], bound, rng),
            ),
            b: store.add(
                format!("{prefix}.b"),
                Tensor::uniform(&[4 * d_hidden], bound, rng),
            ),
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w, self.u, self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmParams {
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub d_in: usize,
    pub d_hidden: usize,
}

impl BiLstmParams {
    /// Independent directions with `d_hidden = d_model / 2`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d_hidden = half_width(d_model)?;
        Ok(Self {
            forward: LstmCell::init(store, &format!("{prefix}.fwd"), d_in, d_hidden, rng),
            backward: LstmCell::init(store, &format!("{prefix}.bwd"), d_in, d_hidden, rng),
            d_in,
            d_hidden,
        })
    }

    /// Both directions share one cell.
    pub fn tied(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d_hidden = half_width(d_model)?;
        let cell = LstmCell::init(store, &format!("{prefix}.cell"), d_in, d_hidden, rng);
        Ok(Self {
            forward: cell,
            backward: cell,
            d_in,
            d_hidden,
        })
    }

    pub fn d_model(&self) -> usize {
        2 * self.d_hidden
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.forward.ids().to_vec();
        if self.backward != self.forward {
            ids.extend(self.backward.ids());
        }
        ids
    }
}

fn half_width(d_model: usize) -> Result<usize> {
    if d_model < 2 || !d_model.is_multiple_of(2) {
        return Err(Error::invalid(
            "bilstm",
            format!("d_model {d_model} must be even"),
        ));
    }
    Ok(d_model / 2)
}

/// Hidden states of one direction, indexed by time step.
fn run_direction(
    tape: &mut Tape,
    store: &ParamStore,
    input_proj: Var,
    cell: &LstmCell,
    d_hidden: usize,
    order: impl Iterator<Item = usize>,
    n: usize,
) -> Result<Vec<Var>> {
    let u = tape.param(store, cell.u);
    let b = tape.param(store, cell.b);
    let zeros = Tensor::zeros(&[1, d_hidden]);
    let mut h = tape.constant(&zeros);
    let mut c = tape.constant(&zeros);
    let mut out = vec![h; n];
    for t in order {
        let x_t = tape.row(input_proj, t)?;
        let rec = tape.matmul(h, u)?;
        let z = tape.add(x_t, rec)?;
        let z = tape.add_bias(z, b)?;
        let gi = tape.slice_cols(z, 0, d_hidden)?;
        let gf = tape.slice_cols(z, d_hidden, d_hidden)?;
        let gg = tape.slice_cols(z, 2 * d_hidden, d_hidden)?;
        let go = tape.slice_cols(z, 3 * d_hidden, d_hidden)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
        out[t] = h;
    }
    Ok(out)
}

/// Encodes `[n × d_in]` text features into `[n × 2·d_hidden]`; row `i` is
/// the forward state at `i` concatenated with the backward state at `i`.
pub fn bilstm_encode(
    tape: &mut Tape,
    store: &ParamStore,
    text: Var,
    params: &BiLstmParams,
) -> Result<Var> {
    let (n, d_in) = match tape.shape(text) {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::invalid(
                "bilstm",
                format!("expected a matrix, got {s:?}"),
            ))
        }
    };
    if n == 0 {
        return Err(Error::EmptySequence("bilstm_encode"));
    }
    if d_in != params.d_in {
        return Err(Error::shape("bilstm", tape.shape(text), &[n, params.d_in]));
    }
    let h = params.d_hidden;

    let w_f = tape.param(store, params.forward.w);
    let proj_f = tape.matmul(text, w_f)?;
    let fwd = run_direction(tape, store, proj_f, &params.forward, h, 0..n, n)?;

    let proj_b = if params.backward == params.forward {
        proj_f
    } else {
        let w_b = tape.param(store, params.backward.w);
        tape.matmul(text, w_b)?
    };
    let bwd = run_direction(tape, store, proj_b, &params.backward, h, (0..n).rev(), n)?;

    let fwd = tape.stack_rows(&fwd)?;
    let bwd = tape.stack_rows(&bwd)?;
    let out = tape.concat_cols(&[fwd, bwd])?;
    debug_assert_eq!(tape.shape(out), &[n, params.d_model()]);
    Ok(out)
}

/// Elementwise sum of the two audio streams.
pub fn combine_audio(high_level: &Tensor, spectral: &Tensor) -> Result<Tensor> {
    if high_level.shape() != spectral.shape() {
        return Err(Error::shape(
            "combine_audio",
            high_level.shape(),
            spectral.shape(),
        ));
    }
    let data = high_level
        .data()
        .iter()
        .zip(spectral.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(high_level.shape().to_vec(), data)
}

/// Affine map from ingested audio width to `d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionParams {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl ProjectionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f32).sqrt();
        Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform(&[d_in, d_out], bound, rng),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        prefix: &str,
        w: Tensor,
        b: Tensor,
    ) -> Result<Self> {
        let (d_in, d_out) = w.dims2()?;
        if b.shape() != [d_out] {
            return Err(Error::shape("project", w.shape(), b.shape()));
        }
        Ok(Self {
            w: store.add(format!("{prefix}.w"), w),
            b: store.add(format!("{prefix}.b"), b),
            d_in,
            d_out,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

pub fn project_audio(
    tape: &mut Tape,
    store: &ParamStore,
    audio: Var,
    params: &ProjectionParams,
) -> Result<Var> {
    match tape.shape(audio) {
        [_, d] if *d == params.d_in => {}
        s => {
            return Err(Error::invalid(
                "project_audio",
                format!("expected {} input columns, got shape {s:?}", params.d_in),
            ))
        }
    }
    let w = tape.param(store, params.w);
    let b = tape.param(store, params.b);
    let y = tape.matmul(audio, w)?;
    tape.add_bias(y, b)
}

/// Column means of a `[len × d]` sequence as a `[1 × d]` row.
pub fn mean_pool(tape: &mut Tape, seq: Var) -> Result<Var> {
    match tape.shape(seq) {
        [0, _] => Err(Error::EmptySequence("mean_pool")),
        [_, _] => tape.mean_rows(seq),
        s => Err(Error::invalid(
            "mean_pool",
            format!("expected a matrix, got {s:?}"),
        )),
    }
}
