//! Label signal enhancement.
//!
//! Label embeddings query each modality sequence; the attended result gates
//! the pooled original features and is added back to produce one enhanced
//! vector per utterance. The attended `[N_classes × d]` block is averaged
//! over the label axis and the original sequence over time, so the gate is
//! applied to `d`-vectors.
//!
//! Between epochs the embeddings are smoothed: the value at the start of
//! the epoch is blended with the value reached after the epoch's updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{mha, MhaParams};
use crate::autodiff::{Tape, Var};
use crate::encoders::mean_pool;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const DEFAULT_MA_ALPHA: f64 = 0.99;
pub const LABEL_INIT_STD: f32 = 0.02;

/// Learnable per-class anchors shared by enhancement and the consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings {
    pub param: ParamId,
    /// Value at the start of the current epoch.
    pub snapshot: Tensor,
    pub ma_alpha: f64,
    pub n_classes: usize,
    pub d_model: usize,
}

/// `N(0, 0.02²)` entries, deterministic in `seed`.
pub fn init_labels(n_classes: usize, d_model: usize, seed: u64) -> Result<Tensor> {
    if n_classes < 2 || d_model == 0 {
        return Err(Error::invalid(
            "init_labels",
            format!("need n_classes >= 2 and d_model >= 1, got {n_classes} x {d_model}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::randn(
        &[n_classes, d_model],
        LABEL_INIT_STD,
        &mut rng,
    ))
}

impl LabelEmbeddings {
    pub fn init(
        store: &mut ParamStore,
        n_classes: usize,
        d_model: usize,
        seed: u64,
        ma_alpha: f64,
    ) -> Result<Self> {
        check_alpha(ma_alpha)?;
        let value = init_labels(n_classes, d_model, seed)?;
        Ok(Self {
            snapshot: value.clone(),
            param: store.add("labels", value),
            ma_alpha,
            n_classes,
            d_model,
        })
    }

    /// Closes an epoch. With `apply_ma` the live value becomes the blend of
    /// the snapshot and the post-epoch value; otherwise the post-epoch value
    /// carries over unchanged. Either way the result is the next snapshot.
    pub fn end_epoch(&mut self, store: &mut ParamStore, apply_ma: bool) -> Result<()> {
        if apply_ma {
            let post = store.value(self.param);
            let next = ma_update(&self.snapshot, post, self.ma_alpha)?;
            store.get_mut(self.param).value = next;
        }
        self.snapshot = store.value(self.param).clone();
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(
            "ma_update",
            format!("alpha {alpha} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// `alpha·prev + (1 − alpha)·post`
pub fn ma_update(prev: &Tensor, post: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if prev.shape() != post.shape() {
        return Err(Error::shape("ma_update", prev.shape(), post.shape()));
    }
    let data = prev
        .data()
        .iter()
        .zip(post.data())
        .map(|(&a, &b)| (alpha * a as f64 + (1.0 - alpha) * b as f64) as f32)
        .collect();
    Tensor::new(prev.shape().to_vec(), data)
}

/// Intermediate values of one enhancement.
#[derive(Debug, Clone, Copy)]
pub struct Enhanced {
    /// `[N_classes × d]` label-query attention output.
    pub attended: Var,
    /// `[1 × d]` mean of `attended` over labels.
    pub pooled: Var,
    /// `[1 × d]` sigmoid gate.
    pub gate: Var,
    /// `[1 × d]` gate ⊙ pooled original + pooled.
    pub output: Var,
}

pub fn enhance_parts(
    tape: &mut Tape,
    store: &ParamStore,
    labels: &LabelEmbeddings,
    enriched: Var,
    original: Var,
    params: &MhaParams,
) -> Result<Enhanced> {
    let l = tape.param(store, labels.param);
    let attended = mha(tape, store, l, enriched, enriched, params)?;
    let pooled = tape.mean_rows(attended)?;
    let base = mean_pool(tape, original)?;
    if tape.shape(base) != tape.shape(pooled) {
        return Err(Error::shape(
            "enhance",
            tape.shape(base),
            tape.shape(pooled),
        ));
    }
    let gate = tape.sigmoid(pooled);
    let gated = tape.mul(gate, base)?;
    let output = tape.add(gated, pooled)?;
    Ok(Enhanced {
        attended,
        pooled,
        gate,
        output,
    })
}

/// Enhanced `[1 × d]` utterance vector for one modality.
pub fn enhance(
    tape: &mut Tape,
    store: &ParamStore,
    labels: &LabelEmbeddings,
    enriched: Var,
    original: Var,
    params: &MhaParams,
) -> Result<Var> {
    Ok(enhance_parts(tape, store, labels, enriched, original, params)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{mean_rows, reference_mha, sigmoid, to_mat};

    fn labels_from(store: &mut ParamStore, t: Tensor) -> LabelEmbeddings {
        let (n, d) = t.dims2().unwrap();
        LabelEmbeddings {
            snapshot: t.clone(),
            param: store.add("labels", t),
            ma_alpha: DEFAULT_MA_ALPHA,
            n_classes: n,
            d_model: d,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_labels(4, 256, 7).unwrap();
        let b = init_labels(4, 256, 7).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[4, 256]);
        assert!(!a.bit_eq(&init_labels(4, 256, 8).unwrap()));
        assert!(init_labels(1, 8, 0).is_err());

        let mut store = ParamStore::new();
        let l = LabelEmbeddings::init(&mut store, 4, 8, 1, 0.99).unwrap();
        assert!(l.snapshot.bit_eq(store.value(l.param)));
    }

    #[test]
    fn init_mean_within_three_standard_errors() {
        let (n, d) = (4usize, 256usize);
        for seed in 0..5 {
            let t = init_labels(n, d, seed).unwrap();
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / (n * d) as f64;
            let bound = 3.0 * 0.02 / ((n * d) as f64).sqrt();
            assert!(mean.abs() < bound, "seed {seed}: {mean} vs {bound}");
        }
    }

    #[test]
    fn single_key_enhancement_closed_form() {
        let mut store = ParamStore::new();
        let p = MhaParams::identity(&mut store, "e", 3, 1).unwrap();
        let labels = labels_from(
            &mut store,
            Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.0, 0.9]]).unwrap(),
        );
        let h = [0.5f32, -1.0, 2.0];
        let h0 = [1.0f32, 3.0, -2.0];
        let mut tape = Tape::new();
        let enriched = tape.constant(&Tensor::row_vector(h.to_vec()).unwrap());
        let original = tape.constant(&Tensor::row_vector(h0.to_vec()).unwrap());
        let e = enhance_parts(&mut tape, &store, &labels, enriched, original, &p).unwrap();
        for row in tape.value_f64(e.attended).chunks(3) {
            for (a, b) in row.iter().zip(&h) {
                assert!((a - *b as f64).abs() < 1e-12);
            }
        }
        let out = tape.value_f64(e.output);
        for j in 0..3 {
            let want = sigmoid(h[j] as f64) * h0[j] as f64 + h[j] as f64;
            assert!((out[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gate_leaves_attended_only() {
        let mut store = ParamStore::new();
        let eye = Tensor::eye(2);
        let neg = Tensor::new(vec![2, 2], vec![-100.0, 0.0, 0.0, -100.0]).unwrap();
        let p = MhaParams::from_tensors(&mut store, "e", [eye.clone(), eye.clone(), eye, neg], 1)
            .unwrap();
        let labels = labels_from(
            &mut store,
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let mut tape = Tape::new();
        let enriched = tape.constant(&Tensor::row_vector(vec![1.0, 2.0]).unwrap());
        let original = tape.constant(&Tensor::row_vector(vec![5.0, -7.0]).unwrap());
        let e = enhance_parts(&mut tape, &store, &labels, enriched, original, &p).unwrap();
        assert!(tape.value_f64(e.gate).iter().all(|g| *g < 1e-30));
        let out = tape.value_f64(e.output);
        assert!((out[0] + 100.0).abs() < 1e-9 && (out[1] + 200.0).abs() < 1e-9);
    }

    #[test]
    fn matches_scripted_rederivation() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "e", 8, 4, &mut rng).unwrap();
        let lt = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let labels = labels_from(&mut store, lt.clone());
        let x1 = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let x0 = Tensor::randn(&[3, 8], 1.0, &mut rng);

        let h2 = reference_mha(&lt, &x1, &x1, p.ids().map(|id| store.value(id)), 4);
        let h2 = mean_rows(&h2);
        let h0 = mean_rows(&to_mat(&x0));
        let want: Vec<f64> = (0..8).map(|j| sigmoid(h2[j]) * h0[j] + h2[j]).collect();

        let mut tape = Tape::new();
        let (a, b) = (tape.constant(&x1), tape.constant(&x0));
        let out = enhance(&mut tape, &store, &labels, a, b, &p).unwrap();
        assert_eq!(tape.shape(out), &[1, 8]);
        for (g, w) in tape.value_f64(out).iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_reach_label_embeddings() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "e", 4, 2, &mut rng).unwrap();
        let labels = LabelEmbeddings::init(&mut store, 3, 4, 2, 0.99).unwrap();
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let out = enhance(&mut tape, &store, &labels, xv, xv, &p).unwrap();
        let l = tape.sum(out);
        let g = tape.backward(l).unwrap();
        let gl = g.param(labels.param).unwrap();
        assert!(gl.iter().any(|v| v.abs() > 1e-9));

        let ids: Vec<_> = p.ids().into_iter().chain([labels.param]).collect();
        let rep = crate::autodiff::grad_check(&mut store, &ids, 1e-3, |tape, s| {
            let xv = tape.constant(&x);
            let out = enhance(tape, s, &labels, xv, xv, &p)?;
            Ok(tape.sum(out))
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    #[test]
    fn ma_update_cases() {
        let prev = Tensor::row_vector(vec![1.0, -2.0]).unwrap();
        let post = Tensor::row_vector(vec![0.0, 4.0]).unwrap();
        assert!(ma_update(&prev, &post, 1.0).unwrap().bit_eq(&prev));
        assert!(ma_update(&prev, &post, 0.0).unwrap().bit_eq(&post));
        let s = ma_update(&Tensor::scalar(1.0), &Tensor::scalar(0.0), 0.99).unwrap();
        assert_eq!(s.data()[0], 0.99);
        assert!(ma_update(&prev, &Tensor::scalar(1.0), 0.5).is_err());
        assert!(ma_update(&prev, &post, 1.5).is_err());
    }

    #[test]
    fn ma_iteration_follows_geometric_decay() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l0 = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let dist = |a: &Tensor| {
            a.data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&l0);
        let mut l = l0;
        for t in 1..=20 {
            l = ma_update(&l, &c, 0.9).unwrap();
            let want = 0.9f64.powi(t) * d0;
            assert!((dist(&l) - want).abs() / want < 1e-5, "t={t}");
        }
    }

    #[test]
    fn end_epoch_refreshes_snapshot() {
        let mut store = ParamStore::new();
        let mut labels = LabelEmbeddings::init(&mut store, 2, 3, 0, 0.5).unwrap();
        let start = labels.snapshot.clone();
        store.get_mut(labels.param).value = Tensor::zeros(&[2, 3]);
        labels.end_epoch(&mut store, true).unwrap();
        let want = ma_update(&start, &Tensor::zeros(&[2, 3]), 0.5).unwrap();
        assert!(store.value(labels.param).bit_eq(&want));
        assert!(labels.snapshot.bit_eq(&want));

        store.get_mut(labels.param).value = Tensor::ones(&[2, 3]);
        labels.end_epoch(&mut store, false).unwrap();
        assert!(store.value(labels.param).bit_eq(&Tensor::ones(&[2, 3])));
        assert!(labels.snapshot.bit_eq(&Tensor::ones(&[2, 3])));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ma_update_is_convex(
                pairs in prop::collection::vec((-100f32..100.0, -100f32..100.0), 1..32),
                alpha in 0.0f64..=1.0,
            ) {
                let n = pairs.len();
                let prev = Tensor::new(vec![n], pairs.iter().map(|p| p.0).collect()).unwrap();
                let post = Tensor::new(vec![n], pairs.iter().map(|p| p.1).collect()).unwrap();
                let out = ma_update(&prev, &post, alpha).unwrap();
                for (o, (a, b)) in out.data().iter().zip(&pairs) {
                    prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
                }
            }
        }
    }
}
