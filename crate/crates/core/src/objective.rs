//! Training objective: cross-entropy plus the attribution–prediction
//! consistency term.
//!
//! The consistency term compares, per sample, the softmax over cosine
//! similarities between the fused feature and every label embedding (`q`)
//! with the predicted class distribution (`p`) using the Jensen–Shannon
//! divergence, then averages over the batch. Natural logarithms throughout,
//! so every per-sample divergence lies in `[0, ln 2]`.
//!
//! The free functions here evaluate on plain tensors; [`graph`] records the
//! same quantities on a [`Tape`](crate::autodiff::Tape) for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_simplex, js_div_f64, NUM_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub apc: f64,
    pub total: f64,
    pub ce_weight: f64,
    pub apc_weight: f64,
}

/// `ce_weight·ce + apc_weight·apc`
pub fn total_loss(ce: f64, apc: f64, ce_weight: f64, apc_weight: f64) -> Result<LossBreakdown> {
    if ce_weight < 0.0 || apc_weight < 0.0 {
        return Err(Error::invalid(
            "total_loss",
            format!("weights must be non-negative, got {ce_weight} and {apc_weight}"),
        ));
    }
    Ok(LossBreakdown {
        ce,
        apc,
        total: ce_weight * ce + apc_weight * apc,
        ce_weight,
        apc_weight,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_sim(h: &[f64], l: &[f64]) -> Result<f64> {
    if h.len() != l.len() {
        return Err(Error::shape("cosine_sim", &[h.len()], &[l.len()]));
    }
    let (nh, nl) = (norm(h), norm(l));
    for n in [nh, nl] {
        if n < NUM_FLOOR {
            return Err(Error::DegenerateVector {
                op: "cosine_sim",
                norm: n,
            });
        }
    }
    let dot: f64 = h.iter().zip(l).map(|(a, b)| a * b).sum();
    Ok((dot / (nh * nl)).clamp(-1.0, 1.0))
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `softmax_j cos(h, L_j)` over the label rows.
pub fn similarity_dist(h: &[f64], labels: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = labels.dims2()?;
    if n < 2 {
        return Err(Error::invalid(
            "similarity_dist",
            "need at least two labels",
        ));
    }
    let sims = (0..n)
        .map(|j| cosine_sim(h, &to_f64(labels.row(j))))
        .collect::<Result<Vec<_>>>()?;
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
    Ok(sims.iter().map(|s| (s - max).exp() / z).collect())
}

/// Jensen–Shannon divergence between two simplices.
pub fn js_div(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape("js_div", &[q.len()], &[p.len()]));
    }
    check_simplex("js_div", q)?;
    check_simplex("js_div", p)?;
    Ok(js_div_f64(q, p))
}

/// Mean over samples of `js_div(q_i, p_i)`.
pub fn apc_loss(fused: &Tensor, labels: &Tensor, p: &Tensor) -> Result<f64> {
    let (m, d) = fused.dims2()?;
    let (n, ld) = labels.dims2()?;
    if ld != d {
        return Err(Error::shape("apc_loss", fused.shape(), labels.shape()));
    }
    if p.shape() != [m, n] {
        return Err(Error::shape("apc_loss", p.shape(), &[m, n]));
    }
    let mut acc = 0.0;
    for i in 0..m {
        let q = similarity_dist(&to_f64(fused.row(i)), labels)?;
        acc += js_div(&q, &to_f64(p.row(i)))?;
    }
    Ok(acc / m as f64)
}

/// `−(1/M) Σ ln p[i, y_i]` for rows of predicted probabilities.
pub fn ce_loss(p: &Tensor, targets: &[usize]) -> Result<f64> {
    let (m, n) = p.dims2()?;
    if targets.len() != m {
        return Err(Error::shape("ce_loss", p.shape(), &[targets.len()]));
    }
    let mut acc = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        if y >= n {
            return Err(Error::ClassOutOfRange {
                class: y,
                n_classes: n,
            });
        }
        let row = to_f64(p.row(i));
        check_simplex("ce_loss", &row)?;
        acc -= row[y].max(NUM_FLOOR).ln();
    }
    Ok(acc / m as f64)
}

/// Differentiable versions recorded on a tape.
pub mod graph {
    use crate::autodiff::{Tape, Var};
    use crate::error::{Error, Result};

    /// `[M × N]` row-wise softmax of cosine similarities between `fused`
    /// rows and `labels` rows.
    pub fn similarity_dist(tape: &mut Tape, fused: Var, labels: Var) -> Result<Var> {
        if tape.shape(labels).first().copied().unwrap_or(0) < 2 {
            return Err(Error::invalid(
                "similarity_dist",
                "need at least two labels",
            ));
        }
        let h = tape.normalize_rows(fused)?;
        let l = tape.normalize_rows(labels)?;
        let lt = tape.transpose(l)?;
        let sims = tape.matmul(h, lt)?;
        tape.softmax(sims, 1)
    }

    /// Batch mean of per-sample JS divergences; gradients reach the fused
    /// features, the label embeddings and (through `p`) the logits.
    pub fn apc_loss(tape: &mut Tape, fused: Var, labels: Var, p: Var) -> Result<Var> {
        let q = similarity_dist(tape, fused, labels)?;
        let per_sample = tape.js_div_rows(q, p)?;
        Ok(tape.mean(per_sample))
    }

    pub fn ce_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
        tape.cross_entropy(logits, targets)
    }

    pub fn total_loss(
        tape: &mut Tape,
        ce: Var,
        apc: Var,
        ce_weight: f64,
        apc_weight: f64,
    ) -> Result<Var> {
        let a = tape.scale(ce, ce_weight);
        let b = tape.scale(apc, apc_weight);
        tape.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::tensor::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn cosine_cases() {
        let l = [0.3, -1.0, 2.0];
        assert!((cosine_sim(&l, &l).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let h: Vec<f64> = l.iter().map(|x| 2.0 * x).collect();
        assert!((cosine_sim(&h, &l).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn similarity_dist_cases() {
        let labels = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let q = similarity_dist(&[0.5, -3.0], &labels).unwrap();
        assert!(q.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));

        let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let q = similarity_dist(&[2.0, 0.0], &labels).unwrap();
        let e = std::f64::consts::E;
        assert!((q[0] - e / (e + 1.0 / e)).abs() < 1e-12);
        assert!((q[0] - 0.8808).abs() < 1e-4 && (q[1] - 0.1192).abs() < 1e-4);

        // loop oracle: explicit dot/norm then softmax
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let h: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut sims = vec![];
        for j in 0..4 {
            let (mut dot, mut nh, mut nl) = (0.0, 0.0, 0.0);
            for k in 0..6 {
                let l = labels.at2(j, k) as f64;
                dot += h[k] * l;
                nh += h[k] * h[k];
                nl += l * l;
            }
            sims.push(dot / (nh.sqrt() * nl.sqrt()));
        }
        let z: f64 = sims.iter().map(|s| s.exp()).sum();
        let got = similarity_dist(&h, &labels).unwrap();
        for (g, s) in got.iter().zip(&sims) {
            assert!((g - s.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn js_div_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_div(&p, &p).unwrap(), 0.0);
        assert!((js_div(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-12);
        assert!(js_div(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_div(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn js_div_matches_direct_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = random_simplex(&mut rng, 5);
            let p = random_simplex(&mut rng, 5);
            let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            let kl = |a: &[f64]| a.iter().zip(&m).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
            let want = 0.5 * kl(&p) + 0.5 * kl(&q);
            let got = js_div(&q, &p).unwrap();
            assert!((got - want).abs() < 1e-6);
            assert!((got - js_div(&p, &q).unwrap()).abs() < 1e-7);
        }
    }

    /// Independent per-sample script: cosine, softmax, JS, averaged.
    fn scripted_apc(fused: &Tensor, labels: &Tensor, p: &Tensor) -> f64 {
        let (m, d) = fused.dims2().unwrap();
        let (n, _) = labels.dims2().unwrap();
        let mut total = 0.0;
        for i in 0..m {
            let mut e = vec![0.0; n];
            for j in 0..n {
                let (mut dot, mut a, mut b) = (0.0f64, 0.0f64, 0.0f64);
                for k in 0..d {
                    let (x, y) = (fused.at2(i, k) as f64, labels.at2(j, k) as f64);
                    dot += x * y;
                    a += x * x;
                    b += y * y;
                }
                e[j] = (dot / (a.sqrt() * b.sqrt())).exp();
            }
            let z: f64 = e.iter().sum();
            let mut js = 0.0;
            for j in 0..n {
                let q = e[j] / z;
                let pp = p.at2(i, j) as f64;
                let mid = 0.5 * (pp + q);
                js += 0.5 * pp * (pp / mid).ln() + 0.5 * q * (q / mid).ln();
            }
            total += js;
        }
        total / m as f64
    }

    fn prob_rows(rng: &mut impl Rng, m: usize, n: usize) -> Tensor {
        let data: Vec<f32> = (0..m)
            .flat_map(|_| random_simplex(rng, n))
            .map(|x| x as f32)
            .collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn apc_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fused = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let labels = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let p = prob_rows(&mut rng, 3, 4);
        let got = apc_loss(&fused, &labels, &p).unwrap();
        assert!((got - scripted_apc(&fused, &labels, &p)).abs() < 1e-6);

        let mut tape = Tape::new();
        let (f, l, pv) = (
            tape.constant(&fused),
            tape.constant(&labels),
            tape.constant(&p),
        );
        let g = graph::apc_loss(&mut tape, f, l, pv).unwrap();
        assert!((tape.scalar(g) - got).abs() < 1e-9);

        // p equal to q
        let q: Vec<f32> = (0..3)
            .flat_map(|i| {
                similarity_dist(
                    &fused.row(i).iter().map(|&x| x as f64).collect::<Vec<_>>(),
                    &labels,
                )
                .unwrap()
            })
            .map(|x| x as f32)
            .collect();
        let qt = Tensor::new(vec![3, 4], q).unwrap();
        assert!(apc_loss(&fused, &labels, &qt).unwrap() < 1e-7);

        // M = 1 reduces to one divergence
        let f1 = Tensor::row_vector(fused.row(0).to_vec()).unwrap();
        let p1 = Tensor::row_vector(p.row(0).to_vec()).unwrap();
        let q1 = similarity_dist(
            &fused.row(0).iter().map(|&x| x as f64).collect::<Vec<_>>(),
            &labels,
        )
        .unwrap();
        let want = js_div(&q1, &p.row(0).iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap();
        assert!((apc_loss(&f1, &labels, &p1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn apc_invariant_to_label_row_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fused = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let labels = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let p = prob_rows(&mut rng, 3, 4);
        let base = apc_loss(&fused, &labels, &p).unwrap();
        for j in 0..4 {
            let mut scaled = labels.clone();
            let d = 5;
            scaled.data_mut()[j * d..(j + 1) * d]
                .iter_mut()
                .for_each(|x| *x *= 3.0);
            assert!((apc_loss(&fused, &scaled, &p).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_loss_cases() {
        let uniform = Tensor::full(&[2, 4], 0.25);
        assert!((ce_loss(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-7);
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(ce_loss(&onehot, &[1, 0]).unwrap(), 0.0);
        assert!(matches!(
            ce_loss(&onehot, &[2, 0]),
            Err(Error::ClassOutOfRange { class: 2, .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = prob_rows(&mut rng, 5, 3);
        let y = [0usize, 2, 1, 1, 0];
        let want = -(0..5).map(|i| (p.at2(i, y[i]) as f64).ln()).sum::<f64>() / 5.0;
        assert!((ce_loss(&p, &y).unwrap() - want).abs() < 1e-6);

        // graph version from logits agrees with ln of the softmax
        let logits = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let lv = tape.constant(&logits);
        let ce = graph::ce_loss(&mut tape, lv, &y).unwrap();
        let probs = tape.softmax(lv, 1).unwrap();
        let pt = Tensor::new(
            vec![5, 3],
            tape.value_f64(probs).iter().map(|&x| x as f32).collect(),
        )
        .unwrap();
        assert!((tape.scalar(ce) - ce_loss(&pt, &y).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn ce_decreases_as_mass_moves_to_truth() {
        let mut prev = f64::INFINITY;
        for k in 0..=9 {
            let t = 0.05 + 0.1 * k as f32;
            let p = Tensor::from_rows(&[vec![1.0 - t, t]]).unwrap();
            let ce = ce_loss(&p, &[1]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
    }

    #[test]
    fn total_loss_cases() {
        let l = total_loss(1.0, 0.2, 1.0, 0.05).unwrap();
        assert!((l.total - 1.01).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 0.3, 1.0, 0.0).unwrap().total, 0.7);
        assert_eq!(total_loss(0.0, 0.0, 1.0, 0.05).unwrap().total, 0.0);
        assert!(total_loss(1.0, 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn joint_objective_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let fused = store.add("fused", Tensor::randn(&[2, 5], 1.0, &mut rng));
        let labels = store.add("labels", Tensor::randn(&[3, 5], 1.0, &mut rng));
        let logits = store.add("logits", Tensor::randn(&[2, 3], 1.0, &mut rng));
        let rep = grad_check(&mut store, &[fused, labels, logits], 1e-3, |tape, s| {
            let (f, l, z) = (
                tape.param(s, fused),
                tape.param(s, labels),
                tape.param(s, logits),
            );
            let p = tape.softmax(z, 1)?;
            let apc = graph::apc_loss(tape, f, l, p)?;
            let ce = graph::ce_loss(tape, z, &[0, 2])?;
            graph::total_loss(tape, ce, apc, 1.0, 0.5)
        })
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
                let s: f64 = v.iter().sum();
                (s > 1e-6).then(|| v.into_iter().map(|x| x / s).collect())
            })
        }

        fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (2usize..8).prop_flat_map(|n| (simplex(n), simplex(n)))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn js_div_bounds_and_symmetry((q, p) in pair()) {
                let a = js_div(&q, &p).unwrap();
                let b = js_div(&p, &q).unwrap();
                prop_assert!((a - b).abs() <= 1e-7);
                prop_assert!(a >= 0.0);
                prop_assert!(a <= LN_2 + 1e-7);
                prop_assert!(js_div(&q, &q).unwrap() <= 1e-9);
            }
        }
    }
}
