//! Loop-based f64 reference implementations used as test oracles. Nothing
//! here touches the tape.

use crate::tensor::Tensor;

pub(crate) type Mat = Vec<Vec<f64>>;

pub(crate) fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r)
        .map(|i| (0..c).map(|j| t.at2(i, j) as f64).collect())
        .collect()
}

pub(crate) fn matmul(a: &Mat, b: &Mat) -> Mat {
    let k = b.len();
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|t| row[t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::MIN, f64::max);
    let z: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    xs.iter().map(|x| (x - m).exp() / z).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn mean_rows(a: &Mat) -> Vec<f64> {
    let c = a[0].len();
    (0..c)
        .map(|j| a.iter().map(|r| r[j]).sum::<f64>() / a.len() as f64)
        .collect()
}

/// Multi-head attention written as explicit loops over heads, queries and keys.
pub(crate) fn reference_mha(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: [&Tensor; 4],
    heads: usize,
) -> Mat {
    let (qp, kp, vp) = (
        matmul(&to_mat(q), &to_mat(w[0])),
        matmul(&to_mat(k), &to_mat(w[1])),
        matmul(&to_mat(v), &to_mat(w[2])),
    );
    let d = q.shape()[1];
    let hd = d / heads;
    let mut concat = vec![vec![0.0; d]; qp.len()];
    for h in 0..heads {
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| {
                    (0..hd)
                        .map(|t| qi[h * hd + t] * kj[h * hd + t])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for t in 0..hd {
                concat[i][h * hd + t] = a.iter().zip(&vp).map(|(a, vj)| a * vj[h * hd + t]).sum();
            }
        }
    }
    matmul(&concat, &to_mat(w[3]))
}
