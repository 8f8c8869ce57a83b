//! Single-head scaled dot-product attention with explicit backward pass.
//!
//! `attend(xq, xkv)` computes `softmax(Q Kᵀ / √d_k) V W_O` with `Q = xq W_Q`,
//! `K = xkv W_K`, `V = xkv W_V`. Self-attention passes the same matrix twice;
//! cross-attention uses one radar row as the query against that point's
//! image tokens.

use super::tensor::{softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `D x d_k`
    pub query: Matrix,
    /// `D x d_k`
    pub key: Matrix,
    /// `D x d_k`
    pub value: Matrix,
    /// `d_k x D`
    pub output: Matrix,
}

impl AttentionWeights {
    pub fn attention_dim(&self) -> usize {
        self.query.cols
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights, `n_query x n_key`.
    pub weights: Matrix,
    /// `weights * v`
    pub mixed: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub d_xq: Matrix,
    pub d_xkv: Matrix,
}

pub fn attend(xq: &Matrix, xkv: &Matrix, w: &AttentionWeights) -> (Matrix, AttentionCache) {
    let q = xq.matmul(&w.query);
    let k = xkv.matmul(&w.key);
    let v = xkv.matmul(&w.value);
    let mut scores = q.matmul_t(&k);
    scores.scale(1.0 / (w.attention_dim() as f64).sqrt());
    softmax_rows(&mut scores);
    let mixed = scores.matmul(&v);
    let out = mixed.matmul(&w.output);
    (out, AttentionCache { q, k, v, weights: scores, mixed })
}

pub fn attend_backward(
    xq: &Matrix,
    xkv: &Matrix,
    w: &AttentionWeights,
    cache: &AttentionCache,
    d_out: &Matrix,
) -> AttentionGrads {
    let scale = 1.0 / (w.attention_dim() as f64).sqrt();
    let d_output = cache.mixed.t_matmul(d_out);
    let d_mixed = d_out.matmul_t(&w.output);
    let d_weights = d_mixed.matmul_t(&cache.v);
    let d_v = cache.weights.t_matmul(&d_mixed);

    let a = &cache.weights;
    let mut d_scores = Matrix::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let (arow, grow) = (a.row(r), d_weights.row(r));
        let dot: f64 = arow.iter().zip(grow).map(|(x, y)| x * y).sum();
        for ((o, ai), gi) in d_scores.row_mut(r).iter_mut().zip(arow).zip(grow) {
            *o = ai * (gi - dot) * scale;
        }
    }
    let d_q = d_scores.matmul(&cache.k);
    let d_k = d_scores.t_matmul(&cache.q);

    let mut d_xkv = d_k.matmul_t(&w.key);
    d_xkv.add_assign(&d_v.matmul_t(&w.value));
    AttentionGrads {
        query: xq.t_matmul(&d_q),
        key: xkv.t_matmul(&d_k),
        value: xkv.t_matmul(&d_v),
        output: d_output,
        d_xq: d_q.matmul_t(&w.query),
        d_xkv,
    }
}

/// Radar-to-radar attention over all points of a frame (`K x D -> K x D`).
pub fn self_attention(x: &Matrix, w: &AttentionWeights) -> Matrix {
    attend(x, x, w).0
}

/// One radar feature (`D`) attending to its own patch tokens (`N_img x D`).
pub fn cross_attention(x_rad: &[f64], x_img: &Matrix, w: &AttentionWeights) -> Vec<f64> {
    let q = Matrix::from_vec(1, x_rad.len(), x_rad.to_vec());
    attend(&q, x_img, w).0.data
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn weights(rng: &mut ChaCha8Rng, d: usize, dk: usize) -> AttentionWeights {
        AttentionWeights {
            query: random(rng, d, dk),
            key: random(rng, d, dk),
            value: random(rng, d, dk),
            output: random(rng, dk, d),
        }
    }

    /// Nested-loop attention, independent of the matrix helpers.
    fn oracle(xq: &Matrix, xkv: &Matrix, w: &AttentionWeights) -> Vec<Vec<f64>> {
        let (d, dk) = (w.query.rows, w.query.cols);
        let proj = |x: &Matrix, m: &Matrix, i: usize| -> Vec<f64> {
            (0..dk).map(|j| (0..d).map(|t| x.get(i, t) * m.get(t, j)).sum()).collect()
        };
        let qs: Vec<Vec<f64>> = (0..xq.rows).map(|i| proj(xq, &w.query, i)).collect();
        let ks: Vec<Vec<f64>> = (0..xkv.rows).map(|i| proj(xkv, &w.key, i)).collect();
        let vs: Vec<Vec<f64>> = (0..xkv.rows).map(|i| proj(xkv, &w.value, i)).collect();
        let mut out = Vec::new();
        for q in &qs {
            let s: Vec<f64> = ks
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mix = vec![0.0; dk];
            for (ei, v) in e.iter().zip(&vs) {
                for j in 0..dk {
                    mix[j] += ei / z * v[j];
                }
            }
            out.push((0..d).map(|c| (0..dk).map(|j| mix[j] * w.output.get(j, c)).sum()).collect());
        }
        out
    }

    #[test]
    fn single_key_passes_value_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut rng, 6, 3);
        let x = random(&mut rng, 1, 6);
        let (out, cache) = attend(&x, &x, &w);
        assert_eq!(cache.weights.data, vec![1.0]);
        let expected = x.matmul(&w.value).matmul(&w.output);
        assert_eq!(out, expected);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = weights(&mut rng, 5, 4);
        let row: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_rows(&vec![row; 4]);
        let out = self_attention(&x, &w);
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn self_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let w = weights(&mut rng, 8, 5);
            let x = random(&mut rng, 4, 8);
            let out = self_attention(&x, &w);
            for (r, row) in oracle(&x, &x, &w).iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!((out.get(r, c) - v).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn cross_attention_single_and_duplicate_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = weights(&mut rng, 6, 3);
        let img = random(&mut rng, 1, 6);
        let q1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected = img.matmul(&w.value).matmul(&w.output).data;
        assert_eq!(cross_attention(&q1, &img, &w), expected);
        assert_eq!(cross_attention(&q2, &img, &w), expected);

        let dup = Matrix::from_rows(&[img.row(0).to_vec(), img.row(0).to_vec(), img.row(0).to_vec()]);
        let got = cross_attention(&q1, &dup, &w);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..8 {
            let w = weights(&mut rng, 7, 4);
            let img = random(&mut rng, n, 7);
            let q = random(&mut rng, 1, 7);
            let got = cross_attention(q.row(0), &img, &w);
            for (a, b) in got.iter().zip(&oracle(&q, &img, &w)[0]) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = weights(&mut rng, 4, 3);
        let xq = random(&mut rng, 2, 4);
        let xkv = random(&mut rng, 5, 4);
        let probe = random(&mut rng, 2, 4);
        let objective = |xq: &Matrix, xkv: &Matrix, w: &AttentionWeights| -> f64 {
            let (o, _) = attend(xq, xkv, w);
            o.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attend(&xq, &xkv, &w);
        let g = attend_backward(&xq, &xkv, &w, &cache, &probe);
        let h = 1e-6;
        let check = |analytic: f64, numeric: f64| {
            assert!((analytic - numeric).abs() <= 1e-6 * (1.0 + analytic.abs()), "{analytic} vs {numeric}");
        };
        for i in 0..xq.data.len() {
            let (mut p, mut m) = (xq.clone(), xq.clone());
            p.data[i] += h;
            m.data[i] -= h;
            check(g.d_xq.data[i], (objective(&p, &xkv, &w) - objective(&m, &xkv, &w)) / (2.0 * h));
        }
        for i in 0..xkv.data.len() {
            let (mut p, mut m) = (xkv.clone(), xkv.clone());
            p.data[i] += h;
            m.data[i] -= h;
            check(g.d_xkv.data[i], (objective(&xq, &p, &w) - objective(&xq, &m, &w)) / (2.0 * h));
        }
        for i in 0..w.key.data.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.key.data[i] += h;
            m.key.data[i] -= h;
            check(g.key.data[i], (objective(&xq, &xkv, &p) - objective(&xq, &xkv, &m)) / (2.0 * h));
        }
    }
}
