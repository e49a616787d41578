//! Exact softmax attention and multi-head Nyström attention.
//!
//! The Nyström path approximates `softmax(QKᵀ/√d)·V` through `m` landmark
//! rows: `F · pinv(A) · (B · V)` with `F = softmax(Q K̃ᵀ/√d)`,
//! `A = softmax(Q̃ K̃ᵀ/√d)` and `B = softmax(Q̃ Kᵀ/√d)`, where `Q̃`, `K̃`
//! are contiguous-segment means. With `m` equal to the sequence length the
//! landmarks are the rows themselves and the result equals exact attention.

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, softmax_rows, DenseMatrix, Tape, Var, DEFAULT_PINV_ITERS};

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_LANDMARKS: usize = 64;

/// Shape hyperparameters of a multi-head Nyström layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Requested landmark count; clamped to the sequence length per call.
    pub landmarks: usize,
    pub pinv_iters: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: DEFAULT_HEADS,
            landmarks: DEFAULT_LANDMARKS,
            pinv_iters: DEFAULT_PINV_ITERS,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "width {d} is not divisible into {} heads",
                self.heads
            )));
        }
        if self.landmarks == 0 {
            return Err(Error::arg("landmark count must be at least 1"));
        }
        if self.pinv_iters == 0 {
            return Err(Error::arg("pinv_iters must be at least 1"));
        }
        Ok(())
    }

    pub fn effective_landmarks(&self, seq_len: usize) -> usize {
        self.landmarks.min(seq_len)
    }
}

/// Weights and configuration of one multi-head Nyström layer; every
/// projection is `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    pub config: AttentionConfig,
}

impl AttentionParams {
    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != (d, d) {
                return Err(Error::shape("attention projection", w.shape(), (d, d)));
            }
        }
        self.config.validate(d)
    }
}

/// Tape handles for the four projections of one layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

fn check_qkv(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    Ok(())
}

/// `softmax_rows(q kᵀ / √d) · v`
pub fn exact_attention(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = softmax_rows(&matmul_nt(q, k)?.scale(scale));
    matmul(&scores, v)
}

pub fn exact_attention_on(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(tape.value(q), tape.value(k), tape.value(v))?;
    let scale = 1.0 / (tape.value(q).cols() as f64).sqrt();
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, scale);
    let p = tape.softmax_rows(s);
    tape.matmul(p, v)
}

pub fn nystrom_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    m: usize,
    iters: usize,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = nystrom_attention_on(&mut tape, q, k, v, m, iters)?;
    Ok(tape.value(out).clone())
}

pub fn nystrom_attention_on(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    m: usize,
    iters: usize,
) -> Result<Var> {
    check_qkv(tape.value(q), tape.value(k), tape.value(v))?;
    let n = tape.value(k).rows().min(tape.value(q).rows());
    if m == 0 || m > n {
        return Err(Error::arg(format!("landmark count {m} out of range 1..={n}")));
    }
    let scale = 1.0 / (tape.value(q).cols() as f64).sqrt();
    let q_land = tape.segment_means(q, m)?;
    let k_land = tape.segment_means(k, m)?;

    let kernel = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let s = tape.matmul_nt(a, b)?;
        let s = tape.scale(s, scale);
        Ok(tape.softmax_rows(s))
    };
    let f = kernel(tape, q, k_land)?;
    let a = kernel(tape, q_land, k_land)?;
    let b = kernel(tape, q_land, k)?;

    let a_inv = tape.iterative_pinv(a, iters)?;
    let bv = tape.matmul(b, v)?;
    let zbv = tape.matmul(a_inv, bv)?;
    tape.matmul(f, zbv)
}

/// Projects, splits into heads, runs Nyström attention per head,
/// concatenates and projects back. Output shape equals `x`'s.
pub fn multi_head_nystrom(x: &DenseMatrix, params: &AttentionParams) -> Result<DenseMatrix> {
    params.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = AttentionVars {
        w_q: tape.constant(params.w_q.clone()),
        w_k: tape.constant(params.w_k.clone()),
        w_v: tape.constant(params.w_v.clone()),
        w_o: tape.constant(params.w_o.clone()),
    };
    let out = multi_head_nystrom_on(&mut tape, xv, vars, &params.config)?;
    Ok(tape.value(out).clone())
}

pub fn multi_head_nystrom_on(
    tape: &mut Tape,
    x: Var,
    w: AttentionVars,
    config: &AttentionConfig,
) -> Result<Var> {
    let d = tape.value(w.w_q).rows();
    if tape.value(x).cols() != d {
        return Err(Error::shape("multi_head_nystrom input", tape.value(x).shape(), (tape.value(x).rows(), d)));
    }
    config.validate(d)?;
    let m = config.effective_landmarks(tape.value(x).rows());
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let dh = d / config.heads;
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        heads.push(nystrom_attention_on(tape, qh, kh, vh, m, config.pinv_iters)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(joined, w.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_matrix;
    use crate::rng::rng_for;
    use crate::numerics::EXACT_PINV_ITERS;

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn exact_single_key_returns_value_row() {
        let q = DenseMatrix::from_rows(&[[0.3, -1.0]]);
        let k = DenseMatrix::from_rows(&[[2.0, 5.0]]);
        let v = DenseMatrix::from_rows(&[[7.0, 8.0, 9.0]]);
        assert_eq!(exact_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn exact_zero_query_averages_values() {
        let mut rng = rng_for(1, "attn", 0);
        let k = random_matrix(&mut rng, 6, 4, 1.0);
        let v = random_matrix(&mut rng, 6, 3, 1.0);
        let out = exact_attention(&DenseMatrix::zeros(5, 4), &k, &v).unwrap();
        let means = v.column_means();
        for r in 0..5 {
            for c in 0..3 {
                assert!((out.get(r, c) - means.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn exact_matches_hand_composition() {
        let mut rng = rng_for(2, "attn", 0);
        let q = random_matrix(&mut rng, 6, 8, 1.0);
        let k = random_matrix(&mut rng, 6, 8, 1.0);
        let v = random_matrix(&mut rng, 6, 8, 1.0);
        let mut scores = DenseMatrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let s: f64 = (0..8).map(|c| q.get(i, c) * k.get(j, c)).sum();
                scores.set(i, j, s / 8f64.sqrt());
            }
        }
        let hand = matmul(&softmax_rows(&scores), &v).unwrap();
        assert!(exact_attention(&q, &k, &v).unwrap().max_abs_diff(&hand) < 1e-12);
    }

    #[test]
    fn exact_shape_errors() {
        let a = DenseMatrix::zeros(3, 4);
        assert!(exact_attention(&a, &DenseMatrix::zeros(3, 5), &a).is_err());
        assert!(exact_attention(&a, &a, &DenseMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn nystrom_single_row() {
        let q = DenseMatrix::from_rows(&[[0.5, -0.5]]);
        let v = DenseMatrix::from_rows(&[[3.0, 4.0]]);
        let out = nystrom_attention(&q, &q, &v, 1, 6).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn nystrom_full_landmarks_is_exact() {
        let mut rng = rng_for(3, "attn", 0);
        let q = random_matrix(&mut rng, 12, 8, 1.0);
        let k = random_matrix(&mut rng, 12, 8, 1.0);
        let v = random_matrix(&mut rng, 12, 8, 1.0);
        let approx = nystrom_attention(&q, &k, &v, 12, EXACT_PINV_ITERS).unwrap();
        assert!(rel_err(&approx, &exact_attention(&q, &k, &v).unwrap()) < 1e-5);
    }

    #[test]
    fn nystrom_zero_query_averages_values() {
        let mut rng = rng_for(4, "attn", 0);
        let k = random_matrix(&mut rng, 10, 4, 1.0);
        let v = random_matrix(&mut rng, 10, 4, 1.0);
        let q = DenseMatrix::zeros(10, 4);
        let means = v.column_means();
        for m in [1, 3, 7, 10] {
            let out = nystrom_attention(&q, &k, &v, m, 6).unwrap();
            for r in 0..10 {
                for c in 0..4 {
                    assert!((out.get(r, c) - means.get(0, c)).abs() < 1e-6, "m={m}");
                }
            }
        }
    }

    #[test]
    fn nystrom_rejects_bad_landmarks() {
        let a = DenseMatrix::zeros(3, 2);
        assert!(matches!(nystrom_attention(&a, &a, &a, 0, 6), Err(Error::Argument(_))));
        assert!(matches!(nystrom_attention(&a, &a, &a, 4, 6), Err(Error::Argument(_))));
    }

    fn identity_params(d: usize, heads: usize, landmarks: usize) -> AttentionParams {
        AttentionParams {
            w_q: DenseMatrix::identity(d),
            w_k: DenseMatrix::identity(d),
            w_v: DenseMatrix::identity(d),
            w_o: DenseMatrix::identity(d),
            config: AttentionConfig {
                heads,
                landmarks,
                pinv_iters: 6,
            },
        }
    }

    #[test]
    fn single_head_identity_projections() {
        let mut rng = rng_for(5, "attn", 0);
        let x = random_matrix(&mut rng, 9, 4, 1.0);
        let p = identity_params(4, 1, 3);
        let got = multi_head_nystrom(&x, &p).unwrap();
        let want = nystrom_attention(&x, &x, &x, 3, 6).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_value_projection_zeroes_output() {
        let mut rng = rng_for(6, "attn", 0);
        let x = random_matrix(&mut rng, 7, 4, 1.0);
        let mut p = identity_params(4, 2, 3);
        p.w_q = random_matrix(&mut rng, 4, 4, 1.0);
        p.w_v = DenseMatrix::zeros(4, 4);
        let out = multi_head_nystrom(&x, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_decouple_under_block_diagonal_projections() {
        let mut rng = rng_for(7, "attn", 0);
        let (n, d, half) = (8, 6, 3);
        let x = random_matrix(&mut rng, n, d, 1.0);
        let block_diag = |a: &DenseMatrix, b: &DenseMatrix| {
            DenseMatrix::from_fn(d, d, |r, c| match (r < half, c < half) {
                (true, true) => a.get(r, c),
                (false, false) => b.get(r - half, c - half),
                _ => 0.0,
            })
        };
        let blocks: Vec<(DenseMatrix, DenseMatrix)> = (0..4)
            .map(|_| (random_matrix(&mut rng, half, half, 0.5), random_matrix(&mut rng, half, half, 0.5)))
            .collect();
        let two = AttentionParams {
            w_q: block_diag(&blocks[0].0, &blocks[0].1),
            w_k: block_diag(&blocks[1].0, &blocks[1].1),
            w_v: block_diag(&blocks[2].0, &blocks[2].1),
            w_o: block_diag(&blocks[3].0, &blocks[3].1),
            config: AttentionConfig {
                heads: 2,
                landmarks: 4,
                pinv_iters: 6,
            },
        };
        let out = multi_head_nystrom(&x, &two).unwrap();
        for (h, pick) in [(0usize, 0usize), (1, 1)] {
            let sel = |(a, b): &(DenseMatrix, DenseMatrix)| if pick == 0 { a.clone() } else { b.clone() };
            let single = AttentionParams {
                w_q: sel(&blocks[0]),
                w_k: sel(&blocks[1]),
                w_v: sel(&blocks[2]),
                w_o: sel(&blocks[3]),
                config: AttentionConfig {
                    heads: 1,
                    landmarks: 4,
                    pinv_iters: 6,
                },
            };
            let xs = x.slice_cols(h * half, (h + 1) * half);
            let want = multi_head_nystrom(&xs, &single).unwrap();
            let got = out.slice_cols(h * half, (h + 1) * half);
            assert!(got.max_abs_diff(&want) < 1e-12, "head {h}");
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let p = identity_params(6, 4, 3);
        assert!(multi_head_nystrom(&DenseMatrix::zeros(3, 6), &p).is_err());
    }
}
