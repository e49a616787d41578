//! Differentiable primitives. Each forward function has a matching
//! `*_backward` that maps an upstream gradient to input gradients
//! (a vector-Jacobian product).

use super::matrix::{gemm, DenseMatrix};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_PINV_ITERS: usize = 6;
/// Enough iterations for the pseudo-inverse to converge on the landmark
/// kernels of the exact regime (`m = n`, n ≤ 128); used by the checks that
/// compare against exact attention.
pub const EXACT_PINV_ITERS: usize = 30;

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm(a, false, b, false)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm(a, false, b, true)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm(a, true, b, false)
}

/// Returns `(∂a, ∂b)` for `c = a · b` given `∂c`.
pub fn matmul_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    grad: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    Ok((matmul_nt(grad, b)?, matmul_tn(a, grad)?))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// Backward of [`softmax_rows`] expressed through its output `y`.
pub fn softmax_rows_backward(y: &DenseMatrix, grad: &DenseMatrix) -> Result<DenseMatrix> {
    if y.shape() != grad.shape() {
        return Err(Error::shape("softmax_rows_backward", y.shape(), grad.shape()));
    }
    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), grad.row(r));
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    Ok(out)
}

fn check_affine(x: &DenseMatrix, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != x.cols() {
        return Err(Error::shape("layer_norm gamma", x.shape(), (1, gamma.len())));
    }
    if beta.len() != x.cols() {
        return Err(Error::shape("layer_norm beta", x.shape(), (1, beta.len())));
    }
    Ok(())
}

/// Per-row mean and `1/sqrt(var + eps)` using the biased variance.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm(x: &DenseMatrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<DenseMatrix> {
    check_affine(x, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::arg("layer_norm eps must be positive"));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (mean, inv_std) = row_stats(x.row(r), eps);
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gamma).zip(beta) {
            *o = (*o - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

pub struct LayerNormGrads {
    pub x: DenseMatrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn layer_norm_backward(
    x: &DenseMatrix,
    gamma: &[f64],
    eps: f64,
    grad: &DenseMatrix,
) -> Result<LayerNormGrads> {
    if x.shape() != grad.shape() {
        return Err(Error::shape("layer_norm_backward", x.shape(), grad.shape()));
    }
    if gamma.len() != x.cols() {
        return Err(Error::shape("layer_norm gamma", x.shape(), (1, gamma.len())));
    }
    let d = x.cols();
    let n = d as f64;
    let mut gx = DenseMatrix::zeros(x.rows(), d);
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..x.rows() {
        let (mean, inv_std) = row_stats(x.row(r), eps);
        let (xr, gr) = (x.row(r), grad.row(r));
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * inv_std;
            dxhat[j] = gr[j] * gamma[j];
            ggamma[j] += gr[j] * xhat[j];
            gbeta[j] += gr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
            *o = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        x: gx,
        gamma: ggamma,
        beta: gbeta,
    })
}

/// Boundaries of `m` contiguous segments over `n` rows; the first `n % m`
/// segments hold one extra row.
pub fn segment_bounds(n: usize, m: usize) -> Vec<(usize, usize)> {
    let (base, rem) = (n / m, n % m);
    let mut start = 0;
    (0..m)
        .map(|j| {
            let len = base + usize::from(j < rem);
            let seg = (start, start + len);
            start += len;
            seg
        })
        .collect()
}

/// Means of `m` near-equal contiguous row segments.
pub fn segment_means(x: &DenseMatrix, m: usize) -> Result<DenseMatrix> {
    if m == 0 || m > x.rows() {
        return Err(Error::arg(format!(
            "segment count {m} out of range 1..={}",
            x.rows()
        )));
    }
    if m == x.rows() {
        return Ok(x.clone());
    }
    let mut out = DenseMatrix::zeros(m, x.cols());
    for (j, (s, e)) in segment_bounds(x.rows(), m).into_iter().enumerate() {
        let inv = 1.0 / (e - s) as f64;
        let o = out.row_mut(j);
        for r in s..e {
            for (acc, v) in o.iter_mut().zip(x.row(r)) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

pub fn segment_means_backward(rows: usize, grad: &DenseMatrix) -> Result<DenseMatrix> {
    let m = grad.rows();
    if m == 0 || m > rows {
        return Err(Error::arg(format!("segment count {m} out of range 1..={rows}")));
    }
    let mut out = DenseMatrix::zeros(rows, grad.cols());
    for (j, (s, e)) in segment_bounds(rows, m).into_iter().enumerate() {
        let inv = 1.0 / (e - s) as f64;
        for r in s..e {
            for (o, g) in out.row_mut(r).iter_mut().zip(grad.row(j)) {
                *o = g * inv;
            }
        }
    }
    Ok(out)
}

fn check_pinv_input(a: &DenseMatrix, iters: usize) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::shape("iterative_pinv", a.shape(), (a.cols(), a.rows())));
    }
    if iters == 0 {
        return Err(Error::arg("iterative_pinv needs at least one iteration"));
    }
    let norm = a.norm_one() * a.norm_inf();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::arg("iterative_pinv of a zero or non-finite matrix"));
    }
    Ok(norm)
}

/// One step `Z ← ¼ Z (13I − AZ(15I − AZ(7I − AZ)))`, returning the
/// intermediates the backward pass needs.
struct PinvStep {
    az: DenseMatrix,
    t1: DenseMatrix,
    t2: DenseMatrix,
    t3: DenseMatrix,
}

fn pinv_step(a: &DenseMatrix, z: &DenseMatrix) -> (DenseMatrix, PinvStep) {
    let az = matmul(a, z).expect("square");
    let t1 = az.scaled_identity_minus(7.0);
    let t2 = matmul(&az, &t1).expect("square").scaled_identity_minus(15.0);
    let t3 = matmul(&az, &t2).expect("square").scaled_identity_minus(13.0);
    let next = matmul(z, &t3).expect("square").scale(0.25);
    (next, PinvStep { az, t1, t2, t3 })
}

/// Moore–Penrose pseudo-inverse by the cubic-convergence polynomial
/// iteration started from `Z₀ = Aᵀ / (‖A‖₁‖A‖∞)`.
pub fn iterative_pinv(a: &DenseMatrix, iters: usize) -> Result<DenseMatrix> {
    Ok(iterative_pinv_trace(a, iters)?.pop().expect("at least Z0"))
}

/// Every iterate `Z₀, Z₁, …, Z_iters`.
pub fn iterative_pinv_trace(a: &DenseMatrix, iters: usize) -> Result<Vec<DenseMatrix>> {
    let norm = check_pinv_input(a, iters)?;
    let mut zs = Vec::with_capacity(iters + 1);
    zs.push(a.transpose().scale(1.0 / norm));
    for _ in 0..iters {
        let (next, _) = pinv_step(a, zs.last().expect("non-empty"));
        zs.push(next);
    }
    Ok(zs)
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Gradient of [`iterative_pinv`] by differentiating the unrolled
/// iteration, including the data-dependent scaling of `Z₀`.
pub fn iterative_pinv_backward(
    a: &DenseMatrix,
    iters: usize,
    grad: &DenseMatrix,
) -> Result<DenseMatrix> {
    let norm = check_pinv_input(a, iters)?;
    if grad.shape() != a.shape() {
        return Err(Error::shape("iterative_pinv_backward", a.shape(), grad.shape()));
    }
    let n = a.rows();
    let mut zs = vec![a.transpose().scale(1.0 / norm)];
    let mut steps = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (next, step) = pinv_step(a, zs.last().expect("non-empty"));
        zs.push(next);
        steps.push(step);
    }

    let mut ga = DenseMatrix::zeros(n, n);
    let mut gz = grad.clone();
    for (step, z) in steps.iter().zip(&zs).rev() {
        // Z' = ¼ Z T3
        let mut gz_prev = matmul_nt(&gz, &step.t3)?.scale(0.25);
        let gt3 = matmul_tn(z, &gz)?.scale(0.25);
        // T3 = 13I − P T2
        let gw = gt3.scale(-1.0);
        let mut gp = matmul_nt(&gw, &step.t2)?;
        let gt2 = matmul_tn(&step.az, &gw)?;
        // T2 = 15I − P T1
        let gu = gt2.scale(-1.0);
        gp.add_assign(&matmul_nt(&gu, &step.t1)?)?;
        let gt1 = matmul_tn(&step.az, &gu)?;
        // T1 = 7I − P
        gp.add_assign(&gt1.scale(-1.0))?;
        // P = A Z
        ga.add_assign(&matmul_nt(&gp, z)?)?;
        gz_prev.add_assign(&matmul_tn(a, &gp)?)?;
        gz = gz_prev;
    }

    // Z₀ = s·Aᵀ with s = 1 / (‖A‖₁‖A‖∞)
    let s = 1.0 / norm;
    ga.add_assign(&gz.transpose().scale(s))?;
    let at = a.transpose();
    let ds = gz.dot(&at)?;
    let n1 = a.norm_one();
    let ninf = a.norm_inf();
    let col = argmax((0..n).map(|c| (0..n).map(|r| a.get(r, c).abs()).sum::<f64>()));
    let row = argmax((0..n).map(|r| a.row(r).iter().map(|x| x.abs()).sum::<f64>()));
    let dn1 = -ds * s / n1;
    let dninf = -ds * s / ninf;
    for r in 0..n {
        let v = a.get(r, col);
        let cur = ga.get(r, col);
        ga.set(r, col, cur + dn1 * sign(v));
    }
    for c in 0..n {
        let v = a.get(row, c);
        let cur = ga.get(row, c);
        ga.set(row, c, cur + dninf * sign(v));
    }
    Ok(ga)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &DenseMatrix, grad: &DenseMatrix) -> Result<DenseMatrix> {
    if x.shape() != grad.shape() {
        return Err(Error::shape("relu_backward", x.shape(), grad.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    DenseMatrix::new(x.rows(), x.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_matrix, random_softmax_matrix};
    use approx::assert_abs_diff_eq;

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let m = DenseMatrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &m).unwrap(), m);
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = DenseMatrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            DenseMatrix::from_rows(&[[2.0], [4.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::rng_for(3, "matmul", 0);
        let a = random_matrix(&mut rng, 5, 7, 1.0);
        let b = random_matrix(&mut rng, 7, 3, 1.0);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        // large enough to take the chunked path
        let a = random_matrix(&mut rng, 200, 150, 1.0);
        let b = random_matrix(&mut rng, 150, 160, 1.0);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-10);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&DenseMatrix::zeros(1, 4));
        assert!(s.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let s = softmax_rows(&DenseMatrix::from_rows(&[[1000.0, 0.0]]));
        assert_abs_diff_eq!(s.get(0, 0), 1.0, epsilon = 1e-15);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
        let s = softmax_rows(&DenseMatrix::from_rows(&[[1f64.ln(), 2f64.ln(), 3f64.ln()]]));
        for (j, want) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].into_iter().enumerate() {
            assert_abs_diff_eq!(s.get(0, j), want, epsilon = 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        let c = layer_norm(&DenseMatrix::filled(2, 3, 4.2), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));

        let two = layer_norm(
            &DenseMatrix::from_rows(&[[1.0, 3.0]]),
            &[1.0, 1.0],
            &[0.0, 0.0],
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert_abs_diff_eq!(two.get(0, 0), -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(two.get(0, 1), 1.0, epsilon = 1e-4);

        let mut rng = crate::rng::rng_for(1, "ln", 0);
        let x = random_matrix(&mut rng, 4, 3, 2.0);
        let b = [0.5, -1.0, 2.0];
        let out = layer_norm(&x, &[0.0; 3], &b, LAYER_NORM_EPS).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), &b);
        }
        assert!(layer_norm(&x, &[1.0; 2], &b, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn segment_means_examples() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 9.0]]);
        let two = segment_means(&x, 2).unwrap();
        assert_eq!(two, DenseMatrix::from_rows(&[[2.0, 3.0], [6.0, 7.5]]));
        assert_eq!(segment_means(&x, 4).unwrap(), x);
        assert_eq!(segment_means(&x, 1).unwrap(), x.column_means());
        assert!(segment_means(&x, 0).is_err());
        assert!(segment_means(&x, 5).is_err());
        assert_eq!(segment_bounds(7, 3), vec![(0, 3), (3, 5), (5, 7)]);
    }

    #[test]
    fn pinv_examples() {
        let i = iterative_pinv(&DenseMatrix::identity(3), 6).unwrap();
        assert!(i.max_abs_diff(&DenseMatrix::identity(3)) < 1e-10);

        let d = iterative_pinv(&DenseMatrix::from_diag(&[2.0, 4.0]), 6).unwrap();
        assert!(d.max_abs_diff(&DenseMatrix::from_diag(&[0.5, 0.25])) < 1e-6);

        // Six iterations reach 1e-4 on diagonally dominant kernels only;
        // a generic random softmax matrix needs the converged count.
        let zaz_residual = |a: &DenseMatrix, iters| {
            let z = iterative_pinv(a, iters).unwrap();
            let zaz = matmul(&matmul(&z, a).unwrap(), &z).unwrap();
            zaz.sub(&z).unwrap().frobenius_norm() / z.frobenius_norm()
        };
        for seed in 0..100 {
            let mut rng = crate::rng::rng_for(seed, "pinv", 0);
            let a = random_softmax_matrix(&mut rng, 4);
            assert!(zaz_residual(&a, EXACT_PINV_ITERS) < 1e-4, "seed {seed}");
            let dominant = well_conditioned_softmax(&mut rng, 4);
            assert!(zaz_residual(&dominant, DEFAULT_PINV_ITERS) < 1e-4, "seed {seed}");
        }
    }

    fn well_conditioned_softmax(rng: &mut crate::rng::Rng, n: usize) -> DenseMatrix {
        softmax_rows(&random_matrix(rng, n, n, 1.0).add(&DenseMatrix::identity(n).scale(3.0)).unwrap())
    }

    /// Gauss-Jordan with partial pivoting.
    fn direct_inverse(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut m = DenseMatrix::concat_cols(&[a, &DenseMatrix::identity(n)]).unwrap();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m.get(i, c).abs().total_cmp(&m.get(j, c).abs())).unwrap();
            for k in 0..2 * n {
                let (x, y) = (m.get(c, k), m.get(p, k));
                m.set(c, k, y);
                m.set(p, k, x);
            }
            let piv = m.get(c, c);
            for k in 0..2 * n {
                m.set(c, k, m.get(c, k) / piv);
            }
            for r in (0..n).filter(|&r| r != c) {
                let f = m.get(r, c);
                for k in 0..2 * n {
                    m.set(r, k, m.get(r, k) - f * m.get(c, k));
                }
            }
        }
        m.slice_cols(n, 2 * n)
    }

    #[test]
    fn pinv_error_decreases_monotonically() {
        for seed in 0..50 {
            let mut rng = crate::rng::rng_for(seed, "pinv-monotone", 0);
            let n = 2 + (seed as usize % 7);
            let a = well_conditioned_softmax(&mut rng, n);
            let inv = direct_inverse(&a);
            let errs: Vec<f64> = iterative_pinv_trace(&a, 6)
                .unwrap()
                .iter()
                .map(|z| z.sub(&inv).unwrap().frobenius_norm())
                .collect();
            for w in errs[1..].windows(2) {
                assert!(w[1] <= w[0] || w[1] < 1e-12, "seed {seed}: {errs:?}");
            }
            assert!(errs[6] < errs[0], "seed {seed}: {errs:?}");
        }
    }

    #[test]
    fn pinv_errors() {
        assert!(matches!(
            iterative_pinv(&DenseMatrix::zeros(2, 3), 6),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            iterative_pinv(&DenseMatrix::zeros(3, 3), 6),
            Err(Error::Argument(_))
        ));
    }
}
