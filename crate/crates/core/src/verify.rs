//! Independent oracles: exact-attention comparison, central-difference
//! gradient checking, and entropy subadditivity over discrete joints.

use std::fmt;

use rand::Rng as _;
use rand_distr::Exp1;

use crate::attention::{exact_attention, nystrom_attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::fixtures::{random_bag, random_matrix};
use crate::model::{init_params, Bag, ModelConfig, ModelParams};
use crate::numerics::{ops, DenseMatrix, Tape, Var, DEFAULT_PINV_ITERS, EXACT_PINV_ITERS};
use crate::par;
use crate::rng::{rng_for, Rng};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Central differences of an affine function carry no truncation error, so
/// a wider step only shrinks the roundoff.
pub const LINEAR_STEP: f64 = 1e-2;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const LINEAR_TOLERANCE: f64 = 1e-9;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const CORRUPTION_FLOOR: f64 = 1e-2;

// ---------------------------------------------------------------- attention

/// `‖nyström − exact‖_F / ‖exact‖_F`, or the absolute error when the exact
/// output is zero.
pub fn attention_error(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix, m: usize, iters: usize) -> Result<f64> {
    let exact = exact_attention(q, k, v)?;
    let approx = nystrom_attention(q, k, v, m, iters)?;
    let diff = approx.sub(&exact)?.frobenius_norm();
    let norm = exact.frobenius_norm();
    Ok(if norm == 0.0 { diff } else { diff / norm })
}

/// Mean [`attention_error`] over `seeds` random `n x d` problems at each
/// landmark count.
/// `(landmarks, mean relative error)` pairs.
pub type ErrorCurve = Vec<(usize, f64)>;

pub fn attention_error_curve(
    n: usize,
    d: usize,
    ms: &[usize],
    seeds: u64,
    seed: u64,
    iters: usize,
) -> Result<ErrorCurve> {
    let problems: Vec<[DenseMatrix; 3]> = (0..seeds)
        .map(|s| {
            let mut rng = rng_for(seed, "attention-curve", s);
            [
                random_matrix(&mut rng, n, d, 1.0),
                random_matrix(&mut rng, n, d, 1.0),
                random_matrix(&mut rng, n, d, 1.0),
            ]
        })
        .collect();
    ms.iter()
        .map(|&m| {
            let errs = par::try_map_indexed(problems.len(), |i| {
                let [q, k, v] = &problems[i];
                attention_error(q, k, v, m, iters)
            })?;
            Ok((m, errs.iter().sum::<f64>() / errs.len() as f64))
        })
        .collect()
}

// ---------------------------------------------------------------- gradients

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `grad(inputs)` against central differences of `loss` for every
/// coordinate of every input.
pub fn gradcheck<L, G>(inputs: &[DenseMatrix], loss: L, grad: G, step: f64) -> Result<GradcheckReport>
where
    L: Fn(&[DenseMatrix]) -> Result<f64> + Sync,
    G: Fn(&[DenseMatrix]) -> Result<Vec<DenseMatrix>>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::arg(format!("gradcheck step {step} must be positive")));
    }
    let analytic = grad(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::arg(format!("{} gradients for {} inputs", analytic.len(), inputs.len())));
    }
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
        .collect();
    let numeric = par::try_map_indexed(coords.len(), |c| {
        let (i, j) = coords[c];
        let mut probe = inputs.to_vec();
        let x0 = inputs[i].data()[j];
        probe[i].data_mut()[j] = x0 + step;
        let up = loss(&probe)?;
        probe[i].data_mut()[j] = x0 - step;
        let down = loss(&probe)?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::arg(format!("non-finite loss probing input {i}[{j}]")));
        }
        Ok((up - down) / (2.0 * step))
    })?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: coords.len(),
    };
    for (&(i, j), n) in coords.iter().zip(numeric) {
        if analytic[i].shape() != inputs[i].shape() {
            return Err(Error::shape("gradcheck gradient", analytic[i].shape(), inputs[i].shape()));
        }
        let e = rel_error(analytic[i].data()[j], n);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = e;
            report.worst = (i, j);
        }
    }
    Ok(report)
}

/// Gradcheck of `⟨W, f(inputs)⟩` for a fixed random weighting `W`, with `f`
/// recorded on a [`Tape`].
pub fn tape_gradcheck<F>(inputs: &[DenseMatrix], build: F, seed: u64, step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let run = |xs: &[DenseMatrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, _, out) = run(inputs)?;
    let (r, c) = tape.value(out).shape();
    let weights = random_matrix(&mut rng_for(seed, "gradcheck-weights", 0), r, c, 1.0);
    let loss = |xs: &[DenseMatrix]| {
        let (tape, _, out) = run(xs)?;
        tape.value(out).dot(&weights)
    };
    let grad = |xs: &[DenseMatrix]| {
        let (tape, vars, out) = run(xs)?;
        let g = tape.backward_with(out, weights.clone())?;
        Ok(vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| g.get(v).cloned().unwrap_or_else(|| DenseMatrix::zeros(x.rows(), x.cols())))
            .collect())
    };
    gradcheck(inputs, loss, grad, step)
}

/// Gradcheck of the bag loss with respect to every model parameter.
pub fn model_gradcheck(params: &ModelParams, bag: &Bag, step: f64) -> Result<GradcheckReport> {
    let inputs: Vec<DenseMatrix> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let with = |xs: &[DenseMatrix]| {
        let mut p = params.clone();
        for (t, x) in p.tensors_mut().into_iter().zip(xs) {
            *t = x.clone();
        }
        p
    };
    gradcheck(
        &inputs,
        |xs| Ok(with(xs).loss_and_grads(bag)?.loss),
        |xs| Ok(with(xs).loss_and_grads(bag)?.grads),
        step,
    )
}

/// Row softmax with a deliberately wrong backward rule (`y ⊙ g`, the
/// `−y·⟨y, g⟩` term dropped). Only useful as a negative control.
pub fn corrupted_softmax_gradcheck(seed: u64, step: f64) -> Result<GradcheckReport> {
    let mut rng = rng_for(seed, "corrupted-softmax", 0);
    let x = random_matrix(&mut rng, 4, 5, 1.0);
    let w = random_matrix(&mut rng, 4, 5, 1.0);
    gradcheck(
        &[x],
        |xs| ops::softmax_rows(&xs[0]).dot(&w),
        |xs| Ok(vec![ops::softmax_rows(&xs[0]).hadamard(&w)?]),
        step,
    )
}

// ---------------------------------------------------------------- entropy

/// Dense joint probability table over discrete variables, last variable
/// fastest-varying.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    support_sizes: Vec<usize>,
    probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyGap {
    pub h_joint: f64,
    pub sum_marginals: f64,
    /// `sum_marginals − h_joint`, nonnegative up to rounding.
    pub gap: f64,
}

impl JointDistribution {
    pub fn new(support_sizes: Vec<usize>, probabilities: Vec<f64>) -> Result<Self> {
        if support_sizes.is_empty() || support_sizes.contains(&0) {
            return Err(Error::arg("every variable needs a non-empty support"));
        }
        let cells: usize = support_sizes.iter().product();
        if probabilities.len() != cells {
            return Err(Error::arg(format!("{} probabilities for {cells} cells", probabilities.len())));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::arg("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::arg(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            support_sizes,
            probabilities,
        })
    }

    /// Product of independent marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let sizes: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let mut table = vec![1.0];
        for m in marginals {
            table = table.iter().flat_map(|&p| m.iter().map(move |&q| p * q)).collect();
        }
        let total: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= total);
        Self::new(sizes, table)
    }

    /// Random table with exponential weights; roughly one cell in five is
    /// zeroed to exercise `0·ln 0`.
    pub fn random(rng: &mut Rng, support_sizes: Vec<usize>) -> Result<Self> {
        let cells: usize = support_sizes.iter().product();
        let mut table: Vec<f64> = (0..cells)
            .map(|_| {
                let w: f64 = rng.sample(Exp1);
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    w
                }
            })
            .collect();
        if table.iter().all(|&p| p == 0.0) {
            table[0] = 1.0;
        }
        let total: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= total);
        Self::new(support_sizes, table)
    }

    pub fn variables(&self) -> usize {
        self.support_sizes.len()
    }

    pub fn support_sizes(&self) -> &[usize] {
        &self.support_sizes
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Marginal of variable `t`, by enumerating every cell.
    pub fn marginal(&self, t: usize) -> Vec<f64> {
        let stride: usize = self.support_sizes[t + 1..].iter().product();
        let size = self.support_sizes[t];
        let mut out = vec![0.0; size];
        for (cell, &p) in self.probabilities.iter().enumerate() {
            out[(cell / stride) % size] += p;
        }
        out
    }
}

/// `−Σ p ln p` with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn entropy_gap(joint: &JointDistribution) -> EntropyGap {
    let h_joint = entropy(&joint.probabilities);
    let sum_marginals = (0..joint.variables()).map(|t| entropy(&joint.marginal(t))).sum::<f64>();
    EntropyGap {
        h_joint,
        sum_marginals,
        gap: sum_marginals - h_joint,
    }
}

// ---------------------------------------------------------------- suites

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable pass condition, e.g. `< 1e-6`.
    pub condition: String,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            condition: format!("< {bound:e}"),
            passed: value < bound,
        }
    }

    fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            condition: format!("> {bound:e}"),
            passed: value > bound,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.condition
        )
    }
}

type PrimitiveCase = (&'static str, Vec<DenseMatrix>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = rng_for(seed, "primitive-inputs", 0);
    let mut mat = |r, c| random_matrix(&mut rng, r, c, 1.0);
    let near_identity = DenseMatrix::identity(4).add(&mat(4, 4).scale(0.1)).expect("same shape");
    // Row sums of a softmax output tie in ‖A‖∞, a kink of the scaling;
    // distinct row weights keep the probe on one branch.
    let positive = DenseMatrix::from_fn(5, 5, |r, _| 1.0 + 0.1 * r as f64)
        .hadamard(&ops::softmax_rows(&mat(5, 5)))
        .expect("same shape");
    vec![
        ("matmul", vec![mat(3, 4), mat(4, 2)], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![mat(3, 4), mat(5, 4)], |t, v| t.matmul_nt(v[0], v[1])),
        ("add", vec![mat(3, 4), mat(3, 4)], |t, v| t.add(v[0], v[1])),
        ("scale", vec![mat(3, 4)], |t, v| Ok(t.scale(v[0], -1.7))),
        ("softmax_rows", vec![mat(4, 6)], |t, v| Ok(t.softmax_rows(v[0]))),
        ("layer_norm", vec![mat(4, 6), mat(1, 6), mat(1, 6)], |t, v| t.layer_norm(v[0], v[1], v[2])),
        ("segment_means", vec![mat(7, 3)], |t, v| t.segment_means(v[0], 3)),
        ("iterative_pinv", vec![near_identity], |t, v| t.iterative_pinv(v[0], DEFAULT_PINV_ITERS)),
        ("iterative_pinv_positive", vec![positive], |t, v| t.iterative_pinv(v[0], DEFAULT_PINV_ITERS)),
        ("softmax_then_pinv", vec![mat(5, 5)], |t, v| {
            let a = t.softmax_rows(v[0]);
            t.iterative_pinv(a, DEFAULT_PINV_ITERS)
        }),
        ("slice_rows", vec![mat(5, 3)], |t, v| t.slice_rows(v[0], 1, 4)),
        ("slice_cols", vec![mat(3, 5)], |t, v| t.slice_cols(v[0], 2, 5)),
        ("concat_rows", vec![mat(2, 3), mat(4, 3)], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![mat(3, 2), mat(3, 4)], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("relu", vec![mat(4, 5)], |t, v| Ok(t.relu(v[0]))),
        ("nystrom_attention", vec![mat(9, 4), mat(9, 4), mat(9, 4)], |t, v| {
            crate::attention::nystrom_attention_on(t, v[0], v[1], v[2], 3, DEFAULT_PINV_ITERS)
        }),
    ]
}

/// The fixture of the full-model check: `d = 8`, two heads, two blocks,
/// a bag of five instances and landmarks covering the whole sequence.
pub fn gradcheck_fixture(seed: u64) -> Result<(ModelParams, Bag)> {
    let config = ModelConfig {
        attention: AttentionConfig {
            heads: 2,
            landmarks: 6,
            pinv_iters: DEFAULT_PINV_ITERS,
        },
        weight_std: 0.3,
        ..ModelConfig::new(8)
    };
    let params = init_params(&config, seed)?;
    let bag = random_bag(&mut rng_for(seed, "gradcheck-bag", 0), "gradcheck", 5, 8);
    Ok((params, bag))
}

/// Every primitive, a linear head, the full model, and the corrupted
/// softmax rule (which must fail; with `include_corrupted` it is reported
/// as an ordinary check and so fails the suite).
pub fn gradcheck_suite(seed: u64, include_corrupted: bool) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, inputs, build) in primitive_cases(seed) {
        let r = tape_gradcheck(&inputs, build, seed, DEFAULT_STEP)?;
        checks.push(Check::below(format!("gradcheck.{name}"), r.max_rel_error, PRIMITIVE_TOLERANCE));
    }
    let mut rng = rng_for(seed, "linear-head", 0);
    let head_inputs = vec![random_matrix(&mut rng, 1, 8, 1.0), random_matrix(&mut rng, 8, 1, 1.0), random_matrix(&mut rng, 1, 1, 1.0)];
    let r = tape_gradcheck(
        &head_inputs,
        |t, v| {
            let z = t.matmul(v[0], v[1])?;
            t.add(z, v[2])
        },
        seed,
        LINEAR_STEP,
    )?;
    checks.push(Check::below("gradcheck.linear_head", r.max_rel_error, LINEAR_TOLERANCE));

    let (params, bag) = gradcheck_fixture(seed)?;
    let r = model_gradcheck(&params, &bag, DEFAULT_STEP)?;
    checks.push(Check::below("gradcheck.model", r.max_rel_error, MODEL_TOLERANCE));

    let r = corrupted_softmax_gradcheck(seed, DEFAULT_STEP)?;
    if include_corrupted {
        checks.push(Check::below("gradcheck.corrupted_softmax", r.max_rel_error, PRIMITIVE_TOLERANCE));
    } else {
        checks.push(Check::above("gradcheck.negative_control", r.max_rel_error, CORRUPTION_FLOOR));
    }
    Ok(checks)
}

pub const CURVE_N: usize = 128;
pub const CURVE_D: usize = 16;
pub const CURVE_SEEDS: u64 = 50;
pub const CURVE_MS: [usize; 4] = [8, 32, 64, 128];

/// Closed-form cases, the mean error curve over `ms` at `n = 128` with the
/// pseudo-inverse run for `iters` iterations, and the `m = n` end point
/// with a converged pseudo-inverse. Returns the checks and the curve.
pub fn attention_suite(seed: u64, ms: &[usize], iters: usize) -> Result<(Vec<Check>, ErrorCurve)> {
    let mut checks = Vec::new();
    let mut rng = rng_for(seed, "attention-suite", 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let q = random_matrix(&mut rng, n, d, 1.0);
        let k = random_matrix(&mut rng, n, d, 1.0);
        let v = random_matrix(&mut rng, n, d, 1.0);
        worst = worst.max(attention_error(&q, &k, &v, n, EXACT_PINV_ITERS)?);
    }
    checks.push(Check::below("attention.m_equals_n", worst, 1e-5));

    let one = random_matrix(&mut rng, 1, 6, 1.0);
    checks.push(Check::below(
        "attention.single_row",
        attention_error(&one, &one.scale(0.5), &one.scale(2.0), 1, DEFAULT_PINV_ITERS)?,
        1e-12,
    ));

    let q0 = DenseMatrix::zeros(40, 8);
    let k = random_matrix(&mut rng, 40, 8, 1.0);
    let v = random_matrix(&mut rng, 40, 8, 1.0);
    let uniform = [1, 5, 13, 40]
        .iter()
        .map(|&m| attention_error(&q0, &k, &v, m, DEFAULT_PINV_ITERS))
        .collect::<Result<Vec<_>>>()?;
    checks.push(Check::below("attention.zero_queries", uniform.into_iter().fold(0.0, f64::max), 1e-6));

    let curve = attention_error_curve(CURVE_N, CURVE_D, ms, CURVE_SEEDS, seed, iters)?;
    let violations = curve.windows(2).filter(|w| w[1].1 > w[0].1).count();
    checks.push(Check::below("attention.curve_nonincreasing_violations", violations as f64, 0.5));
    // The end point uses a converged pseudo-inverse: with few iterations
    // the m = n output is still off by the truncation error.
    let end = attention_error_curve(CURVE_N, CURVE_D, &[CURVE_N], CURVE_SEEDS, seed, EXACT_PINV_ITERS)?;
    checks.push(Check::below("attention.exact_end_point", end[0].1, 1e-5));
    Ok((checks, curve))
}

/// Support sizes of the `i`-th random joint: 1 to 3 variables, 1 to 4
/// values each.
fn random_sizes(rng: &mut Rng) -> Vec<usize> {
    let vars = rng.random_range(1..=3);
    (0..vars).map(|_| rng.random_range(1..=4)).collect()
}

pub fn entropy_suite(seed: u64, count: u64) -> Result<Vec<Check>> {
    let gaps = par::try_map_indexed(count as usize, |i| {
        let mut rng = rng_for(seed, "entropy-joint", i as u64);
        let sizes = random_sizes(&mut rng);
        JointDistribution::random(&mut rng, sizes).map(|j| entropy_gap(&j).gap)
    })?;
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let product_gaps = par::try_map_indexed(count as usize, |i| {
        let mut rng = rng_for(seed, "entropy-product", i as u64);
        let marginals: Vec<Vec<f64>> = random_sizes(&mut rng)
            .into_iter()
            .map(|s| {
                let w: Vec<f64> = (0..s).map(|_| rng.sample(Exp1)).collect();
                let t: f64 = w.iter().sum();
                w.into_iter().map(|x| x / t).collect()
            })
            .collect();
        JointDistribution::product(&marginals).map(|j| entropy_gap(&j).gap.abs())
    })?;
    let max_product = product_gaps.into_iter().fold(0.0, f64::max);
    let pair = JointDistribution::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5])?;
    let pg = entropy_gap(&pair);
    Ok(vec![
        Check {
            name: "entropy.random_joint_min_gap".into(),
            value: min_gap,
            condition: ">= -1e-9".into(),
            passed: min_gap >= -1e-9,
        },
        Check::below("entropy.product_abs_gap", max_product, 1e-12),
        Check::below("entropy.correlated_pair_gap_minus_ln2", (pg.gap - std::f64::consts::LN_2).abs(), 1e-12),
    ])
}
