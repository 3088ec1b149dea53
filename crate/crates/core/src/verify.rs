//! Executable property suites behind the `verify` command: each runs a
//! batch of seeded randomized checks of one family of invariants and
//! reports case counts and the worst observed error.
//!
//! `tol_scale` multiplies every tolerance; it exists so the command's
//! failure path can be exercised deliberately.

use crate::dataset::{decompose, difficulty, synth_gaussian, Dataset, LabelMode, SpectralData};
use crate::error::Result;
use crate::linalg::{dot, norm, spectral_norm, sym_eig_max, thin_svd, DenseMatrix};
use crate::model::{
    gradient, hessian_reduced, nl_gradient, residual_and_loss, sharpness_state, Activation,
    NonlinearParams, Params,
};
use crate::optimize::{nl_rk4_step, rk4_step, sample_mask};
use crate::quantities::{
    arbitrary_theta_bounds, balance_check, construct_minimizer_2layer, construct_minimizer_deep,
    gd_imbalance_delta, imbalance_terms, layer_imbalance, mask_second_moment,
    minimizer_bounds_2layer, minimizer_bounds_deep, nl_layer_imbalance,
    sgd_expected_imbalance_delta,
};
use crate::reparam::{gd_step_reparam, sgd_step_reparam, to_reparam, ReparamState};
use crate::rng::SplitMix64;

pub const SUITES: &[&str] = &[
    "linalg",
    "gradient",
    "gf-conservation",
    "gd-identity",
    "sgd-expectation",
    "bounds-sandwich",
    "nonlinear-conservation",
    "mask-moment",
];

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Recorder {
    cases: usize,
    failures: usize,
    max_err: f64,
    tol_scale: f64,
}

impl Recorder {
    fn new(tol_scale: f64) -> Self {
        Recorder {
            cases: 0,
            failures: 0,
            max_err: 0.0,
            tol_scale,
        }
    }

    /// Records one check of `err` against `tol * tol_scale`.
    fn check(&mut self, err: f64, tol: f64) {
        self.cases += 1;
        if err.is_finite() {
            self.max_err = self.max_err.max(err);
        }
        if !(err <= tol * self.tol_scale) {
            self.failures += 1;
        }
    }

    fn report(self, name: &'static str) -> SuiteReport {
        SuiteReport {
            name,
            cases: self.cases,
            failures: self.failures,
            max_err: self.max_err,
        }
    }
}

fn random_state(sd: &SpectralData<f64>, depth: usize, rng: &mut SplitMix64) -> ReparamState<f64> {
    ReparamState {
        o: (0..sd.rank()).map(|_| rng.next_gaussian()).collect(),
        v: (0..depth - 1).map(|_| rng.next_gaussian()).collect(),
        u_perp: vec![0.0; sd.dim()],
    }
}

fn suite_linalg(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    for &(n, d) in &[(4usize, 3usize), (3, 5), (6, 6), (8, 2)] {
        let data: Vec<f64> = (0..n * d).map(|_| rng.next_gaussian()).collect();
        let a = DenseMatrix::new(n, d, data)?;
        let svd = thin_svd(&a, 1e-12)?;
        let rec_err = svd.reconstruct().sub(&a)?.frobenius_norm() / a.frobenius_norm();
        rec.check(rec_err, 1e-10);
        for basis in [&svd.left_vectors, &svd.right_vectors] {
            let gram = basis.transpose().matmul(basis)?;
            let mut err = 0.0f64;
            for i in 0..svd.rank {
                for j in 0..svd.rank {
                    let want = if i == j { 1.0 } else { 0.0 };
                    err = err.max((gram.get(i, j) - want).abs());
                }
            }
            rec.check(err, 1e-10);
        }
        let s1 = spectral_norm(&a)?;
        let s1t = spectral_norm(&a.transpose())?;
        rec.check((s1 - s1t).abs() / s1.max(1e-300), 1e-10);
    }
    // Rayleigh dominance of the symmetric eigensolver
    for _ in 0..5 {
        let n = 5;
        let raw: Vec<f64> = (0..n * n).map(|_| rng.next_gaussian()).collect();
        let m0 = DenseMatrix::new(n, n, raw)?;
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, 0.5 * (m0.get(i, j) + m0.get(j, i)));
            }
        }
        let (lambda, x) = sym_eig_max(&m)?;
        let y = m.matvec(&x)?;
        let resid = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - lambda * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        rec.check(resid / lambda.abs().max(1.0), 1e-8);
        for _ in 0..20 {
            let mut q: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
            let nq = norm(&q);
            for qi in &mut q {
                *qi /= nq;
            }
            let rq = dot(&q, &m.matvec(&q)?);
            rec.check((rq - lambda).max(0.0), 1e-10);
        }
    }
    Ok(rec.report("linalg"))
}

fn suite_gradient(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    for _ in 0..25 {
        let n = 2 + (rng.below(4) as usize);
        let d = 2 + (rng.below(5) as usize);
        let depth = 2 + (rng.below(3) as usize);
        let ds = synth_gaussian(n, d, LabelMode::Gaussian, rng.next_u64())?;
        let sd = decompose(&ds)?;
        let theta = Params::new(
            (0..d).map(|_| rng.next_gaussian() * 0.6).collect(),
            (0..depth - 1).map(|_| 0.4 + rng.next_f64()).collect(),
        )?;
        let g = gradient(&ds, &theta)?;
        let h = 1e-6;
        let scale = norm(&g).max(1.0);
        for k in 0..theta.count() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            if k < d {
                plus.u[k] += h;
                minus.u[k] -= h;
            } else {
                plus.v[k - d] += h;
                minus.v[k - d] -= h;
            }
            let (_, lp) = residual_and_loss(&ds, &plus)?;
            let (_, lm) = residual_and_loss(&ds, &minus)?;
            let fd = (lp - lm) / (2.0 * h);
            rec.check((g[k] - fd).abs() / scale, 1e-5);
        }
        // reduced Hessian vs finite differences of the gradient, compared
        // inside the invariant block
        let hess = hessian_reduced(&ds, &sd, &theta)?;
        let state = to_reparam(&theta, &sd)?;
        let r = sd.rank();
        let fd_h = 1e-5;
        let mut max_err = 0.0f64;
        let mut h_scale = hess.max_abs().max(1.0);
        for b in 0..r + depth - 1 {
            // displace along w_b (or v coordinate) and difference gradients
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            if b < r {
                let w = sd.right_vector(b);
                for (i, wi) in w.iter().enumerate() {
                    plus.u[i] += fd_h * wi;
                    minus.u[i] -= fd_h * wi;
                }
            } else {
                plus.v[b - r] += fd_h;
                minus.v[b - r] -= fd_h;
            }
            let gp = gradient(&ds, &plus)?;
            let gm = gradient(&ds, &minus)?;
            for a in 0..r + depth - 1 {
                // project the gradient difference onto coordinate a
                let proj = |g: &[f64]| -> f64 {
                    if a < r {
                        dot(&sd.right_vector(a), &g[..d])
                    } else {
                        g[d + (a - r)]
                    }
                };
                let fd = (proj(&gp) - proj(&gm)) / (2.0 * fd_h);
                max_err = max_err.max((hess.get(a, b) - fd).abs());
            }
        }
        h_scale = h_scale.max(1.0);
        rec.check(max_err / h_scale, 1e-5);
        let _ = state;
    }
    Ok(rec.report("gradient"))
}

fn suite_gf_conservation(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    // D=2: C conserved along fixed-step RK4 until small loss
    for _ in 0..4 {
        let ds = well_conditioned_dataset(4, 3, &mut rng)?;
        let sd = decompose(&ds)?;
        let mut state = random_state(&sd, 2, &mut rng);
        let c0 = layer_imbalance(&state)?;
        let mut drift = 0.0f64;
        for _ in 0..200_000 {
            state = rk4_step(&state, &sd, 1e-3)?;
            if state.reducible_loss(&sd) <= 1e-10 {
                break;
            }
        }
        drift = drift.max((layer_imbalance(&state)? - c0).abs());
        rec.check(drift / c0.abs().max(1.0), 1e-6);
    }
    // D>2 from balanced init: balance deviation stays at integrator scale
    for depth in [3usize, 4] {
        let ds = well_conditioned_dataset(3, 3, &mut rng)?;
        let sd = decompose(&ds)?;
        let mut dir: Vec<f64> = (0..sd.rank()).map(|_| rng.next_gaussian()).collect();
        let nd = norm(&dir);
        for x in &mut dir {
            *x /= nd;
        }
        let mut state = ReparamState {
            o: dir,
            v: vec![1.0; depth - 1],
            u_perp: vec![0.0; sd.dim()],
        };
        let mut worst = 0.0f64;
        for _ in 0..50_000 {
            state = rk4_step(&state, &sd, 1e-3)?;
            worst = worst.max(balance_check(&state));
            if state.reducible_loss(&sd) <= 1e-10 {
                break;
            }
        }
        rec.check(worst, 1e-6);
    }
    Ok(rec.report("gf-conservation"))
}

/// Gaussian data rescaled to a controlled singular-value range so gradient
/// flow converges on a short horizon.
fn well_conditioned_dataset(
    n: usize,
    d: usize,
    rng: &mut SplitMix64,
) -> Result<Dataset<f64>> {
    let base = synth_gaussian(n, d, LabelMode::Gaussian, rng.next_u64())?;
    let sd = decompose(&base)?;
    // rebuild X with singular values mapped into [0.8, 2.0]
    let r = sd.rank();
    let mut x = DenseMatrix::zeros(n, d);
    for k in 0..r {
        let t = if r == 1 { 0.5 } else { k as f64 / (r - 1) as f64 };
        let s = 2.0 - 1.2 * t;
        let e = sd.left_vector(k);
        let w = sd.right_vector(k);
        for i in 0..n {
            for j in 0..d {
                x.set(i, j, x.get(i, j) + s * e[i] * w[j]);
            }
        }
    }
    let y: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
    Dataset::new(x, y)
}

fn suite_gd_identity(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    for _ in 0..200 {
        let n = 2 + (rng.below(5) as usize);
        let d = 2 + (rng.below(5) as usize);
        let ds = synth_gaussian(n, d, LabelMode::Gaussian, rng.next_u64())?;
        let sd = decompose(&ds)?;
        let state = random_state(&sd, 2, &mut rng);
        let eta = 0.02 + 0.2 * rng.next_f64();
        let c = layer_imbalance(&state)?;
        let terms = imbalance_terms(&state, &sd);
        let predicted = gd_imbalance_delta(&terms, c, eta, n);
        let next = gd_step_reparam(&state, &sd, eta)?;
        let measured = layer_imbalance(&next)? - c;
        let state_scale: f64 =
            state.o.iter().map(|o| o * o).sum::<f64>() + state.v[0] * state.v[0];
        let denom = predicted.abs().max(1e-4 * state_scale.max(1.0));
        rec.check((measured - predicted).abs() / denom, 1e-9);
    }
    Ok(rec.report("gd-identity"))
}

fn suite_sgd_expectation(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    let n = 6;
    let ds = synth_gaussian(n, 4, LabelMode::Gaussian, rng.next_u64())?;
    let sd = decompose(&ds)?;
    for b in 1..=5usize {
        let state = random_state(&sd, 2, &mut rng);
        let eta = 0.1;
        let c = layer_imbalance(&state)?;
        let terms = imbalance_terms(&state, &sd);
        let predicted = sgd_expected_imbalance_delta(&terms, c, eta, n, b)?;
        let subsets = enumerate_subsets(n, b);
        let mut mean = 0.0;
        for subset in &subsets {
            let mask = crate::optimize::BatchMask::new(subset.clone(), n)?;
            let next = sgd_step_reparam(&state, &sd, eta, &mask)?;
            mean += layer_imbalance(&next)? - c;
        }
        mean /= subsets.len() as f64;
        let state_scale: f64 =
            state.o.iter().map(|o| o * o).sum::<f64>() + state.v[0] * state.v[0];
        let denom = predicted.abs().max(1e-3 * state_scale.max(1.0));
        rec.check((mean - predicted).abs() / denom, 1e-10);
    }
    Ok(rec.report("sgd-expectation"))
}

/// All B-subsets of {0..n-1} in lexicographic order.
pub fn enumerate_subsets(n: usize, b: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, b: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == b {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, b, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, b, &mut Vec::with_capacity(b), &mut out);
    out
}

fn suite_bounds_sandwich(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    for _ in 0..50 {
        let n = 2 + (rng.below(4) as usize);
        let d = 2 + (rng.below(4) as usize);
        let ds = synth_gaussian(n, d, LabelMode::Gaussian, rng.next_u64())?;
        let sd = decompose(&ds)?;
        if difficulty(&sd)? <= 0.0 {
            continue;
        }
        let c_star = rng.next_gaussian();
        let minimizer = construct_minimizer_2layer(&sd, c_star)?;
        let s = sharpness_state(&sd, &minimizer)?;
        let rep = minimizer_bounds_2layer(&sd, c_star, n)?;
        let eps = 1e-8 * rep.upper;
        let viol = (rep.lower - eps - s).max(s - rep.upper - eps).max(0.0);
        rec.check(viol / rep.upper.max(1e-300), 1e-8);
        // deep balanced
        let depth = 2 + (rng.below(3) as usize);
        let deep = construct_minimizer_deep(&sd, depth)?;
        let s = sharpness_state(&sd, &deep)?;
        let rep = minimizer_bounds_deep(&sd, depth, n)?;
        let eps = 1e-8 * rep.upper;
        let viol = (rep.lower - eps - s).max(s - rep.upper - eps).max(0.0);
        rec.check(viol / rep.upper.max(1e-300), 1e-8);
        // arbitrary theta
        let state = random_state(&sd, 2, &mut rng);
        let s = sharpness_state(&sd, &state)?;
        let rep = arbitrary_theta_bounds(&sd, &state, n)?;
        let slack = 1e-9 * rep.upper.abs().max(1.0);
        let viol = (rep.lower - slack - s).max(s - rep.upper - slack).max(0.0);
        rec.check(viol / rep.upper.abs().max(1.0), 1e-9);
    }
    Ok(rec.report("bounds-sandwich"))
}

fn suite_nonlinear_conservation(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let mut rng = SplitMix64::new(seed);
    for activation in [Activation::Tanh, Activation::Sigmoid] {
        for _ in 0..3 {
            // orthogonal rows: diagonal X
            let s0 = 0.8 + rng.next_f64();
            let s1 = 0.4 + 0.3 * rng.next_f64();
            let x = DenseMatrix::from_rows(&[vec![s0, 0.0], vec![0.0, s1]])?;
            let y = vec![0.3 + 0.2 * rng.next_f64(), 0.2 + 0.2 * rng.next_f64()];
            let ds = Dataset::new(x, y)?;
            let sd = decompose(&ds)?;
            let mut theta = NonlinearParams {
                u: vec![0.3 * rng.next_gaussian(), 0.3 * rng.next_gaussian()],
                v1: 0.8 + rng.next_f64(),
                activation,
            };
            let state0 = to_reparam(
                &Params::new(theta.u.clone(), vec![theta.v1])?,
                &sd,
            )?;
            let c0 = nl_layer_imbalance(&state0, &sd, activation)?;
            let h = 1e-3;
            for _ in 0..1000 {
                theta = nl_rk4_step(&ds, &theta, h)?;
            }
            let state1 = to_reparam(
                &Params::new(theta.u.clone(), vec![theta.v1])?,
                &sd,
            )?;
            let c1 = nl_layer_imbalance(&state1, &sd, activation)?;
            rec.check((c1 - c0).abs(), 1e-6);
            let _ = nl_gradient(&ds, &theta)?;
        }
    }
    Ok(rec.report("nonlinear-conservation"))
}

fn suite_mask_moment(seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    let mut rec = Recorder::new(tol_scale);
    let _ = seed;
    for n in 1..=8usize {
        for b in 1..=n {
            let closed = mask_second_moment(n, b)?;
            let subsets = enumerate_subsets(n, b);
            let mut acc = DenseMatrix::<f64>::zeros(n, n);
            for subset in &subsets {
                for &i in subset {
                    for &j in subset {
                        acc.set(i, j, acc.get(i, j) + 1.0);
                    }
                }
            }
            let mut err = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    err = err.max((closed.get(i, j) - acc.get(i, j) / subsets.len() as f64).abs());
                }
            }
            rec.check(err, 1e-12);
        }
    }
    // empirical frequency sanity for one (N, B)
    let mut rng = SplitMix64::new(seed);
    let (n, b) = (5usize, 2usize);
    let draws = 40_000;
    let mut acc = DenseMatrix::<f64>::zeros(n, n);
    for _ in 0..draws {
        let m = sample_mask(n, b, &mut rng)?;
        for &i in m.indices() {
            for &j in m.indices() {
                acc.set(i, j, acc.get(i, j) + 1.0);
            }
        }
    }
    let closed = mask_second_moment(n, b)?;
    let mut err = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            err = err.max((acc.get(i, j) / draws as f64 - closed.get(i, j)).abs());
        }
    }
    rec.check(err, 0.02);
    Ok(rec.report("mask-moment"))
}

/// Runs one named suite.
pub fn run_suite(name: &str, seed: u64, tol_scale: f64) -> Result<SuiteReport> {
    match name {
        "linalg" => suite_linalg(seed, tol_scale),
        "gradient" => suite_gradient(seed, tol_scale),
        "gf-conservation" => suite_gf_conservation(seed, tol_scale),
        "gd-identity" => suite_gd_identity(seed, tol_scale),
        "sgd-expectation" => suite_sgd_expectation(seed, tol_scale),
        "bounds-sandwich" => suite_bounds_sandwich(seed, tol_scale),
        "nonlinear-conservation" => suite_nonlinear_conservation(seed, tol_scale),
        "mask-moment" => suite_mask_moment(seed, tol_scale),
        other => Err(crate::error::Error::InvalidArgument(format!(
            "unknown suite `{other}`; available: {}",
            SUITES.join(", ")
        ))),
    }
}

/// Runs `all` or a single named suite.
pub fn run_selected(selector: &str, seed: u64, tol_scale: f64) -> Result<Vec<SuiteReport>> {
    if selector == "all" {
        SUITES
            .iter()
            .map(|name| run_suite(name, seed, tol_scale))
            .collect()
    } else {
        Ok(vec![run_suite(selector, seed, tol_scale)?])
    }
}
