//! Derived scalars and bounds: layer imbalance (linear and nonlinear),
//! sharpness bounds at minimizers / at initialization / at convergence /
//! at arbitrary two-layer states, the per-step imbalance identities for GD
//! and SGD, and the mask second-moment matrix behind the SGD expectation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataset::{difficulty, SpectralData};
use crate::error::{Error, Result};
use crate::linalg::{norm, DenseMatrix};
use crate::model::{nl_g, Activation};
use crate::reparam::ReparamState;
use crate::scalar::Scalar;

/// Denominator floor below which optional ratios are reported as absent.
const RATIO_FLOOR: f64 = 1e-12;

/// Two-layer layer imbalance `C = sum o_i^2 - v_1^2`.
pub fn layer_imbalance<T: Scalar>(state: &ReparamState<T>) -> Result<T> {
    if state.depth() != 2 {
        return Err(Error::UnsupportedDepth {
            expected: 2,
            got: state.depth(),
        });
    }
    let o_sq = state.o.iter().map(|&o| o * o).sum::<T>();
    Ok(o_sq - state.v[0] * state.v[0])
}

/// Max pairwise deviation among `{||o||, |v_1|, ..., |v_{D-1}|}`.
pub fn balance_check<T: Scalar>(state: &ReparamState<T>) -> T {
    let mut mags: Vec<T> = Vec::with_capacity(state.v.len() + 1);
    mags.push(norm(&state.o));
    for &v in &state.v {
        mags.push(v.abs());
    }
    let mut dev = T::zero();
    for i in 0..mags.len() {
        for j in i + 1..mags.len() {
            dev = dev.max((mags[i] - mags[j]).abs());
        }
    }
    dev
}

/// Nonlinear layer imbalance `C = 2 sum g(sigma_i o_i)/sigma_i^2 - v_1^2`
/// (two-layer model; the conservation statement needs orthogonal data).
pub fn nl_layer_imbalance<T: Scalar>(
    state: &ReparamState<T>,
    sd: &SpectralData<T>,
    activation: Activation,
) -> Result<T> {
    if state.depth() != 2 {
        return Err(Error::UnsupportedDepth {
            expected: 2,
            got: state.depth(),
        });
    }
    let two = T::from_usize(2);
    let mut acc = T::zero();
    for i in 0..sd.rank() {
        let s = sd.sigma(i);
        acc += two * nl_g(activation, s * state.o[i]) / (s * s);
    }
    Ok(acc - state.v[0] * state.v[0])
}

/// Lower/upper sharpness bound with provenance.
#[derive(Clone, Debug, Serialize)]
pub struct BoundsReport {
    pub lower: f64,
    pub upper: f64,
    /// Which bound produced this report.
    pub source: &'static str,
    /// Named scalars the formulas consumed, echoed for reproducibility.
    pub inputs: BTreeMap<&'static str, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v1_star_sq: Option<f64>,
    /// Set when a degenerate denominator forced the lower bound to zero.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

fn report(
    lower: f64,
    upper: f64,
    source: &'static str,
    inputs: BTreeMap<&'static str, f64>,
) -> BoundsReport {
    BoundsReport {
        lower,
        upper,
        source,
        inputs,
        v1_star_sq: None,
        degenerate: false,
    }
}

fn positive_difficulty<T: Scalar>(sd: &SpectralData<T>) -> Result<T> {
    let q = difficulty(sd)?;
    if !(q > T::zero()) {
        return Err(Error::UndefinedDifficulty {
            reason: "Q must be positive",
        });
    }
    Ok(q)
}

/// `(v_1^*)^2 = (sqrt(C^2 + 4Q) - C)/2`, the unique positive root of
/// `(v^2)^2 + C v^2 - Q = 0`.
pub fn v1_star_sq<T: Scalar>(c_star: T, q: T) -> T {
    ((c_star * c_star + T::from_usize(4) * q).sqrt() - c_star) / T::from_usize(2)
}

/// Two-layer minimizer bounds:
/// `(sigma_1^2 v^2 + d_1^2/v^2)/N <= S <= (sigma_1^2 v^2 + sum d^2/v^2)/N`
/// at `v^2 = v1_star_sq(C, Q)`.
pub fn minimizer_bounds_2layer<T: Scalar>(
    sd: &SpectralData<T>,
    c_star: T,
    n: usize,
) -> Result<BoundsReport> {
    let q = positive_difficulty(sd)?;
    let v_sq = v1_star_sq(c_star, q);
    let s1 = sd.sigma1();
    let d1 = sd.d_coeffs[0];
    let inv_n = T::from_usize(n).recip();
    let lower = (s1 * s1 * v_sq + d1 * d1 / v_sq) * inv_n;
    let upper = (s1 * s1 * v_sq + sd.sum_d_sq / v_sq) * inv_n;
    let mut inputs = BTreeMap::new();
    inputs.insert("Q", q.to_f64());
    inputs.insert("C", c_star.to_f64());
    inputs.insert("sigma1", s1.to_f64());
    inputs.insert("d1", d1.to_f64());
    inputs.insert("sum_d_sq", sd.sum_d_sq.to_f64());
    inputs.insert("N", n as f64);
    inputs.insert("r", sd.rank() as f64);
    let mut rep = report(lower.to_f64(), upper.to_f64(), "minimizer_2layer", inputs);
    rep.v1_star_sq = Some(v_sq.to_f64());
    Ok(rep)
}

/// Balanced deep minimizer bounds:
/// `(sigma_1^2 Q^{(D-1)/D} + (D-1) d_1^2 Q^{-1/D})/N <= S <= ...` with
/// `d_1^2` replaced by `sum d^2` in the upper bound.
pub fn minimizer_bounds_deep<T: Scalar>(
    sd: &SpectralData<T>,
    depth: usize,
    n: usize,
) -> Result<BoundsReport> {
    if depth < 2 {
        return Err(Error::InvalidArgument("depth must be >= 2".into()));
    }
    let q = positive_difficulty(sd)?;
    let s1 = sd.sigma1();
    let d1 = sd.d_coeffs[0];
    let inv_n = T::from_usize(n).recip();
    let q_main = q.powf(T::from_f64((depth as f64 - 1.0) / depth as f64));
    let q_rest = q.powf(T::from_f64(-1.0 / depth as f64));
    let dm1 = T::from_usize(depth - 1);
    let lower = (s1 * s1 * q_main + dm1 * d1 * d1 * q_rest) * inv_n;
    let upper = (s1 * s1 * q_main + dm1 * sd.sum_d_sq * q_rest) * inv_n;
    let mut inputs = BTreeMap::new();
    inputs.insert("Q", q.to_f64());
    inputs.insert("D", depth as f64);
    inputs.insert("sigma1", s1.to_f64());
    inputs.insert("d1", d1.to_f64());
    inputs.insert("sum_d_sq", sd.sum_d_sq.to_f64());
    inputs.insert("N", n as f64);
    inputs.insert("r", sd.rank() as f64);
    let mut rep = report(lower.to_f64(), upper.to_f64(), "minimizer_deep", inputs);
    rep.v1_star_sq = Some(q.powf(T::from_f64(1.0 / depth as f64)).to_f64());
    Ok(rep)
}

/// Expected sharpness at a two-layer `alpha-beta` initialization:
/// `sigma_1^2 (a^2 + b^2)/N <= E[S] <=
///  (sum a^2 sigma_i^2 + b^2 sigma_1^2 + sqrt(sum sigma_i^2 (a^2 b^2 sigma_i^2 + d_i^2)))/N`.
pub fn init_sharpness_bounds<T: Scalar>(
    sd: &SpectralData<T>,
    alpha: T,
    beta: T,
    n: usize,
) -> Result<BoundsReport> {
    if !(alpha > T::zero()) || !(beta > T::zero()) {
        return Err(Error::InvalidArgument("alpha, beta must be > 0".into()));
    }
    let s1 = sd.sigma1();
    let a2 = alpha * alpha;
    let b2 = beta * beta;
    let inv_n = T::from_usize(n).recip();
    let lower = s1 * s1 * (a2 + b2) * inv_n;
    let mut sum_as2 = T::zero();
    let mut sum_rad = T::zero();
    for i in 0..sd.rank() {
        let s2 = sd.sigma(i) * sd.sigma(i);
        sum_as2 += a2 * s2;
        sum_rad += s2 * (a2 * b2 * s2 + sd.d_coeffs[i] * sd.d_coeffs[i]);
    }
    let upper = (sum_as2 + b2 * s1 * s1 + sum_rad.sqrt()) * inv_n;
    let mut inputs = BTreeMap::new();
    inputs.insert("alpha", alpha.to_f64());
    inputs.insert("beta", beta.to_f64());
    inputs.insert("sigma1", s1.to_f64());
    inputs.insert("N", n as f64);
    inputs.insert("r", sd.rank() as f64);
    Ok(report(lower.to_f64(), upper.to_f64(), "init_alpha_beta", inputs))
}

/// Expected sharpness at GF convergence from an `alpha-beta` init, with
/// `E[C] = r alpha^2 - beta^2` and the upper bound's enlarged radicand
/// `E[C]^2 + 2 r alpha^4 + 2 beta^4 + 4Q`.
pub fn convergence_sharpness_bounds<T: Scalar>(
    sd: &SpectralData<T>,
    alpha: T,
    beta: T,
    n: usize,
) -> Result<BoundsReport> {
    if !(alpha > T::zero()) || !(beta > T::zero()) {
        return Err(Error::InvalidArgument("alpha, beta must be > 0".into()));
    }
    let q = positive_difficulty(sd)?;
    let s1 = sd.sigma1();
    let d1 = sd.d_coeffs[0];
    let r = T::from_usize(sd.rank());
    let a2 = alpha * alpha;
    let b2 = beta * beta;
    let e_c = r * a2 - b2;
    let four_q = T::from_usize(4) * q;
    let half_inv_n = (T::from_usize(2) * T::from_usize(n)).recip();
    let s1_sq = s1 * s1;
    let lower = half_inv_n
        * ((s1_sq + d1 * d1 / q) * (e_c * e_c + four_q).sqrt() + (d1 * d1 / q - s1_sq) * e_c);
    let two = T::from_usize(2);
    let radicand = e_c * e_c + two * r * a2 * a2 + two * b2 * b2 + four_q;
    let sum_ratio = sd.sum_d_sq / q;
    let upper = half_inv_n * ((s1_sq + sum_ratio) * radicand.sqrt() + (sum_ratio - s1_sq) * e_c);
    let mut inputs = BTreeMap::new();
    inputs.insert("alpha", alpha.to_f64());
    inputs.insert("beta", beta.to_f64());
    inputs.insert("Q", q.to_f64());
    inputs.insert("E_C", e_c.to_f64());
    inputs.insert("sigma1", s1.to_f64());
    inputs.insert("d1", d1.to_f64());
    inputs.insert("sum_d_sq", sd.sum_d_sq.to_f64());
    inputs.insert("N", n as f64);
    inputs.insert("r", sd.rank() as f64);
    Ok(report(
        lower.to_f64(),
        upper.to_f64(),
        "convergence_alpha_beta",
        inputs,
    ))
}

/// Sharpness bounds at an arbitrary two-layer state. The lower bound is the
/// `e_1`-Rayleigh expression with its cross term; a denominator below 1e-12
/// degenerates the lower bound to zero.
pub fn arbitrary_theta_bounds<T: Scalar>(
    sd: &SpectralData<T>,
    state: &ReparamState<T>,
    n: usize,
) -> Result<BoundsReport> {
    if state.depth() != 2 {
        return Err(Error::UnsupportedDepth {
            expected: 2,
            got: state.depth(),
        });
    }
    let s1 = sd.sigma1();
    let d1 = sd.d_coeffs[0];
    let v1 = state.v[0];
    let o1 = state.o[0];
    let inv_n = T::from_usize(n).recip();
    let s1_sq = s1 * s1;
    let denom = s1_sq * v1 * v1 + s1_sq * o1 * o1;
    let mut degenerate = false;
    let lower = if denom < T::from_f64(RATIO_FLOOR) {
        degenerate = true;
        T::zero()
    } else {
        let cross = (T::from_usize(2) * s1_sq * s1_sq * o1 * o1 * v1 * v1
            - T::from_usize(2) * s1_sq * s1 * d1 * o1 * v1)
            / denom;
        (s1_sq * v1 * v1 + s1_sq * o1 * o1 + cross) * inv_n
    };
    let mut sum_s2o2 = T::zero();
    let mut sum_rad = T::zero();
    for i in 0..sd.rank() {
        let s = sd.sigma(i);
        sum_s2o2 += s * s * state.o[i] * state.o[i];
        let t = s * (s * state.o[i] * v1 - sd.d_coeffs[i]);
        sum_rad += t * t;
    }
    let upper = (s1_sq * v1 * v1 + sum_s2o2 + sum_rad.sqrt()) * inv_n;
    let mut inputs = BTreeMap::new();
    inputs.insert("sigma1", s1.to_f64());
    inputs.insert("d1", d1.to_f64());
    inputs.insert("v1", v1.to_f64());
    inputs.insert("o1", o1.to_f64());
    inputs.insert("N", n as f64);
    inputs.insert("r", sd.rank() as f64);
    let mut rep = report(lower.to_f64(), upper.to_f64(), "arbitrary_theta", inputs);
    rep.degenerate = degenerate;
    Ok(rep)
}

/// The residual-weighted quantities driving the per-step change of C.
/// `t1 = omega1/psi1` and `t2 = (omega2-omega1)/(psi2-psi1)` are absent when
/// their denominators fall below 1e-12.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImbalanceTerms {
    pub psi1: f64,
    pub psi2: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
}

/// Computes `Psi_1 = sum sigma_i^2 (z^T e_i)^2`,
/// `Psi_2 = N sum sigma_i^2 ||z (.) e_i||^2`, and the pairwise `Omega`
/// companions, for a two-layer state.
pub fn imbalance_terms<T: Scalar>(state: &ReparamState<T>, sd: &SpectralData<T>) -> ImbalanceTerms {
    let r = sd.rank();
    let n_scale = T::from_usize(sd.n());
    let ze = state.residual_components(sd);
    let z = state.residual_vector(sd);
    let e: Vec<Vec<T>> = (0..r).map(|i| sd.left_vector(i)).collect();

    let mut psi1 = T::zero();
    let mut psi2 = T::zero();
    for i in 0..r {
        let s2 = sd.sigma(i) * sd.sigma(i);
        psi1 += s2 * ze[i] * ze[i];
        let mut had = T::zero();
        for k in 0..sd.n() {
            let h = z[k] * e[i][k];
            had += h * h;
        }
        psi2 += s2 * had;
    }
    psi2 *= n_scale;

    let mut omega1 = T::zero();
    let mut omega2 = T::zero();
    for i in 0..r {
        for j in i + 1..r {
            let a = sd.sigma(i) * ze[i] * state.o[j] - sd.sigma(j) * ze[j] * state.o[i];
            omega1 += a * a;
            let mut had = T::zero();
            for k in 0..sd.n() {
                let b = sd.sigma(i) * z[k] * e[i][k] * state.o[j]
                    - sd.sigma(j) * z[k] * e[j][k] * state.o[i];
                had += b * b;
            }
            omega2 += had;
        }
    }
    omega2 *= n_scale;

    let psi1 = psi1.to_f64();
    let psi2 = psi2.to_f64();
    let omega1 = omega1.to_f64();
    let omega2 = omega2.to_f64();
    let t1 = (psi1 >= RATIO_FLOOR).then(|| omega1 / psi1);
    let t2 = (psi2 - psi1 >= RATIO_FLOOR).then(|| (omega2 - omega1) / (psi2 - psi1));
    ImbalanceTerms {
        psi1,
        psi2,
        omega1,
        omega2,
        t1,
        t2,
    }
}

/// Exact per-step change of C under GD:
/// `(eta^2/N^2) [ -Psi_1 C + Omega_1 ]`.
pub fn gd_imbalance_delta(terms: &ImbalanceTerms, c: f64, eta: f64, n: usize) -> f64 {
    eta * eta / (n as f64 * n as f64) * (-terms.psi1 * c + terms.omega1)
}

/// Expected per-step change of C under SGD: the GD value plus
/// `(eta^2 (N-B))/(B N^2 (N-1)) [ -(Psi_2-Psi_1) C + (Omega_2-Omega_1) ]`.
pub fn sgd_expected_imbalance_delta(
    terms: &ImbalanceTerms,
    c: f64,
    eta: f64,
    n: usize,
    b: usize,
) -> Result<f64> {
    if b == 0 || b > n {
        return Err(Error::InvalidMask {
            reason: format!("B={b} outside [1, {n}]"),
        });
    }
    let gd = gd_imbalance_delta(terms, c, eta, n);
    if b == n {
        return Ok(gd);
    }
    let nf = n as f64;
    let bf = b as f64;
    let factor = eta * eta * (nf - bf) / (bf * nf * nf * (nf - 1.0));
    Ok(gd + factor * (-(terms.psi2 - terms.psi1) * c + (terms.omega2 - terms.omega1)))
}

/// Closed-form `E[p p^T]` for the 0/1 mask vector with exactly B ones:
/// `B(N-B)/(N(N-1)) I + B(B-1)/(N(N-1)) 11^T`.
pub fn mask_second_moment(n: usize, b: usize) -> Result<DenseMatrix<f64>> {
    if b == 0 || b > n {
        return Err(Error::InvalidMask {
            reason: format!("B={b} outside [1, {n}]"),
        });
    }
    let nf = n as f64;
    let bf = b as f64;
    let (diag, off) = if n == 1 {
        (1.0, 0.0)
    } else {
        (
            bf / nf,
            bf * (bf - 1.0) / (nf * (nf - 1.0)),
        )
    };
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, if i == j { diag } else { off });
        }
    }
    Ok(m)
}

/// Constructs the exact two-layer minimizer determined (up to sign) by the
/// dataset and a target imbalance: `v^2` from the positive root,
/// `o_i = d_i/(sigma_i v)`.
pub fn construct_minimizer_2layer<T: Scalar>(
    sd: &SpectralData<T>,
    c_star: T,
) -> Result<ReparamState<T>> {
    let q = positive_difficulty(sd)?;
    let v = v1_star_sq(c_star, q).sqrt();
    let o = (0..sd.rank())
        .map(|i| sd.d_coeffs[i] / (sd.sigma(i) * v))
        .collect();
    Ok(ReparamState {
        o,
        v: vec![v],
        u_perp: vec![T::zero(); sd.dim()],
    })
}

/// Constructs the balanced deep minimizer: `v_j = Q^{1/(2D)}`,
/// `o_i = d_i / (sigma_i v^{D-1})`.
pub fn construct_minimizer_deep<T: Scalar>(
    sd: &SpectralData<T>,
    depth: usize,
) -> Result<ReparamState<T>> {
    if depth < 2 {
        return Err(Error::InvalidArgument("depth must be >= 2".into()));
    }
    let q = positive_difficulty(sd)?;
    let v = q.powf(T::from_f64(1.0 / (2.0 * depth as f64)));
    let v_prod = v.powi(depth as i32 - 1);
    let o = (0..sd.rank())
        .map(|i| sd.d_coeffs[i] / (sd.sigma(i) * v_prod))
        .collect();
    Ok(ReparamState {
        o,
        v: vec![v; depth - 1],
        u_perp: vec![T::zero(); sd.dim()],
    })
}

/// Residual of the nonlinear solution equation at a candidate `v1`:
/// `2 sum g(h^{-1}(d_i/v1))/sigma_i^2 - v1^2 - C`.
pub fn nl_solution_residual<T: Scalar>(
    sd: &SpectralData<T>,
    activation: Activation,
    v1: T,
    target_c: T,
) -> Result<T> {
    let two = T::from_usize(2);
    let mut acc = T::zero();
    for i in 0..sd.rank() {
        let arg = activation.inverse(sd.d_coeffs[i] / v1)?;
        acc += two * nl_g(activation, arg) / (sd.sigma(i) * sd.sigma(i));
    }
    Ok(acc - v1 * v1 - target_c)
}

/// Bisection root of the nonlinear solution equation over `v1 > 0`.
///
/// Bracket: just above the activation's domain boundary up to a doubling
/// cap, validated for a sign change; 200 iterations.
pub fn nl_solve_v1<T: Scalar>(
    sd: &SpectralData<T>,
    activation: Activation,
    target_c: T,
) -> Result<T> {
    let boundary = match activation {
        Activation::Identity => T::zero(),
        Activation::Tanh => sd
            .d_coeffs
            .iter()
            .fold(T::zero(), |m, &d| m.max(d.abs())),
        Activation::Sigmoid => {
            if sd.d_coeffs.iter().any(|&d| !(d > T::zero())) {
                return Err(Error::Domain(
                    "sigmoid solutions need all d_i > 0".into(),
                ));
            }
            sd.d_coeffs.iter().fold(T::zero(), |m, &d| m.max(d))
        }
    };
    let mut lo = boundary + T::from_f64(1e-9);
    let f_lo = nl_solution_residual(sd, activation, lo, target_c)?;
    let mut hi = lo + lo + T::one();
    let mut f_hi;
    loop {
        f_hi = nl_solution_residual(sd, activation, hi, target_c)?;
        if f_hi * f_lo <= T::zero() {
            break;
        }
        hi = hi * T::from_usize(2);
        if hi > T::from_f64(1e8) {
            return Err(Error::Domain(
                "no sign change in the bisection bracket".into(),
            ));
        }
    }
    if f_lo * f_hi > T::zero() {
        return Err(Error::Domain("bracket endpoints share a sign".into()));
    }
    let mut sign_lo = f_lo;
    for _ in 0..200 {
        let mid = (lo + hi) / T::from_usize(2);
        let f_mid = nl_solution_residual(sd, activation, mid, target_c)?;
        if f_mid * sign_lo <= T::zero() {
            hi = mid;
        } else {
            lo = mid;
            sign_lo = f_mid;
        }
    }
    Ok((lo + hi) / T::from_usize(2))
}
