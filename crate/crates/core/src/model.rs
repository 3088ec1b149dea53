//! The single-neuron deep linear network `f(x) = (x^T u) prod v_i`, its
//! squared loss, exact first/second derivatives, and the two-layer nonlinear
//! variant `f(x) = h(x^T u) v_1`.
//!
//! The Hessian is assembled on the invariant coordinate block
//! `span{w_1..w_r} (+) v` where it is exact; the complementary block of the
//! full Hessian vanishes identically, so the top eigenvalue is unchanged.

use crate::dataset::{Dataset, SpectralData};
use crate::error::{Error, Result};
use crate::linalg::{dot, spectral_norm, sym_eig_max, DenseMatrix};
use crate::reparam::{to_reparam, ReparamState};
use crate::scalar::Scalar;

/// Full parameters: first-layer vector `u` and scalar layers `v_1..v_{D-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn new(u: Vec<T>, v: Vec<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidArgument(
                "need at least one scalar layer (depth >= 2)".into(),
            ));
        }
        Ok(Params { u, v })
    }

    pub fn depth(&self) -> usize {
        self.v.len() + 1
    }

    /// Total parameter count `p = d + D - 1`.
    pub fn count(&self) -> usize {
        self.u.len() + self.v.len()
    }

    pub fn prod_v(&self) -> T {
        self.v.iter().copied().fold(T::one(), |a, b| a * b)
    }

    /// Product of all v except index `j`.
    pub fn prod_v_except(&self, j: usize) -> T {
        self.v
            .iter()
            .enumerate()
            .filter(|&(q, _)| q != j)
            .map(|(_, &v)| v)
            .fold(T::one(), |a, b| a * b)
    }

    pub fn prod_v_except2(&self, j: usize, k: usize) -> T {
        self.v
            .iter()
            .enumerate()
            .filter(|&(q, _)| q != j && q != k)
            .map(|(_, &v)| v)
            .fold(T::one(), |a, b| a * b)
    }
}

fn check_dims<T: Scalar>(ds: &Dataset<T>, theta: &Params<T>) -> Result<()> {
    if theta.u.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            context: "model forward",
            expected: ds.dim(),
            got: theta.u.len(),
        });
    }
    Ok(())
}

/// `f(X; theta) = (X u) prod v_i`.
pub fn forward<T: Scalar>(ds: &Dataset<T>, theta: &Params<T>) -> Result<Vec<T>> {
    check_dims(ds, theta)?;
    let pv = theta.prod_v();
    let xu = ds.x().matvec(&theta.u)?;
    Ok(xu.into_iter().map(|v| v * pv).collect())
}

/// Residual `z = f - y` and loss `||z||^2 / (2N)`.
pub fn residual_and_loss<T: Scalar>(ds: &Dataset<T>, theta: &Params<T>) -> Result<(Vec<T>, T)> {
    let f = forward(ds, theta)?;
    let z: Vec<T> = f.iter().zip(ds.y()).map(|(&fi, &yi)| fi - yi).collect();
    let loss = dot(&z, &z) / (T::from_usize(2) * T::from_usize(ds.n()));
    Ok((z, loss))
}

/// Exact gradient, laid out as `[du..., dv...]`:
/// `dL/du = (1/N) X^T z prod v`, `dL/dv_j = (1/N) z^T X u prod_{q != j} v_q`.
pub fn gradient<T: Scalar>(ds: &Dataset<T>, theta: &Params<T>) -> Result<Vec<T>> {
    let (z, _) = residual_and_loss(ds, theta)?;
    let inv_n = T::from_usize(ds.n()).recip();
    let xtz = ds.x().tr_matvec(&z)?;
    let pv = theta.prod_v();
    let mut grad = Vec::with_capacity(theta.count());
    for &g in &xtz {
        grad.push(g * pv * inv_n);
    }
    let xu = ds.x().matvec(&theta.u)?;
    let ztxu = dot(&z, &xu);
    for j in 0..theta.v.len() {
        grad.push(ztxu * theta.prod_v_except(j) * inv_n);
    }
    Ok(grad)
}

/// Exact Hessian of the loss restricted to the invariant block
/// `span{w_1..w_r} (+) v-coordinates`, a symmetric matrix of size
/// `r + D - 1`. Assembled as `(1/N)(J^T J + <H, z>)` with the closed-form
/// second partials of `f`.
pub fn hessian_reduced<T: Scalar>(
    ds: &Dataset<T>,
    sd: &SpectralData<T>,
    theta: &Params<T>,
) -> Result<DenseMatrix<T>> {
    check_dims(ds, theta)?;
    let state = to_reparam(theta, sd)?;
    Ok(hessian_reduced_state(sd, &state))
}

/// Reduced Hessian from reparameterized coordinates. The residual enters
/// only through its `e_i` components `sigma_i o_i prod(v) - d_i`.
pub fn hessian_reduced_state<T: Scalar>(
    sd: &SpectralData<T>,
    state: &ReparamState<T>,
) -> DenseMatrix<T> {
    let r = sd.rank();
    let dm1 = state.v.len();
    let n = r + dm1;
    let inv_n = T::from_usize(sd.n()).recip();
    let pv = state.prod_v();
    let mut h = DenseMatrix::zeros(n, n);

    let sig = |i: usize| sd.sigma(i);
    let ze: Vec<T> = (0..r)
        .map(|i| sig(i) * state.o[i] * pv - sd.d_coeffs[i])
        .collect();

    // o-o block: J^T J only (f is linear in o at fixed v).
    for i in 0..r {
        h.set(i, i, sig(i) * sig(i) * pv * pv * inv_n);
    }
    // o-v block: sigma_i^2 o_i pv pv_{-j} + sigma_i (z^T e_i) pv_{-j}.
    for i in 0..r {
        for j in 0..dm1 {
            let pvj = state.prod_v_except(j);
            let val = (sig(i) * sig(i) * state.o[i] * pv * pvj + sig(i) * ze[i] * pvj) * inv_n;
            h.set(i, r + j, val);
            h.set(r + j, i, val);
        }
    }
    // v-v block: (sum sigma_i^2 o_i^2) pv_{-j} pv_{-k}, plus for j != k the
    // curvature term (sum sigma_i (z^T e_i) o_i) pv_{-j,-k}.
    let sum_s2o2 = (0..r)
        .map(|i| sig(i) * sig(i) * state.o[i] * state.o[i])
        .sum::<T>();
    let sum_sze_o = (0..r).map(|i| sig(i) * ze[i] * state.o[i]).sum::<T>();
    for j in 0..dm1 {
        for k in 0..dm1 {
            let mut val = sum_s2o2 * state.prod_v_except(j) * state.prod_v_except(k);
            if j != k {
                val += sum_sze_o * state.prod_v_except2(j, k);
            }
            h.set(r + j, r + k, val * inv_n);
        }
    }
    h
}

/// Sharpness `S = lambda_max(Hessian)`, computed on the reduced block and
/// clamped below by the zero eigenvalue of the untouched complement.
pub fn sharpness<T: Scalar>(
    ds: &Dataset<T>,
    sd: &SpectralData<T>,
    theta: &Params<T>,
) -> Result<T> {
    let h = hessian_reduced(ds, sd, theta)?;
    let (lambda, _) = sym_eig_max(&h)?;
    Ok(lambda.max(T::zero()))
}

/// Sharpness straight from reparameterized coordinates.
pub fn sharpness_state<T: Scalar>(sd: &SpectralData<T>, state: &ReparamState<T>) -> Result<T> {
    let h = hessian_reduced_state(sd, state);
    let (lambda, _) = sym_eig_max(&h)?;
    Ok(lambda.max(T::zero()))
}

/// NTK matrix `J J^T` (N x N). At a global minimizer
/// `S = (1/N) ||J J^T||_2`.
pub fn ntk<T: Scalar>(ds: &Dataset<T>, theta: &Params<T>) -> Result<DenseMatrix<T>> {
    check_dims(ds, theta)?;
    let n = ds.n();
    let pv = theta.prod_v();
    let xu = ds.x().matvec(&theta.u)?;
    // JJ^T = (prod v)^2 X X^T + sum_j (prod_{q!=j} v_q)^2 (Xu)(Xu)^T
    let mut coeff = T::zero();
    for j in 0..theta.v.len() {
        let pvj = theta.prod_v_except(j);
        coeff += pvj * pvj;
    }
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let xxt = dot(ds.x().row(i), ds.x().row(k));
            out.set(i, k, pv * pv * xxt + coeff * xu[i] * xu[k]);
        }
    }
    Ok(out)
}

/// Spectral norm of the NTK divided by N; equals sharpness at minimizers.
pub fn ntk_sharpness<T: Scalar>(ds: &Dataset<T>, theta: &Params<T>) -> Result<T> {
    let k = ntk(ds, theta)?;
    Ok(spectral_norm(&k)? / T::from_usize(ds.n()))
}

/// Gradient norm in the invariant coordinates (equals the full gradient
/// norm; the complement component of the gradient is identically zero).
pub fn grad_norm_state<T: Scalar>(sd: &SpectralData<T>, state: &ReparamState<T>) -> T {
    let (od, vd) = crate::reparam::gf_rhs_reparam(state, sd);
    let mut acc = T::zero();
    for g in od.iter().chain(vd.iter()) {
        acc += *g * *g;
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Two-layer nonlinear variant.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (T::one() - s)
            }
        }
    }

    /// Inverse of the activation on its range.
    pub fn inverse<T: Scalar>(self, y: T) -> Result<T> {
        match self {
            Activation::Identity => Ok(y),
            Activation::Tanh => {
                if y.abs() < T::one() {
                    Ok(y.atanh())
                } else {
                    Err(Error::Domain(format!(
                        "tanh inverse needs |y| < 1, got {}",
                        y.to_f64()
                    )))
                }
            }
            Activation::Sigmoid => {
                if y > T::zero() && y < T::one() {
                    Ok((y / (T::one() - y)).ln())
                } else {
                    Err(Error::Domain(format!(
                        "sigmoid inverse needs 0 < y < 1, got {}",
                        y.to_f64()
                    )))
                }
            }
        }
    }
}

/// Antiderivative of `h / h'` with the fixed branch constants:
/// identity -> x^2/2, tanh -> cosh^2(x)/2, sigmoid -> exp(x) + x.
pub fn nl_g<T: Scalar>(activation: Activation, x: T) -> T {
    match activation {
        Activation::Identity => x * x / T::from_usize(2),
        Activation::Tanh => {
            let c = x.cosh();
            c * c / T::from_usize(2)
        }
        Activation::Sigmoid => x.exp() + x,
    }
}

/// Parameters of the two-layer nonlinear model.
#[derive(Clone, Debug)]
pub struct NonlinearParams<T> {
    pub u: Vec<T>,
    pub v1: T,
    pub activation: Activation,
}

fn check_nl_dims<T: Scalar>(ds: &Dataset<T>, theta: &NonlinearParams<T>) -> Result<()> {
    if theta.u.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            context: "nonlinear forward",
            expected: ds.dim(),
            got: theta.u.len(),
        });
    }
    Ok(())
}

/// `f(X) = h(X u) v_1`.
pub fn nl_forward<T: Scalar>(ds: &Dataset<T>, theta: &NonlinearParams<T>) -> Result<Vec<T>> {
    check_nl_dims(ds, theta)?;
    let xu = ds.x().matvec(&theta.u)?;
    Ok(xu
        .into_iter()
        .map(|t| theta.activation.apply(t) * theta.v1)
        .collect())
}

pub fn nl_residual_and_loss<T: Scalar>(
    ds: &Dataset<T>,
    theta: &NonlinearParams<T>,
) -> Result<(Vec<T>, T)> {
    let f = nl_forward(ds, theta)?;
    let z: Vec<T> = f.iter().zip(ds.y()).map(|(&fi, &yi)| fi - yi).collect();
    let loss = dot(&z, &z) / (T::from_usize(2) * T::from_usize(ds.n()));
    Ok((z, loss))
}

/// Exact gradient `[du..., dv1]`:
/// `dL/du = (1/N) v1 X^T [z (.) h'(Xu)]`, `dL/dv1 = (1/N) h(Xu)^T z`.
pub fn nl_gradient<T: Scalar>(ds: &Dataset<T>, theta: &NonlinearParams<T>) -> Result<Vec<T>> {
    let (z, _) = nl_residual_and_loss(ds, theta)?;
    let inv_n = T::from_usize(ds.n()).recip();
    let xu = ds.x().matvec(&theta.u)?;
    let weighted: Vec<T> = z
        .iter()
        .zip(&xu)
        .map(|(&zi, &ti)| zi * theta.activation.derivative(ti))
        .collect();
    let xtw = ds.x().tr_matvec(&weighted)?;
    let mut grad: Vec<T> = xtw.into_iter().map(|g| g * theta.v1 * inv_n).collect();
    let hv: Vec<T> = xu.iter().map(|&t| theta.activation.apply(t)).collect();
    grad.push(dot(&hv, &z) * inv_n);
    Ok(grad)
}

/// Checks the orthogonal-data assumption `X X^T` diagonal, required for the
/// nonlinear conservation results.
pub fn is_orthogonal_data<T: Scalar>(ds: &Dataset<T>, tol: T) -> bool {
    let n = ds.n();
    for i in 0..n {
        for k in i + 1..n {
            if dot(ds.x().row(i), ds.x().row(k)).abs() > tol {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{decompose, synth_gaussian, Dataset, LabelMode};
    use crate::linalg::norm;
    use crate::rng::SplitMix64;

    fn ds(x: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset<f64> {
        Dataset::new(DenseMatrix::from_rows(&x).unwrap(), y).unwrap()
    }

    fn identity_ds() -> Dataset<f64> {
        ds(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 0.0])
    }

    #[test]
    fn forward_cases() {
        let data = identity_ds();
        let z = forward(
            &data,
            &Params::new(vec![1.0, 0.0], vec![3.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(z, vec![3.0, 0.0]);
        // any v_i = 0 collapses to the zero vector
        let z = forward(
            &data,
            &Params::new(vec![0.7, -0.4], vec![2.0, 0.0, 1.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        // embedded dataset at theta0: frozen oracle values
        let eos = crate::dataset::eos_dataset();
        let f = forward(&eos, &Params::new(vec![0.01, 0.01], vec![0.01]).unwrap()).unwrap();
        assert!((f[0] - 0.00012475671700000002).abs() < 1e-18);
        assert!((f[1] - -0.00016103581200000003).abs() < 1e-18);
    }

    #[test]
    fn loss_cases() {
        let data = identity_ds();
        // v = 0 leaves z = -y, L = 1/4
        let (_, l) = residual_and_loss(
            &data,
            &Params::new(vec![1.0, 1.0], vec![0.0]).unwrap(),
        )
        .unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        // interpolating solution has zero loss
        let (z, l) = residual_and_loss(
            &data,
            &Params::new(vec![1.0, 0.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert!(z.iter().all(|&v| v.abs() < 1e-15));
        assert!(l < 1e-30);
        // embedded dataset at theta0
        let eos = crate::dataset::eos_dataset();
        let (_, l) = residual_and_loss(
            &eos,
            &Params::new(vec![0.01, 0.01], vec![0.01]).unwrap(),
        )
        .unwrap();
        assert!((l - 0.7830195500701945).abs() < 1e-12);
    }

    #[test]
    fn gradient_hand_case() {
        // u=(1,0), v=(1), X=I2, y=(1,-1): z=(0,1),
        // dL/du = (0, 1/2), dL/dv = (z^T X u)/2 = 0.
        let data = ds(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, -1.0]);
        let g = gradient(&data, &Params::new(vec![1.0, 0.0], vec![1.0]).unwrap()).unwrap();
        assert!((g[0] - 0.0).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);
        assert!(g[2].abs() < 1e-15);
        // zero residual -> zero gradient
        let g = gradient(&data, &Params::new(vec![1.0, -1.0], vec![1.0]).unwrap()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    fn fd_gradient(data: &Dataset<f64>, theta: &Params<f64>, h: f64) -> Vec<f64> {
        let p = theta.count();
        let mut out = Vec::with_capacity(p);
        for k in 0..p {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            if k < theta.u.len() {
                plus.u[k] += h;
                minus.u[k] -= h;
            } else {
                plus.v[k - theta.u.len()] += h;
                minus.v[k - theta.u.len()] -= h;
            }
            let (_, lp) = residual_and_loss(data, &plus).unwrap();
            let (_, lm) = residual_and_loss(data, &minus).unwrap();
            out.push((lp - lm) / (2.0 * h));
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(314);
        for _ in 0..100 {
            let n = 2 + (rng.below(5) as usize);
            let d = 2 + (rng.below(8) as usize);
            let depth = 2 + (rng.below(4) as usize);
            let data = synth_gaussian(n, d, LabelMode::Gaussian, rng.next_u64()).unwrap();
            let theta = Params::new(
                (0..d).map(|_| rng.next_gaussian() * 0.5).collect(),
                (0..depth - 1).map(|_| 0.5 + rng.next_f64()).collect(),
            )
            .unwrap();
            let g = gradient(&data, &theta).unwrap();
            let fd = fd_gradient(&data, &theta, 1e-6);
            let scale = norm(&g).max(1.0);
            for (a, b) in g.iter().zip(&fd) {
                assert!(
                    (a - b).abs() <= 1e-5 * scale,
                    "grad {a} vs fd {b} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn gradient_u_component_stays_in_row_space() {
        let mut rng = SplitMix64::new(88);
        // rank-deficient: d=5 features but rank <= 3
        let base = synth_gaussian(3, 5, LabelMode::Gaussian, 7).unwrap();
        let sd = decompose(&base).unwrap();
        for _ in 0..20 {
            let theta = Params::new(
                (0..5).map(|_| rng.next_gaussian()).collect(),
                vec![rng.next_gaussian(), rng.next_gaussian()],
            )
            .unwrap();
            let g = gradient(&base, &theta).unwrap();
            let gu = &g[..5];
            // project onto W-perp: subtract W components
            let mut perp = gu.to_vec();
            for i in 0..sd.rank() {
                let w = sd.right_vector(i);
                let c = dot(&w, gu);
                for (p, &wi) in perp.iter_mut().zip(&w) {
                    *p -= c * wi;
                }
            }
            assert!(norm(&perp) <= 1e-10 * norm(gu).max(1e-30));
        }
    }

    #[test]
    fn sharpness_at_origin_is_xty_over_n() {
        let eos = crate::dataset::eos_dataset();
        let sd = decompose(&eos).unwrap();
        let theta = Params::new(vec![0.0, 0.0], vec![0.0]).unwrap();
        let s = sharpness(&eos, &sd, &theta).unwrap();
        let xty = eos.x().tr_matvec(eos.y()).unwrap();
        let expect = norm(&xty) / 2.0;
        assert!((s - expect).abs() <= 1e-10 * expect);
        assert!((expect - 0.7281296451094393).abs() < 1e-12);
    }

    #[test]
    fn sharpness_at_constructed_minimizer() {
        // X=I2, y=(1,0), minimizer u=(1,0), v=(1): NTK = diag(2,1), S = 1.
        let data = identity_ds();
        let sd = decompose(&data).unwrap();
        let theta = Params::new(vec![1.0, 0.0], vec![1.0]).unwrap();
        let s = sharpness(&data, &sd, &theta).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let k = ntk(&data, &theta).unwrap();
        assert!((k.get(0, 0) - 2.0).abs() < 1e-14);
        assert!((k.get(1, 1) - 1.0).abs() < 1e-14);
        assert!(k.get(0, 1).abs() < 1e-14);
        assert!((ntk_sharpness(&data, &theta).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn ntk_two_layer_closed_form() {
        let mut rng = SplitMix64::new(21);
        let data = synth_gaussian(4, 3, LabelMode::Gaussian, 33).unwrap();
        let theta = Params::new(
            (0..3).map(|_| rng.next_gaussian()).collect(),
            vec![rng.next_gaussian()],
        )
        .unwrap();
        let k = ntk(&data, &theta).unwrap();
        let v1 = theta.v[0];
        let xu = data.x().matvec(&theta.u).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let xxt = dot(data.x().row(i), data.x().row(j));
                let expect = xxt * v1 * v1 + xu[i] * xu[j];
                assert!((k.get(i, j) - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reduced_hessian_matches_fd_hessian_embedded() {
        let mut rng = SplitMix64::new(5150);
        for trial in 0..10 {
            let n = 2 + (rng.below(4) as usize);
            let d = 2 + (rng.below(4) as usize);
            let depth = 2 + (rng.below(2) as usize);
            let data = synth_gaussian(n, d, LabelMode::Gaussian, rng.next_u64()).unwrap();
            let sd = decompose(&data).unwrap();
            let theta = Params::new(
                (0..d).map(|_| rng.next_gaussian() * 0.7).collect(),
                (0..depth - 1).map(|_| 0.4 + rng.next_f64()).collect(),
            )
            .unwrap();
            let hr = hessian_reduced(&data, &sd, &theta).unwrap();
            let embedded = embed_hessian(&sd, &hr, d, depth - 1);
            let fd = fd_hessian(&data, &theta, 1e-5);
            let scale = fd.max_abs().max(1.0);
            for i in 0..theta.count() {
                for j in 0..theta.count() {
                    assert!(
                        (embedded.get(i, j) - fd.get(i, j)).abs() <= 1e-5 * scale,
                        "trial {trial} ({i},{j}): {} vs {}",
                        embedded.get(i, j),
                        fd.get(i, j)
                    );
                }
            }
        }
    }

    fn embed_hessian(
        sd: &SpectralData<f64>,
        hr: &DenseMatrix<f64>,
        d: usize,
        dm1: usize,
    ) -> DenseMatrix<f64> {
        let r = sd.rank();
        let p = d + dm1;
        let mut out = DenseMatrix::zeros(p, p);
        let w: Vec<Vec<f64>> = (0..r).map(|i| sd.right_vector(i)).collect();
        for a in 0..p {
            for b in 0..p {
                let mut acc = 0.0;
                for i in 0..r {
                    for j in 0..r {
                        let wa = if a < d { w[i][a] } else { 0.0 };
                        let wb = if b < d { w[j][b] } else { 0.0 };
                        acc += wa * hr.get(i, j) * wb;
                    }
                }
                if a < d && b >= d {
                    for i in 0..r {
                        acc += w[i][a] * hr.get(i, r + (b - d));
                    }
                } else if a >= d && b < d {
                    for j in 0..r {
                        acc += hr.get(r + (a - d), j) * w[j][b];
                    }
                } else if a >= d && b >= d {
                    acc = hr.get(r + (a - d), r + (b - d));
                }
                out.set(a, b, acc);
            }
        }
        out
    }

    fn fd_hessian(data: &Dataset<f64>, theta: &Params<f64>, h: f64) -> DenseMatrix<f64> {
        let p = theta.count();
        let mut out = DenseMatrix::zeros(p, p);
        for j in 0..p {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            if j < theta.u.len() {
                plus.u[j] += h;
                minus.u[j] -= h;
            } else {
                plus.v[j - theta.u.len()] += h;
                minus.v[j - theta.u.len()] -= h;
            }
            let gp = gradient(data, &plus).unwrap();
            let gm = gradient(data, &minus).unwrap();
            for i in 0..p {
                out.set(i, j, (gp[i] - gm[i]) / (2.0 * h));
            }
        }
        // symmetrize the FD noise
        let mut sym = DenseMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                sym.set(i, j, 0.5 * (out.get(i, j) + out.get(j, i)));
            }
        }
        sym
    }

    #[test]
    fn bordered_second_order_term_two_layer() {
        // At u=0, v=0 the reduced Hessian is the bordered matrix with
        // entries sigma_i (z^T e_i) = -sigma_i d_i.
        let data = ds(
            vec![vec![2.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 1.0],
        );
        let sd = decompose(&data).unwrap();
        let theta = Params::new(vec![0.0, 0.0], vec![0.0]).unwrap();
        let h = hessian_reduced(&data, &sd, &theta).unwrap();
        let r = sd.rank();
        for i in 0..r {
            assert!(h.get(i, i).abs() < 1e-15);
            let expect = -sd.sigma(i) * sd.d_coeffs[i] / 2.0;
            assert!((h.get(i, r) - expect).abs() < 1e-14);
        }
        assert!(h.get(r, r).abs() < 1e-15);
    }

    #[test]
    fn nl_identity_reduces_to_linear() {
        let data = synth_gaussian(4, 3, LabelMode::Gaussian, 10).unwrap();
        let mut rng = SplitMix64::new(2);
        let u: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        let v1 = 1.3;
        let nl = NonlinearParams {
            u: u.clone(),
            v1,
            activation: Activation::Identity,
        };
        let lin = Params::new(u, vec![v1]).unwrap();
        let gn = nl_gradient(&data, &nl).unwrap();
        let gl = gradient(&data, &lin).unwrap();
        for (a, b) in gn.iter().zip(&gl) {
            assert!((a - b).abs() < 1e-14);
        }
        let (_, ln_) = nl_residual_and_loss(&data, &nl).unwrap();
        let (_, ll) = residual_and_loss(&data, &lin).unwrap();
        assert!((ln_ - ll).abs() < 1e-15);
    }

    #[test]
    fn nl_gradient_matches_finite_differences() {
        // orthogonal-data instance (diagonal X), tanh and sigmoid
        let data = ds(vec![vec![1.5, 0.0], vec![0.0, 0.8]], vec![0.4, 0.3]);
        let mut rng = SplitMix64::new(91);
        for activation in [Activation::Tanh, Activation::Sigmoid] {
            for _ in 0..20 {
                let theta = NonlinearParams {
                    u: (0..2).map(|_| rng.next_gaussian() * 0.5).collect(),
                    v1: 0.5 + rng.next_f64(),
                    activation,
                };
                let g = nl_gradient(&data, &theta).unwrap();
                let h = 1e-6;
                let mut fd = Vec::new();
                for k in 0..3 {
                    let mut plus = theta.clone();
                    let mut minus = theta.clone();
                    if k < 2 {
                        plus.u[k] += h;
                        minus.u[k] -= h;
                    } else {
                        plus.v1 += h;
                        minus.v1 -= h;
                    }
                    let (_, lp) = nl_residual_and_loss(&data, &plus).unwrap();
                    let (_, lm) = nl_residual_and_loss(&data, &minus).unwrap();
                    fd.push((lp - lm) / (2.0 * h));
                }
                let scale = norm(&g).max(1.0);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * scale);
                }
            }
        }
        // zero residual -> zero gradient (construct exact fit)
        let v1 = 2.0;
        let theta = NonlinearParams {
            u: vec![
                Activation::Tanh.inverse(0.4 / v1).unwrap() / 1.5,
                Activation::Tanh.inverse(0.3 / v1).unwrap() / 0.8,
            ],
            v1,
            activation: Activation::Tanh,
        };
        let g = nl_gradient(&data, &theta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nl_g_branch_values() {
        assert!((nl_g(Activation::Identity, 2.0f64) - 2.0).abs() < 1e-15);
        assert!((nl_g(Activation::Tanh, 0.0f64) - 0.5).abs() < 1e-15);
        assert!((nl_g(Activation::Sigmoid, 0.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_data_detector() {
        let diag = ds(vec![vec![1.5, 0.0], vec![0.0, 0.8]], vec![0.4, 0.3]);
        assert!(is_orthogonal_data(&diag, 1e-12));
        let dense = ds(vec![vec![1.0, 0.5], vec![0.3, 1.0]], vec![1.0, 1.0]);
        assert!(!is_orthogonal_data(&dense, 1e-12));
    }
}
