//! Reduced coordinates `(o_1..o_r, v_1..v_{D-1})` for the linear model and
//! the optimizer updates expressed in them.
//!
//! `u = sum_i o_i w_i + u_perp` with `u_perp` frozen: every update keeps the
//! component outside the data row space untouched, so it is stored once and
//! copied bitwise through all steps. The residual's invariant components are
//! `z^T e_i = sigma_i o_i prod(v) - d_i`; training targets the projection of
//! y onto col(X).

use crate::dataset::SpectralData;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::Params;
use crate::optimize::BatchMask;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ReparamState<T> {
    /// `o_i = w_i^T u`, length r.
    pub o: Vec<T>,
    /// Scalar layers `v_1..v_{D-1}`.
    pub v: Vec<T>,
    /// Frozen component of `u` orthogonal to the data row space.
    pub u_perp: Vec<T>,
}

impl<T: Scalar> ReparamState<T> {
    pub fn depth(&self) -> usize {
        self.v.len() + 1
    }

    pub fn prod_v(&self) -> T {
        self.v.iter().copied().fold(T::one(), |a, b| a * b)
    }

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

    /// Invariant residual components `z^T e_i = sigma_i o_i prod(v) - d_i`.
    pub fn residual_components(&self, sd: &SpectralData<T>) -> Vec<T> {
        let pv = self.prod_v();
        (0..sd.rank())
            .map(|i| sd.sigma(i) * self.o[i] * pv - sd.d_coeffs[i])
            .collect()
    }

    /// Reducible part of the loss, `sum_i (z^T e_i)^2 / (2N)`.
    pub fn reducible_loss(&self, sd: &SpectralData<T>) -> T {
        let ze = self.residual_components(sd);
        dot(&ze, &ze) / (T::from_usize(2) * T::from_usize(sd.n()))
    }

    /// Residual vector in sample space (y projected onto col(X)).
    pub fn residual_vector(&self, sd: &SpectralData<T>) -> Vec<T> {
        let ze = self.residual_components(sd);
        let mut z = vec![T::zero(); sd.n()];
        for i in 0..sd.rank() {
            let e = sd.left_vector(i);
            for (zn, &en) in z.iter_mut().zip(&e) {
                *zn += ze[i] * en;
            }
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.o.iter().all(|x| x.is_finite()) && self.v.iter().all(|x| x.is_finite())
    }
}

/// Projects full parameters into reduced coordinates.
pub fn to_reparam<T: Scalar>(theta: &Params<T>, sd: &SpectralData<T>) -> Result<ReparamState<T>> {
    if theta.u.len() != sd.dim() {
        return Err(Error::DimensionMismatch {
            context: "to_reparam",
            expected: sd.dim(),
            got: theta.u.len(),
        });
    }
    let r = sd.rank();
    let mut o = Vec::with_capacity(r);
    for i in 0..r {
        o.push(dot(&sd.right_vector(i), &theta.u));
    }
    let mut u_perp = theta.u.clone();
    for i in 0..r {
        let w = sd.right_vector(i);
        for (p, &wi) in u_perp.iter_mut().zip(&w) {
            *p -= o[i] * wi;
        }
    }
    Ok(ReparamState {
        o,
        v: theta.v.clone(),
        u_perp,
    })
}

/// Rebuilds full parameters `u = sum o_i w_i + u_perp`.
pub fn from_reparam<T: Scalar>(state: &ReparamState<T>, sd: &SpectralData<T>) -> Result<Params<T>> {
    if state.o.len() != sd.rank() {
        return Err(Error::DimensionMismatch {
            context: "from_reparam",
            expected: sd.rank(),
            got: state.o.len(),
        });
    }
    let mut u = state.u_perp.clone();
    for i in 0..sd.rank() {
        let w = sd.right_vector(i);
        for (ui, &wi) in u.iter_mut().zip(&w) {
            *ui += state.o[i] * wi;
        }
    }
    Params::new(u, state.v.clone())
}

/// One simultaneous GD step:
/// `o_i <- o_i - (eta/N) sigma_i (e_i^T z) prod(v)`,
/// `v_j <- v_j - (eta/N) sum_i sigma_i (e_i^T z) o_i prod_{q != j} v_q`.
pub fn gd_step_reparam<T: Scalar>(
    state: &ReparamState<T>,
    sd: &SpectralData<T>,
    eta: T,
) -> Result<ReparamState<T>> {
    let full = BatchMask::full(sd.n());
    sgd_step_reparam(state, sd, eta, &full)
}

/// One simultaneous mini-batch SGD step with diagonal 0/1 mask `P`:
/// the masked residual components are `e_i^T P z` and the scale is `eta/B`.
/// GD is the `B = N` special case.
pub fn sgd_step_reparam<T: Scalar>(
    state: &ReparamState<T>,
    sd: &SpectralData<T>,
    eta: T,
    mask: &BatchMask,
) -> Result<ReparamState<T>> {
    mask.validate(sd.n())?;
    let r = sd.rank();
    let z = state.residual_vector(sd);
    // e_i^T P z accumulated in ascending mask order; with the full mask this
    // is the same accumulation order as plain GD, bit for bit.
    let mut masked: Vec<T> = Vec::with_capacity(r);
    for i in 0..r {
        let e = sd.left_vector(i);
        let mut acc = T::zero();
        for &idx in mask.indices() {
            acc += e[idx] * z[idx];
        }
        masked.push(acc);
    }
    let scale = eta / T::from_usize(mask.len());
    let pv = state.prod_v();
    let mut o_next = Vec::with_capacity(r);
    for i in 0..r {
        o_next.push(state.o[i] - scale * sd.sigma(i) * masked[i] * pv);
    }
    let mut v_next = Vec::with_capacity(state.v.len());
    let mut weighted = T::zero();
    for i in 0..r {
        weighted += sd.sigma(i) * masked[i] * state.o[i];
    }
    for j in 0..state.v.len() {
        v_next.push(state.v[j] - scale * weighted * state.prod_v_except(j));
    }
    let next = ReparamState {
        o: o_next,
        v: v_next,
        u_perp: state.u_perp.clone(),
    };
    if !next.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok(next)
}

/// Right-hand side of the reparameterized gradient-flow ODE:
/// `do_i/dt = -(1/N) sigma_i (e_i^T z) prod(v)`,
/// `dv_j/dt = -(1/N) sum_i sigma_i (e_i^T z) o_i prod_{q != j} v_q`.
pub fn gf_rhs_reparam<T: Scalar>(state: &ReparamState<T>, sd: &SpectralData<T>) -> (Vec<T>, Vec<T>) {
    let r = sd.rank();
    let inv_n = T::from_usize(sd.n()).recip();
    let ze = state.residual_components(sd);
    let pv = state.prod_v();
    let o_dot: Vec<T> = (0..r)
        .map(|i| -(inv_n * sd.sigma(i) * ze[i] * pv))
        .collect();
    let mut weighted = T::zero();
    for i in 0..r {
        weighted += sd.sigma(i) * ze[i] * state.o[i];
    }
    let v_dot: Vec<T> = (0..state.v.len())
        .map(|j| -(inv_n * weighted * state.prod_v_except(j)))
        .collect();
    (o_dot, v_dot)
}
