//! One-sided difference quotients of the value function along
//! `(tau, mu) -> (tau + eps h, (Id + eps F)_# mu)`.
//!
//! The limits `eps -> 0+` are estimated from a fixed geometric list: the two
//! smallest quotients are extrapolated linearly to `eps = 0`, which removes
//! the `O(eps)` bias of a raw quotient. The raw extreme over the same two
//! quotients is reported alongside.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, Point};
use crate::transport::w2;
use crate::value::ValueHandle;

use super::Functional;

pub const DEFAULT_EPSILONS: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

#[derive(Debug, Clone, Serialize)]
pub struct DiniEstimate {
    pub epsilons: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Linear extrapolation of the two smallest-`eps` quotients to zero.
    pub estimate: f64,
    /// Max (upper) or min (lower) of the two smallest-`eps` quotients.
    pub raw: f64,
}

/// Extrapolates `q(eps)` to `eps = 0` from the two smallest `eps`.
pub(crate) fn extrapolate(eps: &[f64], q: &[f64]) -> (f64, usize, usize) {
    let mut idx: Vec<usize> = (0..eps.len()).collect();
    idx.sort_by(|a, b| eps[*a].total_cmp(&eps[*b]));
    match idx.as_slice() {
        [] => (0.0, 0, 0),
        [i] => (q[*i], *i, *i),
        [i, j, ..] => {
            let (e1, e2) = (eps[*i], eps[*j]);
            let est = if e2 > e1 { q[*i] - e1 * (q[*j] - q[*i]) / (e2 - e1) } else { q[*i] };
            (est, *i, *j)
        }
    }
}

fn check_eps(eps: &[f64]) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be positive and nonempty".into()));
    }
    Ok(())
}

/// `[V(tau + eps h, (Id + eps F)_# m) - V(tau, m)] / eps` for every `eps`.
pub fn dini_quotients(
    value: &dyn ValueHandle,
    tau: f64,
    m: &EmpiricalMeasure,
    h: f64,
    f: &[Point],
    eps: &[f64],
) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let (t0, t1) = value.horizon();
    let base = value.value(tau, m)?;
    eps.par_iter()
        .map(|&e| {
            let t = tau + e * h;
            if t < t0 - 1e-12 || t > t1 + 1e-12 {
                return Err(Error::InvalidArgument(format!("tau + eps h = {t} leaves the horizon")));
            }
            Ok((value.value(t.clamp(t0, t1), &m.displaced(f, e)?)? - base) / e)
        })
        .collect()
}

fn estimate(value: &dyn ValueHandle, tau: f64, m: &EmpiricalMeasure, h: f64, f: &[Point], eps: &[f64], upper: bool) -> Result<DiniEstimate> {
    let q = dini_quotients(value, tau, m, h, f, eps)?;
    let (est, i, j) = extrapolate(eps, &q);
    let raw = if upper { q[i].max(q[j]) } else { q[i].min(q[j]) };
    Ok(DiniEstimate { epsilons: eps.to_vec(), quotients: q, estimate: est, raw })
}

/// Upper Dini derivative `d+ V(tau, m)(h, F)`.
pub fn dini_upper_derivative(
    value: &dyn ValueHandle,
    tau: f64,
    m: &EmpiricalMeasure,
    h: f64,
    f: &[Point],
    eps: &[f64],
) -> Result<DiniEstimate> {
    estimate(value, tau, m, h, f, eps, true)
}

/// Lower Dini derivative `d- V(tau, m)(h, F)`.
pub fn dini_lower_derivative(
    value: &dyn ValueHandle,
    tau: f64,
    m: &EmpiricalMeasure,
    h: f64,
    f: &[Point],
    eps: &[f64],
) -> Result<DiniEstimate> {
    estimate(value, tau, m, h, f, eps, false)
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularisedEstimate {
    /// Lower Dini estimate at `m` itself.
    pub plain: f64,
    /// Minimum over neighbours of their extrapolated quotients.
    pub regularised: f64,
    /// Minimum over all `(eps, neighbour)` quotients.
    pub regularised_raw: f64,
    pub neighbors_used: usize,
}

/// Regularised lower derivative: the lower quotient of `f` in direction `F`
/// minimised over neighbours `nu` of `m` with `W_2(nu, m) <= radius`.
pub fn regularised_lower_derivative(
    f: &Functional,
    m: &EmpiricalMeasure,
    field: &(dyn Fn(&Point) -> Point + Sync),
    radius: f64,
    eps: &[f64],
    neighbors: &[EmpiricalMeasure],
) -> Result<RegularisedEstimate> {
    check_eps(eps)?;
    let quotients = |nu: &EmpiricalMeasure| -> Result<Vec<f64>> {
        let dir: Vec<Point> = nu.atoms().iter().map(field).collect();
        let base = f(nu)?;
        eps.iter().map(|&e| Ok((f(&nu.displaced(&dir, e)?)? - base) / e)).collect()
    };
    let q0 = quotients(m)?;
    let plain = extrapolate(eps, &q0).0;
    let mut close = Vec::new();
    for nu in neighbors {
        if w2(m, nu)? <= radius {
            close.push(nu);
        }
    }
    let per: Vec<Vec<f64>> = close.par_iter().map(|nu| quotients(nu)).collect::<Result<_>>()?;
    let regularised = per.iter().map(|q| extrapolate(eps, q).0).fold(f64::INFINITY, f64::min);
    let regularised_raw = per.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    Ok(RegularisedEstimate { plain, regularised, regularised_raw, neighbors_used: close.len() })
}
