//! Classic fourth-order Runge-Kutta stepping over a prescribed sequence of
//! times. Every system in the crate (particles, tracers, linearisations,
//! costates) is flattened into a `Vec<f64>` state and marched here.

use crate::error::{Error, Result};
use crate::flow::ControlSignal;
use crate::measure::Point;

pub(crate) trait OdeSystem {
    fn rhs(&self, t: f64, u: &Point, y: &[f64]) -> Vec<f64>;
}

fn axpy(y: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(y, k)| y + a * k).collect()
}

pub(crate) fn rk4_step<S: OdeSystem + ?Sized>(sys: &S, t: f64, h: f64, u: &Point, y: &[f64]) -> Vec<f64> {
    let k1 = sys.rhs(t, u, y);
    let k2 = sys.rhs(t + 0.5 * h, u, &axpy(y, 0.5 * h, &k1));
    let k3 = sys.rhs(t + 0.5 * h, u, &axpy(y, 0.5 * h, &k2));
    let k4 = sys.rhs(t + h, u, &axpy(y, h, &k3));
    y.iter()
        .enumerate()
        .map(|(i, y)| y + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Marches `y0` through `times` (increasing or decreasing). Each step uses the
/// control value at the step midpoint, so steps must not straddle a control
/// switch. Returns the state at every entry of `times`.
pub(crate) fn march<S: OdeSystem + ?Sized>(
    sys: &S,
    control: &ControlSignal,
    times: &[f64],
    y0: Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(times.len());
    out.push(y0);
    for w in times.windows(2) {
        let (a, b) = (w[0], w[1]);
        let u = control.value_at(0.5 * (a + b));
        let next = rk4_step(sys, a, b - a, u, out.last().unwrap());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { t: b });
        }
        out.push(next);
    }
    Ok(out)
}
