//! Seeded sampling of test directions and neighbouring measures. Every random
//! choice in the crate goes through a [`ChaCha8Rng`] built here, so reports are
//! reproducible from a single seed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::measure::{EmpiricalMeasure, Point};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Point {
    DVector::from_fn(dim, |_, _| rng.random_range(-scale..=scale))
}

/// `count` directions `(h, F)` with `h` uniform in `[-1, 1]` (or zero when
/// `with_time` is false) and one vector per atom uniform in `[-scale, scale]^d`.
pub fn random_directions(
    rng: &mut ChaCha8Rng,
    atoms: usize,
    dim: usize,
    count: usize,
    scale: f64,
    with_time: bool,
) -> Vec<(f64, Vec<Point>)> {
    (0..count)
        .map(|_| {
            let h = if with_time { rng.random_range(-1.0..=1.0) } else { 0.0 };
            (h, (0..atoms).map(|_| uniform_point(rng, dim, scale)).collect())
        })
        .collect()
}

/// Measures with the weights of `m` and every atom moved by a random vector of
/// norm at most `radius`, so each lies within `W_inf`-distance `radius` of `m`.
pub fn neighbor_measures(rng: &mut ChaCha8Rng, m: &EmpiricalMeasure, radius: f64, count: usize) -> Result<Vec<EmpiricalMeasure>> {
    (0..count)
        .map(|_| {
            let atoms = m
                .atoms()
                .iter()
                .map(|x| {
                    let mut d = uniform_point(rng, m.dim(), 1.0);
                    let n = d.norm();
                    if n > 0.0 {
                        d *= radius * rng.random_range(0.0..=1.0) / n;
                    }
                    x + d
                })
                .collect();
            m.with_atoms(atoms)
        })
        .collect()
}
