//! Finitely supported probability measures and discrete couplings.
//!
//! An [`EmpiricalMeasure`] is a weighted cloud of atoms `sum_i w_i delta_{x_i}`.
//! Atoms are never merged, so index `i` stays attached to the same particle
//! through pushforwards and flows.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Point = DVector<f64>;

/// Tolerance on the total mass of a measure.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Tolerance on the marginals of a coupling.
pub const PLAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<Point>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if atoms.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("zero ambient dimension".into()));
        }
        for a in &atoms {
            if a.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: a.len() });
            }
            if a.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMeasure("non-finite atom".into()));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure(format!("invalid weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, atoms, weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(atoms: Vec<Point>) -> Result<Self> {
        let n = atoms.len().max(1);
        let w = vec![1.0 / n as f64; atoms.len()];
        Self::new(atoms, w)
    }

    pub fn dirac(x: Point) -> Self {
        Self { dim: x.len(), atoms: vec![x], weights: vec![1.0] }
    }

    /// Convenience constructor for one-dimensional measures.
    pub fn from_1d(points: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(
            points.iter().map(|&p| DVector::from_element(1, p)).collect(),
            weights.to_vec(),
        )
    }

    /// Skips validation; callers guarantee the invariants (same weights as an
    /// already validated measure, finite atoms of the right dimension).
    pub(crate) fn from_parts_unchecked(dim: usize, atoms: Vec<Point>, weights: Vec<f64>) -> Self {
        Self { dim, atoms, weights }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Point] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support_radius(&self) -> f64 {
        self.atoms.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> Point {
        let mut m = DVector::zeros(self.dim);
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            m.axpy(*w, a, 1.0);
        }
        m
    }

    /// Same weights, new atom positions.
    pub fn with_atoms(&self, atoms: Vec<Point>) -> Result<Self> {
        if atoms.len() != self.atoms.len() {
            return Err(Error::InvalidMeasure(format!(
                "expected {} atoms, got {}",
                self.atoms.len(),
                atoms.len()
            )));
        }
        for a in &atoms {
            if a.len() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: a.len() });
            }
            if a.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMeasure("non-finite atom".into()));
            }
        }
        Ok(Self { dim: self.dim, atoms, weights: self.weights.clone() })
    }

    /// `(Id + eps F)_# mu` for a field given by its values at the atoms.
    pub fn displaced(&self, field: &[Point], eps: f64) -> Result<Self> {
        if field.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "displacement has {} entries for {} atoms",
                field.len(),
                self.len()
            )));
        }
        self.with_atoms(self.atoms.iter().zip(field).map(|(x, f)| x + f * eps).collect())
    }

    /// Parses the plain-text format: a `d N` header then `N` lines `w x_1 .. x_d`.
    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let (hl, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty input".into() })?;
        let header = header?;
        let mut it = header.split_whitespace();
        let parse_usize = |s: Option<&str>, line: usize| -> Result<usize> {
            s.ok_or(Error::Parse { line, msg: "missing header field".into() })?
                .parse()
                .map_err(|e| Error::Parse { line, msg: format!("{e}") })
        };
        let d = parse_usize(it.next(), hl + 1)?;
        let n = parse_usize(it.next(), hl + 1)?;
        let mut atoms = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or(Error::Parse {
                line: hl + 2 + atoms.len(),
                msg: format!("expected {n} atom lines"),
            })?;
            let line = line?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: ln + 1, msg: format!("{e}") })?;
            if vals.len() != d + 1 {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected {} numbers, found {}", d + 1, vals.len()),
                });
            }
            weights.push(vals[0]);
            atoms.push(DVector::from_column_slice(&vals[1..]));
        }
        Self::new(atoms, weights)
    }

    /// Writes the plain-text format with round-trip precision.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.dim, self.len())?;
        let mut line = String::new();
        for (a, wt) in self.atoms.iter().zip(&self.weights) {
            line.clear();
            write!(line, "{wt:e}").unwrap();
            for c in a.iter() {
                write!(line, " {c:e}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// `f_# m`: atoms mapped one by one, weights untouched.
pub fn pushforward<F>(m: &EmpiricalMeasure, f: F) -> Result<EmpiricalMeasure>
where
    F: Fn(&Point) -> Point,
{
    m.with_atoms(m.atoms.iter().map(f).collect())
}

/// `(sum_i w_i |x_i|^p)^(1/p)`.
pub fn moment(m: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("moment order {p} < 1")));
    }
    let s: f64 = m.atoms.iter().zip(&m.weights).map(|(a, w)| w * a.norm().powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

/// A discrete transport plan: `mass[(i, j)]` is the mass sent from source atom
/// `i` to target atom `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    source: EmpiricalMeasure,
    target: EmpiricalMeasure,
    mass: DMatrix<f64>,
}

impl CouplingPlan {
    pub fn new(source: EmpiricalMeasure, target: EmpiricalMeasure, mass: DMatrix<f64>) -> Result<Self> {
        if source.dim != target.dim {
            return Err(Error::DimensionMismatch { expected: source.dim, got: target.dim });
        }
        if mass.nrows() != source.len() || mass.ncols() != target.len() {
            return Err(Error::InvalidPlan(format!(
                "mass matrix is {}x{}, marginals have {} and {} atoms",
                mass.nrows(),
                mass.ncols(),
                source.len(),
                target.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidPlan("negative or non-finite entry".into()));
        }
        for (i, w) in source.weights.iter().enumerate() {
            let r = mass.row(i).sum();
            if (r - w).abs() > PLAN_TOL {
                return Err(Error::InvalidPlan(format!("row {i} sums to {r}, source weight is {w}")));
            }
        }
        for (j, w) in target.weights.iter().enumerate() {
            let c = mass.column(j).sum();
            if (c - w).abs() > PLAN_TOL {
                return Err(Error::InvalidPlan(format!("column {j} sums to {c}, target weight is {w}")));
            }
        }
        Ok(Self { source, target, mass })
    }

    pub(crate) fn from_parts_unchecked(source: EmpiricalMeasure, target: EmpiricalMeasure, mass: DMatrix<f64>) -> Self {
        Self { source, target, mass }
    }

    /// The independent coupling `mu x nu`.
    pub fn product(source: &EmpiricalMeasure, target: &EmpiricalMeasure) -> Result<Self> {
        let mass = DMatrix::from_fn(source.len(), target.len(), |i, j| source.weights[i] * target.weights[j]);
        Self::new(source.clone(), target.clone(), mass)
    }

    /// `(Id, Id)_# mu`.
    pub fn diagonal(m: &EmpiricalMeasure) -> Self {
        let mass = DMatrix::from_diagonal(&DVector::from_column_slice(&m.weights));
        Self { source: m.clone(), target: m.clone(), mass }
    }

    /// `(Id, T)_# mu` with the target atoms indexed like the source ones.
    pub fn deterministic<F>(source: &EmpiricalMeasure, map: F) -> Result<Self>
    where
        F: Fn(&Point) -> Point,
    {
        let target = pushforward(source, map)?;
        let mass = DMatrix::from_diagonal(&DVector::from_column_slice(&source.weights));
        Ok(Self { source: source.clone(), target, mass })
    }

    pub fn source(&self) -> &EmpiricalMeasure {
        &self.source
    }

    pub fn target(&self) -> &EmpiricalMeasure {
        &self.target
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    /// Nonzero entries `(i, j, mass)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (n, m) = self.mass.shape();
        (0..n).flat_map(move |i| (0..m).map(move |j| (i, j, self.mass[(i, j)]))).filter(|e| e.2 > 0.0)
    }

    /// True when every row carries at most one nonzero entry, i.e. the plan is
    /// induced by a map on the source atoms.
    pub fn is_deterministic(&self) -> bool {
        (0..self.mass.nrows()).all(|i| self.mass.row(i).iter().filter(|m| **m > 0.0).count() <= 1)
    }

    /// Row-normalised conditionals; `None` for zero-weight source atoms.
    pub fn disintegrate(&self) -> Vec<Option<Vec<f64>>> {
        self.source
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if w > 0.0 {
                    Some(self.mass.row(i).iter().map(|m| m / w).collect())
                } else {
                    None
                }
            })
            .collect()
    }

    /// Conditional mean of the target coordinate at each source atom; `None`
    /// where the source weight vanishes.
    pub fn barycentric_projection(&self) -> Vec<Option<Point>> {
        self.source
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if w > 0.0 {
                    let mut b = DVector::zeros(self.source.dim);
                    for (j, y) in self.target.atoms.iter().enumerate() {
                        let m = self.mass[(i, j)];
                        if m > 0.0 {
                            b.axpy(m / w, y, 1.0);
                        }
                    }
                    Some(b)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Sparse `N M nnz` header followed by `i j mass` triplets.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        let entries: Vec<_> = self.entries().collect();
        writeln!(w, "{} {} {}", self.source.len(), self.target.len(), entries.len())?;
        for (i, j, m) in entries {
            writeln!(w, "{i} {j} {m:e}")?;
        }
        Ok(())
    }

    /// Reads triplets against known marginals.
    pub fn read_triplets<R: BufRead>(
        reader: R,
        source: &EmpiricalMeasure,
        target: &EmpiricalMeasure,
    ) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let (hl, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty input".into() })?;
        let header = header?;
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: hl + 1, msg: format!("{e}") })?;
        if h.len() != 3 {
            return Err(Error::Parse { line: hl + 1, msg: "header must be `N M nnz`".into() });
        }
        if h[0] != source.len() || h[1] != target.len() {
            return Err(Error::Parse { line: hl + 1, msg: "plan shape does not match marginals".into() });
        }
        let mut mass = DMatrix::zeros(h[0], h[1]);
        for k in 0..h[2] {
            let (ln, line) = lines.next().ok_or(Error::Parse { line: hl + 2 + k, msg: "missing triplet".into() })?;
            let line = line?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| Error::Parse { line: ln + 1, msg };
            if parts.len() != 3 {
                return Err(bad("expected `i j mass`".into()));
            }
            let i: usize = parts[0].parse().map_err(|e| bad(format!("{e}")))?;
            let j: usize = parts[1].parse().map_err(|e| bad(format!("{e}")))?;
            let m: f64 = parts[2].parse().map_err(|e| bad(format!("{e}")))?;
            if i >= h[0] || j >= h[1] {
                return Err(bad(format!("index ({i}, {j}) out of range")));
            }
            mass[(i, j)] += m;
        }
        Self::new(source.clone(), target.clone(), mass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn two_point() -> EmpiricalMeasure {
        EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap()
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::from_1d(&[0.0, 1.0], &[1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::from_1d(&[], &[]).is_err());
        assert!(EmpiricalMeasure::new(vec![dvector![0.0], dvector![0.0, 1.0]], vec![0.5, 0.5]).is_err());
        // off by more than 1e-12 is rejected rather than renormalised
        assert!(EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.5 + 1e-11]).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let m = two_point();
        assert_eq!(pushforward(&m, |x| x.clone()).unwrap(), m);

        let a = dvector![1.0, -2.0];
        let b = dvector![0.5, 0.5];
        let shifted = pushforward(&EmpiricalMeasure::dirac(a.clone()), |x| x + &b).unwrap();
        assert_eq!(shifted.atoms()[0], &a + &b);

        let sq = pushforward(&m, |x| x.map(|c| c * c)).unwrap();
        assert_eq!(sq.atoms(), &[dvector![0.0], dvector![4.0]]);
        assert_eq!(sq.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn moment_examples() {
        assert_eq!(moment(&EmpiricalMeasure::dirac(dvector![0.0]), 2.0).unwrap(), 0.0);
        assert_abs_diff_eq!(moment(&EmpiricalMeasure::dirac(dvector![3.0, 4.0]), 1.0).unwrap(), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(moment(&two_point(), 2.0).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(moment(&two_point(), 0.5).is_err());
    }

    #[test]
    fn disintegration_examples() {
        let mu = two_point();
        let nu = EmpiricalMeasure::from_1d(&[1.0, 3.0, 5.0], &[0.2, 0.3, 0.5]).unwrap();
        for c in CouplingPlan::product(&mu, &nu).unwrap().disintegrate() {
            let c = c.unwrap();
            for (a, b) in c.iter().zip(nu.weights()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-15);
            }
        }

        let det = CouplingPlan::deterministic(&mu, |x| x * 3.0).unwrap();
        for (i, c) in det.disintegrate().into_iter().enumerate() {
            let c = c.unwrap();
            assert_eq!(c[i], 1.0);
            assert_eq!(c.iter().sum::<f64>(), 1.0);
        }

        let nu2 = EmpiricalMeasure::from_1d(&[5.0, 7.0], &[0.5, 0.5]).unwrap();
        let plan = CouplingPlan::new(mu.clone(), nu2, DMatrix::from_row_slice(2, 2, &[0.25, 0.25, 0.25, 0.25])).unwrap();
        assert_eq!(plan.disintegrate()[0].as_ref().unwrap(), &vec![0.5, 0.5]);
    }

    #[test]
    fn zero_weight_rows_are_reported() {
        let mu = EmpiricalMeasure::from_1d(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        let plan = CouplingPlan::product(&mu, &two_point()).unwrap();
        let c = plan.disintegrate();
        assert!(c[0].is_some());
        assert!(c[1].is_none());
        assert!(plan.barycentric_projection()[1].is_none());
    }

    #[test]
    fn barycentric_projection_examples() {
        let mu = two_point();
        let det = CouplingPlan::deterministic(&mu, |x| x.map(|c| c * c + 1.0)).unwrap();
        let b = det.barycentric_projection();
        assert_eq!(b[0].as_ref().unwrap()[0], 1.0);
        assert_eq!(b[1].as_ref().unwrap()[0], 5.0);

        let nu = EmpiricalMeasure::from_1d(&[1.0, 3.0, 5.0], &[0.2, 0.3, 0.5]).unwrap();
        for b in CouplingPlan::product(&mu, &nu).unwrap().barycentric_projection() {
            assert_abs_diff_eq!(b.unwrap()[0], nu.mean()[0], epsilon = 1e-14);
        }

        let plan = CouplingPlan::product(&EmpiricalMeasure::dirac(dvector![7.0]), &two_point()).unwrap();
        assert_eq!(plan.barycentric_projection()[0].as_ref().unwrap()[0], 1.0);
    }

    #[test]
    fn plan_validation() {
        let mu = two_point();
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]);
        assert!(CouplingPlan::new(mu.clone(), mu.clone(), bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.6, -0.1, -0.1, 0.6]);
        assert!(CouplingPlan::new(mu.clone(), mu, neg).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let m = EmpiricalMeasure::new(
            vec![dvector![0.1, -1.0 / 3.0], dvector![2.0, 1e-17]],
            vec![0.3, 0.7],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("2 2\n"));
        let back = EmpiricalMeasure::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let err = EmpiricalMeasure::read_text("1 2\n0.5 1.0\n0.5 x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn triplet_round_trip() {
        let mu = two_point();
        let nu = EmpiricalMeasure::from_1d(&[1.0, 3.0, 5.0], &[0.2, 0.3, 0.5]).unwrap();
        let plan = CouplingPlan::product(&mu, &nu).unwrap();
        let mut buf = Vec::new();
        plan.write_triplets(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("2 3 6\n"));
        let back = CouplingPlan::read_triplets(buf.as_slice(), &mu, &nu).unwrap();
        assert_eq!(back, plan);
    }
}
