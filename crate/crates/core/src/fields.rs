//! Controlled non-local velocity fields, terminal cost functionals and the
//! built-in catalogue.
//!
//! The measure derivative of a field is carried by its kernel: for a field
//! `v(t, mu, u, x)`, `grad_mu(t, mu, u, x, y)` is the `d x d` matrix
//! `D_mu v(t, mu, u, x)(y)`, so that moving atom `j` of an empirical measure by
//! `delta` changes `v(.., x)` by `w_j D_mu v(.., x)(x_j) delta` to first order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, Point};
use crate::transport::wasserstein;

pub const FIELD_NAMES: [&str; 5] = ["zero", "constant_control", "linear", "convolution", "mean_attraction"];
pub const COST_NAMES: [&str; 3] = ["potential", "interaction", "w2_squared_to_target"];

/// Tolerances used by [`verify_field`] and [`verify_cost`].
pub const JAC_X_TOL: f64 = 1e-5;
pub const GRAD_MU_TOL: f64 = 1e-4;
pub const WGRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldMetadata {
    /// Constant `m` with `|v| <= m (1 + |x| + M_1(mu))` for controls of norm at
    /// most the radius passed to [`VelocityField::metadata`].
    pub sublinearity: Option<f64>,
    /// The sublinearity constant does not depend on time and the field is
    /// jointly Lipschitz in `(t, mu, x)`.
    pub time_regular: bool,
}

pub trait VelocityField: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, t: f64, mu: &EmpiricalMeasure, u: &Point, x: &Point) -> Point;
    fn jac_x(&self, t: f64, mu: &EmpiricalMeasure, u: &Point, x: &Point) -> DMatrix<f64>;
    fn grad_mu(&self, t: f64, mu: &EmpiricalMeasure, u: &Point, x: &Point, y: &Point) -> DMatrix<f64>;
    fn metadata(&self, control_radius: f64) -> FieldMetadata;

    /// `D_mu v` vanishes identically; lets callers skip the pairwise sums.
    fn is_local(&self) -> bool {
        false
    }
}

pub trait FinalCost: Send + Sync {
    fn name(&self) -> &str;
    fn eval(&self, mu: &EmpiricalMeasure) -> Result<f64>;
    /// Wasserstein gradient evaluated at every atom of `mu`.
    fn wgrad(&self, mu: &EmpiricalMeasure) -> Result<Vec<Point>>;
}

/// Compact control set, either a finite list or a sampled box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Finite { values: Vec<Vec<f64>> },
    Box { lower: Vec<f64>, upper: Vec<f64>, points_per_axis: usize },
}

impl ControlSet {
    pub fn finite(values: Vec<Point>) -> Result<Self> {
        let set = ControlSet::Finite { values: values.iter().map(|v| v.iter().copied().collect()).collect() };
        set.validate()?;
        Ok(set)
    }

    pub fn singleton(u: Point) -> Self {
        ControlSet::Finite { values: vec![u.iter().copied().collect()] }
    }

    /// `{-1, 0, 1}^dim`.
    pub fn signs(dim: usize) -> Self {
        let mut values: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..dim {
            values = values
                .into_iter()
                .flat_map(|v| {
                    [-1.0, 0.0, 1.0].into_iter().map(move |s| {
                        let mut w = v.clone();
                        w.push(s);
                        w
                    })
                })
                .collect();
        }
        ControlSet::Finite { values }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Finite { values } => {
                let Some(first) = values.first() else {
                    return Err(Error::InvalidArgument("empty control set".into()));
                };
                if values.iter().any(|v| v.len() != first.len()) {
                    return Err(Error::InvalidArgument("control values of mixed dimension".into()));
                }
                if values.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidArgument("non-finite control value".into()));
                }
            }
            ControlSet::Box { lower, upper, points_per_axis } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::InvalidArgument("box bounds of mismatched dimension".into()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidArgument("box lower bound exceeds upper bound".into()));
                }
                if *points_per_axis == 0 {
                    return Err(Error::InvalidArgument("box needs at least one sample per axis".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Finite { values } => values.first().map_or(0, Vec::len),
            ControlSet::Box { lower, .. } => lower.len(),
        }
    }

    /// Finite sample list, in a fixed lexicographic order.
    pub fn samples(&self) -> Vec<Point> {
        match self {
            ControlSet::Finite { values } => values.iter().map(|v| DVector::from_column_slice(v)).collect(),
            ControlSet::Box { lower, upper, points_per_axis } => {
                let axis = |k: usize| -> Vec<f64> {
                    if *points_per_axis == 1 {
                        vec![0.5 * (lower[k] + upper[k])]
                    } else {
                        (0..*points_per_axis)
                            .map(|s| lower[k] + (upper[k] - lower[k]) * s as f64 / (*points_per_axis - 1) as f64)
                            .collect()
                    }
                };
                let mut out: Vec<Vec<f64>> = vec![vec![]];
                for k in 0..lower.len() {
                    let ax = axis(k);
                    out = out
                        .into_iter()
                        .flat_map(|v| {
                            ax.iter().map(move |&c| {
                                let mut w = v.clone();
                                w.push(c);
                                w
                            })
                        })
                        .collect();
                }
                out.into_iter().map(DVector::from_vec).collect()
            }
        }
    }

    pub fn contains(&self, u: &Point) -> bool {
        match self {
            ControlSet::Finite { .. } => self.samples().iter().any(|s| s.len() == u.len() && (s - u).norm() <= 1e-12),
            ControlSet::Box { lower, upper, .. } => {
                u.len() == lower.len() && u.iter().zip(lower.iter().zip(upper)).all(|(c, (l, h))| *l - 1e-12 <= *c && *c <= *h + 1e-12)
            }
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            ControlSet::Finite { .. } => self.samples().iter().map(|s| s.norm()).fold(0.0, f64::max),
            ControlSet::Box { lower, upper, .. } => lower
                .iter()
                .zip(upper)
                .map(|(l, h)| l.abs().max(h.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvolutionKernel {
    /// `H(z) = -a z exp(-|z|^2 / (2 s^2))`: attraction at short range.
    GaussianGradient { amplitude: f64, width: f64 },
    /// `H(z) = K z`.
    Linear { matrix: DMatrix<f64> },
}

impl ConvolutionKernel {
    fn value(&self, z: &Point) -> Point {
        match self {
            ConvolutionKernel::GaussianGradient { amplitude, width } => {
                let g = (-z.norm_squared() / (2.0 * width * width)).exp();
                z * (-amplitude * g)
            }
            ConvolutionKernel::Linear { matrix } => matrix * z,
        }
    }

    fn jacobian(&self, z: &Point) -> DMatrix<f64> {
        match self {
            ConvolutionKernel::GaussianGradient { amplitude, width } => {
                let s2 = width * width;
                let g = (-z.norm_squared() / (2.0 * s2)).exp();
                let d = z.len();
                (DMatrix::identity(d, d) - z * z.transpose() / s2) * (-amplitude * g)
            }
            ConvolutionKernel::Linear { matrix } => matrix.clone(),
        }
    }

    /// Bound on `sup |H|` when finite.
    fn sup_norm(&self) -> Option<f64> {
        match self {
            ConvolutionKernel::GaussianGradient { amplitude, width } => Some(amplitude.abs() * width * (-0.5f64).exp()),
            ConvolutionKernel::Linear { .. } => None,
        }
    }
}

/// The catalogue fields.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinField {
    Zero { dim: usize, control_dim: usize },
    /// `v = u`.
    ConstantControl { dim: usize },
    /// `v = A x + B u`.
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
    /// `v = int H(x - z) dmu(z) + B u`.
    Convolution { dim: usize, kernel: ConvolutionKernel, control: Option<DMatrix<f64>> },
    /// `v = k int (z - x) dmu(z) + B u`.
    MeanAttraction { dim: usize, strength: f64, control: Option<DMatrix<f64>> },
}

fn control_term(b: &Option<DMatrix<f64>>, dim: usize, u: &Point) -> Point {
    match b {
        Some(b) if b.ncols() > 0 => b * u,
        _ => DVector::zeros(dim),
    }
}

fn control_gain(b: &Option<DMatrix<f64>>) -> f64 {
    b.as_ref().map_or(0.0, |b| b.norm())
}

impl VelocityField for BuiltinField {
    fn name(&self) -> &str {
        match self {
            BuiltinField::Zero { .. } => "zero",
            BuiltinField::ConstantControl { .. } => "constant_control",
            BuiltinField::Linear { .. } => "linear",
            BuiltinField::Convolution { .. } => "convolution",
            BuiltinField::MeanAttraction { .. } => "mean_attraction",
        }
    }

    fn dim(&self) -> usize {
        match self {
            BuiltinField::Zero { dim, .. }
            | BuiltinField::ConstantControl { dim }
            | BuiltinField::Convolution { dim, .. }
            | BuiltinField::MeanAttraction { dim, .. } => *dim,
            BuiltinField::Linear { a, .. } => a.nrows(),
        }
    }

    fn control_dim(&self) -> usize {
        match self {
            BuiltinField::Zero { control_dim, .. } => *control_dim,
            BuiltinField::ConstantControl { dim } => *dim,
            BuiltinField::Linear { b, .. } => b.ncols(),
            BuiltinField::Convolution { control, .. } | BuiltinField::MeanAttraction { control, .. } => {
                control.as_ref().map_or(0, |b| b.ncols())
            }
        }
    }

    fn eval(&self, _t: f64, mu: &EmpiricalMeasure, u: &Point, x: &Point) -> Point {
        match self {
            BuiltinField::Zero { dim, .. } => DVector::zeros(*dim),
            BuiltinField::ConstantControl { .. } => u.clone(),
            BuiltinField::Linear { a, b } => {
                let mut v = a * x;
                if b.ncols() > 0 {
                    v += b * u;
                }
                v
            }
            BuiltinField::Convolution { dim, kernel, control } => {
                let mut v = control_term(control, *dim, u);
                for (z, w) in mu.atoms().iter().zip(mu.weights()) {
                    v.axpy(*w, &kernel.value(&(x - z)), 1.0);
                }
                v
            }
            BuiltinField::MeanAttraction { dim, strength, control } => {
                (mu.mean() - x) * *strength + control_term(control, *dim, u)
            }
        }
    }

    fn jac_x(&self, _t: f64, mu: &EmpiricalMeasure, _u: &Point, x: &Point) -> DMatrix<f64> {
        match self {
            BuiltinField::Zero { dim, .. } | BuiltinField::ConstantControl { dim } => DMatrix::zeros(*dim, *dim),
            BuiltinField::Linear { a, .. } => a.clone(),
            BuiltinField::Convolution { dim, kernel, .. } => {
                let mut j = DMatrix::zeros(*dim, *dim);
                for (z, w) in mu.atoms().iter().zip(mu.weights()) {
                    j += kernel.jacobian(&(x - z)) * *w;
                }
                j
            }
            BuiltinField::MeanAttraction { dim, strength, .. } => DMatrix::identity(*dim, *dim) * -*strength,
        }
    }

    fn grad_mu(&self, _t: f64, _mu: &EmpiricalMeasure, _u: &Point, x: &Point, y: &Point) -> DMatrix<f64> {
        match self {
            BuiltinField::Zero { dim, .. } | BuiltinField::ConstantControl { dim } => DMatrix::zeros(*dim, *dim),
            BuiltinField::Linear { a, .. } => DMatrix::zeros(a.nrows(), a.nrows()),
            BuiltinField::Convolution { kernel, .. } => -kernel.jacobian(&(x - y)),
            BuiltinField::MeanAttraction { dim, strength, .. } => DMatrix::identity(*dim, *dim) * *strength,
        }
    }

    fn metadata(&self, control_radius: f64) -> FieldMetadata {
        // Frobenius norms bound the operator norms from above.
        let m = match self {
            BuiltinField::Zero { .. } => 0.0,
            BuiltinField::ConstantControl { .. } => control_radius,
            BuiltinField::Linear { a, b } => a.norm().max(b.norm() * control_radius),
            BuiltinField::Convolution { kernel, control, .. } => match (kernel.sup_norm(), kernel) {
                (Some(s), _) => s + control_gain(control) * control_radius,
                (None, ConvolutionKernel::Linear { matrix }) => matrix.norm().max(control_gain(control) * control_radius),
                (None, _) => unreachable!("only the linear kernel is unbounded"),
            },
            BuiltinField::MeanAttraction { strength, control, .. } => {
                strength.abs().max(control_gain(control) * control_radius)
            }
        };
        FieldMetadata { sublinearity: Some(m), time_regular: true }
    }

    fn is_local(&self) -> bool {
        matches!(self, BuiltinField::Zero { .. } | BuiltinField::ConstantControl { .. } | BuiltinField::Linear { .. })
    }
}

fn params_err(name: &str, reason: impl ToString) -> Error {
    Error::MalformedParams { name: name.into(), reason: reason.to_string() }
}

fn parse<T: for<'de> Deserialize<'de>>(name: &str, params: &Value) -> Result<T> {
    let v = if params.is_null() { Value::Object(Default::default()) } else { params.clone() };
    serde_json::from_value(v).map_err(|e| params_err(name, e))
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], expect_rows: Option<usize>) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(params_err(name, "ragged matrix"));
    }
    if let Some(e) = expect_rows {
        if nr != e {
            return Err(params_err(name, format!("matrix has {nr} rows, expected {e}")));
        }
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZeroParams {
    dim: usize,
    #[serde(default)]
    control_dim: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DimParams {
    dim: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    a: Vec<Vec<f64>>,
    #[serde(default)]
    b: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvolutionParams {
    dim: usize,
    kernel: String,
    #[serde(default)]
    amplitude: Option<f64>,
    #[serde(default)]
    width: Option<f64>,
    #[serde(default)]
    matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    control_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeanAttractionParams {
    dim: usize,
    #[serde(default = "one")]
    strength: f64,
    #[serde(default)]
    control_matrix: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

/// Builds a catalogue field from its name and JSON parameter block.
pub fn builtin_field(name: &str, params: &Value) -> Result<BuiltinField> {
    let check_dim = |d: usize| if d == 0 { Err(params_err(name, "dim must be positive")) } else { Ok(d) };
    match name {
        "zero" => {
            let p: ZeroParams = parse(name, params)?;
            Ok(BuiltinField::Zero { dim: check_dim(p.dim)?, control_dim: p.control_dim })
        }
        "constant_control" => {
            let p: DimParams = parse(name, params)?;
            Ok(BuiltinField::ConstantControl { dim: check_dim(p.dim)? })
        }
        "linear" => {
            let p: LinearParams = parse(name, params)?;
            let a = matrix_from_rows(name, &p.a, None)?;
            if a.nrows() == 0 || a.nrows() != a.ncols() {
                return Err(params_err(name, "A must be square and nonempty"));
            }
            let b = match p.b {
                Some(rows) if !rows.is_empty() => matrix_from_rows(name, &rows, Some(a.nrows()))?,
                _ => DMatrix::zeros(a.nrows(), 0),
            };
            Ok(BuiltinField::Linear { a, b })
        }
        "convolution" => {
            let p: ConvolutionParams = parse(name, params)?;
            let dim = check_dim(p.dim)?;
            let kernel = match p.kernel.as_str() {
                "gaussian_gradient" => {
                    let amplitude = p.amplitude.ok_or_else(|| params_err(name, "missing amplitude"))?;
                    let width = p.width.ok_or_else(|| params_err(name, "missing width"))?;
                    if !(width > 0.0) {
                        return Err(params_err(name, "width must be positive"));
                    }
                    ConvolutionKernel::GaussianGradient { amplitude, width }
                }
                "linear" => {
                    let rows = p.matrix.ok_or_else(|| params_err(name, "missing matrix"))?;
                    let matrix = matrix_from_rows(name, &rows, Some(dim))?;
                    if matrix.ncols() != dim {
                        return Err(params_err(name, "kernel matrix must be dim x dim"));
                    }
                    ConvolutionKernel::Linear { matrix }
                }
                other => return Err(params_err(name, format!("unknown kernel `{other}`"))),
            };
            let control = p.control_matrix.map(|r| matrix_from_rows(name, &r, Some(dim))).transpose()?;
            Ok(BuiltinField::Convolution { dim, kernel, control })
        }
        "mean_attraction" => {
            let p: MeanAttractionParams = parse(name, params)?;
            let dim = check_dim(p.dim)?;
            let control = p.control_matrix.map(|r| matrix_from_rows(name, &r, Some(dim))).transpose()?;
            Ok(BuiltinField::MeanAttraction { dim, strength: p.strength, control })
        }
        other => Err(Error::UnknownName(other.into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// `V(x) = c |x - x0|^2`.
    Quadratic { coef: f64, center: Point },
    /// `V(x) = <a, x> + b`.
    Affine { slope: Point, offset: f64 },
    /// `V(x) = (|x|^2 - 1)^2`.
    DoubleWell,
}

impl Potential {
    pub fn value(&self, x: &Point) -> f64 {
        match self {
            Potential::Quadratic { coef, center } => coef * (x - center).norm_squared(),
            Potential::Affine { slope, offset } => slope.dot(x) + offset,
            Potential::DoubleWell => (x.norm_squared() - 1.0).powi(2),
        }
    }

    pub fn gradient(&self, x: &Point) -> Point {
        match self {
            Potential::Quadratic { coef, center } => (x - center) * (2.0 * coef),
            Potential::Affine { slope, .. } => slope.clone(),
            Potential::DoubleWell => x * (4.0 * (x.norm_squared() - 1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InteractionKernel {
    /// `W(x, y) = c |x - y|^2`.
    Quadratic { coef: f64 },
    /// `W(x, y) = a exp(-|x - y|^2 / (2 s^2))`.
    Gaussian { amplitude: f64, width: f64 },
}

impl InteractionKernel {
    fn value(&self, z: &Point) -> f64 {
        match self {
            InteractionKernel::Quadratic { coef } => coef * z.norm_squared(),
            InteractionKernel::Gaussian { amplitude, width } => amplitude * (-z.norm_squared() / (2.0 * width * width)).exp(),
        }
    }

    fn gradient(&self, z: &Point) -> Point {
        match self {
            InteractionKernel::Quadratic { coef } => z * (2.0 * coef),
            InteractionKernel::Gaussian { amplitude, width } => {
                let s2 = width * width;
                z * (-amplitude / s2 * (-z.norm_squared() / (2.0 * s2)).exp())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinCost {
    /// `phi(mu) = int V dmu`.
    Potential(Potential),
    /// `phi(mu) = int int W(x - y) dmu dmu` for an even kernel.
    Interaction(InteractionKernel),
    /// `phi(mu) = W_2^2(mu, target)`.
    W2SquaredToTarget { target: EmpiricalMeasure },
}

impl FinalCost for BuiltinCost {
    fn name(&self) -> &str {
        match self {
            BuiltinCost::Potential(_) => "potential",
            BuiltinCost::Interaction(_) => "interaction",
            BuiltinCost::W2SquaredToTarget { .. } => "w2_squared_to_target",
        }
    }

    fn eval(&self, mu: &EmpiricalMeasure) -> Result<f64> {
        Ok(match self {
            BuiltinCost::Potential(v) => mu.atoms().iter().zip(mu.weights()).map(|(x, w)| w * v.value(x)).sum(),
            BuiltinCost::Interaction(k) => {
                let (xs, ws) = (mu.atoms(), mu.weights());
                let mut s = 0.0;
                for (x, wx) in xs.iter().zip(ws) {
                    for (y, wy) in xs.iter().zip(ws) {
                        s += wx * wy * k.value(&(x - y));
                    }
                }
                s
            }
            BuiltinCost::W2SquaredToTarget { target } => wasserstein(2, mu, target)?.distance.powi(2),
        })
    }

    fn wgrad(&self, mu: &EmpiricalMeasure) -> Result<Vec<Point>> {
        Ok(match self {
            BuiltinCost::Potential(v) => mu.atoms().iter().map(|x| v.gradient(x)).collect(),
            BuiltinCost::Interaction(k) => {
                let (xs, ws) = (mu.atoms(), mu.weights());
                xs.iter()
                    .map(|x| {
                        let mut g = DVector::zeros(mu.dim());
                        for (y, wy) in xs.iter().zip(ws) {
                            g.axpy(2.0 * wy, &k.gradient(&(x - y)), 1.0);
                        }
                        g
                    })
                    .collect()
            }
            BuiltinCost::W2SquaredToTarget { target } => {
                let plan = wasserstein(2, mu, target)?.plan;
                plan.barycentric_projection()
                    .into_iter()
                    .zip(mu.atoms())
                    .map(|(b, x)| match b {
                        Some(b) => (x - b) * 2.0,
                        None => DVector::zeros(mu.dim()),
                    })
                    .collect()
            }
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialParams {
    kind: String,
    #[serde(default)]
    coef: Option<f64>,
    #[serde(default)]
    center: Option<Vec<f64>>,
    #[serde(default)]
    slope: Option<Vec<f64>>,
    #[serde(default)]
    offset: Option<f64>,
    #[serde(default)]
    dim: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractionParams {
    kind: String,
    #[serde(default)]
    coef: Option<f64>,
    #[serde(default)]
    amplitude: Option<f64>,
    #[serde(default)]
    width: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetParams {
    atoms: Vec<Vec<f64>>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

/// Builds a catalogue cost from its name and JSON parameter block.
pub fn builtin_cost(name: &str, params: &Value) -> Result<BuiltinCost> {
    match name {
        "potential" => {
            let p: PotentialParams = parse(name, params)?;
            let v = match p.kind.as_str() {
                "quadratic" => {
                    let center = match (p.center, p.dim) {
                        (Some(c), _) => DVector::from_vec(c),
                        (None, Some(d)) => DVector::zeros(d),
                        (None, None) => return Err(params_err(name, "quadratic potential needs `center` or `dim`")),
                    };
                    Potential::Quadratic { coef: p.coef.unwrap_or(1.0), center }
                }
                "affine" => {
                    let slope = p.slope.ok_or_else(|| params_err(name, "missing slope"))?;
                    Potential::Affine { slope: DVector::from_vec(slope), offset: p.offset.unwrap_or(0.0) }
                }
                "double_well" => Potential::DoubleWell,
                other => return Err(params_err(name, format!("unknown potential `{other}`"))),
            };
            Ok(BuiltinCost::Potential(v))
        }
        "interaction" => {
            let p: InteractionParams = parse(name, params)?;
            let k = match p.kind.as_str() {
                "quadratic" => InteractionKernel::Quadratic { coef: p.coef.unwrap_or(1.0) },
                "gaussian" => {
                    let width = p.width.ok_or_else(|| params_err(name, "missing width"))?;
                    if !(width > 0.0) {
                        return Err(params_err(name, "width must be positive"));
                    }
                    InteractionKernel::Gaussian { amplitude: p.amplitude.unwrap_or(1.0), width }
                }
                other => return Err(params_err(name, format!("unknown interaction `{other}`"))),
            };
            Ok(BuiltinCost::Interaction(k))
        }
        "w2_squared_to_target" => {
            let p: TargetParams = parse(name, params)?;
            let atoms: Vec<Point> = p.atoms.into_iter().map(DVector::from_vec).collect();
            let target = match p.weights {
                Some(w) => EmpiricalMeasure::new(atoms, w)?,
                None => EmpiricalMeasure::uniform(atoms)?,
            };
            Ok(BuiltinCost::W2SquaredToTarget { target })
        }
        other => Err(Error::UnknownName(other.into())),
    }
}

/// Sample points at which derivative kernels are checked.
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub times: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
    pub controls: Vec<Point>,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct DerivativeReport {
    pub jac_x_mismatch: f64,
    pub grad_mu_mismatch: f64,
    pub wgrad_mismatch: f64,
    /// Largest observed `|v| / (1 + |x| + M_1(mu))`; an estimate, not a bound.
    pub sublinearity_estimate: f64,
    pub pass: bool,
}

fn rel_gap(fd: f64, exact: f64) -> f64 {
    (fd - exact).abs() / (1.0 + exact.abs())
}

/// Central-difference check of `jac_x` and `grad_mu` against `eval`.
pub fn verify_field(field: &dyn VelocityField, cfg: &SampleConfig) -> DerivativeReport {
    let h = cfg.step;
    let d = field.dim();
    let mut rep = DerivativeReport::default();
    let no_control = vec![DVector::zeros(field.control_dim())];
    let controls = if cfg.controls.is_empty() { &no_control } else { &cfg.controls };
    for &t in &cfg.times {
        for mu in &cfg.measures {
            let m1: f64 = mu.atoms().iter().zip(mu.weights()).map(|(x, w)| w * x.norm()).sum();
            for u in controls {
                for x in mu.atoms() {
                    let v = field.eval(t, mu, u, x);
                    rep.sublinearity_estimate = rep.sublinearity_estimate.max(v.norm() / (1.0 + x.norm() + m1));
                    let jac = field.jac_x(t, mu, u, x);
                    for k in 0..d {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[k] += h;
                        xm[k] -= h;
                        let fd = (field.eval(t, mu, u, &xp) - field.eval(t, mu, u, &xm)) / (2.0 * h);
                        for r in 0..d {
                            rep.jac_x_mismatch = rep.jac_x_mismatch.max(rel_gap(fd[r], jac[(r, k)]));
                        }
                    }
                    for (j, y) in mu.atoms().iter().enumerate() {
                        let kernel = field.grad_mu(t, mu, u, x, y) * mu.weights()[j];
                        for k in 0..d {
                            let shift = |s: f64| {
                                let mut atoms = mu.atoms().to_vec();
                                atoms[j][k] += s;
                                EmpiricalMeasure::from_parts_unchecked(mu.dim(), atoms, mu.weights().to_vec())
                            };
                            let fd = (field.eval(t, &shift(h), u, x) - field.eval(t, &shift(-h), u, x)) / (2.0 * h);
                            for r in 0..d {
                                rep.grad_mu_mismatch = rep.grad_mu_mismatch.max(rel_gap(fd[r], kernel[(r, k)]));
                            }
                        }
                    }
                }
            }
        }
    }
    rep.pass = rep.jac_x_mismatch <= JAC_X_TOL && rep.grad_mu_mismatch <= GRAD_MU_TOL;
    rep
}

/// Central-difference check of `wgrad` against atom perturbations of `eval`.
pub fn verify_cost(cost: &dyn FinalCost, cfg: &SampleConfig) -> Result<DerivativeReport> {
    let h = cfg.step;
    let mut rep = DerivativeReport::default();
    for mu in &cfg.measures {
        let g = cost.wgrad(mu)?;
        for (i, gi) in g.iter().enumerate() {
            for k in 0..mu.dim() {
                let shift = |s: f64| {
                    let mut atoms = mu.atoms().to_vec();
                    atoms[i][k] += s;
                    EmpiricalMeasure::from_parts_unchecked(mu.dim(), atoms, mu.weights().to_vec())
                };
                let fd = (cost.eval(&shift(h))? - cost.eval(&shift(-h))?) / (2.0 * h);
                rep.wgrad_mismatch = rep.wgrad_mismatch.max(rel_gap(fd, mu.weights()[i] * gi[k]));
            }
        }
    }
    rep.pass = rep.wgrad_mismatch <= WGRAD_TOL;
    Ok(rep)
}
