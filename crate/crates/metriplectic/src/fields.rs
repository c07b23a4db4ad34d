//! Scalar, vector, and matrix fields on a coordinate patch.
//!
//! Fields are immutable bundles of evaluator closures with optional
//! analytic derivatives; central finite differences are the fallback.
//! All evaluators must be pure functions of the point. Points outside
//! declared patch bounds evaluate normally: bounds gate simulation
//! stopping, not evaluation, because integrators overshoot transiently.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Point = DVector<f64>;

pub type ScalarFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&Point) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&Point) -> DMatrix<f64> + Send + Sync>;

/// Default step for first-order central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Step for nested (second-order) differencing.
pub const DEFAULT_FD_STEP_SECOND: f64 = 1e-4;

/// A single global coordinate chart, optionally with a simulation box.
#[derive(Clone, Debug)]
pub struct CoordinatePatch {
    dim: usize,
    bounds: Option<Vec<(f64, f64)>>,
    label: String,
}

impl CoordinatePatch {
    pub fn new(dim: usize, label: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSystem("patch dimension must be >= 1".into()));
        }
        Ok(CoordinatePatch {
            dim,
            bounds: None,
            label: label.into(),
        })
    }

    pub fn with_bounds(
        dim: usize,
        bounds: Vec<(f64, f64)>,
        label: impl Into<String>,
    ) -> Result<Self> {
        let mut patch = Self::new(dim, label)?;
        if bounds.len() != dim {
            return Err(Error::InvalidSystem(format!(
                "bounds have {} axes, patch has {}",
                bounds.len(),
                dim
            )));
        }
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidSystem(format!(
                    "axis {}: lower bound {} not below upper bound {}",
                    k + 1,
                    lo,
                    hi
                )));
            }
        }
        patch.bounds = Some(bounds);
        Ok(patch)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    /// True when `x` lies inside the bounds (always true without bounds).
    pub fn contains(&self, x: &Point) -> bool {
        match &self.bounds {
            None => true,
            Some(b) => x
                .iter()
                .zip(b.iter())
                .all(|(&xi, &(lo, hi))| xi >= lo && xi <= hi),
        }
    }

    /// Bounds, or a default box, for sampling-based checks.
    pub fn sampling_bounds(&self) -> Vec<(f64, f64)> {
        self.bounds
            .clone()
            .unwrap_or_else(|| vec![(-1.0, 1.0); self.dim])
    }
}

/// Scalar field with optional analytic gradient and Hessian.
#[derive(Clone)]
pub struct ScalarField {
    value: ScalarFn,
    gradient: Option<VectorFn>,
    hessian: Option<MatrixFn>,
    fd_step: f64,
}

impl ScalarField {
    pub fn from_fn(value: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField {
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn constant(c: f64) -> Self {
        ScalarField::from_fn(move |_| c).with_gradient(|x: &Point| DVector::zeros(x.len()))
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        assert!(step > 0.0, "fd_step must be positive");
        self.fd_step = step;
        self
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    pub fn value(&self, x: &Point) -> Result<f64> {
        let v = (self.value)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::non_finite("scalar field value", x))
        }
    }

    /// Analytic gradient when supplied, else central differences.
    pub fn gradient(&self, x: &Point) -> Result<DVector<f64>> {
        let g = match &self.gradient {
            Some(g) => g(x),
            None => central_gradient(&*self.value, x, self.fd_step),
        };
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::non_finite("scalar field gradient", x))
        }
    }

    /// Analytic Hessian when supplied; otherwise central differences of the
    /// analytic gradient, or nested differencing of the value as a last
    /// resort.
    pub fn hessian(&self, x: &Point) -> Result<DMatrix<f64>> {
        let d = x.len();
        let h = match (&self.hessian, &self.gradient) {
            (Some(hess), _) => hess(x),
            (None, Some(grad)) => {
                let mut m = DMatrix::zeros(d, d);
                let step = self.fd_step;
                let mut xp = x.clone();
                for k in 0..d {
                    xp[k] = x[k] + step;
                    let gp = grad(&xp);
                    xp[k] = x[k] - step;
                    let gm = grad(&xp);
                    xp[k] = x[k];
                    for i in 0..d {
                        m[(i, k)] = (gp[i] - gm[i]) / (2.0 * step);
                    }
                }
                // Symmetrize: the exact Hessian is symmetric.
                0.5 * (&m + m.transpose())
            }
            (None, None) => nested_hessian(&*self.value, x, DEFAULT_FD_STEP_SECOND),
        };
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(Error::non_finite("scalar field hessian", x))
        }
    }
}

/// Value and gradient of a scalar field at a point.
pub fn jet_scalar(field: &ScalarField, x: &Point) -> Result<(f64, DVector<f64>)> {
    Ok((field.value(x)?, field.gradient(x)?))
}

fn central_gradient(value: &(dyn Fn(&Point) -> f64 + Send + Sync), x: &Point, step: f64) -> DVector<f64> {
    let d = x.len();
    let mut g = DVector::zeros(d);
    let mut xp = x.clone();
    for k in 0..d {
        xp[k] = x[k] + step;
        let fp = value(&xp);
        xp[k] = x[k] - step;
        let fm = value(&xp);
        xp[k] = x[k];
        g[k] = (fp - fm) / (2.0 * step);
    }
    g
}

fn nested_hessian(value: &(dyn Fn(&Point) -> f64 + Send + Sync), x: &Point, step: f64) -> DMatrix<f64> {
    let d = x.len();
    let f0 = value(x);
    let mut h = DMatrix::zeros(d, d);
    let mut xt = x.clone();
    for i in 0..d {
        xt[i] = x[i] + step;
        let fp = value(&xt);
        xt[i] = x[i] - step;
        let fm = value(&xt);
        xt[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in (i + 1)..d {
            xt[i] = x[i] + step;
            xt[j] = x[j] + step;
            let fpp = value(&xt);
            xt[j] = x[j] - step;
            let fpm = value(&xt);
            xt[i] = x[i] - step;
            let fmm = value(&xt);
            xt[j] = x[j] + step;
            let fmp = value(&xt);
            xt[i] = x[i];
            xt[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Declared pointwise structure of a matrix field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymmetryTag {
    Antisymmetric,
    SymmetricPsd,
    None,
}

/// Matrix field with optional analytic entrywise partial derivatives.
#[derive(Clone)]
pub struct MatrixField {
    value: MatrixFn,
    /// `entry_partials(x, k)[i, j] = d/dx_k of entry (i, j)`.
    entry_partials: Option<Arc<dyn Fn(&Point, usize) -> DMatrix<f64> + Send + Sync>>,
    symmetry: SymmetryTag,
    fd_step: f64,
}

impl MatrixField {
    pub fn from_fn(
        value: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
        symmetry: SymmetryTag,
    ) -> Self {
        MatrixField {
            value: Arc::new(value),
            entry_partials: None,
            symmetry,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn constant(m: DMatrix<f64>, symmetry: SymmetryTag) -> Self {
        let d = m.ncols();
        MatrixField::from_fn(move |_| m.clone(), symmetry)
            .with_entry_partials(move |_: &Point, _k: usize| DMatrix::zeros(d, d))
    }

    pub fn zeros(dim: usize, symmetry: SymmetryTag) -> Self {
        MatrixField::constant(DMatrix::zeros(dim, dim), symmetry)
    }

    pub fn with_entry_partials(
        mut self,
        partials: impl Fn(&Point, usize) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.entry_partials = Some(Arc::new(partials));
        self
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        assert!(step > 0.0, "fd_step must be positive");
        self.fd_step = step;
        self
    }

    pub fn symmetry(&self) -> SymmetryTag {
        self.symmetry
    }

    pub fn has_analytic_partials(&self) -> bool {
        self.entry_partials.is_some()
    }

    pub fn value(&self, x: &Point) -> Result<DMatrix<f64>> {
        let m = (self.value)(x);
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::non_finite("matrix field value", x))
        }
    }

    /// Matrix of `d/dx_k` applied entrywise.
    pub fn partial(&self, x: &Point, k: usize) -> Result<DMatrix<f64>> {
        let m = match &self.entry_partials {
            Some(p) => p(x, k),
            None => {
                let step = self.fd_step;
                let mut xp = x.clone();
                xp[k] = x[k] + step;
                let mp = (self.value)(&xp);
                xp[k] = x[k] - step;
                let mm = (self.value)(&xp);
                (mp - mm) / (2.0 * step)
            }
        };
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::non_finite("matrix field partial", x))
        }
    }

    pub fn partials(&self, x: &Point) -> Result<Vec<DMatrix<f64>>> {
        (0..x.len()).map(|k| self.partial(x, k)).collect()
    }

    /// Check the declared symmetry tag at a point.
    pub fn check_symmetry(&self, x: &Point, tol: f64) -> Result<()> {
        let m = self.value(x)?;
        match self.symmetry {
            SymmetryTag::Antisymmetric => {
                let defect = (&m + m.transpose()).norm();
                if defect > tol {
                    return Err(Error::SymmetryViolation {
                        tag: "antisymmetry",
                        point: x.iter().copied().collect(),
                        detail: format!("|J + J^T| = {defect:.3e}"),
                    });
                }
            }
            SymmetryTag::SymmetricPsd => {
                let defect = (&m - m.transpose()).norm();
                if defect > tol {
                    return Err(Error::SymmetryViolation {
                        tag: "symmetry",
                        point: x.iter().copied().collect(),
                        detail: format!("|K - K^T| = {defect:.3e}"),
                    });
                }
                let sym = 0.5 * (&m + m.transpose());
                let min_eig = sym
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                if min_eig < -tol {
                    return Err(Error::SymmetryViolation {
                        tag: "positive semidefiniteness",
                        point: x.iter().copied().collect(),
                        detail: format!("min eigenvalue = {min_eig:.3e}"),
                    });
                }
            }
            SymmetryTag::None => {}
        }
        Ok(())
    }
}

/// Value and the d entrywise-partial matrices of a matrix field.
pub fn jet_matrix(field: &MatrixField, x: &Point) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    Ok((field.value(x)?, field.partials(x)?))
}

/// Vector field with an optional analytic Jacobian
/// (`jacobian(x)[j, k] = d/dx_k of component j`).
#[derive(Clone)]
pub struct VectorField {
    value: VectorFn,
    jacobian: Option<MatrixFn>,
    fd_step: f64,
}

impl VectorField {
    pub fn from_fn(value: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static) -> Self {
        VectorField {
            value: Arc::new(value),
            jacobian: None,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn constant(v: DVector<f64>) -> Self {
        let d = v.len();
        VectorField::from_fn(move |_| v.clone()).with_jacobian(move |_: &Point| DMatrix::zeros(d, d))
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn value(&self, x: &Point) -> Result<DVector<f64>> {
        let v = (self.value)(x);
        if v.iter().all(|z| z.is_finite()) {
            Ok(v)
        } else {
            Err(Error::non_finite("vector field value", x))
        }
    }

    pub fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        let j = match &self.jacobian {
            Some(j) => j(x),
            None => {
                let d = x.len();
                let step = self.fd_step;
                let mut m = DMatrix::zeros(d, d);
                let mut xp = x.clone();
                for k in 0..d {
                    xp[k] = x[k] + step;
                    let vp = (self.value)(&xp);
                    xp[k] = x[k] - step;
                    let vm = (self.value)(&xp);
                    xp[k] = x[k];
                    for j_row in 0..d {
                        m[(j_row, k)] = (vp[j_row] - vm[j_row]) / (2.0 * step);
                    }
                }
                m
            }
        };
        if j.iter().all(|v| v.is_finite()) {
            Ok(j)
        } else {
            Err(Error::non_finite("vector field jacobian", x))
        }
    }

    /// Flat divergence (trace of the Jacobian).
    pub fn divergence(&self, x: &Point) -> Result<f64> {
        Ok(self.jacobian(x)?.trace())
    }
}

/// Reference volume density `nu = m dx` with `m > 0`.
#[derive(Clone)]
pub struct VolumeDensity {
    m: ScalarField,
    log_gradient: Option<VectorFn>,
}

impl VolumeDensity {
    /// Lebesgue measure: `m = 1`.
    pub fn lebesgue(dim: usize) -> Self {
        VolumeDensity {
            m: ScalarField::constant(1.0),
            log_gradient: Some(Arc::new(move |_| DVector::zeros(dim))),
        }
    }

    /// Density from a positive scalar field; the log-gradient is derived
    /// from the field's gradient.
    pub fn from_field(m: ScalarField) -> Self {
        VolumeDensity {
            m,
            log_gradient: None,
        }
    }

    pub fn with_log_gradient(
        mut self,
        log_gradient: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.log_gradient = Some(Arc::new(log_gradient));
        self
    }

    pub fn field(&self) -> &ScalarField {
        &self.m
    }

    pub fn has_analytic_log_gradient(&self) -> bool {
        self.log_gradient.is_some() || self.m.has_analytic_gradient()
    }

    pub fn density(&self, x: &Point) -> Result<f64> {
        let v = self.m.value(x)?;
        if v <= 0.0 {
            return Err(Error::InvalidSystem(format!(
                "volume density non-positive ({v:.3e}) at {:?}",
                x.as_slice()
            )));
        }
        Ok(v)
    }

    /// Gradient of log m.
    pub fn log_gradient(&self, x: &Point) -> Result<DVector<f64>> {
        match &self.log_gradient {
            Some(g) => {
                let v = g(x);
                if v.iter().all(|z| z.is_finite()) {
                    Ok(v)
                } else {
                    Err(Error::non_finite("log-density gradient", x))
                }
            }
            None => {
                let m = self.density(x)?;
                Ok(self.m.gradient(x)? / m)
            }
        }
    }
}

/// `div_nu X = div X + grad(log m) . X`, the divergence with respect to
/// the volume `nu = m dx` (equivalently `(1/m) sum_j d_j(m X_j)`).
pub fn divergence_nu(x_field: &VectorField, nu: &VolumeDensity, x: &Point) -> Result<f64> {
    let flat = x_field.divergence(x)?;
    let v = x_field.value(x)?;
    let lg = nu.log_gradient(x)?;
    let out = flat + lg.dot(&v);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::non_finite("nu-divergence", x))
    }
}
