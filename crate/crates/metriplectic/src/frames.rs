//! Horizontal frames: factorizations `K = sum_i A_i A_i^T` and the drift
//! assemblies built from them.
//!
//! The Stratonovich drift is `B0 = J grad E + K grad S + sum_i div_nu(A_i) A_i`;
//! the equivalent Ito drift is `J grad E + K grad S + div_nu K` with
//! `(div_nu K)_j = (1/m) sum_k d_k(m K_jk)`. The two are linked by the
//! conversion term `c_j = sum_i sum_k (d_k a_ij) a_ik` through
//! `(div_nu K)_j = c_j + sum_i a_ij div_nu(A_i)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::{divergence_nu, MatrixField, Point, VectorField, VolumeDensity};
use crate::system::GenericSystem;

/// How the frame fields were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    /// Analytic fields supplied with the system; smooth by assumption.
    UserSupplied,
    /// Pointwise spectral factorization. Eigenvector selection can jump
    /// at eigenvalue crossings, so derivative-based quantities obtained by
    /// differencing these fields assume local smoothness.
    Spectral,
}

/// Default relative eigenvalue cutoff for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// A list of horizontal vector fields `A_1..A_r` with
/// `sum_i A_i A_i^T = K`.
#[derive(Clone)]
pub struct Frame {
    fields: Vec<VectorField>,
    source: FrameSource,
    rank_tol: f64,
}

impl Frame {
    pub fn user_supplied(fields: Vec<VectorField>) -> Self {
        Frame {
            fields,
            source: FrameSource::UserSupplied,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    /// Frame that factorizes `k` spectrally at each evaluation point.
    /// Emits a one-time warning: divergences of spectral frames are
    /// obtained by finite differences, which assumes the selection is
    /// locally smooth (no eigenvalue crossings nearby).
    pub fn spectral(k: &MatrixField, dim: usize, rank_tol: f64) -> Self {
        static WARNED: std::sync::Once = std::sync::Once::new();
        WARNED.call_once(|| {
            eprintln!(
                "warning: spectral frame in use; finite-differenced frame \
                 derivatives assume no eigenvalue crossings nearby"
            );
        });
        let mut fields = Vec::new();
        for i in 0..dim {
            let k = k.clone();
            fields.push(VectorField::from_fn(move |x: &Point| {
                let km = match k.value(x) {
                    Ok(m) => m,
                    Err(_) => return DVector::from_element(x.len(), f64::NAN),
                };
                match factorize_cometric(&km, rank_tol) {
                    Ok(vecs) => vecs
                        .get(i)
                        .cloned()
                        .unwrap_or_else(|| DVector::zeros(x.len())),
                    Err(_) => DVector::from_element(x.len(), f64::NAN),
                }
            }));
        }
        Frame {
            fields,
            source: FrameSource::Spectral,
            rank_tol,
        }
    }

    pub fn rank(&self) -> usize {
        self.fields.len()
    }

    pub fn source(&self) -> FrameSource {
        self.source
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn field(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    /// Values of all frame fields at `x`.
    pub fn evaluate(&self, x: &Point) -> Result<Vec<DVector<f64>>> {
        self.fields.iter().map(|f| f.value(x)).collect()
    }

    /// `sum_i A_i(x) A_i(x)^T`.
    pub fn reconstruct(&self, x: &Point) -> Result<DMatrix<f64>> {
        let d = x.len();
        let mut m = DMatrix::zeros(d, d);
        for a in self.evaluate(x)? {
            m += &a * a.transpose();
        }
        Ok(m)
    }

    /// Verify the reconstruction contract against `K(x)`.
    pub fn check_consistency(&self, k: &MatrixField, x: &Point) -> Result<()> {
        let km = k.value(x)?;
        let residual = (self.reconstruct(x)? - &km).norm();
        if residual > self.rank_tol.max(1e-12) * (1.0 + km.norm()) {
            return Err(Error::FrameMismatch {
                point: x.iter().copied().collect(),
                residual,
            });
        }
        Ok(())
    }

    /// `div_nu A_i` at `x`.
    pub fn divergence_nu(&self, i: usize, nu: &VolumeDensity, x: &Point) -> Result<f64> {
        divergence_nu(&self.fields[i], nu, x)
    }

    /// Noise matrix with column i equal to `sqrt(2) A_i`; satisfies the
    /// fluctuation-dissipation relation `Sigma Sigma^T = 2 K`.
    pub fn diffusion_matrix(&self, x: &Point) -> Result<DMatrix<f64>> {
        let d = x.len();
        let values = self.evaluate(x)?;
        let mut sigma = DMatrix::zeros(d, values.len());
        for (i, a) in values.iter().enumerate() {
            for row in 0..d {
                sigma[(row, i)] = std::f64::consts::SQRT_2 * a[row];
            }
        }
        Ok(sigma)
    }
}

/// Spectral factorization of one PSD matrix: `K = sum_i lambda_i v_i v_i^T`
/// yields `A_i = sqrt(lambda_i) v_i` for eigenvalues above
/// `rank_tol * lambda_max`. Eigenvector signs are fixed so the
/// largest-magnitude component is positive (ties: lowest index), making
/// the output deterministic; the reconstruction, not the individual
/// vectors, is the contract.
pub fn factorize_cometric(k: &DMatrix<f64>, rank_tol: f64) -> Result<Vec<DVector<f64>>> {
    let sym = 0.5 * (k + k.transpose());
    let eig = sym.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let cutoff = rank_tol * lambda_max.max(f64::MIN_POSITIVE);
    // Deterministic order: descending eigenvalue, index as tie-break.
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    for idx in order {
        let lambda = eig.eigenvalues[idx];
        if lambda < -rank_tol * lambda_max.max(1.0) {
            return Err(Error::SymmetryViolation {
                tag: "positive semidefiniteness",
                point: vec![],
                detail: format!("eigenvalue {lambda:.3e} during factorization"),
            });
        }
        if lambda <= cutoff {
            continue;
        }
        let mut v: DVector<f64> = eig.eigenvectors.column(idx).into();
        let mut best = 0usize;
        for i in 1..v.len() {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v = -v;
        }
        out.push(v * lambda.sqrt());
    }
    Ok(out)
}

/// Stratonovich drift `B0 = J grad E + K grad S + sum_i div_nu(A_i) A_i`.
pub fn drift_b0(sys: &GenericSystem, frame: &Frame, x: &Point) -> Result<DVector<f64>> {
    frame.check_consistency(sys.k(), x)?;
    let mut b = sys.deterministic_drift(x)?;
    for i in 0..frame.rank() {
        let div = frame.divergence_nu(i, sys.nu(), x)?;
        b += frame.field(i).value(x)? * div;
    }
    Ok(b)
}

/// `(div_nu K)_j = (1/m) sum_k d_k(m K_jk)`, computed from K's entry
/// partials and the log-density gradient. No frame needed.
pub fn div_nu_cometric(k: &MatrixField, nu: &VolumeDensity, x: &Point) -> Result<DVector<f64>> {
    let d = x.len();
    let km = k.value(x)?;
    let parts = k.partials(x)?;
    let lg = nu.log_gradient(x)?;
    let mut out = DVector::zeros(d);
    for j in 0..d {
        let mut v = 0.0;
        for kk in 0..d {
            // d_k K_jk + K_jk d_k(log m)
            v += parts[kk][(j, kk)] + km[(j, kk)] * lg[kk];
        }
        out[j] = v;
    }
    Ok(out)
}

/// Ito drift `J grad E + K grad S + div_nu K`.
pub fn ito_drift(sys: &GenericSystem, x: &Point) -> Result<DVector<f64>> {
    Ok(sys.deterministic_drift(x)? + div_nu_cometric(sys.k(), sys.nu(), x)?)
}

/// Stratonovich-to-Ito conversion `c_j = sum_i sum_k (d_k a_ij) a_ik`,
/// i.e. `c = sum_i Jac(A_i) A_i`.
pub fn strat_to_ito_correction(frame: &Frame, x: &Point) -> Result<DVector<f64>> {
    let d = x.len();
    let mut c = DVector::zeros(d);
    for i in 0..frame.rank() {
        let a = frame.field(i).value(x)?;
        let jac = frame.field(i).jacobian(x)?;
        c += jac * a;
    }
    Ok(c)
}
