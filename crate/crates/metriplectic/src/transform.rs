//! Diffeomorphic coordinate changes and the coordinate-invariance
//! certificate.
//!
//! Under `y = phi(x)` the components transform as
//! `E^(phi(x)) = E(x)`, `S^(phi(x)) = S(x)`,
//! `J^ = Dphi J Dphi^T`, `K^ = Dphi K Dphi^T`, and the volume density as
//! `m^(phi(x)) = m(x) / |det Dphi(x)|`. The dynamics is coordinate
//! invariant; the certificate checked here is the generator identity
//! `(L^ f^)(phi(x)) = (L (f^ o phi))(x)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{DerivOrder, ExprAst};
use crate::fields::{
    CoordinatePatch, MatrixField, Point, ScalarField, SymmetryTag, VolumeDensity, DEFAULT_FD_STEP,
};
use crate::generator::generator_apply;
use crate::rng::low_discrepancy_points;
use crate::system::GenericSystem;

type PointFn = Arc<dyn Fn(&Point) -> DVector<f64> + Send + Sync>;
type JacFn = Arc<dyn Fn(&Point) -> DMatrix<f64> + Send + Sync>;

/// Smooth bijection with its inverse and Jacobian. The Jacobian is
/// analytic when supplied (the shipped diffeos and expression-defined
/// ones are); otherwise central differences of the forward map.
#[derive(Clone)]
pub struct Diffeo {
    forward: PointFn,
    inverse: PointFn,
    jacobian: Option<JacFn>,
    label: String,
}

impl Diffeo {
    pub fn new(
        forward: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static,
        inverse: impl Fn(&Point) -> DVector<f64> + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Self {
        Diffeo {
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
            jacobian: None,
            label: label.into(),
        }
    }

    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn identity(dim: usize) -> Self {
        Diffeo::new(|x: &Point| x.clone(), |y: &Point| y.clone(), "identity")
            .with_jacobian(move |_: &Point| DMatrix::identity(dim, dim))
    }

    /// Invertible linear map `y = A x`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        let a_inv = a.clone().try_inverse().ok_or_else(|| {
            Error::InvalidSystem("linear diffeomorphism matrix is singular".into())
        })?;
        let a_fwd = a.clone();
        let a_jac = a.clone();
        Ok(Diffeo::new(
            move |x: &Point| &a_fwd * x,
            move |y: &Point| &a_inv * y,
            "linear",
        )
        .with_jacobian(move |_: &Point| a_jac.clone()))
    }

    /// The shear `(q, p, e) -> (q, p, e + q^2)`.
    pub fn shear_energy() -> Self {
        Diffeo::new(
            |x: &Point| DVector::from_row_slice(&[x[0], x[1], x[2] + x[0] * x[0]]),
            |y: &Point| DVector::from_row_slice(&[y[0], y[1], y[2] - y[0] * y[0]]),
            "shear",
        )
        .with_jacobian(|x: &Point| {
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0 * x[0], 0.0, 1.0])
        })
    }

    /// Diffeomorphism from forward/inverse component expressions; the
    /// Jacobian comes from dual-number differentiation of the forward
    /// expressions, hence analytic.
    pub fn from_expressions(forward: &[ExprAst], inverse: &[ExprAst]) -> Result<Self> {
        let dim = forward.len();
        if dim == 0 || inverse.len() != dim {
            return Err(Error::Config(
                "diffeo needs matching forward/inverse component lists".into(),
            ));
        }
        for ast in forward.iter().chain(inverse.iter()) {
            if ast.dim() != dim {
                return Err(Error::Config(
                    "diffeo component dimension mismatch".into(),
                ));
            }
        }
        let fw: Arc<Vec<ExprAst>> = Arc::new(forward.to_vec());
        let inv: Arc<Vec<ExprAst>> = Arc::new(inverse.to_vec());
        let fw_val = Arc::clone(&fw);
        let fw_jac = Arc::clone(&fw);
        Ok(Diffeo::new(
            move |x: &Point| {
                DVector::from_iterator(
                    dim,
                    fw_val.iter().map(|ast| {
                        ast.eval_dual(x, DerivOrder::First)
                            .map(|d| d.value)
                            .unwrap_or(f64::NAN)
                    }),
                )
            },
            move |y: &Point| {
                DVector::from_iterator(
                    dim,
                    inv.iter().map(|ast| {
                        ast.eval_dual(y, DerivOrder::First)
                            .map(|d| d.value)
                            .unwrap_or(f64::NAN)
                    }),
                )
            },
            "expression diffeo",
        )
        .with_jacobian(move |x: &Point| {
            let mut m = DMatrix::zeros(dim, dim);
            for (row, ast) in fw_jac.iter().enumerate() {
                match ast.eval_dual(x, DerivOrder::First) {
                    Ok(d) => {
                        for col in 0..dim {
                            m[(row, col)] = d.grad[col];
                        }
                    }
                    Err(_) => {
                        for col in 0..dim {
                            m[(row, col)] = f64::NAN;
                        }
                    }
                }
            }
            m
        }))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn forward(&self, x: &Point) -> Result<DVector<f64>> {
        let y = (self.forward)(x);
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(Error::non_finite("diffeo forward image", x))
        }
    }

    pub fn inverse(&self, y: &Point) -> Result<DVector<f64>> {
        let x = (self.inverse)(y);
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::InverseFailed {
                point: y.iter().copied().collect(),
                message: "non-finite inverse image".into(),
            })
        }
    }

    pub fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        match &self.jacobian {
            Some(j) => {
                let m = j(x);
                if m.iter().all(|v| v.is_finite()) {
                    Ok(m)
                } else {
                    Err(Error::non_finite("diffeo jacobian", x))
                }
            }
            None => {
                let d = x.len();
                let mut m = DMatrix::zeros(d, d);
                let mut xp = x.clone();
                for k in 0..d {
                    xp[k] = x[k] + DEFAULT_FD_STEP;
                    let fp = self.forward(&xp)?;
                    xp[k] = x[k] - DEFAULT_FD_STEP;
                    let fm = self.forward(&xp)?;
                    xp[k] = x[k];
                    for row in 0..d {
                        m[(row, k)] = (fp[row] - fm[row]) / (2.0 * DEFAULT_FD_STEP);
                    }
                }
                Ok(m)
            }
        }
    }

    /// Check `inverse(forward(x)) = x` and `det Dphi != 0` at samples.
    pub fn validate(&self, points: &[Point]) -> Result<()> {
        for x in points {
            let y = self.forward(x)?;
            let back = self.inverse(&y)?;
            let defect = (&back - x).norm();
            if defect > 1e-10 * (1.0 + x.norm()) {
                return Err(Error::InverseFailed {
                    point: x.iter().copied().collect(),
                    message: format!("round-trip defect {defect:.3e}"),
                });
            }
            let det = self.jacobian(x)?.determinant();
            if det.abs() < 1e-12 {
                return Err(Error::InvalidSystem(format!(
                    "diffeo jacobian singular at {:?}",
                    x.as_slice()
                )));
            }
        }
        Ok(())
    }
}

/// Bounding box of the image of `bounds` under `phi`, estimated from the
/// corner images plus interior samples.
fn image_bounds(phi: &Diffeo, bounds: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let dim = bounds.len();
    let mut probes: Vec<Point> = Vec::new();
    for corner in 0..(1usize << dim) {
        probes.push(DVector::from_iterator(
            dim,
            (0..dim).map(|k| {
                if corner >> k & 1 == 1 {
                    bounds[k].1
                } else {
                    bounds[k].0
                }
            }),
        ));
    }
    probes.extend(low_discrepancy_points(29, 64, bounds));
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
    for x in &probes {
        let y = phi.forward(x)?;
        for k in 0..dim {
            out[k].0 = out[k].0.min(y[k]);
            out[k].1 = out[k].1.max(y[k]);
        }
    }
    Ok(out)
}

/// Push a system forward through a diffeomorphism. Hatted components
/// evaluate by pulling the point back through `phi.inverse`; gradients of
/// the hatted scalars use the analytic chain rule, higher derivatives
/// fall back to differencing the (exact) hatted evaluators.
pub fn pushforward_system(sys: &GenericSystem, phi: &Diffeo) -> Result<GenericSystem> {
    let dim = sys.dim();
    let samples = low_discrepancy_points(19, 16, &sys.patch().sampling_bounds());
    phi.validate(&samples)?;

    let bounds = image_bounds(phi, &sys.patch().sampling_bounds())?;
    let patch = CoordinatePatch::with_bounds(
        dim,
        bounds,
        format!("{} via {}", sys.patch().label(), phi.label()),
    )?;

    let pull = {
        let phi = phi.clone();
        move |y: &Point| -> Result<Point> { phi.inverse(y) }
    };

    let hat_scalar = |field: ScalarField, phi: Diffeo| -> ScalarField {
        let pull_v = pull.clone();
        let f_v = field.clone();
        let pull_g = pull.clone();
        let f_g = field;
        let phi_g = phi;
        ScalarField::from_fn(move |y: &Point| {
            pull_v(y).and_then(|x| f_v.value(&x)).unwrap_or(f64::NAN)
        })
        .with_gradient(move |y: &Point| {
            let out = pull_g(y).and_then(|x| {
                let g = f_g.gradient(&x)?;
                let dphi = phi_g.jacobian(&x)?;
                // Dphi^T grad_hat = grad  =>  grad_hat = Dphi^-T grad
                dphi.transpose()
                    .lu()
                    .solve(&g)
                    .ok_or_else(|| Error::InvalidSystem("singular jacobian".into()))
            });
            out.unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN))
        })
    };

    let energy = hat_scalar(sys.energy().clone(), phi.clone());
    let entropy = hat_scalar(sys.entropy().clone(), phi.clone());

    let hat_matrix = |field: MatrixField, tag: SymmetryTag| -> MatrixField {
        let pull_m = pull.clone();
        let phi_m = phi.clone();
        MatrixField::from_fn(
            move |y: &Point| {
                let out = pull_m(y).and_then(|x| {
                    let dphi = phi_m.jacobian(&x)?;
                    Ok(&dphi * field.value(&x)? * dphi.transpose())
                });
                out.unwrap_or_else(|_| {
                    DMatrix::from_element(y.len(), y.len(), f64::NAN)
                })
            },
            tag,
        )
    };

    let j_hat = hat_matrix(sys.j().clone(), SymmetryTag::Antisymmetric);
    let k_hat = hat_matrix(sys.k().clone(), SymmetryTag::SymmetricPsd);

    let nu = sys.nu().clone();
    let phi_m = phi.clone();
    let pull_m = pull.clone();
    let m_hat = ScalarField::from_fn(move |y: &Point| {
        let out = pull_m(y).and_then(|x| {
            let det = phi_m.jacobian(&x)?.determinant();
            Ok(nu.density(&x)? / det.abs())
        });
        out.unwrap_or(f64::NAN)
    });

    GenericSystem::new(
        patch,
        j_hat,
        k_hat,
        VolumeDensity::from_field(m_hat),
        energy,
        entropy,
        format!("{}^", sys.label()),
    )
}

/// `|(L^ f^)(phi(x)) - (L (f^ o phi))(x)|`: the two evaluations agree for
/// the true pushforward, making this a numerical certificate of
/// coordinate invariance.
pub fn generator_equivalence_residual(
    sys: &GenericSystem,
    sys_hat: &GenericSystem,
    phi: &Diffeo,
    f_hat: &ScalarField,
    x: &Point,
) -> Result<f64> {
    let y = phi.forward(x)?;
    let lhs = generator_apply(sys_hat, f_hat, &y)?;

    // Pull f^ back: g = f^ o phi with analytic first derivatives.
    let phi_v = phi.clone();
    let f_v = f_hat.clone();
    let phi_g = phi.clone();
    let f_g = f_hat.clone();
    let g = ScalarField::from_fn(move |x: &Point| {
        phi_v
            .forward(x)
            .and_then(|y| f_v.value(&y))
            .unwrap_or(f64::NAN)
    })
    .with_gradient(move |x: &Point| {
        let out = phi_g.forward(x).and_then(|y| {
            let gy = f_g.gradient(&y)?;
            Ok(phi_g.jacobian(x)?.transpose() * gy)
        });
        out.unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN))
    });
    let rhs = generator_apply(sys, &g, x)?;
    Ok((lhs - rhs).abs())
}
