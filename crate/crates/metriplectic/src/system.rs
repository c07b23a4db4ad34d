//! The GENERIC system bundle and the built-in catalog.
//!
//! A [`GenericSystem`] is the tuple (patch, J, K, m, E, S): an
//! antisymmetric Poisson matrix field `J`, a symmetric positive
//! semidefinite co-metric `K`, a reference volume density `m dx`, and the
//! energy/entropy pair. Optional extras: an analytic horizontal frame for
//! `K`, and a temperature scaling `(S~, K~)` with `S = S~/T`, `K = T K~`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{parse_expression, DerivOrder, ExprAst};
use crate::fields::{
    CoordinatePatch, MatrixField, Point, ScalarField, SymmetryTag, VectorField, VolumeDensity,
};
use crate::frames::Frame;
use crate::rng::low_discrepancy_points;

/// Temperature decomposition `S = S~ / T`, `K = T K~` around a reference
/// temperature (the temperature at which the bundled `S`, `K` are stated).
#[derive(Clone)]
pub struct TemperatureScaling {
    pub entropy_tilde: ScalarField,
    pub k_tilde: MatrixField,
    pub frame_tilde: Option<Frame>,
    pub reference_temperature: f64,
}

/// A validated geometric GENERIC system on a single coordinate patch.
#[derive(Clone)]
pub struct GenericSystem {
    patch: CoordinatePatch,
    j: MatrixField,
    k: MatrixField,
    nu: VolumeDensity,
    energy: ScalarField,
    entropy: ScalarField,
    frame: Option<Frame>,
    scaling: Option<TemperatureScaling>,
    label: String,
}

impl GenericSystem {
    pub fn new(
        patch: CoordinatePatch,
        j: MatrixField,
        k: MatrixField,
        nu: VolumeDensity,
        energy: ScalarField,
        entropy: ScalarField,
        label: impl Into<String>,
    ) -> Result<Self> {
        let sys = GenericSystem {
            patch,
            j,
            k,
            nu,
            energy,
            entropy,
            frame: None,
            scaling: None,
            label: label.into(),
        };
        sys.check_shapes()?;
        Ok(sys)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.patch.dim();
        let x = Point::from_element(d, 0.1);
        let jm = self.j.value(&x)?;
        let km = self.k.value(&x)?;
        if jm.nrows() != d || jm.ncols() != d || km.nrows() != d || km.ncols() != d {
            return Err(Error::InvalidSystem(format!(
                "J is {}x{}, K is {}x{}, patch dimension is {d}",
                jm.nrows(),
                jm.ncols(),
                km.nrows(),
                km.ncols()
            )));
        }
        if self.energy.gradient(&x)?.len() != d || self.entropy.gradient(&x)?.len() != d {
            return Err(Error::InvalidSystem(
                "energy/entropy gradient dimension mismatch".into(),
            ));
        }
        Ok(())
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = Some(frame);
        self
    }

    /// Attach a temperature scaling and validate `S = S~/T`, `K = T K~`
    /// at low-discrepancy sample points for the stated reference T.
    pub fn with_scaling(mut self, scaling: TemperatureScaling) -> Result<Self> {
        let t = scaling.reference_temperature;
        if !(t > 0.0) {
            return Err(Error::InvalidSystem(
                "reference temperature must be positive".into(),
            ));
        }
        let samples = low_discrepancy_points(11, 10, &self.patch.sampling_bounds());
        for x in &samples {
            let s = self.entropy.value(x)?;
            let s_tilde = scaling.entropy_tilde.value(x)?;
            if (s - s_tilde / t).abs() > 1e-8 * (1.0 + s.abs()) {
                return Err(Error::InvalidSystem(format!(
                    "S != S~/T at {:?}: {} vs {}",
                    x.as_slice(),
                    s,
                    s_tilde / t
                )));
            }
            let k = self.k.value(x)?;
            let k_tilde = scaling.k_tilde.value(x)?;
            let defect = (&k - &k_tilde * t).norm();
            if defect > 1e-8 * (1.0 + k.norm()) {
                return Err(Error::InvalidSystem(format!(
                    "K != T K~ at {:?} (defect {defect:.3e})",
                    x.as_slice()
                )));
            }
        }
        self.scaling = Some(scaling);
        Ok(self)
    }

    pub fn patch(&self) -> &CoordinatePatch {
        &self.patch
    }

    pub fn dim(&self) -> usize {
        self.patch.dim()
    }

    pub fn j(&self) -> &MatrixField {
        &self.j
    }

    pub fn k(&self) -> &MatrixField {
        &self.k
    }

    pub fn nu(&self) -> &VolumeDensity {
        &self.nu
    }

    pub fn energy(&self) -> &ScalarField {
        &self.energy
    }

    pub fn entropy(&self) -> &ScalarField {
        &self.entropy
    }

    pub fn frame(&self) -> Option<&Frame> {
        self.frame.as_ref()
    }

    pub fn scaling(&self) -> Option<&TemperatureScaling> {
        self.scaling.as_ref()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `J grad E + K grad S`, the deterministic drift.
    pub fn deterministic_drift(&self, x: &Point) -> Result<DVector<f64>> {
        let ge = self.energy.gradient(x)?;
        let gs = self.entropy.gradient(x)?;
        Ok(self.j.value(x)? * ge + self.k.value(x)? * gs)
    }

    /// True when every component exposes analytic derivatives, which is
    /// what the tight (1e-8) verification tolerances assume.
    pub fn has_analytic_derivatives(&self) -> bool {
        self.energy.has_analytic_gradient()
            && self.entropy.has_analytic_gradient()
            && self.j.has_analytic_partials()
            && self.k.has_analytic_partials()
            && self.nu.has_analytic_log_gradient()
    }
}

/// Built-in example systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CatalogId {
    DampedOscillator,
    RigidBody,
    OuGradient,
    CircleDiffusion,
    CanonicalHamiltonian,
}

impl std::str::FromStr for CatalogId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damped_oscillator" => Ok(CatalogId::DampedOscillator),
            "rigid_body" => Ok(CatalogId::RigidBody),
            "ou_gradient" => Ok(CatalogId::OuGradient),
            "circle_diffusion" => Ok(CatalogId::CircleDiffusion),
            "canonical_hamiltonian" => Ok(CatalogId::CanonicalHamiltonian),
            other => Err(Error::Config(format!("unknown system kind '{other}'"))),
        }
    }
}

impl CatalogId {
    pub fn name(&self) -> &'static str {
        match self {
            CatalogId::DampedOscillator => "damped_oscillator",
            CatalogId::RigidBody => "rigid_body",
            CatalogId::OuGradient => "ou_gradient",
            CatalogId::CircleDiffusion => "circle_diffusion",
            CatalogId::CanonicalHamiltonian => "canonical_hamiltonian",
        }
    }
}

fn eval1(ast: &ExprAst, v: f64, order: DerivOrder) -> (f64, f64, f64) {
    match ast.eval_dual(&DVector::from_element(1, v), order) {
        Ok(d) => (
            d.value,
            d.grad[0],
            d.hess.as_ref().map(|h| h[(0, 0)]).unwrap_or(f64::NAN),
        ),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    }
}

/// Damped oscillator with heat accounting. State (q, p, e);
/// `E = p^2/2m + V(q) + e`, `S = s(e)`, canonical J padded with a zero
/// row/column for e, and `K = (gamma / s'(e)) u u^T` with
/// `u = (0, 1, -p/m)`, so `K grad E = 0` and `J grad S = 0` identically.
pub fn make_damped_oscillator(
    mass: f64,
    gamma: f64,
    potential: &ExprAst,
    entropy: &ExprAst,
) -> Result<GenericSystem> {
    if !(mass > 0.0) {
        return Err(Error::InvalidSystem("mass must be positive".into()));
    }
    if gamma < 0.0 {
        return Err(Error::InvalidSystem("gamma must be non-negative".into()));
    }
    if potential.dim() != 1 || entropy.dim() != 1 {
        return Err(Error::InvalidSystem(
            "potential and entropy must be expressions in a single variable (x1)".into(),
        ));
    }
    let bounds = vec![(-6.0, 6.0), (-6.0, 6.0), (0.1, 10.0)];
    let patch = CoordinatePatch::with_bounds(3, bounds.clone(), "damped oscillator (q, p, e)")?;

    // s'(e) > 0 must hold on the patch; sample the e-range.
    for i in 0..=20 {
        let e = 0.1 + (10.0 - 0.1) * (i as f64) / 20.0;
        let (_, sp, _) = eval1(entropy, e, DerivOrder::First);
        if !(sp > 0.0) {
            return Err(Error::InvalidSystem(format!(
                "entropy derivative s'(e) = {sp} not positive at e = {e}"
            )));
        }
    }

    let pot_v = potential.clone();
    let pot_g = potential.clone();
    let pot_h = potential.clone();
    let m_inv = 1.0 / mass;
    let energy = ScalarField::from_fn(move |x: &Point| {
        let (v, _, _) = eval1(&pot_v, x[0], DerivOrder::First);
        0.5 * x[1] * x[1] * m_inv + v + x[2]
    })
    .with_gradient(move |x: &Point| {
        let (_, vp, _) = eval1(&pot_g, x[0], DerivOrder::First);
        DVector::from_row_slice(&[vp, x[1] * m_inv, 1.0])
    })
    .with_hessian(move |x: &Point| {
        let (_, _, vpp) = eval1(&pot_h, x[0], DerivOrder::Second);
        DMatrix::from_row_slice(3, 3, &[vpp, 0.0, 0.0, 0.0, m_inv, 0.0, 0.0, 0.0, 0.0])
    });

    let ent_v = entropy.clone();
    let ent_g = entropy.clone();
    let ent_h = entropy.clone();
    let s_field = ScalarField::from_fn(move |x: &Point| eval1(&ent_v, x[2], DerivOrder::First).0)
        .with_gradient(move |x: &Point| {
            let (_, sp, _) = eval1(&ent_g, x[2], DerivOrder::First);
            DVector::from_row_slice(&[0.0, 0.0, sp])
        })
        .with_hessian(move |x: &Point| {
            let (_, _, spp) = eval1(&ent_h, x[2], DerivOrder::Second);
            let mut h = DMatrix::zeros(3, 3);
            h[(2, 2)] = spp;
            h
        });

    let j = MatrixField::constant(
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        SymmetryTag::Antisymmetric,
    );

    // K = c(e) u u^T, c = gamma / s'(e), u = (0, 1, -p/m).
    let k_entropy = entropy.clone();
    let k_value = move |x: &Point| -> DMatrix<f64> {
        let (_, sp, _) = eval1(&k_entropy, x[2], DerivOrder::First);
        let c = gamma / sp;
        let u = DVector::from_row_slice(&[0.0, 1.0, -x[1] * m_inv]);
        c * &u * u.transpose()
    };
    let kp_entropy = entropy.clone();
    let k_partials = move |x: &Point, kk: usize| -> DMatrix<f64> {
        let (_, sp, spp) = eval1(&kp_entropy, x[2], DerivOrder::Second);
        let c = gamma / sp;
        let u = DVector::from_row_slice(&[0.0, 1.0, -x[1] * m_inv]);
        match kk {
            0 => DMatrix::zeros(3, 3),
            1 => {
                let du = DVector::from_row_slice(&[0.0, 0.0, -m_inv]);
                c * (&du * u.transpose() + &u * du.transpose())
            }
            _ => {
                let c_prime = -gamma * spp / (sp * sp);
                c_prime * &u * u.transpose()
            }
        }
    };
    let k = MatrixField::from_fn(k_value, SymmetryTag::SymmetricPsd).with_entry_partials(k_partials);

    // Horizontal frame A = sqrt(c) u, rank 1.
    let fr_entropy = entropy.clone();
    let frame_value = move |x: &Point| -> DVector<f64> {
        let (_, sp, _) = eval1(&fr_entropy, x[2], DerivOrder::First);
        let c = gamma / sp;
        DVector::from_row_slice(&[0.0, c.sqrt(), -c.sqrt() * x[1] * m_inv])
    };
    let frj_entropy = entropy.clone();
    let frame_jac = move |x: &Point| -> DMatrix<f64> {
        let (_, sp, spp) = eval1(&frj_entropy, x[2], DerivOrder::Second);
        let c = gamma / sp;
        let sqrt_c = c.sqrt();
        // d/de sqrt(c) = c' / (2 sqrt c), c' = -gamma s'' / s'^2
        let dsqrt = if gamma == 0.0 {
            0.0
        } else {
            (-gamma * spp / (sp * sp)) / (2.0 * sqrt_c)
        };
        let mut m = DMatrix::zeros(3, 3);
        m[(1, 2)] = dsqrt;
        m[(2, 1)] = -sqrt_c * m_inv;
        m[(2, 2)] = -dsqrt * x[1] * m_inv;
        m
    };
    let frame = Frame::user_supplied(vec![
        VectorField::from_fn(frame_value).with_jacobian(frame_jac)
    ]);

    let sys = GenericSystem::new(
        patch,
        j,
        k.clone(),
        VolumeDensity::lebesgue(3),
        energy,
        s_field.clone(),
        "damped_oscillator",
    )?
    .with_frame(frame.clone());
    sys.with_scaling(TemperatureScaling {
        entropy_tilde: s_field,
        k_tilde: k,
        frame_tilde: Some(frame),
        reference_temperature: 1.0,
    })
}

fn hat_map(x: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        3,
        3,
        &[0.0, -x[2], x[1], x[2], 0.0, -x[0], -x[1], x[0], 0.0],
    )
}

/// Free rigid body with identity inertia plus isotropic dissipation
/// orthogonal to the angular momentum: `J xi = x cross xi` (Lie-Poisson),
/// `E = |x|^2/2`, `S = phi(|x|^2/2)`, `K = lambda (|grad E|^2 I - grad E grad E^T)`.
pub fn make_rigid_body(lambda: f64, casimir_entropy: &ExprAst) -> Result<GenericSystem> {
    make_rigid_body_with_inertia(lambda, casimir_entropy, [1.0, 1.0, 1.0])
}

/// Rigid body with principal moments of inertia `(I1, I2, I3)`:
/// `E = sum x_i^2 / (2 I_i)`. The inertia enters only through `grad E`;
/// with anisotropic inertia the Hamiltonian drift `J grad E = x cross
/// (Lambda x)` is the Euler equation and no longer vanishes.
pub fn make_rigid_body_with_inertia(
    lambda: f64,
    casimir_entropy: &ExprAst,
    inertia: [f64; 3],
) -> Result<GenericSystem> {
    if lambda < 0.0 {
        return Err(Error::InvalidSystem("lambda must be non-negative".into()));
    }
    if inertia.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidSystem("moments of inertia must be positive".into()));
    }
    if casimir_entropy.dim() != 1 {
        return Err(Error::InvalidSystem(
            "casimir entropy must be an expression in a single variable (x1)".into(),
        ));
    }
    let patch = CoordinatePatch::with_bounds(3, vec![(-3.0, 3.0); 3], "rigid body")?;
    let lam = DVector::from_row_slice(&[1.0 / inertia[0], 1.0 / inertia[1], 1.0 / inertia[2]]);

    let lam_e = lam.clone();
    let lam_g = lam.clone();
    let lam_h = lam.clone();
    let energy = ScalarField::from_fn(move |x: &Point| {
        0.5 * (x[0] * x[0] * lam_e[0] + x[1] * x[1] * lam_e[1] + x[2] * x[2] * lam_e[2])
    })
    .with_gradient(move |x: &Point| x.component_mul(&lam_g))
    .with_hessian(move |_: &Point| DMatrix::from_diagonal(&lam_h));

    let phi_v = casimir_entropy.clone();
    let phi_g = casimir_entropy.clone();
    let phi_h = casimir_entropy.clone();
    let entropy = ScalarField::from_fn(move |x: &Point| {
        eval1(&phi_v, 0.5 * x.norm_squared(), DerivOrder::First).0
    })
    .with_gradient(move |x: &Point| {
        let (_, pp, _) = eval1(&phi_g, 0.5 * x.norm_squared(), DerivOrder::First);
        x * pp
    })
    .with_hessian(move |x: &Point| {
        let (_, pp, ppp) = eval1(&phi_h, 0.5 * x.norm_squared(), DerivOrder::Second);
        x * x.transpose() * ppp + DMatrix::identity(3, 3) * pp
    });

    let j = MatrixField::from_fn(|x: &Point| hat_map(x), SymmetryTag::Antisymmetric)
        .with_entry_partials(|_: &Point, k: usize| {
            let mut e = DVector::zeros(3);
            e[k] = 1.0;
            hat_map(&e)
        });

    // K = lambda (|g|^2 I - g g^T) with g = Lambda x.
    let lam_k = lam.clone();
    let k_value = move |x: &Point| {
        let g = x.component_mul(&lam_k);
        lambda * (DMatrix::identity(3, 3) * g.norm_squared() - &g * g.transpose())
    };
    let lam_kp = lam.clone();
    let k_partials = move |x: &Point, kk: usize| {
        // d_k g_i = Lambda_k delta_ik, so
        // d_k K_ij = lambda [2 g_k Lambda_k delta_ij
        //                    - Lambda_k (delta_ik g_j + g_i delta_jk)]
        let g = x.component_mul(&lam_kp);
        let lk = lam_kp[kk];
        let mut m = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for jj in 0..3 {
                let mut v = 0.0;
                if i == jj {
                    v += 2.0 * g[kk] * lk;
                }
                if i == kk {
                    v -= lk * g[jj];
                }
                if jj == kk {
                    v -= g[i] * lk;
                }
                m[(i, jj)] = lambda * v;
            }
        }
        m
    };
    let k_field =
        MatrixField::from_fn(k_value, SymmetryTag::SymmetricPsd).with_entry_partials(k_partials);

    // Frame A_i = sqrt(lambda) (g cross e_i): sum_i A_i A_i^T = K and
    // each A_i is orthogonal to grad E = g.
    let sqrt_lambda = lambda.sqrt();
    let mut frame_fields = Vec::new();
    for i in 0..3 {
        let mut e = DVector::zeros(3);
        e[i] = 1.0;
        let ei = e.clone();
        let lam_f = lam.clone();
        let value = move |x: &Point| {
            let g = x.component_mul(&lam_f);
            DVector::from_row_slice(&[
                sqrt_lambda * (g[1] * ei[2] - g[2] * ei[1]),
                sqrt_lambda * (g[2] * ei[0] - g[0] * ei[2]),
                sqrt_lambda * (g[0] * ei[1] - g[1] * ei[0]),
            ])
        };
        let jac = -hat_map(&e) * DMatrix::from_diagonal(&lam) * sqrt_lambda;
        frame_fields.push(VectorField::from_fn(value).with_jacobian(move |_: &Point| jac.clone()));
    }

    let sys = GenericSystem::new(
        patch,
        j,
        k_field.clone(),
        VolumeDensity::lebesgue(3),
        energy,
        entropy.clone(),
        "rigid_body",
    )?
    .with_frame(Frame::user_supplied(frame_fields.clone()));
    sys.with_scaling(TemperatureScaling {
        entropy_tilde: entropy,
        k_tilde: k_field,
        frame_tilde: Some(Frame::user_supplied(frame_fields)),
        reference_temperature: 1.0,
    })
}

/// Pure gradient flow: `E = 0`, `S = -|x|^2/2`, `K = I`, `J = 0`. The SDE
/// is `dX = -X dt + sqrt(2) dW` with standard Gaussian stationary law.
pub fn make_ou_gradient(dim: usize) -> Result<GenericSystem> {
    if dim == 0 {
        return Err(Error::InvalidSystem("dimension must be >= 1".into()));
    }
    let patch = CoordinatePatch::with_bounds(dim, vec![(-6.0, 6.0); dim], "ou gradient")?;
    let energy = ScalarField::constant(0.0).with_hessian(move |_: &Point| DMatrix::zeros(dim, dim));
    let entropy = ScalarField::from_fn(|x: &Point| -0.5 * x.norm_squared())
        .with_gradient(|x: &Point| -x)
        .with_hessian(move |_: &Point| -DMatrix::identity(dim, dim));
    let j = MatrixField::zeros(dim, SymmetryTag::Antisymmetric);
    let k = MatrixField::constant(DMatrix::identity(dim, dim), SymmetryTag::SymmetricPsd);
    let mut frame_fields = Vec::new();
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        frame_fields.push(VectorField::constant(e));
    }
    let sys = GenericSystem::new(
        patch,
        j,
        k.clone(),
        VolumeDensity::lebesgue(dim),
        energy,
        entropy.clone(),
        "ou_gradient",
    )?
    .with_frame(Frame::user_supplied(frame_fields.clone()));
    sys.with_scaling(TemperatureScaling {
        entropy_tilde: entropy,
        k_tilde: k,
        frame_tilde: Some(Frame::user_supplied(frame_fields)),
        reference_temperature: 1.0,
    })
}

/// Noise tangent to circles: `E = |x|^2/2`, `S = 0`, `J = 0`,
/// `K = u u^T` with `u = (x2, -x1)`. Energy (the radius) is conserved
/// almost surely.
pub fn make_circle_diffusion() -> Result<GenericSystem> {
    let patch = CoordinatePatch::with_bounds(2, vec![(-3.0, 3.0); 2], "circle diffusion")?;
    let energy = ScalarField::from_fn(|x: &Point| 0.5 * x.norm_squared())
        .with_gradient(|x: &Point| x.clone())
        .with_hessian(|_: &Point| DMatrix::identity(2, 2));
    let entropy = ScalarField::constant(0.0).with_hessian(|_: &Point| DMatrix::zeros(2, 2));
    let j = MatrixField::zeros(2, SymmetryTag::Antisymmetric);
    let k = MatrixField::from_fn(
        |x: &Point| {
            let u = DVector::from_row_slice(&[x[1], -x[0]]);
            &u * u.transpose()
        },
        SymmetryTag::SymmetricPsd,
    )
    .with_entry_partials(|x: &Point, kk: usize| {
        let u = DVector::from_row_slice(&[x[1], -x[0]]);
        let du = if kk == 0 {
            DVector::from_row_slice(&[0.0, -1.0])
        } else {
            DVector::from_row_slice(&[1.0, 0.0])
        };
        &du * u.transpose() + &u * du.transpose()
    });
    let frame = Frame::user_supplied(vec![VectorField::from_fn(|x: &Point| {
        DVector::from_row_slice(&[x[1], -x[0]])
    })
    .with_jacobian(|_: &Point| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))]);
    let sys = GenericSystem::new(
        patch,
        j,
        k.clone(),
        VolumeDensity::lebesgue(2),
        energy,
        entropy.clone(),
        "circle_diffusion",
    )?
    .with_frame(frame.clone());
    sys.with_scaling(TemperatureScaling {
        entropy_tilde: entropy,
        k_tilde: k,
        frame_tilde: Some(frame),
        reference_temperature: 1.0,
    })
}

/// Canonical Hamiltonian system in (q, p): `K = 0`, `S = 0`,
/// `E = p^2/2 + V(q)`.
pub fn make_canonical_hamiltonian(potential: &ExprAst) -> Result<GenericSystem> {
    if potential.dim() != 1 {
        return Err(Error::InvalidSystem(
            "potential must be an expression in a single variable (x1)".into(),
        ));
    }
    let patch = CoordinatePatch::with_bounds(2, vec![(-4.0, 4.0); 2], "canonical hamiltonian")?;
    let pot_v = potential.clone();
    let pot_g = potential.clone();
    let pot_h = potential.clone();
    let energy = ScalarField::from_fn(move |x: &Point| {
        0.5 * x[1] * x[1] + eval1(&pot_v, x[0], DerivOrder::First).0
    })
    .with_gradient(move |x: &Point| {
        DVector::from_row_slice(&[eval1(&pot_g, x[0], DerivOrder::First).1, x[1]])
    })
    .with_hessian(move |x: &Point| {
        DMatrix::from_row_slice(2, 2, &[eval1(&pot_h, x[0], DerivOrder::Second).2, 0.0, 0.0, 1.0])
    });
    let entropy = ScalarField::constant(0.0).with_hessian(|_: &Point| DMatrix::zeros(2, 2));
    let j = MatrixField::constant(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        SymmetryTag::Antisymmetric,
    );
    let k = MatrixField::zeros(2, SymmetryTag::SymmetricPsd);
    let sys = GenericSystem::new(
        patch,
        j,
        k.clone(),
        VolumeDensity::lebesgue(2),
        energy,
        entropy.clone(),
        "canonical_hamiltonian",
    )?
    .with_frame(Frame::user_supplied(vec![]));
    sys.with_scaling(TemperatureScaling {
        entropy_tilde: entropy,
        k_tilde: k,
        frame_tilde: Some(Frame::user_supplied(vec![])),
        reference_temperature: 1.0,
    })
}

/// Deliberately broken systems, each violating exactly one axiom. They
/// serve as negative controls for the verifier.
pub mod counterexamples {
    use super::*;

    /// 4D system whose J is antisymmetric and unimodular but fails the
    /// Jacobi identity with constant defect -1 for the coordinate triple
    /// (x4, x1, x2). Four dimensions are necessary: in 3D any
    /// antisymmetric J is the hat map of a vector field w with
    /// div J = -curl w, and the Jacobi defect is carried by w . curl w,
    /// so unimodularity would force the identity to hold.
    pub fn non_jacobi() -> GenericSystem {
        let j = MatrixField::from_fn(
            |x: &Point| {
                let mut m = DMatrix::zeros(4, 4);
                m[(0, 1)] = x[2];
                m[(1, 0)] = -x[2];
                m[(2, 3)] = 1.0;
                m[(3, 2)] = -1.0;
                m
            },
            SymmetryTag::Antisymmetric,
        )
        .with_entry_partials(|_: &Point, k: usize| {
            let mut m = DMatrix::zeros(4, 4);
            if k == 2 {
                m[(0, 1)] = 1.0;
                m[(1, 0)] = -1.0;
            }
            m
        });
        let patch = CoordinatePatch::with_bounds(4, vec![(-2.0, 2.0); 4], "non-jacobi J").unwrap();
        GenericSystem::new(
            patch,
            j,
            MatrixField::zeros(4, SymmetryTag::SymmetricPsd),
            VolumeDensity::lebesgue(4),
            ScalarField::constant(0.0),
            ScalarField::constant(0.0),
            "counterexample_non_jacobi",
        )
        .unwrap()
    }

    /// 2D system with J12 = x1 against the Lebesgue density: div(m J)
    /// has column residual (0, 1). Every other axiom holds (any 2D
    /// antisymmetric J satisfies Jacobi).
    pub fn non_unimodular() -> GenericSystem {
        let j = MatrixField::from_fn(
            |x: &Point| {
                let mut m = DMatrix::zeros(2, 2);
                m[(0, 1)] = x[0];
                m[(1, 0)] = -x[0];
                m
            },
            SymmetryTag::Antisymmetric,
        )
        .with_entry_partials(|_: &Point, k: usize| {
            let mut m = DMatrix::zeros(2, 2);
            if k == 0 {
                m[(0, 1)] = 1.0;
                m[(1, 0)] = -1.0;
            }
            m
        });
        let patch =
            CoordinatePatch::with_bounds(2, vec![(-2.0, 2.0); 2], "non-unimodular J").unwrap();
        GenericSystem::new(
            patch,
            j,
            MatrixField::zeros(2, SymmetryTag::SymmetricPsd),
            VolumeDensity::lebesgue(2),
            ScalarField::constant(0.0),
            ScalarField::constant(0.0),
            "counterexample_non_unimodular",
        )
        .unwrap()
    }

    /// 2D system whose co-metric carries the eigenvalue -0.1.
    pub fn non_psd_cometric() -> GenericSystem {
        let k = MatrixField::constant(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]),
            SymmetryTag::SymmetricPsd,
        );
        let patch = CoordinatePatch::with_bounds(2, vec![(-2.0, 2.0); 2], "non-psd K").unwrap();
        GenericSystem::new(
            patch,
            MatrixField::zeros(2, SymmetryTag::Antisymmetric),
            k,
            VolumeDensity::lebesgue(2),
            ScalarField::constant(0.0),
            ScalarField::constant(0.0),
            "counterexample_non_psd",
        )
        .unwrap()
    }
}

/// Catalog parameters; unset values fall back to per-system defaults.
#[derive(Clone, Debug, Default)]
pub struct CatalogParams {
    pub mass: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub dim: Option<usize>,
    pub potential: Option<String>,
    pub entropy: Option<String>,
    /// Rigid body only: principal moments of inertia (I1, I2, I3).
    pub inertia: Option<[f64; 3]>,
}

/// Declarative system description; the CLI deserializes its config tree
/// into this.
#[derive(Clone, Debug)]
pub enum SystemSpec {
    Catalog {
        id: CatalogId,
        params: CatalogParams,
    },
    Custom(CustomSystemSpec),
}

/// Expression-defined system: entries are expression strings in `x1..xd`.
#[derive(Clone, Debug)]
pub struct CustomSystemSpec {
    pub dim: usize,
    pub energy: String,
    pub entropy: String,
    /// Volume density m (default "1").
    pub density: Option<String>,
    /// Strict upper-triangle entries of J, 1-based indices.
    pub j_entries: Vec<(usize, usize, String)>,
    /// Upper-triangle (including diagonal) entries of K, 1-based indices.
    pub k_entries: Vec<(usize, usize, String)>,
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Optional analytic frame fields, one component expression per axis.
    pub frames: Option<Vec<Vec<String>>>,
    pub label: Option<String>,
}

/// Build a system from a declarative spec and run the fast structural
/// checks (symmetry tags at 10 sample points).
pub fn load_system(spec: &SystemSpec) -> Result<GenericSystem> {
    let sys = match spec {
        SystemSpec::Catalog { id, params } => build_catalog(*id, params)?,
        SystemSpec::Custom(custom) => build_custom(custom)?,
    };
    let samples = low_discrepancy_points(13, 10, &sys.patch().sampling_bounds());
    for x in &samples {
        sys.j().check_symmetry(x, 1e-10)?;
        sys.k().check_symmetry(x, 1e-10)?;
    }
    Ok(sys)
}

fn build_catalog(id: CatalogId, params: &CatalogParams) -> Result<GenericSystem> {
    match id {
        CatalogId::DampedOscillator => {
            let potential = parse_expression(
                params.potential.as_deref().unwrap_or("x1^2/2"),
                1,
            )?;
            let entropy = parse_expression(params.entropy.as_deref().unwrap_or("log(x1)"), 1)?;
            make_damped_oscillator(
                params.mass.unwrap_or(1.0),
                params.gamma.unwrap_or(0.5),
                &potential,
                &entropy,
            )
        }
        CatalogId::RigidBody => {
            let entropy = parse_expression(params.entropy.as_deref().unwrap_or("-x1"), 1)?;
            make_rigid_body_with_inertia(
                params.lambda.unwrap_or(0.5),
                &entropy,
                params.inertia.unwrap_or([1.0, 1.0, 1.0]),
            )
        }
        CatalogId::OuGradient => make_ou_gradient(params.dim.unwrap_or(2)),
        CatalogId::CircleDiffusion => make_circle_diffusion(),
        CatalogId::CanonicalHamiltonian => {
            let potential = parse_expression(params.potential.as_deref().unwrap_or("x1^2/2"), 1)?;
            make_canonical_hamiltonian(&potential)
        }
    }
}

struct ExprEntries {
    dim: usize,
    entries: Vec<(usize, usize, ExprAst)>,
    antisymmetric: bool,
}

impl ExprEntries {
    fn value(&self, x: &Point) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, ast) in &self.entries {
            let v = ast
                .eval_dual(x, DerivOrder::First)
                .map(|d| d.value)
                .unwrap_or(f64::NAN);
            m[(*i, *j)] = v;
            if *i != *j {
                m[(*j, *i)] = if self.antisymmetric { -v } else { v };
            }
        }
        m
    }

    fn partial(&self, x: &Point, k: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, ast) in &self.entries {
            let v = ast
                .eval_dual(x, DerivOrder::First)
                .map(|d| d.grad[k])
                .unwrap_or(f64::NAN);
            m[(*i, *j)] = v;
            if *i != *j {
                m[(*j, *i)] = if self.antisymmetric { -v } else { v };
            }
        }
        m
    }
}

fn parse_entries(
    dim: usize,
    raw: &[(usize, usize, String)],
    antisymmetric: bool,
    what: &str,
) -> Result<ExprEntries> {
    let mut entries = Vec::new();
    for (i, j, text) in raw {
        if *i == 0 || *j == 0 || *i > dim || *j > dim {
            return Err(Error::Config(format!(
                "{what} entry ({i},{j}) out of range for dimension {dim}"
            )));
        }
        if antisymmetric && i == j {
            return Err(Error::Config(format!(
                "{what} diagonal entry ({i},{i}) must be zero; omit it"
            )));
        }
        if antisymmetric && i > j {
            return Err(Error::Config(format!(
                "{what} entry ({i},{j}): specify only the upper triangle"
            )));
        }
        let (a, b) = if i <= j { (*i, *j) } else { (*j, *i) };
        entries.push((a - 1, b - 1, parse_expression(text, dim)?));
    }
    Ok(ExprEntries {
        dim,
        entries,
        antisymmetric,
    })
}

fn build_custom(spec: &CustomSystemSpec) -> Result<GenericSystem> {
    let dim = spec.dim;
    if dim == 0 {
        return Err(Error::Config("custom system needs dim >= 1".into()));
    }
    let bounds = spec.bounds.clone().unwrap_or_else(|| vec![(-2.0, 2.0); dim]);
    let label = spec.label.clone().unwrap_or_else(|| "custom".into());
    let patch = CoordinatePatch::with_bounds(dim, bounds, label.clone())?;

    let energy = parse_expression(&spec.energy, dim)?.to_scalar_field();
    let entropy = parse_expression(&spec.entropy, dim)?.to_scalar_field();

    let j_entries = Arc::new(parse_entries(dim, &spec.j_entries, true, "J")?);
    let j_val = Arc::clone(&j_entries);
    let j_par = Arc::clone(&j_entries);
    let j = MatrixField::from_fn(move |x: &Point| j_val.value(x), SymmetryTag::Antisymmetric)
        .with_entry_partials(move |x: &Point, k: usize| j_par.partial(x, k));

    let k_entries = Arc::new(parse_entries(dim, &spec.k_entries, false, "K")?);
    let k_val = Arc::clone(&k_entries);
    let k_par = Arc::clone(&k_entries);
    let k = MatrixField::from_fn(move |x: &Point| k_val.value(x), SymmetryTag::SymmetricPsd)
        .with_entry_partials(move |x: &Point, k: usize| k_par.partial(x, k));

    let nu = match &spec.density {
        None => VolumeDensity::lebesgue(dim),
        Some(text) if text.trim() == "1" => VolumeDensity::lebesgue(dim),
        Some(text) => VolumeDensity::from_field(parse_expression(text, dim)?.to_scalar_field()),
    };

    let mut sys = GenericSystem::new(patch, j, k, nu, energy, entropy, label)?;

    if let Some(frame_specs) = &spec.frames {
        let mut fields = Vec::new();
        for components in frame_specs {
            if components.len() != dim {
                return Err(Error::Config(format!(
                    "frame field has {} components, expected {dim}",
                    components.len()
                )));
            }
            let asts: Vec<ExprAst> = components
                .iter()
                .map(|t| parse_expression(t, dim))
                .collect::<Result<_>>()?;
            let asts = Arc::new(asts);
            let a_val = Arc::clone(&asts);
            let a_jac = Arc::clone(&asts);
            let vf = VectorField::from_fn(move |x: &Point| {
                DVector::from_iterator(
                    dim,
                    a_val.iter().map(|ast| {
                        ast.eval_dual(x, DerivOrder::First)
                            .map(|d| d.value)
                            .unwrap_or(f64::NAN)
                    }),
                )
            })
            .with_jacobian(move |x: &Point| {
                let mut m = DMatrix::zeros(dim, dim);
                for (row, ast) in a_jac.iter().enumerate() {
                    if let Ok(d) = ast.eval_dual(x, DerivOrder::First) {
                        for col in 0..dim {
                            m[(row, col)] = d.grad[col];
                        }
                    } else {
                        for col in 0..dim {
                            m[(row, col)] = f64::NAN;
                        }
                    }
                }
                m
            });
            fields.push(vf);
        }
        sys = sys.with_frame(Frame::user_supplied(fields));
    }

    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pt(v: &[f64]) -> Point {
        DVector::from_row_slice(v)
    }

    fn damped() -> GenericSystem {
        let potential = parse_expression("x1^2/2", 1).unwrap();
        let entropy = parse_expression("log(x1)", 1).unwrap();
        make_damped_oscillator(1.0, 0.5, &potential, &entropy).unwrap()
    }

    #[test]
    fn damped_oscillator_non_interaction_at_sample() {
        let sys = damped();
        let x = pt(&[1.0, 2.0, 1.0]);
        let ge = sys.energy().gradient(&x).unwrap();
        assert_eq!(ge.as_slice(), &[1.0, 2.0, 1.0]);
        // u . grad E = 0, hence K grad E = 0.
        let k = sys.k().value(&x).unwrap();
        assert!((k * &ge).norm() < 1e-14);
        // J's third row/column vanish and grad S = (0, 0, s'): J grad S = 0.
        let gs = sys.entropy().gradient(&x).unwrap();
        let j = sys.j().value(&x).unwrap();
        assert!((j * &gs).norm() == 0.0);
    }

    #[test]
    fn damped_oscillator_dissipative_drift() {
        // K grad S at (1, 2, 1) with gamma = 0.5, s = log e: (0, -1, 2).
        let sys = damped();
        let x = pt(&[1.0, 2.0, 1.0]);
        let drift = sys.k().value(&x).unwrap() * sys.entropy().gradient(&x).unwrap();
        assert_relative_eq!(drift[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(drift[1], -1.0, epsilon = 1e-13);
        assert_relative_eq!(drift[2], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn damped_oscillator_rejects_non_increasing_entropy() {
        let potential = parse_expression("x1^2/2", 1).unwrap();
        let entropy = parse_expression("-x1", 1).unwrap(); // s' = -1
        assert!(make_damped_oscillator(1.0, 0.5, &potential, &entropy).is_err());
    }

    #[test]
    fn rigid_body_structure() {
        let entropy = parse_expression("-x1", 1).unwrap();
        let sys = make_rigid_body(0.5, &entropy).unwrap();
        let x = pt(&[1.0, 2.0, 3.0]);
        // K grad E = lambda (|x|^2 I - x x^T) x = 0.
        let ke = sys.k().value(&x).unwrap() * sys.energy().gradient(&x).unwrap();
        assert!(ke.norm() < 1e-13);
        // J grad S = x cross (phi' x) = 0.
        let js = sys.j().value(&x).unwrap() * sys.entropy().gradient(&x).unwrap();
        assert!(js.norm() < 1e-13);
        // div(m J) = 0 columnwise for the hat map.
        let parts = sys.j().partials(&x).unwrap();
        for col in 0..3 {
            let mut div = 0.0;
            for row in 0..3 {
                div += parts[row][(row, col)];
            }
            assert_eq!(div, 0.0);
        }
    }

    #[test]
    fn ou_gradient_drift_and_generator_value() {
        let sys = make_ou_gradient(2).unwrap();
        let x = pt(&[1.0, 0.0]);
        let drift = sys.deterministic_drift(&x).unwrap();
        assert_eq!(drift.as_slice(), &[-1.0, 0.0]);
        // Non-interaction holds vacuously: grad E = 0.
        assert_eq!(sys.energy().gradient(&x).unwrap().norm(), 0.0);
    }

    #[test]
    fn circle_diffusion_tangency() {
        let sys = make_circle_diffusion().unwrap();
        let x = pt(&[1.0, 2.0]);
        let ke = sys.k().value(&x).unwrap() * sys.energy().gradient(&x).unwrap();
        assert!(ke.norm() < 1e-14);
        // div K = (-x1, -x2) by hand.
        let parts = sys.k().partials(&x).unwrap();
        let mut div: DVector<f64> = DVector::zeros(2);
        for col in 0..2 {
            for row in 0..2 {
                div[col] += parts[row][(row, col)];
            }
        }
        assert_relative_eq!(div[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(div[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn load_catalog_and_custom_systems() {
        let sys = load_system(&SystemSpec::Catalog {
            id: CatalogId::OuGradient,
            params: CatalogParams {
                dim: Some(2),
                ..Default::default()
            },
        })
        .unwrap();
        assert_eq!(sys.dim(), 2);

        let custom = SystemSpec::Custom(CustomSystemSpec {
            dim: 2,
            energy: "x1^2/2 + x2^2/2".into(),
            entropy: "0".into(),
            density: Some("1".into()),
            j_entries: vec![(1, 2, "1".into())],
            k_entries: vec![],
            bounds: None,
            frames: None,
            label: None,
        });
        let sys = load_system(&custom).unwrap();
        let j = sys.j().value(&pt(&[0.3, 0.4])).unwrap();
        assert_eq!(j[(0, 1)], 1.0);
        assert_eq!(j[(1, 0)], -1.0);
    }

    #[test]
    fn custom_psd_violation_is_reported() {
        let custom = SystemSpec::Custom(CustomSystemSpec {
            dim: 2,
            energy: "0".into(),
            entropy: "0".into(),
            density: None,
            j_entries: vec![],
            k_entries: vec![(1, 1, "-1".into())],
            bounds: None,
            frames: None,
            label: None,
        });
        match load_system(&custom) {
            Err(Error::SymmetryViolation { tag, .. }) => {
                assert_eq!(tag, "positive semidefiniteness")
            }
            Err(other) => panic!("expected PSD violation, got {other:?}"),
            Ok(_) => panic!("expected PSD violation, got a system"),
        }
    }

    #[test]
    fn deterministic_flow_conserves_energy_produces_entropy() {
        // dE/dt = 0 and dS/dt = gamma p^2 / m^2 s'(e) >= 0 along the drift.
        let sys = damped();
        let x = pt(&[0.7, -1.3, 2.0]);
        let drift = sys.deterministic_drift(&x).unwrap();
        let de = sys.energy().gradient(&x).unwrap().dot(&drift);
        let ds = sys.entropy().gradient(&x).unwrap().dot(&drift);
        assert!(de.abs() < 1e-13);
        let expected = 0.5 * 1.3 * 1.3 * (1.0 / 2.0);
        assert_relative_eq!(ds, expected, epsilon = 1e-12);
        assert!(ds >= 0.0);
    }
}
