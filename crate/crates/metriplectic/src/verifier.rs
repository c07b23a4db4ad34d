//! Numerical verification of the GENERIC axioms at sampled points.
//!
//! The checks: antisymmetry of J, positive semidefiniteness of K, the
//! Jacobi identity for J's bracket over random quadratic triples, the
//! non-interaction conditions `J grad S = 0` / `K grad E = 0`, and the
//! unimodularity condition `div(m J) = 0` columnwise. Sampling uses a
//! seeded low-discrepancy sequence so reports are reproducible.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::Result;
use crate::fields::{MatrixField, Point, ScalarField, VolumeDensity};
use crate::rng::{self, low_discrepancy_points, KeyedStream};
use crate::system::GenericSystem;

/// Default residual tolerance with analytic derivatives.
pub const TOL_ANALYTIC: f64 = 1e-8;
/// Default residual tolerance when finite differences are in play.
pub const TOL_FINITE_DIFFERENCE: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_residual: f64,
    pub argmax: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Full report: per-check results plus the sampling specification.
#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub system: String,
    pub checks: Vec<CheckResult>,
    pub n_points: usize,
    pub seed: u64,
    pub bounds: Vec<(f64, f64)>,
    /// "analytic" or "finite-difference"; decides the default tolerance.
    pub derivative_path: &'static str,
    /// Evaluation errors encountered per point (recorded, not fatal).
    pub eval_errors: Vec<String>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass) && self.eval_errors.is_empty()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Quadratic polynomial `x^T A x / 2 + b . x + c` with analytic jets;
/// quadratics suffice to expose Jacobi failures because the defect is
/// tensorial in the gradients.
#[derive(Clone, Debug)]
pub struct QuadraticPolynomial {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl QuadraticPolynomial {
    pub fn random(dim: usize, stream: &mut KeyedStream) -> Self {
        let mut a = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = stream.next_in(-1.0, 1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let b = DVector::from_iterator(dim, (0..dim).map(|_| stream.next_in(-1.0, 1.0)));
        QuadraticPolynomial {
            a,
            b,
            c: stream.next_in(-1.0, 1.0),
        }
    }

    pub fn coordinate(i: usize, dim: usize) -> Self {
        let mut b = DVector::zeros(dim);
        b[i] = 1.0;
        QuadraticPolynomial {
            a: DMatrix::zeros(dim, dim),
            b,
            c: 0.0,
        }
    }

    pub fn to_scalar_field(&self) -> ScalarField {
        let (a1, b1, c) = (self.a.clone(), self.b.clone(), self.c);
        let (a2, b2) = (self.a.clone(), self.b.clone());
        let a3 = self.a.clone();
        ScalarField::from_fn(move |x: &Point| 0.5 * (&a1 * x).dot(x) + b1.dot(x) + c)
            .with_gradient(move |x: &Point| &a2 * x + &b2)
            .with_hessian(move |_: &Point| a3.clone())
    }
}

/// Poisson bracket `{f, g} = grad f . J grad g` at `x`.
pub fn poisson_bracket(
    j: &MatrixField,
    f: &ScalarField,
    g: &ScalarField,
    x: &Point,
) -> Result<f64> {
    let jf = j.value(x)?;
    Ok(f.gradient(x)?.dot(&(jf * g.gradient(x)?)))
}

/// Gradient of the bracket `{g, h}` at `x`:
/// `Hess(g) J grad h + (d_k J contraction) + Hess(h) J^T grad g`.
fn bracket_gradient(
    j: &MatrixField,
    g: &ScalarField,
    h: &ScalarField,
    x: &Point,
) -> Result<DVector<f64>> {
    let d = x.len();
    let jm = j.value(x)?;
    let jparts = j.partials(x)?;
    let gg = g.gradient(x)?;
    let gh = h.gradient(x)?;
    let hg = g.hessian(x)?;
    let hh = h.hessian(x)?;
    let mut out = &hg * (&jm * &gh) + &hh * (jm.transpose() * &gg);
    for k in 0..d {
        out[k] += (&jparts[k] * &gh).dot(&gg);
    }
    Ok(out)
}

/// Cyclic Jacobi sum `{f,{g,h}} + {g,{h,f}} + {h,{f,g}}` at `x`.
pub fn jacobi_defect(
    j: &MatrixField,
    x: &Point,
    f: &ScalarField,
    g: &ScalarField,
    h: &ScalarField,
) -> Result<f64> {
    let jm = j.value(x)?;
    let mut total = 0.0;
    for (outer, lhs, rhs) in [(f, g, h), (g, h, f), (h, f, g)] {
        let grad_bracket = bracket_gradient(j, lhs, rhs, x)?;
        total += outer.gradient(x)?.dot(&(&jm * grad_bracket));
    }
    Ok(total)
}

/// `(|J grad S|, |K grad E|)` at `x`.
pub fn non_interaction_residual(sys: &GenericSystem, x: &Point) -> Result<(f64, f64)> {
    let j_ds = sys.j().value(x)? * sys.entropy().gradient(x)?;
    let k_de = sys.k().value(x)? * sys.energy().gradient(x)?;
    Ok((j_ds.norm(), k_de.norm()))
}

/// Columnwise `div(m J)`: component k is `sum_j d_j(m J_jk)`. By
/// antisymmetry its vanishing is equivalent to `div_nu(J(dh, .)) = 0`
/// for every h.
pub fn unimodularity_residual(sys: &GenericSystem, x: &Point) -> Result<DVector<f64>> {
    griddable_unimodularity(sys.j(), sys.nu(), x)
}

pub(crate) fn griddable_unimodularity(
    j: &MatrixField,
    nu: &VolumeDensity,
    x: &Point,
) -> Result<DVector<f64>> {
    let d = x.len();
    let jm = j.value(x)?;
    let jparts = j.partials(x)?;
    let lg = nu.log_gradient(x)?;
    let m = nu.density(x)?;
    let mut out = DVector::zeros(d);
    for k in 0..d {
        let mut v = 0.0;
        for jj in 0..d {
            // d_j(m J_jk) = m (d_j J_jk + J_jk d_j log m)
            v += jparts[jj][(jj, k)] + jm[(jj, k)] * lg[jj];
        }
        out[k] = m * v;
    }
    Ok(out)
}

/// Max over samples of `|J grad(m2/m)|`. Two unimodular volume densities
/// must differ by a Casimir multiple, so the ratio has to Poisson-commute
/// with everything.
pub fn casimir_multiple_check(
    sys: &GenericSystem,
    m2: &VolumeDensity,
    samples: &[Point],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in samples {
        let ratio = m2.density(x)? / sys.nu().density(x)?;
        if !ratio.is_finite() {
            return Err(crate::error::Error::non_finite("volume ratio", x));
        }
        let grad_ratio = (m2.log_gradient(x)? - sys.nu().log_gradient(x)?) * ratio;
        let v = (sys.j().value(x)? * grad_ratio).norm();
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Options for [`verify_system`].
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub n_points: usize,
    pub seed: u64,
    /// Overrides the path-derived default tolerance when set.
    pub tolerance: Option<f64>,
    pub triples_per_point: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            n_points: 1000,
            seed: 2023,
            tolerance: None,
            triples_per_point: 5,
        }
    }
}

struct MaxTracker {
    value: f64,
    argmax: Vec<f64>,
}

impl MaxTracker {
    fn new() -> Self {
        MaxTracker {
            value: 0.0,
            argmax: vec![],
        }
    }

    fn update(&mut self, v: f64, x: &Point) {
        if v > self.value {
            self.value = v;
            self.argmax = x.iter().copied().collect();
        }
    }

    fn merge(mut self, other: MaxTracker) -> MaxTracker {
        if other.value > self.value {
            self.value = other.value;
            self.argmax = other.argmax;
        }
        self
    }

    fn into_check(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            max_residual: self.value,
            argmax: self.argmax,
            pass: self.value <= tolerance,
            tolerance,
        }
    }
}

/// Run every axiom check at `n_points` low-discrepancy points inside the
/// patch bounds. Deterministic given the seed; evaluation errors are
/// recorded per point rather than aborting the run.
pub fn verify_system(sys: &GenericSystem, opts: &VerifyOptions) -> Result<VerificationReport> {
    let bounds = sys.patch().sampling_bounds();
    let points = low_discrepancy_points(opts.seed, opts.n_points.max(1), &bounds);
    let derivative_path = if sys.has_analytic_derivatives() {
        "analytic"
    } else {
        "finite-difference"
    };
    let tol = opts.tolerance.unwrap_or(if sys.has_analytic_derivatives() {
        TOL_ANALYTIC
    } else {
        TOL_FINITE_DIFFERENCE
    });

    // Shared quadratic triples, one batch per point index.
    let dim = sys.dim();
    let triples: Vec<[QuadraticPolynomial; 3]> = {
        let mut stream = KeyedStream::new(opts.seed, rng::stream::VERIFIER);
        (0..points.len() * opts.triples_per_point)
            .map(|_| {
                [
                    QuadraticPolynomial::random(dim, &mut stream),
                    QuadraticPolynomial::random(dim, &mut stream),
                    QuadraticPolynomial::random(dim, &mut stream),
                ]
            })
            .collect()
    };

    struct PerPoint {
        antisym: MaxTracker,
        psd: MaxTracker,
        jacobi: MaxTracker,
        nic_j: MaxTracker,
        nic_k: MaxTracker,
        unimod: MaxTracker,
        errors: Vec<String>,
    }

    impl PerPoint {
        fn new() -> Self {
            PerPoint {
                antisym: MaxTracker::new(),
                psd: MaxTracker::new(),
                jacobi: MaxTracker::new(),
                nic_j: MaxTracker::new(),
                nic_k: MaxTracker::new(),
                unimod: MaxTracker::new(),
                errors: vec![],
            }
        }

        fn merge(mut self, other: PerPoint) -> PerPoint {
            self.antisym = self.antisym.merge(other.antisym);
            self.psd = self.psd.merge(other.psd);
            self.jacobi = self.jacobi.merge(other.jacobi);
            self.nic_j = self.nic_j.merge(other.nic_j);
            self.nic_k = self.nic_k.merge(other.nic_k);
            self.unimod = self.unimod.merge(other.unimod);
            self.errors.extend(other.errors);
            self
        }
    }

    let acc = points
        .par_iter()
        .enumerate()
        .map(|(idx, x)| {
            let mut pp = PerPoint::new();
            let record = |r: std::result::Result<(), String>, pp: &mut PerPoint| {
                if let Err(e) = r {
                    pp.errors.push(e);
                }
            };

            let antisym_res = (|| -> Result<()> {
                let jm = sys.j().value(x)?;
                pp.antisym.update((&jm + jm.transpose()).norm(), x);
                Ok(())
            })();
            record(antisym_res.map_err(|e| e.to_string()), &mut pp);

            let psd_res = (|| -> Result<()> {
                let km = sys.k().value(x)?;
                let asym = (&km - km.transpose()).norm();
                let min_eig = (0.5 * (&km + km.transpose()))
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                pp.psd.update(asym.max((-min_eig).max(0.0)), x);
                Ok(())
            })();
            record(psd_res.map_err(|e| e.to_string()), &mut pp);

            let jac_res = (|| -> Result<()> {
                for t in 0..5.min(triples.len()) {
                    let batch = &triples[(idx * 5 + t) % triples.len()];
                    let f = batch[0].to_scalar_field();
                    let g = batch[1].to_scalar_field();
                    let h = batch[2].to_scalar_field();
                    let defect = jacobi_defect(sys.j(), x, &f, &g, &h)?;
                    pp.jacobi.update(defect.abs(), x);
                }
                Ok(())
            })();
            record(jac_res.map_err(|e| e.to_string()), &mut pp);

            let nic_res = (|| -> Result<()> {
                let (jn, kn) = non_interaction_residual(sys, x)?;
                pp.nic_j.update(jn, x);
                pp.nic_k.update(kn, x);
                Ok(())
            })();
            record(nic_res.map_err(|e| e.to_string()), &mut pp);

            let uni_res = (|| -> Result<()> {
                pp.unimod.update(unimodularity_residual(sys, x)?.norm(), x);
                Ok(())
            })();
            record(uni_res.map_err(|e| e.to_string()), &mut pp);

            pp
        })
        .reduce(PerPoint::new, PerPoint::merge);

    Ok(VerificationReport {
        system: sys.label().to_string(),
        checks: vec![
            acc.antisym.into_check("antisymmetry_J", tol),
            acc.psd.into_check("psd_K", tol),
            acc.jacobi.into_check("jacobi_identity", tol),
            acc.nic_j.into_check("non_interaction_J_dS", tol),
            acc.nic_k.into_check("non_interaction_K_dE", tol),
            acc.unimod.into_check("unimodularity_div_mJ", tol),
        ],
        n_points: points.len(),
        seed: opts.seed,
        bounds,
        derivative_path,
        eval_errors: acc.errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::fields::{
        CoordinatePatch, MatrixField, ScalarField, SymmetryTag, VolumeDensity,
    };
    use crate::quad::QuadratureSpec;
    use crate::system::{self, GenericSystem};
    use approx::assert_relative_eq;

    fn pt(v: &[f64]) -> Point {
        DVector::from_row_slice(v)
    }

    /// J12 = 1, J13 = -x1, J23 = 0: fails Jacobi with defect -1 for the
    /// coordinate triple (from w = (0, x1, 1) with w . curl w = 1).
    fn non_jacobi_j() -> MatrixField {
        MatrixField::from_fn(
            |x: &Point| {
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[0.0, 1.0, -x[0], -1.0, 0.0, 0.0, x[0], 0.0, 0.0],
                )
            },
            SymmetryTag::Antisymmetric,
        )
        .with_entry_partials(|_: &Point, k: usize| {
            let mut m = DMatrix::zeros(3, 3);
            if k == 0 {
                m[(0, 2)] = -1.0;
                m[(2, 0)] = 1.0;
            }
            m
        })
    }

    #[test]
    fn jacobi_defect_vanishes_for_constant_j() {
        let j = MatrixField::constant(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            SymmetryTag::Antisymmetric,
        );
        let mut stream = KeyedStream::new(4, rng::stream::AUX);
        let f = QuadraticPolynomial::random(2, &mut stream).to_scalar_field();
        let g = QuadraticPolynomial::random(2, &mut stream).to_scalar_field();
        let h = QuadraticPolynomial::random(2, &mut stream).to_scalar_field();
        let defect = jacobi_defect(&j, &pt(&[0.3, -0.8]), &f, &g, &h).unwrap();
        assert!(defect.abs() < 1e-12, "defect {defect}");
    }

    #[test]
    fn jacobi_defect_vanishes_for_rigid_body() {
        let entropy = parse_expression("-x1", 1).unwrap();
        let sys = system::make_rigid_body(0.5, &entropy).unwrap();
        let f = QuadraticPolynomial::coordinate(0, 3).to_scalar_field();
        let g = QuadraticPolynomial::coordinate(1, 3).to_scalar_field();
        let h = QuadraticPolynomial::coordinate(2, 3).to_scalar_field();
        let defect = jacobi_defect(sys.j(), &pt(&[1.0, 2.0, 3.0]), &f, &g, &h).unwrap();
        assert!(defect.abs() < 1e-12, "defect {defect}");
    }

    #[test]
    fn jacobi_defect_of_counterexample_is_minus_one() {
        let j = non_jacobi_j();
        let f = QuadraticPolynomial::coordinate(0, 3).to_scalar_field();
        let g = QuadraticPolynomial::coordinate(1, 3).to_scalar_field();
        let h = QuadraticPolynomial::coordinate(2, 3).to_scalar_field();
        for x in [pt(&[0.0, 0.0, 0.0]), pt(&[1.4, -2.0, 0.7])] {
            let defect = jacobi_defect(&j, &x, &f, &g, &h).unwrap();
            assert_relative_eq!(defect, -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobi_defect_is_cyclic() {
        let j = non_jacobi_j();
        let mut stream = KeyedStream::new(8, rng::stream::AUX);
        let f = QuadraticPolynomial::random(3, &mut stream).to_scalar_field();
        let g = QuadraticPolynomial::random(3, &mut stream).to_scalar_field();
        let h = QuadraticPolynomial::random(3, &mut stream).to_scalar_field();
        let x = pt(&[0.5, 1.0, -0.5]);
        let d1 = jacobi_defect(&j, &x, &f, &g, &h).unwrap();
        let d2 = jacobi_defect(&j, &x, &g, &h, &f).unwrap();
        let d3 = jacobi_defect(&j, &x, &h, &f, &g).unwrap();
        assert_relative_eq!(d1, d2, epsilon = 1e-12);
        assert_relative_eq!(d2, d3, epsilon = 1e-12);
    }

    #[test]
    fn non_interaction_examples() {
        let potential = parse_expression("x1^2/2", 1).unwrap();
        let entropy = parse_expression("log(x1)", 1).unwrap();
        let damped = system::make_damped_oscillator(1.0, 0.5, &potential, &entropy).unwrap();
        let (jn, kn) = non_interaction_residual(&damped, &pt(&[1.0, 2.0, 1.0])).unwrap();
        assert!(jn < 1e-13 && kn < 1e-13);

        let ou = system::make_ou_gradient(2).unwrap();
        let (jn, kn) = non_interaction_residual(&ou, &pt(&[0.7, -0.3])).unwrap();
        assert_eq!((jn, kn), (0.0, 0.0));

        // Deliberately broken: K = I with E = |x|^2/2 gives |K grad E| = |x|.
        let patch = CoordinatePatch::new(2, "broken").unwrap();
        let broken = GenericSystem::new(
            patch,
            MatrixField::zeros(2, SymmetryTag::Antisymmetric),
            MatrixField::constant(DMatrix::identity(2, 2), SymmetryTag::SymmetricPsd),
            VolumeDensity::lebesgue(2),
            ScalarField::from_fn(|x: &Point| 0.5 * x.norm_squared())
                .with_gradient(|x: &Point| x.clone()),
            ScalarField::constant(0.0),
            "broken",
        )
        .unwrap();
        let x = pt(&[3.0, 4.0]);
        let (_, kn) = non_interaction_residual(&broken, &x).unwrap();
        assert_relative_eq!(kn, 5.0, epsilon = 1e-12);
    }

    fn shear_j(density: Option<&str>) -> GenericSystem {
        // J12 = x1 in 2D; unimodular only against m = 1/x1.
        let spec = system::CustomSystemSpec {
            dim: 2,
            energy: "0".into(),
            entropy: "0".into(),
            density: density.map(|s| s.to_string()),
            j_entries: vec![(1, 2, "x1".into())],
            k_entries: vec![],
            bounds: Some(vec![(0.5, 2.0), (-1.0, 1.0)]),
            frames: None,
            label: Some("shear J".into()),
        };
        system::load_system(&system::SystemSpec::Custom(spec)).unwrap()
    }

    #[test]
    fn unimodularity_examples() {
        // Canonical constant J, m = 1: residual 0.
        let potential = parse_expression("x1^2/2", 1).unwrap();
        let sys = system::make_canonical_hamiltonian(&potential).unwrap();
        assert_eq!(
            unimodularity_residual(&sys, &pt(&[0.4, 0.7])).unwrap().norm(),
            0.0
        );

        // J12 = x1, m = 1: residual (0, 1).
        let sys = shear_j(None);
        let r = unimodularity_residual(&sys, &pt(&[1.3, 0.2])).unwrap();
        assert_relative_eq!(r[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(r[1], 1.0, epsilon = 1e-12);

        // J12 = x1, m = 1/x1 on x1 > 0: residual 0.
        let sys = shear_j(Some("1/x1"));
        let r = unimodularity_residual(&sys, &pt(&[1.3, 0.2])).unwrap();
        assert!(r.norm() < 1e-9, "residual {r:?}");
    }

    #[test]
    fn casimir_multiple_examples() {
        let entropy = parse_expression("-x1", 1).unwrap();
        let sys = system::make_rigid_body(0.5, &entropy).unwrap();
        let samples = low_discrepancy_points(3, 30, &sys.patch().sampling_bounds());

        // m2 = 2 m: constant ratio commutes with everything.
        let m2 = VolumeDensity::from_field(ScalarField::constant(2.0));
        assert!(casimir_multiple_check(&sys, &m2, &samples).unwrap() < 1e-14);

        // m2 = exp(|x|^2/2) m: ratio is a Casimir of x cross .
        let m2 = VolumeDensity::from_field(
            ScalarField::from_fn(|x: &Point| (0.5 * x.norm_squared()).exp()).with_gradient(
                |x: &Point| x * (0.5 * x.norm_squared()).exp(),
            ),
        );
        assert!(casimir_multiple_check(&sys, &m2, &samples).unwrap() < 1e-10);

        // m2 = exp(x1) m: not a Casimir, flagged.
        let m2 = VolumeDensity::from_field(
            ScalarField::from_fn(|x: &Point| x[0].exp()).with_gradient(|x: &Point| {
                let mut g = DVector::zeros(3);
                g[0] = x[0].exp();
                g
            }),
        );
        assert!(casimir_multiple_check(&sys, &m2, &samples).unwrap() > 0.1);
    }

    #[test]
    fn catalog_systems_verify_clean() {
        for spec in [
            system::SystemSpec::Catalog {
                id: system::CatalogId::RigidBody,
                params: Default::default(),
            },
            system::SystemSpec::Catalog {
                id: system::CatalogId::CircleDiffusion,
                params: Default::default(),
            },
        ] {
            let sys = system::load_system(&spec).unwrap();
            let report = verify_system(
                &sys,
                &VerifyOptions {
                    n_points: 200,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.all_pass(), "{}: {:?}", sys.label(), report.checks);
            assert_eq!(report.derivative_path, "analytic");
        }
    }

    #[test]
    fn counterexample_fails_only_jacobi() {
        let sys = system::counterexamples::non_jacobi();
        let report = verify_system(
            &sys,
            &VerifyOptions {
                n_points: 100,
                ..Default::default()
            },
        )
        .unwrap();
        // Random quadratic triples scale the defect by their coefficient
        // products; the coordinate-triple value -1 is checked separately.
        let jac = report.check("jacobi_identity").unwrap();
        assert!(!jac.pass);
        assert!(jac.max_residual > 1e-2, "residual {}", jac.max_residual);
        for name in [
            "antisymmetry_J",
            "psd_K",
            "non_interaction_J_dS",
            "non_interaction_K_dE",
            "unimodularity_div_mJ",
        ] {
            assert!(report.check(name).unwrap().pass, "{name} should pass");
        }
        // For the coordinate triple (x4, x1, x2) the defect is the
        // constant {x4, {x1, x2}} = J43 = -1.
        let f = QuadraticPolynomial::coordinate(3, 4).to_scalar_field();
        let g = QuadraticPolynomial::coordinate(0, 4).to_scalar_field();
        let h = QuadraticPolynomial::coordinate(1, 4).to_scalar_field();
        for x in low_discrepancy_points(7, 5, &sys.patch().sampling_bounds()) {
            let defect = jacobi_defect(sys.j(), &x, &f, &g, &h).unwrap();
            assert_relative_eq!(defect, -1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn verify_is_deterministic() {
        let sys = system::make_circle_diffusion().unwrap();
        let opts = VerifyOptions {
            n_points: 50,
            ..Default::default()
        };
        let a = verify_system(&sys, &opts).unwrap();
        let b = verify_system(&sys, &opts).unwrap();
        for (ca, cb) in a.checks.iter().zip(b.checks.iter()) {
            assert_eq!(ca.max_residual.to_bits(), cb.max_residual.to_bits());
        }
    }

    #[test]
    fn unimodular_j_makes_bracket_integrals_vanish() {
        // int J(df, dh) m dx = 0 for compactly supported bumps when
        // div(m J) = 0.
        use crate::generator::Bump;
        let entropy = parse_expression("-x1", 1).unwrap();
        let sys = system::make_rigid_body(0.5, &entropy).unwrap();
        let f = Bump::new(pt(&[0.3, -0.2, 0.4]), 1.0, 1.0).to_scalar_field();
        let h = Bump::new(pt(&[-0.1, 0.3, 0.0]), 1.1, 1.0).to_scalar_field();
        let quad = QuadratureSpec::midpoint(vec![(-2.0, 2.0); 3], 60);
        let integral = quad.integrate(|x| {
            let jm = sys.j().value(x).unwrap();
            let m = sys.nu().density(x).unwrap();
            f.gradient(x).unwrap().dot(&(jm * h.gradient(x).unwrap())) * m
        });
        assert!(integral.abs() < 2e-5, "integral {integral:.3e}");
    }
}
