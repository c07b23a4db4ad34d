//! Forward-mode dual numbers carrying value, gradient, and optionally the
//! full Hessian. Used to differentiate parsed expressions exactly.

use nalgebra::{DMatrix, DVector};

/// Domain failures during dual arithmetic; the expression evaluator
/// attaches source offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DualDomainError {
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    FractionalPowerOfNonPositive,
}

impl std::fmt::Display for DualDomainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DualDomainError::DivisionByZero => write!(f, "division by zero"),
            DualDomainError::LogNonPositive => write!(f, "log of non-positive value"),
            DualDomainError::SqrtNegative => write!(f, "sqrt of negative value"),
            DualDomainError::FractionalPowerOfNonPositive => {
                write!(f, "fractional power requires a positive base")
            }
        }
    }
}

/// Truncated Taylor jet at a point: value, first derivatives, and, when
/// `hess` is present, second derivatives.
#[derive(Clone, Debug)]
pub struct Dual {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: Option<DMatrix<f64>>,
}

impl Dual {
    pub fn constant(value: f64, dim: usize, second_order: bool) -> Self {
        Dual {
            value,
            grad: DVector::zeros(dim),
            hess: second_order.then(|| DMatrix::zeros(dim, dim)),
        }
    }

    pub fn variable(value: f64, index: usize, dim: usize, second_order: bool) -> Self {
        let mut grad = DVector::zeros(dim);
        grad[index] = 1.0;
        Dual {
            value,
            grad,
            hess: second_order.then(|| DMatrix::zeros(dim, dim)),
        }
    }

    fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn add(&self, rhs: &Dual) -> Dual {
        Dual {
            value: self.value + rhs.value,
            grad: &self.grad + &rhs.grad,
            hess: match (&self.hess, &rhs.hess) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            },
        }
    }

    pub fn sub(&self, rhs: &Dual) -> Dual {
        Dual {
            value: self.value - rhs.value,
            grad: &self.grad - &rhs.grad,
            hess: match (&self.hess, &rhs.hess) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            },
        }
    }

    pub fn neg(&self) -> Dual {
        Dual {
            value: -self.value,
            grad: -&self.grad,
            hess: self.hess.as_ref().map(|h| -h),
        }
    }

    pub fn mul(&self, rhs: &Dual) -> Dual {
        let hess = match (&self.hess, &rhs.hess) {
            (Some(ha), Some(hb)) => Some(
                ha * rhs.value
                    + hb * self.value
                    + &self.grad * rhs.grad.transpose()
                    + &rhs.grad * self.grad.transpose(),
            ),
            _ => None,
        };
        Dual {
            value: self.value * rhs.value,
            grad: &self.grad * rhs.value + &rhs.grad * self.value,
            hess,
        }
    }

    pub fn div(&self, rhs: &Dual) -> Result<Dual, DualDomainError> {
        if rhs.value == 0.0 {
            return Err(DualDomainError::DivisionByZero);
        }
        // a / b = a * b^-1 via the reciprocal chain rule.
        let inv = rhs.apply_unary(
            1.0 / rhs.value,
            -1.0 / (rhs.value * rhs.value),
            2.0 / (rhs.value * rhs.value * rhs.value),
        );
        Ok(self.mul(&inv))
    }

    /// Chain rule for `f(self)` given `f`, `f'`, `f''` at `self.value`.
    pub fn apply_unary(&self, f: f64, fp: f64, fpp: f64) -> Dual {
        Dual {
            value: f,
            grad: &self.grad * fp,
            hess: self
                .hess
                .as_ref()
                .map(|h| h * fp + &self.grad * self.grad.transpose() * fpp),
        }
    }

    pub fn sin(&self) -> Dual {
        let (s, c) = self.value.sin_cos();
        self.apply_unary(s, c, -s)
    }

    pub fn cos(&self) -> Dual {
        let (s, c) = self.value.sin_cos();
        self.apply_unary(c, -s, -c)
    }

    pub fn exp(&self) -> Dual {
        let e = self.value.exp();
        self.apply_unary(e, e, e)
    }

    pub fn ln(&self) -> Result<Dual, DualDomainError> {
        if self.value <= 0.0 {
            return Err(DualDomainError::LogNonPositive);
        }
        Ok(self.apply_unary(
            self.value.ln(),
            1.0 / self.value,
            -1.0 / (self.value * self.value),
        ))
    }

    pub fn sqrt(&self) -> Result<Dual, DualDomainError> {
        if self.value < 0.0 {
            return Err(DualDomainError::SqrtNegative);
        }
        if self.value == 0.0 && self.grad.norm() > 0.0 {
            // Derivative blows up; surface it as a domain error rather
            // than returning infinities.
            return Err(DualDomainError::SqrtNegative);
        }
        let r = self.value.sqrt();
        Ok(self.apply_unary(r, 0.5 / r.max(f64::MIN_POSITIVE), -0.25 / r.max(f64::MIN_POSITIVE).powi(3)))
    }

    pub fn tanh(&self) -> Dual {
        let t = self.value.tanh();
        let sech2 = 1.0 - t * t;
        self.apply_unary(t, sech2, -2.0 * t * sech2)
    }

    pub fn abs(&self) -> Dual {
        // |x| with the subgradient convention sign(0) = 0; the second
        // derivative is zero away from the kink.
        let s = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.apply_unary(self.value.abs(), s, 0.0)
    }

    pub fn powi(&self, n: i32) -> Result<Dual, DualDomainError> {
        if n < 0 && self.value == 0.0 {
            return Err(DualDomainError::DivisionByZero);
        }
        let f = self.value.powi(n);
        let fp = n as f64 * self.value.powi(n - 1);
        let fpp = (n as f64) * (n as f64 - 1.0) * self.value.powi(n - 2);
        Ok(self.apply_unary(f, fp, fpp))
    }

    /// General power. An exponent that is an exact integer constant
    /// (zero derivatives) uses the integer rule; anything else requires a
    /// strictly positive base.
    pub fn pow(&self, exponent: &Dual) -> Result<Dual, DualDomainError> {
        let exp_is_const = exponent.grad.iter().all(|&g| g == 0.0)
            && exponent
                .hess
                .as_ref()
                .map(|h| h.iter().all(|&v| v == 0.0))
                .unwrap_or(true);
        if exp_is_const && exponent.value.fract() == 0.0 && exponent.value.abs() <= i32::MAX as f64
        {
            return self.powi(exponent.value as i32);
        }
        if self.value <= 0.0 {
            return Err(DualDomainError::FractionalPowerOfNonPositive);
        }
        // a^b = exp(b ln a)
        let ln_a = self.ln()?;
        Ok(exponent.mul(&ln_a).exp())
    }

    /// Assert the jet is finite; used after full-expression evaluation.
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|v| v.is_finite())
            && self
                .hess
                .as_ref()
                .map(|h| h.iter().all(|v| v.is_finite()))
                .unwrap_or(true)
    }

    /// Zero-dimensional constant convenience for tests.
    #[cfg(test)]
    pub fn scalar(value: f64) -> Self {
        Dual::constant(value, 0, false)
    }

    #[allow(dead_code)]
    fn debug_dims_agree(&self, other: &Dual) -> bool {
        self.dim() == other.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn product_rule_with_hessian() {
        // f = x1 * x2 at (3, 5): grad (5, 3), hess off-diagonal 1.
        let x1 = Dual::variable(3.0, 0, 2, true);
        let x2 = Dual::variable(5.0, 1, 2, true);
        let f = x1.mul(&x2);
        assert_eq!(f.value, 15.0);
        assert_eq!(f.grad.as_slice(), &[5.0, 3.0]);
        let h = f.hess.unwrap();
        assert_eq!(h[(0, 1)], 1.0);
        assert_eq!(h[(1, 0)], 1.0);
        assert_eq!(h[(0, 0)], 0.0);
    }

    #[test]
    fn exp_jet() {
        let x = Dual::variable(0.0, 0, 1, true);
        let f = x.exp();
        assert_eq!(f.value, 1.0);
        assert_eq!(f.grad[0], 1.0);
        assert_eq!(f.hess.unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn quotient_and_chain() {
        // f = sin(x)/x at x = 1.2 against hand derivative.
        let x = Dual::variable(1.2, 0, 1, false);
        let f = x.sin().div(&x).unwrap();
        let v = 1.2f64;
        assert_relative_eq!(f.value, v.sin() / v, epsilon = 1e-14);
        assert_relative_eq!(
            f.grad[0],
            (v * v.cos() - v.sin()) / (v * v),
            epsilon = 1e-13
        );
    }

    #[test]
    fn pow_integer_handles_negative_base() {
        let x = Dual::variable(-2.0, 0, 1, true);
        let three = Dual::constant(3.0, 1, true);
        let f = x.pow(&three).unwrap();
        assert_eq!(f.value, -8.0);
        assert_eq!(f.grad[0], 12.0);
        assert_eq!(f.hess.unwrap()[(0, 0)], -12.0);
    }

    #[test]
    fn pow_fractional_requires_positive_base() {
        let x = Dual::variable(-2.0, 0, 1, false);
        let half = Dual::constant(0.5, 1, false);
        assert!(matches!(
            x.pow(&half),
            Err(DualDomainError::FractionalPowerOfNonPositive)
        ));
    }
}
