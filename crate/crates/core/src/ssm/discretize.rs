use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

use super::BDiscretization;

/// Below this `|Δ·a|` the ZOH factor switches to its Taylor expansion.
const ZOH_LIMIT: f64 = 1e-8;

/// Discretized transition and input coefficients, `steps × state_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized<T> {
    pub state_dim: usize,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

impl<T: Scalar> Discretized<T> {
    pub fn steps(&self) -> usize {
        self.a_bar.len() / self.state_dim
    }
}

/// The factor `f` with `B̄ = f·B` for one diagonal entry.
#[inline]
pub fn zoh_factor<T: Scalar>(delta: T, a: T, method: BDiscretization) -> T {
    match method {
        BDiscretization::Euler => delta,
        BDiscretization::Zoh => {
            let x = delta * a;
            if x.abs() < T::lit(ZOH_LIMIT) {
                delta * (T::one() + x * T::lit(0.5))
            } else {
                x.exp_m1() / a
            }
        }
    }
}

/// Derivatives of [`zoh_factor`] with respect to `Δ` and `a`, given `ā = exp(Δa)`.
#[inline]
pub(crate) fn zoh_factor_grad<T: Scalar>(
    delta: T,
    a: T,
    a_bar: T,
    method: BDiscretization,
) -> (T, T) {
    match method {
        BDiscretization::Euler => (T::one(), T::zero()),
        BDiscretization::Zoh => {
            let x = delta * a;
            let d_delta = a_bar;
            let d_a = if x.abs() < T::lit(1e-4) {
                delta * delta * (T::lit(0.5) + x / T::lit(3.0) + x * x / T::lit(8.0))
            } else {
                (x * a_bar - x.exp_m1()) / (a * a)
            };
            (d_delta, d_a)
        }
    }
}

/// ZOH discretization of a diagonal system.
///
/// `a` holds the `N` diagonal entries. `b` is either one row of length `N`
/// shared by every step or `L` rows; `delta` is either one step size or `L`.
pub fn discretize_zoh<T: Scalar>(a: &[T], b: &[T], delta: &[T]) -> Result<Discretized<T>> {
    discretize(a, b, delta, BDiscretization::Zoh)
}

pub fn discretize<T: Scalar>(
    a: &[T],
    b: &[T],
    delta: &[T],
    method: BDiscretization,
) -> Result<Discretized<T>> {
    let n = a.len();
    if n == 0 {
        return Err(dim_err("empty state dimension"));
    }
    if !b.len().is_multiple_of(n) || b.is_empty() {
        return Err(dim_err(format!(
            "B has {} entries, not a multiple of state dim {n}",
            b.len()
        )));
    }
    if delta.is_empty() {
        return Err(dim_err("empty step size"));
    }
    if let Some(bad) = delta.iter().find(|d| !(**d > T::zero())) {
        return Err(Error::Domain(format!("step size must be positive, got {bad}")));
    }
    let b_rows = b.len() / n;
    let steps = b_rows.max(delta.len());
    if (b_rows != 1 && b_rows != steps) || (delta.len() != 1 && delta.len() != steps) {
        return Err(dim_err(format!(
            "B rows {b_rows} and step sizes {} do not broadcast",
            delta.len()
        )));
    }
    let mut a_bar = Vec::with_capacity(steps * n);
    let mut b_bar = Vec::with_capacity(steps * n);
    for t in 0..steps {
        let dt = delta[if delta.len() == 1 { 0 } else { t }];
        let row = if b_rows == 1 { 0 } else { t };
        for i in 0..n {
            a_bar.push((dt * a[i]).exp());
            b_bar.push(zoh_factor(dt, a[i], method) * b[row * n + i]);
        }
    }
    Ok(Discretized {
        state_dim: n,
        a_bar,
        b_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_decay_matches_closed_form() {
        let d = discretize_zoh(&[-1.0f64], &[1.0], &[1.0]).unwrap();
        let e_inv = (-1.0f64).exp();
        assert!((d.a_bar[0] - e_inv).abs() <= 1e-12);
        assert!((d.b_bar[0] - (1.0 - e_inv)).abs() <= 1e-12);
        assert!((d.a_bar[0] - 0.367879441171442).abs() < 1e-12);
        assert!((d.b_bar[0] - 0.632120558828558).abs() < 1e-12);
    }

    #[test]
    fn zero_pole_limit_is_euler() {
        let d = discretize_zoh(&[0.0f64, 0.0], &[2.0, -3.0], &[0.25]).unwrap();
        assert_eq!(d.b_bar, vec![0.5, -0.75]);
        assert_eq!(d.a_bar, vec![1.0, 1.0]);
    }

    #[test]
    fn tiny_step_tends_to_identity() {
        let d = discretize_zoh(&[-2.0f64], &[1.0], &[1e-300]).unwrap();
        assert_eq!(d.a_bar[0], 1.0);
        assert!(d.b_bar[0] > 0.0 && d.b_bar[0] < 1e-299);
    }

    #[test]
    fn nonpositive_step_is_domain_error() {
        assert!(matches!(
            discretize_zoh(&[-1.0f64], &[1.0], &[0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            discretize_zoh(&[-1.0f64], &[1.0], &[0.1, -0.1]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn per_step_rows_broadcast_against_scalar_delta() {
        let d = discretize_zoh(&[-1.0f64, -2.0], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0], &[0.5]).unwrap();
        assert_eq!(d.steps(), 3);
        assert!(discretize_zoh(&[-1.0f64], &[1.0, 2.0], &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn euler_flag_uses_step_times_b() {
        let d = discretize(&[-1.0f64], &[2.0], &[0.1], BDiscretization::Euler).unwrap();
        assert!((d.b_bar[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn factor_gradient_matches_finite_differences() {
        let h = 1e-4;
        for &(dt, a) in &[(0.3f64, -1.5f64), (1e-3, -0.01), (2.0, -4.0), (0.05, -0.5)] {
            let a_bar = (dt * a).exp();
            let (gd, ga) = zoh_factor_grad(dt, a, a_bar, BDiscretization::Zoh);
            let fd_d = (zoh_factor(dt + h * dt, a, BDiscretization::Zoh)
                - zoh_factor(dt - h * dt, a, BDiscretization::Zoh))
                / (2.0 * h * dt);
            let fd_a = (zoh_factor(dt, a + h * a.abs(), BDiscretization::Zoh)
                - zoh_factor(dt, a - h * a.abs(), BDiscretization::Zoh))
                / (2.0 * h * a.abs());
            assert!((gd - fd_d).abs() <= 1e-6 * fd_d.abs().max(1e-12), "{gd} {fd_d}");
            assert!((ga - fd_a).abs() <= 1e-5 * fd_a.abs().max(1e-12), "{ga} {fd_a}");
        }
    }
}
