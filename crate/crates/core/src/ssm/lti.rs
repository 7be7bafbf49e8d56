use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

use super::{discretize, BDiscretization};

/// Step size of a diagonal SSM; only `Constant` describes a time-invariant system.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSize<T> {
    Constant(T),
    PerStep(Vec<T>),
}

/// Time-invariant diagonal SSM, `A = diag(a)` with every `a_i < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiParams<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: T,
    pub delta: StepSize<T>,
    pub method: BDiscretization,
}

impl<T: Scalar> LtiParams<T> {
    /// `a_i = −exp(a_log_i)`.
    pub fn from_log(
        a_log: &[T],
        b: Vec<T>,
        c: Vec<T>,
        d: T,
        delta: T,
    ) -> Self {
        Self {
            a: a_log.iter().map(|&x| -x.exp()).collect(),
            b,
            c,
            d,
            delta: StepSize::Constant(delta),
            method: BDiscretization::Zoh,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    fn validate(&self) -> Result<T> {
        let n = self.a.len();
        if self.b.len() != n || self.c.len() != n {
            return Err(dim_err(format!(
                "A has {n} entries but B has {} and C has {}",
                self.b.len(),
                self.c.len()
            )));
        }
        if let Some(bad) = self.a.iter().find(|a| !(**a < T::zero())) {
            return Err(Error::Domain(format!(
                "state matrix entries must be negative, got {bad}"
            )));
        }
        match &self.delta {
            StepSize::Constant(dt) => Ok(*dt),
            StepSize::PerStep(_) => Err(Error::Contract(
                "convolution kernel requires a time-invariant step size".into(),
            )),
        }
    }
}

/// Taps `K̄_j = Σ_i C_i·Ā_i^j·B̄_i`, `j = 0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub taps: Vec<T>,
}

impl<T> ConvKernel<T> {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

pub fn lti_conv_kernel<T: Scalar>(params: &LtiParams<T>, length: usize) -> Result<ConvKernel<T>> {
    let dt = params.validate()?;
    let disc = discretize(&params.a, &params.b, &[dt], params.method)?;
    // Running powers: tap j uses Ā^j, built by repeated multiplication.
    let mut power: Vec<T> = params.c.iter().zip(&disc.b_bar).map(|(&c, &b)| c * b).collect();
    let mut taps = Vec::with_capacity(length);
    for _ in 0..length {
        taps.push(power.iter().copied().sum());
        for (p, &a) in power.iter_mut().zip(&disc.a_bar) {
            *p = *p * a;
        }
    }
    Ok(ConvKernel { taps })
}

/// Causal convolution `y_t = Σ_{j≤t} K̄_j·x_{t−j} + D·x_t` from a zero state.
///
/// Inputs longer than the kernel see it truncated to its stored taps.
pub fn lti_forward_conv<T: Scalar>(x: &[T], kernel: &ConvKernel<T>, d: T) -> Vec<T> {
    (0..x.len())
        .map(|t| {
            let reach = t.min(kernel.taps.len().saturating_sub(1));
            let conv: T = if kernel.taps.is_empty() {
                T::zero()
            } else {
                (0..=reach).map(|j| kernel.taps[j] * x[t - j]).sum()
            };
            conv + d * x[t]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(a: f64, dt: f64) -> LtiParams<f64> {
        LtiParams {
            a: vec![a],
            b: vec![1.0],
            c: vec![1.0],
            d: 0.0,
            delta: StepSize::Constant(dt),
            method: BDiscretization::Zoh,
        }
    }

    #[test]
    fn geometric_kernel() {
        // Choose Δ so that Ā = 0.5, then rescale C so C·B̄ = 1.
        let a = -1.0f64;
        let dt = 2.0f64.ln();
        let mut p = params(a, dt);
        let b_bar = (-dt).exp_m1() / a;
        p.c = vec![1.0 / b_bar];
        let k = lti_conv_kernel(&p, 3).unwrap();
        for (got, want) in k.taps.iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn fast_decay_gives_memoryless_kernel() {
        let p = params(-1.0, 800.0);
        let k = lti_conv_kernel(&p, 4).unwrap();
        assert!((k.taps[0] - 1.0).abs() < 1e-15);
        assert_eq!(&k.taps[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn impulse_response_is_kernel_plus_skip() {
        let mut p = params(-0.7, 0.3);
        p.d = 0.25;
        let k = lti_conv_kernel(&p, 5).unwrap();
        let mut x = vec![0.0; 5];
        x[0] = 1.0;
        let y = lti_forward_conv(&x, &k, p.d);
        assert_eq!(y[0], k.taps[0] + 0.25);
        assert_eq!(&y[1..], &k.taps[1..]);
        assert_eq!(lti_forward_conv(&[0.0; 5], &k, p.d), vec![0.0; 5]);
    }

    #[test]
    fn time_varying_request_is_contract_error() {
        let mut p = params(-1.0, 0.1);
        p.delta = StepSize::PerStep(vec![0.1, 0.2]);
        assert!(matches!(lti_conv_kernel(&p, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn unstable_pole_is_rejected() {
        assert!(matches!(
            lti_conv_kernel(&params(0.5, 0.1), 4),
            Err(Error::Domain(_))
        ));
    }
}
