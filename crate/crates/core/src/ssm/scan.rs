use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

use super::Discretized;

/// Levels of the sweep with at least this many independent combines are
/// spread over the rayon pool.
const PAR_LEVEL_MIN: usize = 4096;

/// Per-step transition `Ā_t` and driven input `B̄_t·x_t`, both `steps × state_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSteps<T> {
    pub state_dim: usize,
    pub a_bar: Vec<T>,
    pub bx: Vec<T>,
}

impl<T: Scalar> DiscretizedSteps<T> {
    pub fn new(state_dim: usize, a_bar: Vec<T>, bx: Vec<T>) -> Result<Self> {
        if state_dim == 0 || a_bar.len() != bx.len() || !a_bar.len().is_multiple_of(state_dim) {
            return Err(dim_err(format!(
                "steps need matching multiples of {state_dim}, got {} and {}",
                a_bar.len(),
                bx.len()
            )));
        }
        Ok(Self {
            state_dim,
            a_bar,
            bx,
        })
    }

    pub fn len(&self) -> usize {
        self.a_bar.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.a_bar.is_empty()
    }
}

impl<T: Scalar> Discretized<T> {
    /// Multiplies `B̄_t` by the scalar input `x_t`. A single discretized step
    /// is broadcast over all of `x`.
    pub fn with_input(&self, x: &[T]) -> Result<DiscretizedSteps<T>> {
        let n = self.state_dim;
        let steps = self.steps();
        if steps != 1 && steps != x.len() {
            return Err(dim_err(format!(
                "{steps} discretized steps for input of length {}",
                x.len()
            )));
        }
        let mut a_bar = Vec::with_capacity(x.len() * n);
        let mut bx = Vec::with_capacity(x.len() * n);
        for (t, &xt) in x.iter().enumerate() {
            let row = if steps == 1 { 0 } else { t };
            a_bar.extend_from_slice(&self.a_bar[row * n..(row + 1) * n]);
            bx.extend(self.b_bar[row * n..(row + 1) * n].iter().map(|&b| b * xt));
        }
        Ok(DiscretizedSteps {
            state_dim: n,
            a_bar,
            bx,
        })
    }
}

/// `h_t = a_t·h_{t−1} + b_t`, left to right, written into `out`.
pub fn recurrence_sequential<T: Scalar>(a: &[T], b: &[T], h0: T, out: &mut [T]) {
    let mut h = h0;
    for ((&at, &bt), o) in a.iter().zip(b).zip(out.iter_mut()) {
        h = at * h + bt;
        *o = h;
    }
}

/// `(a, b) ∘ (a′, b′) = (a·a′, a′·b + b′)`, the left operand being earlier.
#[inline]
fn combine<T: Scalar>(early: (T, T), late: (T, T)) -> (T, T) {
    (early.0 * late.0, late.0 * early.1 + late.1)
}

/// Same contract as [`recurrence_sequential`], computed by a Blelloch
/// up-sweep/down-sweep over a power-of-two buffer padded with the identity `(1, 0)`.
pub fn recurrence_blelloch<T: Scalar>(a: &[T], b: &[T], h0: T, out: &mut [T]) {
    let len = a.len();
    if len == 0 {
        return;
    }
    let size = len.next_power_of_two();
    let mut buf: Vec<(T, T)> = Vec::with_capacity(size);
    buf.extend(a.iter().zip(b).map(|(&x, &y)| (x, y)));
    buf[0].1 = a[0] * h0 + b[0];
    buf.resize(size, (T::one(), T::zero()));

    let mut stride = 1;
    while stride < size {
        let width = 2 * stride;
        let up = |chunk: &mut [(T, T)]| {
            chunk[width - 1] = combine(chunk[stride - 1], chunk[width - 1]);
        };
        if size / width >= PAR_LEVEL_MIN {
            buf.par_chunks_mut(width).for_each(up);
        } else {
            buf.chunks_mut(width).for_each(up);
        }
        stride = width;
    }

    buf[size - 1] = (T::one(), T::zero());
    let mut stride = size / 2;
    while stride >= 1 {
        let width = 2 * stride;
        let down = |chunk: &mut [(T, T)]| {
            let left = chunk[stride - 1];
            let prefix = chunk[width - 1];
            chunk[stride - 1] = prefix;
            chunk[width - 1] = combine(prefix, left);
        };
        if size / width >= PAR_LEVEL_MIN {
            buf.par_chunks_mut(width).for_each(down);
        } else {
            buf.chunks_mut(width).for_each(down);
        }
        stride /= 2;
    }

    // buf now holds exclusive prefixes; apply each element once more.
    out[0] = buf[0].1 * a[0] + (a[0] * h0 + b[0]);
    for t in 1..len {
        out[t] = a[t] * buf[t].1 + b[t];
    }
}

fn check_scan_inputs<T: Scalar>(
    steps: &DiscretizedSteps<T>,
    c: &[T],
    x: &[T],
    h0: &[T],
) -> Result<()> {
    let (len, n) = (steps.len(), steps.state_dim);
    if x.len() != len {
        return Err(dim_err(format!("{len} steps but input length {}", x.len())));
    }
    if c.len() != n && c.len() != len * n {
        return Err(dim_err(format!(
            "C has {} entries, expected {n} or {}",
            c.len(),
            len * n
        )));
    }
    if h0.len() != n {
        return Err(dim_err(format!(
            "initial state has {} entries, expected {n}",
            h0.len()
        )));
    }
    Ok(())
}

fn readout<T: Scalar>(states: &[T], n: usize, c: &[T], d: T, x: &[T]) -> Vec<T> {
    let shared_c = c.len() == n;
    x.iter()
        .enumerate()
        .map(|(t, &xt)| {
            let ct = if shared_c { c } else { &c[t * n..(t + 1) * n] };
            let h = &states[t * n..(t + 1) * n];
            ct.iter().zip(h).map(|(&ci, &hi)| ci * hi).sum::<T>() + d * xt
        })
        .collect()
}

/// Exact left-to-right recurrence `h_t = Ā_t⊙h_{t−1} + B̄x_t`,
/// `y_t = ⟨C_t, h_t⟩ + D·x_t`. `c` is one shared row or one row per step.
pub fn scan_sequential<T: Scalar>(
    steps: &DiscretizedSteps<T>,
    c: &[T],
    d: T,
    x: &[T],
    h0: &[T],
) -> Result<Vec<T>> {
    check_scan_inputs(steps, c, x, h0)?;
    let n = steps.state_dim;
    let mut states = vec![T::zero(); steps.a_bar.len()];
    let mut h = h0.to_vec();
    for t in 0..steps.len() {
        for i in 0..n {
            let k = t * n + i;
            h[i] = steps.a_bar[k] * h[i] + steps.bx[k];
            states[k] = h[i];
        }
    }
    Ok(readout(&states, n, c, d, x))
}

/// Same contract as [`scan_sequential`], each state channel computed with
/// the associative scan.
pub fn scan_parallel<T: Scalar>(
    steps: &DiscretizedSteps<T>,
    c: &[T],
    d: T,
    x: &[T],
    h0: &[T],
) -> Result<Vec<T>> {
    check_scan_inputs(steps, c, x, h0)?;
    let (len, n) = (steps.len(), steps.state_dim);
    let channels: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a: Vec<T> = (0..len).map(|t| steps.a_bar[t * n + i]).collect();
            let b: Vec<T> = (0..len).map(|t| steps.bx[t * n + i]).collect();
            let mut out = vec![T::zero(); len];
            recurrence_blelloch(&a, &b, h0[i], &mut out);
            out
        })
        .collect();
    let mut states = vec![T::zero(); len * n];
    for (i, ch) in channels.iter().enumerate() {
        for (t, &v) in ch.iter().enumerate() {
            states[t * n + i] = v;
        }
    }
    Ok(readout(&states, n, c, d, x))
}

/// `max_i |got_i − want_i| / max_j |want_j|`, the error relative to the
/// reference's largest magnitude.
pub fn max_relative_error<T: Scalar>(got: &[T], want: &[T]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want
        .iter()
        .map(|w| w.as_f64().abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    got.iter()
        .zip(want)
        .map(|(g, w)| (g.as_f64() - w.as_f64()).abs())
        .fold(0.0f64, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_steps(len: usize, n: usize, seed: u64) -> (DiscretizedSteps<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..len * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let bx = (0..len * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = (0..len * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (DiscretizedSteps::new(n, a, bx).unwrap(), c, x)
    }

    #[test]
    fn memoryless_transition_reads_current_input_only() {
        let steps = DiscretizedSteps::new(1, vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = scan_sequential(&steps, &[2.0], 0.0, &[0.0; 4], &[5.0]).unwrap();
        assert_eq!(y, vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn unit_transition_gives_prefix_sums() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let steps = DiscretizedSteps::new(1, vec![1.0; 5], x.to_vec()).unwrap();
        let y = scan_sequential(&steps, &[1.0], 0.0, &x, &[0.0]).unwrap();
        assert_eq!(y, vec![1.0, 3.0, 6.0, 10.0, 15.0]);
        let yp = scan_parallel(&steps, &[1.0], 0.0, &x, &[0.0]).unwrap();
        assert_eq!(yp, y);
    }

    #[test]
    fn single_step_parallel_equals_sequential() {
        let (steps, c, x) = random_steps(1, 3, 1);
        let h0 = [0.3, -0.2, 0.9];
        assert_eq!(
            scan_parallel(&steps, &c, 0.5, &x, &h0).unwrap(),
            scan_sequential(&steps, &c, 0.5, &x, &h0).unwrap()
        );
    }

    #[test]
    fn two_step_combine_unrolls_operator() {
        let (a1, b1, a2, b2) = (0.5f64, 2.0, 0.25, -1.0);
        let (ac, bc) = combine((a1, b1), (a2, b2));
        assert_eq!((ac, bc), (a1 * a2, a2 * b1 + b2));
        let mut out = [0.0; 2];
        recurrence_blelloch(&[a1, a2], &[b1, b2], 0.0, &mut out);
        assert_eq!(out[1], bc);
    }

    #[test]
    fn blelloch_handles_non_power_of_two_lengths() {
        for &len in &[1usize, 2, 3, 5, 17, 257, 1000] {
            let (steps, c, x) = random_steps(len, 2, len as u64);
            let h0 = [0.1, -0.4];
            let s = scan_sequential(&steps, &c, -0.3, &x, &h0).unwrap();
            let p = scan_parallel(&steps, &c, -0.3, &x, &h0).unwrap();
            assert!(max_relative_error(&p, &s) <= 1e-12, "len {len}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (steps, c, _) = random_steps(4, 2, 9);
        assert!(scan_sequential(&steps, &c, 0.0, &[0.0; 3], &[0.0; 2]).is_err());
        assert!(scan_parallel(&steps, &c[..3], 0.0, &[0.0; 4], &[0.0; 2]).is_err());
        assert!(scan_parallel(&steps, &c, 0.0, &[0.0; 4], &[0.0; 3]).is_err());
    }
}
