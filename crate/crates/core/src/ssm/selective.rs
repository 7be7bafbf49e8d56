//! Selective scan: `B_t`, `C_t` and `Δ_t` are computed from the input, so
//! every step has its own discretization.
//!
//! The fused kernel here consumes already-projected `Δ`, `B` and `C` and is
//! exposed to the tape as a single op with a hand-written backward pass.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::discretize::zoh_factor_grad;
use super::{recurrence_blelloch, zoh_factor, BDiscretization, ScanBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectiveConfig {
    pub backend: ScanBackend,
    pub method: BDiscretization,
}

/// Borrowed kernel inputs; `u`, `delta` are `L×E`, `a_log` is `E×N`,
/// `b`, `c` are `L×N`, `d` is `E`.
pub(crate) struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a_log: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Per `(t, e, s)` activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ScanSaved<T> {
    pub states: Vec<T>,
    pub a_bar: Vec<T>,
    pub factor: Vec<T>,
}

pub(crate) struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a_log: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

impl<'a, T: Scalar> ScanInputs<'a, T> {
    pub fn check(&self) -> Result<()> {
        let (l, e, n) = (self.len, self.channels, self.state);
        let expect = [
            ("u", self.u.len(), l * e),
            ("delta", self.delta.len(), l * e),
            ("a_log", self.a_log.len(), e * n),
            ("B", self.b.len(), l * n),
            ("C", self.c.len(), l * n),
            ("D", self.d.len(), e),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(dim_err(format!(
                    "selective scan input {name} has {got} elements, expected {want} (L={l}, E={e}, N={n})"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn scan_forward<T: Scalar>(
    inp: &ScanInputs<'_, T>,
    cfg: SelectiveConfig,
) -> (Vec<T>, ScanSaved<T>) {
    let (l, e_dim, n) = (inp.len, inp.channels, inp.state);
    let a: Vec<T> = inp.a_log.iter().map(|&x| -x.exp()).collect();
    let total = l * e_dim * n;
    let mut a_bar = vec![T::zero(); total];
    let mut factor = vec![T::zero(); total];
    let mut states = vec![T::zero(); total];

    match cfg.backend {
        ScanBackend::Sequential => {
            let mut h = vec![T::zero(); e_dim * n];
            for t in 0..l {
                for e in 0..e_dim {
                    let dt = inp.delta[t * e_dim + e];
                    let ut = inp.u[t * e_dim + e];
                    for s in 0..n {
                        let k = (t * e_dim + e) * n + s;
                        let ai = a[e * n + s];
                        let ab = (dt * ai).exp();
                        let f = zoh_factor(dt, ai, cfg.method);
                        let hs = &mut h[e * n + s];
                        *hs = ab * *hs + f * inp.b[t * n + s] * ut;
                        a_bar[k] = ab;
                        factor[k] = f;
                        states[k] = *hs;
                    }
                }
            }
        }
        ScanBackend::Parallel => {
            let mut bx = vec![T::zero(); total];
            for t in 0..l {
                for e in 0..e_dim {
                    let dt = inp.delta[t * e_dim + e];
                    let ut = inp.u[t * e_dim + e];
                    for s in 0..n {
                        let k = (t * e_dim + e) * n + s;
                        let ai = a[e * n + s];
                        a_bar[k] = (dt * ai).exp();
                        factor[k] = zoh_factor(dt, ai, cfg.method);
                        bx[k] = factor[k] * inp.b[t * n + s] * ut;
                    }
                }
            }
            let stride = e_dim * n;
            let lanes: Vec<Vec<T>> = (0..stride)
                .into_par_iter()
                .map(|lane| {
                    let av: Vec<T> = (0..l).map(|t| a_bar[t * stride + lane]).collect();
                    let bv: Vec<T> = (0..l).map(|t| bx[t * stride + lane]).collect();
                    let mut out = vec![T::zero(); l];
                    recurrence_blelloch(&av, &bv, T::zero(), &mut out);
                    out
                })
                .collect();
            for (lane, hs) in lanes.iter().enumerate() {
                for (t, &v) in hs.iter().enumerate() {
                    states[t * stride + lane] = v;
                }
            }
        }
    }

    let mut y = vec![T::zero(); l * e_dim];
    for t in 0..l {
        let ct = &inp.c[t * n..(t + 1) * n];
        for e in 0..e_dim {
            let base = (t * e_dim + e) * n;
            let h = &states[base..base + n];
            let dot: T = ct.iter().zip(h).map(|(&c, &hv)| c * hv).sum();
            y[t * e_dim + e] = dot + inp.d[e] * inp.u[t * e_dim + e];
        }
    }
    (
        y,
        ScanSaved {
            states,
            a_bar,
            factor,
        },
    )
}

pub(crate) fn scan_backward<T: Scalar>(
    inp: &ScanInputs<'_, T>,
    saved: &ScanSaved<T>,
    gy: &[T],
    cfg: SelectiveConfig,
) -> ScanGrads<T> {
    let (l, e_dim, n) = (inp.len, inp.channels, inp.state);
    let a: Vec<T> = inp.a_log.iter().map(|&x| -x.exp()).collect();
    let mut g = ScanGrads {
        u: vec![T::zero(); l * e_dim],
        delta: vec![T::zero(); l * e_dim],
        a_log: vec![T::zero(); e_dim * n],
        b: vec![T::zero(); l * n],
        c: vec![T::zero(); l * n],
        d: vec![T::zero(); e_dim],
    };
    let mut g_a = vec![T::zero(); e_dim * n];
    // Adjoint of h_t flowing back from step t+1, already multiplied by Ā_{t+1}.
    let mut carry = vec![T::zero(); e_dim * n];

    for t in (0..l).rev() {
        for e in 0..e_dim {
            let te = t * e_dim + e;
            let gyt = gy[te];
            let ut = inp.u[te];
            let dt = inp.delta[te];
            g.d[e] = g.d[e] + gyt * ut;
            let mut gu = gyt * inp.d[e];
            let mut gdt = T::zero();
            for s in 0..n {
                let k = te * n + s;
                let es = e * n + s;
                let bts = inp.b[t * n + s];
                let h_prev = if t > 0 {
                    saved.states[k - e_dim * n]
                } else {
                    T::zero()
                };
                let gh = gyt * inp.c[t * n + s] + carry[es];
                g.c[t * n + s] = g.c[t * n + s] + gyt * saved.states[k];

                let ab = saved.a_bar[k];
                let f = saved.factor[k];
                let g_ab = gh * h_prev;
                let g_f = gh * bts * ut;
                gu = gu + gh * f * bts;
                g.b[t * n + s] = g.b[t * n + s] + gh * f * ut;

                let ai = a[es];
                let (df_dt, df_da) = zoh_factor_grad(dt, ai, ab, cfg.method);
                gdt = gdt + g_ab * ai * ab + g_f * df_dt;
                g_a[es] = g_a[es] + g_ab * dt * ab + g_f * df_da;
                carry[es] = gh * ab;
            }
            g.u[te] = gu;
            g.delta[te] = gdt;
        }
    }
    for (ga, (&gai, &ai)) in g.a_log.iter_mut().zip(g_a.iter().zip(&a)) {
        *ga = gai * ai;
    }
    g
}

/// Parameters of one selective SSM over `E` channels with state size `N`.
///
/// `b_proj`, `c_proj`: `E×N`; `dt_down`: `E×R`; `dt_up`: `R×E`;
/// `dt_bias`, `d_skip`: `E`; `a_log`: `E×N` with `A = −exp(a_log)`.
#[derive(Debug, Clone)]
pub struct SelectiveParams<T> {
    pub b_proj: Tensor<T>,
    pub c_proj: Tensor<T>,
    pub dt_down: Tensor<T>,
    pub dt_up: Tensor<T>,
    pub dt_bias: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
}

/// Graph handles for the same parameter set.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveVars {
    pub b_proj: Var,
    pub c_proj: Var,
    pub dt_down: Var,
    pub dt_up: Var,
    pub dt_bias: Var,
    pub a_log: Var,
    pub d_skip: Var,
}

impl<T: Scalar> SelectiveParams<T> {
    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn to_graph(&self, g: &mut Graph<T>, requires_grad: bool) -> SelectiveVars {
        let mut leaf = |t: &Tensor<T>| g.leaf(t.clone(), requires_grad);
        SelectiveVars {
            b_proj: leaf(&self.b_proj),
            c_proj: leaf(&self.c_proj),
            dt_down: leaf(&self.dt_down),
            dt_up: leaf(&self.dt_up),
            dt_bias: leaf(&self.dt_bias),
            a_log: leaf(&self.a_log),
            d_skip: leaf(&self.d_skip),
        }
    }
}

/// Projects `x` (`L×E`) into `B`, `C` and `Δ = softplus(x·W_down·W_up + bias)`,
/// then runs the fused scan. Returns `y` (`L×E`).
pub fn selective_ssm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &SelectiveVars,
    cfg: SelectiveConfig,
) -> Result<Var> {
    let b = g.matmul(x, p.b_proj)?;
    let c = g.matmul(x, p.c_proj)?;
    let low = g.matmul(x, p.dt_down)?;
    let pre = g.matmul(low, p.dt_up)?;
    let pre = g.add(pre, p.dt_bias)?;
    let delta = g.softplus(pre);
    g.selective_scan(x, delta, p.a_log, b, c, p.d_skip, cfg)
}

/// Forward-only selective scan of `x` (`L×E`).
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    params: &SelectiveParams<T>,
    cfg: SelectiveConfig,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let vars = params.to_graph(&mut g, false);
    let y = selective_ssm(&mut g, xv, &vars, cfg)?;
    Ok(g.value(y).clone())
}
