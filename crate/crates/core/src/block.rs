//! Bidirectional Mamba block.
//!
//! ```text
//! x ─ rms_norm ─ in_proj ─┬─ main ─ [reverse] ─ conv ─ silu ─ ssm ─┐
//!                         └─ gate ─ [reverse] ─────────── silu ─── ⊙ ─ out_proj ─ [reverse]
//! y = x + (fwd + bwd) / 2
//! ```
//!
//! `norm`, `in_proj` and `out_proj` are shared by both directions; each
//! direction owns its convolution and selective SSM parameters unless
//! `tie_directions` is set.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::selective::{selective_ssm, SelectiveVars};
use crate::ssm::{BDiscretization, ScanBackend, SelectiveConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub d: usize,
    pub expand: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
    pub method: BDiscretization,
    pub backend: ScanBackend,
    pub tie_directions: bool,
}

impl BlockConfig {
    /// Expand factor 2, conv width 4, `dt_rank = ⌈E/16⌉`.
    pub fn new(d: usize, state_dim: usize) -> Self {
        let inner = 2 * d;
        Self {
            d,
            expand: 2,
            state_dim,
            conv_width: 4,
            dt_rank: inner.div_ceil(16),
            method: BDiscretization::Zoh,
            backend: ScanBackend::Sequential,
            tie_directions: false,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d
    }

    pub fn scan_config(&self) -> SelectiveConfig {
        SelectiveConfig {
            backend: self.backend,
            method: self.method,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.expand == 0
            || self.state_dim == 0
            || self.conv_width == 0
            || self.dt_rank == 0
        {
            return Err(Error::Config(format!("block dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Parameters of one block, shared projections plus one or two directions.
    pub fn param_count(&self) -> usize {
        let (d, e, n, k, r) = (
            self.d,
            self.inner(),
            self.state_dim,
            self.conv_width,
            self.dt_rank,
        );
        let shared = d + d * 2 * e + e * d;
        let direction = e * k + e + 2 * e * n + e * r + r * e + e + e * n + e;
        shared + direction * if self.tie_directions { 1 } else { 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Per-direction parameter handles.
#[derive(Debug, Clone, Copy)]
pub struct DirectionParams {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl DirectionParams {
    fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Self {
        let (e, n, k, r) = (cfg.inner(), cfg.state_dim, cfg.conv_width, cfg.dt_rank);
        let conv_bound = 1.0 / (k as f64).sqrt();
        let proj_bound = 1.0 / (e as f64).sqrt();
        let dt_bound = 1.0 / (r as f64).sqrt();
        let mut reg = |name: &str, t: Tensor<T>| store.register(format!("{prefix}.{name}"), t);

        let conv_weight = reg("conv.weight", uniform(rng, &[e, k], conv_bound));
        let conv_bias = reg("conv.bias", uniform(rng, &[e], conv_bound));
        let b_proj = reg("b_proj", uniform(rng, &[e, n], proj_bound));
        let c_proj = reg("c_proj", uniform(rng, &[e, n], proj_bound));
        let dt_down = reg("dt_down", uniform(rng, &[e, r], proj_bound));
        let dt_up = reg("dt_up", uniform(rng, &[r, e], dt_bound));

        // Softplus inverse of a log-uniform step in [1e-3, 1e-1].
        let log_dt = Uniform::new_inclusive(1e-3f64.ln(), 1e-1f64.ln());
        let bias = (0..e)
            .map(|_| {
                let dt = log_dt.sample(rng).exp();
                T::lit(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_bias = reg("dt_bias", Tensor::from_parts(vec![e], bias));

        let a = (0..e * n).map(|i| T::lit(((i % n) as f64 + 1.0).ln())).collect();
        let a_log = reg("a_log", Tensor::from_parts(vec![e, n], a));
        let d_skip = reg("d", Tensor::ones(&[e]));
        Self {
            conv_weight,
            conv_bias,
            b_proj,
            c_proj,
            dt_down,
            dt_up,
            dt_bias,
            a_log,
            d_skip,
        }
    }

    fn selective_vars(&self, vars: &[Var]) -> SelectiveVars {
        SelectiveVars {
            b_proj: vars[self.b_proj.index()],
            c_proj: vars[self.c_proj.index()],
            dt_down: vars[self.dt_down.index()],
            dt_up: vars[self.dt_up.index()],
            dt_bias: vars[self.dt_bias.index()],
            a_log: vars[self.a_log.index()],
            d_skip: vars[self.d_skip.index()],
        }
    }
}

/// One bidirectional block; parameters live in a [`ParamStore`] and are
/// referenced by id.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub cfg: BlockConfig,
    pub norm: ParamId,
    pub in_proj: ParamId,
    pub out_proj: ParamId,
    pub fwd: DirectionParams,
    pub bwd: DirectionParams,
}

const NORM_EPS: f64 = 1e-5;

impl MambaBlock {
    /// Registers `{prefix}.norm.weight`, `{prefix}.in_proj.weight`,
    /// `{prefix}.out_proj.weight` and `{prefix}.{fwd|bwd}.*`. With tied
    /// directions only `fwd` parameters exist.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, e) = (cfg.d, cfg.inner());
        let norm = store.register(format!("{prefix}.norm.weight"), Tensor::ones(&[d]));
        let in_proj = store.register(
            format!("{prefix}.in_proj.weight"),
            uniform(rng, &[d, 2 * e], 1.0 / (d as f64).sqrt()),
        );
        let out_proj = store.register(
            format!("{prefix}.out_proj.weight"),
            uniform(rng, &[e, d], 1.0 / (e as f64).sqrt()),
        );
        let fwd = DirectionParams::register(store, &format!("{prefix}.fwd"), &cfg, rng);
        let bwd = if cfg.tie_directions {
            fwd
        } else {
            DirectionParams::register(store, &format!("{prefix}.bwd"), &cfg, rng)
        };
        Ok(Self {
            cfg,
            norm,
            in_proj,
            out_proj,
            fwd,
            bwd,
        })
    }

    fn split<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let e = self.cfg.inner();
        let h = g.rms_norm(x, vars[self.norm.index()], T::lit(NORM_EPS))?;
        let h = g.matmul(h, vars[self.in_proj.index()])?;
        Ok((g.slice_cols(h, 0, e)?, g.slice_cols(h, e, e)?))
    }

    fn direction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        main: Var,
        gate: Var,
        dir: Direction,
    ) -> Result<Var> {
        let p = match dir {
            Direction::Forward => &self.fwd,
            Direction::Backward => &self.bwd,
        };
        let (main, gate) = match dir {
            Direction::Forward => (main, gate),
            Direction::Backward => (g.reverse_rows(main)?, g.reverse_rows(gate)?),
        };
        let u = g.causal_conv(
            main,
            vars[p.conv_weight.index()],
            vars[p.conv_bias.index()],
        )?;
        let u = g.silu(u);
        let y = selective_ssm(g, u, &p.selective_vars(vars), self.cfg.scan_config())?;
        let gate = g.silu(gate);
        let y = g.mul(y, gate)?;
        let y = g.matmul(y, vars[self.out_proj.index()])?;
        match dir {
            Direction::Forward => Ok(y),
            Direction::Backward => g.reverse_rows(y),
        }
    }

    /// One direction's contribution for `x` (`L×d`), without the residual.
    pub fn forward_direction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        dir: Direction,
    ) -> Result<Var> {
        let (main, gate) = self.split(g, vars, x)?;
        self.direction(g, vars, main, gate, dir)
    }

    /// `x + (fwd(x) + bwd(x)) / 2`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let (main, gate) = self.split(g, vars, x)?;
        let f = self.direction(g, vars, main, gate, Direction::Forward)?;
        let b = self.direction(g, vars, main, gate, Direction::Backward)?;
        let sum = g.add(f, b)?;
        let avg = g.scale(sum, T::lit(0.5));
        g.add(x, avg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_registered_tensors() {
        for tie in [false, true] {
            let mut cfg = BlockConfig::new(8, 4);
            cfg.tie_directions = tie;
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            MambaBlock::new(&mut store, "block0", cfg, &mut rng).unwrap();
            assert_eq!(store.total_elements(), cfg.param_count());
        }
    }

    #[test]
    fn initial_steps_lie_in_range() {
        let cfg = BlockConfig::new(16, 4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = MambaBlock::new(&mut store, "b", cfg, &mut rng).unwrap();
        for &v in store.get(block.fwd.dt_bias).data() {
            let dt = crate::graph::softplus(v);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        let a_log = store.get(block.fwd.a_log);
        assert_eq!(a_log.row(3)[2], 3f64.ln());
    }
}
