//! Vision Mamba with registers: patch embedding, register interleaving, the
//! bidirectional backbone and the register head.

mod config;
mod layout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, PredictionMode};
pub use layout::{balanced_groups, build_layout, PositionMode, Slot, TokenLayout};

use crate::block::MambaBlock;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal, uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FINAL_NORM_EPS: f64 = 1e-5;

/// Which activation of each layer a trace records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Block output including the residual.
    #[default]
    PostResidual,
    /// Block output after the following RMS norm (the next block's norm, or
    /// the final norm for the last layer).
    PreNorm,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Sequence entering the first block, `(m+n)×d`.
    pub input: Var,
    /// Per-layer activations at the requested tap point.
    pub layers: Vec<Var>,
    /// Final-normed sequence.
    pub output: Var,
    /// Classifier input, `1×head_dim`.
    pub feature: Var,
    /// `1×num_classes`.
    pub logits: Var,
}

#[derive(Debug, Clone)]
struct HeadParams {
    reduce: Option<(ParamId, ParamId)>,
    classifier: (ParamId, ParamId),
}

/// A constructed model: config, layout, parameters and their ids.
#[derive(Debug, Clone)]
pub struct VisionMambaR<T> {
    pub config: ModelConfig,
    pub layout: TokenLayout,
    pub params: ParamStore<T>,
    blocks: Vec<MambaBlock>,
    patch_embed: (ParamId, ParamId),
    pos_embed: ParamId,
    reg_embed: Option<ParamId>,
    final_norm: ParamId,
    head: HeadParams,
    patch_index: Vec<usize>,
    gather_order: Vec<usize>,
}

/// Flat indices that turn an `img×img×C` image into `m×(patch²·C)` rows.
/// Patches are ordered row-major over the grid, each flattened as
/// `(row, col, channel)`.
fn patchify_index(cfg: &ModelConfig) -> Vec<usize> {
    let (p, img, c, grid) = (cfg.patch, cfg.img, cfg.in_chans, cfg.grid());
    let mut idx = Vec::with_capacity(img * img * c);
    for py in 0..grid {
        for px in 0..grid {
            for iy in 0..p {
                for ix in 0..p {
                    let base = ((py * p + iy) * img + px * p + ix) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

impl<T: Scalar> VisionMambaR<T> {
    /// Builds and initializes the model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, n, m) = (config.d, config.n, config.image_tokens());
        let pd = config.patch_dim();
        let bound = 1.0 / (pd as f64).sqrt();

        let patch_embed = (
            store.register("patch_embed.weight", uniform(&mut rng, &[pd, d], bound)),
            store.register("patch_embed.bias", uniform(&mut rng, &[d], bound)),
        );
        let pos_embed = store.register("pos_embed", normal(&mut rng, &[m + n, d], 0.02));
        let reg_embed = (n > 0).then(|| store.register("reg_embed", normal(&mut rng, &[n, d], 0.02)));

        let block_cfg = config.block_config();
        let blocks = (0..config.depth)
            .map(|i| MambaBlock::new(&mut store, &format!("block{i}"), block_cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = store.register("final_norm.weight", Tensor::ones(&[d]));

        let reduce = (config.prediction_mode == PredictionMode::ReduceConcat).then(|| {
            let out = d / config.r;
            let b = 1.0 / (d as f64).sqrt();
            (
                store.register("head.reduce.weight", uniform(&mut rng, &[d, out], b)),
                store.register("head.reduce.bias", uniform(&mut rng, &[out], b)),
            )
        });
        let hd = config.head_dim();
        let b = 1.0 / (hd as f64).sqrt();
        let classifier = (
            store.register(
                "head.classifier.weight",
                uniform(&mut rng, &[hd, config.num_classes], b),
            ),
            store.register(
                "head.classifier.bias",
                uniform(&mut rng, &[config.num_classes], b),
            ),
        );

        let layout = build_layout(m, n, config.position_mode);
        Ok(Self {
            patch_index: patchify_index(&config),
            gather_order: layout.gather_order(),
            config,
            layout,
            params: store,
            blocks,
            patch_embed,
            pos_embed,
            reg_embed,
            final_norm,
            head: HeadParams { reduce, classifier },
        })
    }

    pub fn blocks(&self) -> &[MambaBlock] {
        &self.blocks
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.config.img, self.config.img, self.config.in_chans]
    }

    /// Patch embedding only: `m×d` token vectors (without positional terms).
    pub fn embed_patches(&self, g: &mut Graph<T>, vars: &[Var], image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        if shape != self.image_shape() {
            return Err(dim_err(format!(
                "image of shape {shape:?}, model expects {:?}",
                self.image_shape()
            )));
        }
        let m = self.config.image_tokens();
        let patches = g.gather(
            image,
            self.patch_index.clone(),
            vec![m, self.config.patch_dim()],
        )?;
        let tokens = g.matmul(patches, vars[self.patch_embed.0.index()])?;
        g.add(tokens, vars[self.patch_embed.1.index()])
    }

    /// Register head on the final-normed sequence; returns `1×head_dim`.
    pub fn predict_head(&self, g: &mut Graph<T>, vars: &[Var], output: Var) -> Result<Var> {
        let reg_rows = self.layout.register_positions();
        match self.config.prediction_mode {
            PredictionMode::R1Only | PredictionMode::ClassToken => g.gather_rows(output, &reg_rows[..1]),
            PredictionMode::MeanRegisters => {
                let regs = g.gather_rows(output, &reg_rows)?;
                g.mean_rows(regs)
            }
            PredictionMode::GlobalPool => {
                let imgs = g.gather_rows(output, &self.layout.image_positions())?;
                g.mean_rows(imgs)
            }
            PredictionMode::ReduceConcat => {
                let (w, b) = self.head.reduce.expect("reduce head exists in reduce_concat mode");
                let regs = g.gather_rows(output, &reg_rows)?;
                let reduced = g.matmul(regs, vars[w.index()])?;
                let reduced = g.add(reduced, vars[b.index()])?;
                g.reshape(reduced, vec![1, self.config.head_dim()])
            }
        }
    }

    /// Records the whole forward pass on `g`. `vars` comes from
    /// `self.params.to_graph`; `image` is `img×img×C`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        image: Var,
        tap: TapPoint,
    ) -> Result<Forward> {
        let tokens = self.embed_patches(g, vars, image)?;
        let seq = match self.reg_embed {
            Some(reg) => {
                let both = g.concat_rows(&[tokens, vars[reg.index()]])?;
                g.gather_rows(both, &self.gather_order)?
            }
            None => tokens,
        };
        let input = g.add(seq, vars[self.pos_embed.index()])?;

        let eps = T::lit(FINAL_NORM_EPS);
        let final_norm = vars[self.final_norm.index()];
        let mut x = input;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, vars, x)?;
            layers.push(match tap {
                TapPoint::PostResidual => x,
                TapPoint::PreNorm => {
                    let w = match self.blocks.get(i + 1) {
                        Some(next) => vars[next.norm.index()],
                        None => final_norm,
                    };
                    g.rms_norm(x, w, eps)?
                }
            });
        }
        let output = g.rms_norm(x, final_norm, eps)?;
        let feature = self.predict_head(g, vars, output)?;
        let (w, b) = self.head.classifier;
        let logits = g.matmul(feature, vars[w.index()])?;
        let logits = g.add(logits, vars[b.index()])?;
        Ok(Forward {
            input,
            layers,
            output,
            feature,
            logits,
        })
    }

    /// Logits for one image, as a length-`num_classes` tensor.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(image, TapPoint::PostResidual)?.0)
    }

    /// Logits plus every layer's activation at `tap`.
    pub fn forward_traced(
        &self,
        image: &Tensor<T>,
        tap: TapPoint,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars = self.params.to_graph(&mut g, false);
        let img = g.constant(image.clone());
        let out = self.forward_graph(&mut g, &vars, img, tap)?;
        let logits = g
            .value(out.logits)
            .clone()
            .reshape(vec![self.config.num_classes])?;
        let layers = out.layers.iter().map(|&v| g.value(v).clone()).collect();
        Ok((logits, layers))
    }

    /// Names and shapes of every parameter, in registration order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_owned(), t.shape().to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            d: 8,
            n: 2,
            r: 2,
            patch: 2,
            img: 4,
            state_dim: 4,
            num_classes: 3,
            ..ModelConfig::micro()
        }
    }

    #[test]
    fn patch_order_is_row_major_over_grid() {
        let cfg = ModelConfig {
            in_chans: 1,
            ..tiny_cfg()
        };
        // 4×4 single-channel image, 2×2 patches.
        assert_eq!(
            patchify_index(&cfg),
            [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
    }

    #[test]
    fn constructed_count_matches_formula() {
        for mode in [
            PredictionMode::R1Only,
            PredictionMode::MeanRegisters,
            PredictionMode::ReduceConcat,
            PredictionMode::GlobalPool,
        ] {
            let cfg = ModelConfig {
                prediction_mode: mode,
                ..tiny_cfg()
            };
            let model = VisionMambaR::<f64>::new(cfg.clone()).unwrap();
            assert_eq!(model.params.total_elements(), cfg.param_count(), "{mode:?}");
        }
    }

    #[test]
    fn logits_have_class_count() {
        let model = VisionMambaR::<f64>::new(tiny_cfg()).unwrap();
        let image = Tensor::full(&[4, 4, 3], 0.5);
        assert_eq!(model.logits(&image).unwrap().shape(), &[3]);
        assert!(model.logits(&Tensor::zeros(&[4, 4, 1])).is_err());
    }
}
