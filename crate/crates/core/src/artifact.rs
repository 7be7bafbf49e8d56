//! Token-norm diagnostics over per-layer activations: norm maps and their
//! distributions, local-to-global distance maps, norm-ranked token
//! selection, and linear probes on pooled features.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::mbrt::Container;
use crate::model::{build_layout, PositionMode, Slot, TapPoint, TokenLayout, VisionMambaR};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 64;
pub const OUTLIER_FACTOR: f64 = 3.0;
pub const NORM_CSV_HEADER: &str = "layer,token_row,token_col,norm";

/// Per-layer `(m+n)×d` activations and the layout that tags their rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    pub layout: TokenLayout,
    pub tap: TapPoint,
    pub layers: Vec<Tensor<T>>,
}

/// Runs the model on `image`, returning the logits and the trace.
pub fn trace_activations<T: Scalar>(
    model: &VisionMambaR<T>,
    image: &Tensor<T>,
    tap: TapPoint,
) -> Result<(Tensor<T>, ActivationTrace<T>)> {
    let (logits, layers) = model.forward_traced(image, tap)?;
    Ok((
        logits,
        ActivationTrace {
            layout: model.layout.clone(),
            tap,
            layers,
        },
    ))
}

fn mode_code(mode: PositionMode) -> f64 {
    match mode {
        PositionMode::Head => 0.0,
        PositionMode::Middle => 1.0,
        PositionMode::Even => 2.0,
    }
}

fn load_err(name: &str, reason: &str) -> Error {
    Error::Load {
        name: name.into(),
        reason: reason.into(),
    }
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn layer(&self, layer: usize) -> Result<&Tensor<T>> {
        self.layers.get(layer).ok_or_else(|| {
            dim_err(format!("layer {layer} out of range for a {}-layer trace", self.depth()))
        })
    }

    /// Image-token rows of `layer`, in patch order.
    pub fn image_rows(&self, layer: usize) -> Result<Vec<&[T]>> {
        let t = self.layer(layer)?;
        Ok(self.layout.image_positions().into_iter().map(|k| t.row(k)).collect())
    }

    /// Register rows of `layer`, in register order.
    pub fn register_rows(&self, layer: usize) -> Result<Vec<&[T]>> {
        let t = self.layer(layer)?;
        Ok(self.layout.register_positions().into_iter().map(|k| t.row(k)).collect())
    }

    /// `layer{i}` tensors plus the layout as `layout.m`, `layout.n`,
    /// `layout.mode` (0 head, 1 middle, 2 even) and `trace.tap`.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (i, t) in self.layers.iter().enumerate() {
            c.push_tensor(format!("layer{i}"), t);
        }
        c.push("layout.m", Tensor::scalar(self.layout.image_tokens() as f64));
        c.push("layout.n", Tensor::scalar(self.layout.registers() as f64));
        c.push("layout.mode", Tensor::scalar(mode_code(self.layout.mode)));
        let tap = match self.tap {
            TapPoint::PostResidual => 0.0,
            TapPoint::PreNorm => 1.0,
        };
        c.push("trace.tap", Tensor::scalar(tap));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            let t = c.get(name).ok_or_else(|| load_err(name, "missing from trace"))?;
            Ok(t.to_tensor::<f64>().data()[0])
        };
        let (m, n) = (scalar("layout.m")? as usize, scalar("layout.n")? as usize);
        let mode = match scalar("layout.mode")? as u8 {
            0 => PositionMode::Head,
            1 => PositionMode::Middle,
            2 => PositionMode::Even,
            _ => return Err(load_err("layout.mode", "unknown position mode code")),
        };
        let tap = match scalar("trace.tap")? as u8 {
            0 => TapPoint::PostResidual,
            1 => TapPoint::PreNorm,
            _ => return Err(load_err("trace.tap", "unknown tap code")),
        };
        let mut layers = Vec::new();
        while let Some(t) = c.get(&format!("layer{}", layers.len())) {
            let name = format!("layer{}", layers.len());
            if t.dtype() != T::DTYPE || t.shape().len() != 2 || t.shape()[0] != m + n {
                return Err(load_err(&name, "shape or dtype does not match the layout"));
            }
            layers.push(t.to_tensor::<T>());
        }
        Ok(Self {
            layout: build_layout(m, n, mode),
            tap,
            layers,
        })
    }
}

fn l2<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// ℓ2 norm of every image token of `layer`, in patch order.
pub fn token_norms<T: Scalar>(trace: &ActivationTrace<T>, layer: usize) -> Result<Vec<f64>> {
    Ok(trace.image_rows(layer)?.into_iter().map(l2).collect())
}

/// `bins` log-spaced bins spanning the data range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Log-spaced histogram over `[min, max]`. Log spacing needs a positive
/// lower edge, so when `min ≤ 0` the smallest positive value is used and
/// everything at or below it lands in the first bin. A constant input puts
/// every value in the first bin.
pub fn log_histogram(values: &[f64], bins: usize) -> Histogram {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let mut counts = vec![0; bins];
    if !lo.is_finite() || max <= lo {
        let edge = if lo.is_finite() { lo } else { 0.0 };
        counts[0] = values.len();
        return Histogram {
            edges: vec![edge; bins + 1],
            counts,
        };
    }
    let span = (max / lo).ln();
    let edges = (0..=bins)
        .map(|k| {
            if k == bins {
                max
            } else {
                lo * (span * k as f64 / bins as f64).exp()
            }
        })
        .collect();
    for &v in values {
        let k = if v <= lo {
            0
        } else {
            ((bins as f64 * (v / lo).ln() / span) as usize).min(bins - 1)
        };
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Number of values strictly above `factor × median`.
pub fn outlier_count(values: &[f64], factor: f64) -> usize {
    let threshold = factor * median(values);
    values.iter().filter(|&&v| v > threshold).count()
}

/// Norm map and distribution summary of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub layer: usize,
    /// Side of the square patch grid.
    pub grid: usize,
    /// Row-major `grid × grid` image-token norms.
    pub norms: Vec<f64>,
    pub histogram: Histogram,
    pub mean: f64,
    pub max: f64,
    pub median: f64,
    pub outlier_factor: f64,
    pub outliers: usize,
}

fn grid_side(m: usize) -> Result<usize> {
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(dim_err(format!("{m} image tokens do not form a square grid")));
    }
    Ok(side)
}

pub fn norm_map<T: Scalar>(trace: &ActivationTrace<T>, layer: usize) -> Result<NormReport> {
    let norms = token_norms(trace, layer)?;
    let grid = grid_side(norms.len())?;
    Ok(NormReport {
        layer,
        grid,
        histogram: log_histogram(&norms, HISTOGRAM_BINS),
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
        max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median: median(&norms),
        outlier_factor: OUTLIER_FACTOR,
        outliers: outlier_count(&norms, OUTLIER_FACTOR),
        norms,
    })
}

impl NormReport {
    pub fn outlier_fraction(&self) -> f64 {
        self.outliers as f64 / self.norms.len() as f64
    }

    /// Rows `layer,token_row,token_col,norm`, without the header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.norms.iter().enumerate() {
            writeln!(s, "{},{},{},{}", self.layer, i / self.grid, i % self.grid, v)
                .expect("writing to a String");
        }
        s
    }

    /// `bin,lower,upper,count` lines with a header.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count\n");
        for (k, c) in self.histogram.counts.iter().enumerate() {
            let (lo, hi) = (self.histogram.edges[k], self.histogram.edges[k + 1]);
            writeln!(s, "{k},{lo},{hi},{c}").expect("writing to a String");
        }
        s
    }
}

/// `‖local_t − global‖₂` for every image token of `layer`, row-major on the grid.
pub fn feature_distance_map<T: Scalar>(
    trace: &ActivationTrace<T>,
    layer: usize,
    global: &[T],
) -> Result<Vec<f64>> {
    let rows = trace.image_rows(layer)?;
    let d = rows.first().map_or(0, |r| r.len());
    if global.len() != d {
        return Err(dim_err(format!(
            "global feature of length {}, tokens have {d}",
            global.len()
        )));
    }
    Ok(rows
        .into_iter()
        .map(|r| {
            r.iter()
                .zip(global)
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Top,
    Bottom,
}

/// Indices of the `⌈p·m⌉` largest (`Top`) or smallest (`Bottom`) values,
/// ties going to the lower index, returned in ascending index order.
pub fn select_by_norm(norms: &[f64], p: f64, side: Side) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("selection fraction {p} outside (0, 1]")));
    }
    let m = norms.len();
    // The small slack keeps products like 0.1·30 = 3.0000000000000004 at 3.
    let count = ((p * m as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| {
        let ord = norms[a].total_cmp(&norms[b]);
        let ord = match side {
            Side::Top => ord.reverse(),
            Side::Bottom => ord,
        };
        ord.then(a.cmp(&b))
    });
    idx.truncate(count.min(m));
    idx.sort_unstable();
    Ok(idx)
}

/// Pooled last-layer feature used by a probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "fraction")]
pub enum FeatureSpec {
    /// Output at the first register slot (the class token in baseline mode).
    ClassToken,
    /// Mean over all image tokens.
    GlobalPool,
    /// Mean over the `⌈p·m⌉` highest-norm image tokens.
    TopNorm(f64),
    /// Mean over the `⌈p·m⌉` lowest-norm image tokens.
    BottomNorm(f64),
    /// Mean over register outputs.
    MeanRegisters,
}

impl FeatureSpec {
    fn needs_registers(self) -> bool {
        matches!(self, FeatureSpec::ClassToken | FeatureSpec::MeanRegisters)
    }
}

fn mean_of<T: Scalar>(rows: &[&[T]]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v.as_f64();
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

/// Pooled feature of the last layer of `trace`.
pub fn extract_feature<T: Scalar>(trace: &ActivationTrace<T>, spec: FeatureSpec) -> Result<Vec<f64>> {
    if spec.needs_registers() && trace.layout.registers() == 0 {
        return Err(Error::Config(format!("{spec:?} needs a model with registers")));
    }
    let last = trace.depth().checked_sub(1).ok_or_else(|| dim_err("empty trace"))?;
    let images = trace.image_rows(last)?;
    match spec {
        FeatureSpec::ClassToken => Ok(trace.register_rows(last)?[0].iter().map(|v| v.as_f64()).collect()),
        FeatureSpec::MeanRegisters => Ok(mean_of(&trace.register_rows(last)?)),
        FeatureSpec::GlobalPool => Ok(mean_of(&images)),
        FeatureSpec::TopNorm(p) | FeatureSpec::BottomNorm(p) => {
            let side = if matches!(spec, FeatureSpec::TopNorm(_)) {
                Side::Top
            } else {
                Side::Bottom
            };
            let norms: Vec<f64> = images.iter().map(|r| l2(r)).collect();
            let picked: Vec<&[T]> = select_by_norm(&norms, p, side)?
                .into_iter()
                .map(|i| images[i])
                .collect();
            Ok(mean_of(&picked))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Full-batch multinomial logistic regression on standardized features,
/// trained on a seeded 80/20 split. Returns train and held-out accuracy.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.len();
    if n < 2 || labels.len() != n {
        return Err(dim_err(format!("{n} features with {} labels", labels.len())));
    }
    let dim = features[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / train_idx.len() as f64;
        }
    }
    for &i in train_idx {
        for ((s, v), m) in var.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m).powi(2) / train_idx.len() as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let matrix = |idx: &[usize]| -> Tensor<f64> {
        let data = idx
            .iter()
            .flat_map(|&i| {
                features[i]
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect();
        Tensor::from_parts(vec![idx.len(), dim], data)
    };
    let (x_train, x_test) = (matrix(train_idx), matrix(test_idx));
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

    let mut w = Tensor::<f64>::zeros(&[dim, classes]);
    let mut b = Tensor::<f64>::zeros(&[classes]);
    let mut state = AdamWState::new(&[dim * classes, classes]);
    let opt = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let xv = g.constant(x_train.clone());
        let (wv, bv) = (g.leaf(w.clone(), true), g.leaf(b.clone(), true));
        let logits = g.matmul(xv, wv)?;
        let logits = g.add(logits, bv)?;
        let loss = g.cross_entropy(logits, &y_train, 0.0)?;
        g.backward(loss)?;
        let (gw, gb) = (g.grad(wv).expect("leaf").to_vec(), g.grad(bv).expect("leaf").to_vec());
        adamw_step(&mut [w.data_mut(), b.data_mut()], &[&gw, &gb], &mut state, cfg.lr, &opt)?;
    }

    let acc = |x: &Tensor<f64>, idx: &[usize]| -> f64 {
        let correct = idx
            .iter()
            .enumerate()
            .filter(|&(r, &i)| {
                let row = x.row(r);
                let scores: Vec<f64> = (0..classes)
                    .map(|c| b.data()[c] + row.iter().enumerate().map(|(k, v)| v * w.data()[k * classes + c]).sum::<f64>())
                    .collect();
                let pred = (0..classes).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
                pred == labels[i]
            })
            .count();
        correct as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        train_acc: acc(&x_train, train_idx),
        test_acc: acc(&x_test, test_idx),
    })
}

/// Linear-probe accuracy of a frozen model's pooled last-layer feature.
pub fn probe_features<T: Scalar>(
    model: &VisionMambaR<T>,
    data: &SyntheticDataset,
    spec: FeatureSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if spec.needs_registers() && model.config.n == 0 {
        return Err(Error::Config(format!("{spec:?} needs a model with registers")));
    }
    let features: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (_, trace) = trace_activations(model, &data.image(i), TapPoint::PostResidual)?;
            extract_feature(&trace, spec)
        })
        .collect::<Result<_>>()?;
    linear_probe(&features, data.labels(), data.spec.num_classes, cfg)
}

/// Binary 8-bit PGM of a row-major `side×side` map, min-max normalized.
pub fn pgm_bytes(map: &[f64], side: usize) -> Result<Vec<u8>> {
    if map.len() != side * side {
        return Err(dim_err(format!("{} values for a {side}×{side} map", map.len())));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &[f64], side: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pgm_bytes(map, side)?)?;
    Ok(())
}

/// One model's entry in the outlier comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSummary {
    pub model: String,
    pub layer: usize,
    pub images: usize,
    pub outlier_fraction: f64,
    pub mean_norm: f64,
    pub max_norm: f64,
}

/// Averages last-layer norm statistics of `model` over `images`.
pub fn outlier_summary<T: Scalar>(
    label: &str,
    model: &VisionMambaR<T>,
    images: &[Tensor<T>],
) -> Result<OutlierSummary> {
    let reports: Vec<NormReport> = images
        .par_iter()
        .map(|img| {
            let (_, trace) = trace_activations(model, img, TapPoint::PostResidual)?;
            norm_map(&trace, trace.depth() - 1)
        })
        .collect::<Result<_>>()?;
    let k = reports.len() as f64;
    Ok(OutlierSummary {
        model: label.to_owned(),
        layer: model.config.depth - 1,
        images: reports.len(),
        outlier_fraction: reports.iter().map(NormReport::outlier_fraction).sum::<f64>() / k,
        mean_norm: reports.iter().map(|r| r.mean).sum::<f64>() / k,
        max_norm: reports.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max),
    })
}

pub fn outlier_comparison_csv(rows: &[OutlierSummary]) -> String {
    let mut s = String::from("model,layer,images,outlier_fraction,mean_norm,max_norm\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.model, r.layer, r.images, r.outlier_fraction, r.mean_norm, r.max_norm
        )
        .expect("writing to a String");
    }
    s
}

/// Slot tag string for a layout row, `I3` or `R0`.
pub fn slot_label(slot: Slot) -> String {
    match slot {
        Slot::Image(i) => format!("I{i}"),
        Slot::Register(j) => format!("R{j}"),
    }
}
