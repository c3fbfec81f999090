//! Supervised evaluation on frozen representations: projection layers,
//! a linear probe and an MLP head.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{init_uniform, BindMode, Binder, ParamId, ParamStore};
use crate::numeric::nn::dropout;
use crate::numeric::{Graph, Tensor, Var};
use crate::training::{cosine_lr, derive_seed, AdamW, AdamWConfig, Gradients};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const CONV_CHANNELS: [usize; 2] = [8, 16];
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    LinearFlatten,
    LinearPerFeature,
    Conv,
    MaxPool,
    MeanPool,
}

impl FromStr for ProjectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear_flatten" => ProjectionMode::LinearFlatten,
            "linear_per_feature" => ProjectionMode::LinearPerFeature,
            "conv" => ProjectionMode::Conv,
            "max_pool" => ProjectionMode::MaxPool,
            "mean_pool" => ProjectionMode::MeanPool,
            other => {
                return Err(Error::Config(format!(
                    "unknown projection {other:?} (expected linear_flatten, linear_per_feature, conv, max_pool or mean_pool)"
                )))
            }
        })
    }
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProjectionMode::LinearFlatten => "linear_flatten",
            ProjectionMode::LinearPerFeature => "linear_per_feature",
            ProjectionMode::Conv => "conv",
            ProjectionMode::MaxPool => "max_pool",
            ProjectionMode::MeanPool => "mean_pool",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::Config(format!("unknown head {other:?} (expected linear or mlp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Supervision aligned with the rows of a [`ProbeInput`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Targets::Classes { .. } => TaskKind::Classification,
            Targets::Values(_) => TaskKind::Regression,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: rows.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values(v) => Targets::Values(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Accuracy for class predictions, RMSE for values.
pub fn evaluate(pred: &Predictions, targets: &Targets) -> Result<f64> {
    match (pred, targets) {
        (Predictions::Classes(p), Targets::Classes { labels, .. }) => {
            check_aligned(p.len(), labels.len())?;
            let hits = p.iter().zip(labels).filter(|(a, b)| a == b).count();
            Ok(hits as f64 / p.len() as f64)
        }
        (Predictions::Values(p), Targets::Values(y)) => {
            check_aligned(p.len(), y.len())?;
            let mse = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
            Ok(mse.sqrt())
        }
        _ => Err(Error::Contract("prediction and target kinds differ".into())),
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    if a != b {
        return Err(Error::dim(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Frozen representations: `n` rows of flattened `d×h` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInput {
    pub x: Tensor<f64>,
    pub d: usize,
    pub h: usize,
}

impl ProbeInput {
    pub fn new(x: Tensor<f64>, d: usize, h: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.cols() != d * h {
            return Err(Error::dim(format!("expected n × {} rows, got {:?}", d * h, x.shape())));
        }
        Ok(ProbeInput { x, d, h })
    }

    /// Raw feature vectors seen as `d×1` representations.
    pub fn raw(x: Tensor<f64>) -> Result<Self> {
        let d = x.cols();
        Self::new(x, d, 1)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Result<ProbeInput> {
        Ok(ProbeInput {
            x: self.x.select_rows(rows)?,
            d: self.d,
            h: self.h,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub head: HeadKind,
    pub projection: ProjectionMode,
    /// Output width of the flatten and conv projections.
    pub proj_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            head: HeadKind::Linear,
            projection: ProjectionMode::LinearFlatten,
            proj_dim: 16,
            hidden: 64,
            layers: 2,
            dropout: 0.1,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 200,
            batch_size: 128,
            patience: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: TaskKind,
    pub metric: String,
    pub value: f64,
    pub split: Split,
    pub seed: u64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    fn new(store: &mut ParamStore<f64>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    /// Normalizes each column of `x[rows×c]`: batch statistics in training
    /// (updating the running averages), running statistics otherwise.
    fn forward(&mut self, g: &mut Graph<f64>, b: &mut Binder<'_, f64>, x: Var, train: bool) -> Result<Var> {
        let gamma = b.bind(g, self.gamma, BindMode::Train);
        let beta = b.bind(g, self.beta, BindMode::Train);
        let xhat = if train {
            let v = g.value(x);
            let (n, c) = (v.rows(), v.cols());
            for j in 0..c {
                let mean = (0..n).map(|i| v.data()[i * c + j]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (v.data()[i * c + j] - mean).powi(2)).sum::<f64>() / n as f64;
                self.mean[j] = (1.0 - BN_MOMENTUM) * self.mean[j] + BN_MOMENTUM * mean;
                self.var[j] = (1.0 - BN_MOMENTUM) * self.var[j] + BN_MOMENTUM * var;
            }
            let t = g.transpose(x)?;
            let t = g.normalize_rows(t, BN_EPS);
            g.transpose(t)?
        } else {
            let shift = g.constant(Tensor::new(vec![self.mean.len()], self.mean.iter().map(|m| -m).collect())?);
            let scale = g.constant(Tensor::new(
                vec![self.var.len()],
                self.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
            )?);
            let centered = g.add_row(x, shift)?;
            g.mul_row(centered, scale)?
        };
        let y = g.mul_row(xhat, gamma)?;
        g.add_row(y, beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore<f64>, name: &str, a: usize, o: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: store.add(format!("{name}.weight"), init_uniform(&[a, o], a, rng)),
            b: store.add(format!("{name}.bias"), init_uniform(&[o], a, rng)),
        }
    }

    fn forward(&self, g: &mut Graph<f64>, b: &mut Binder<'_, f64>, x: Var) -> Result<Var> {
        let w = b.bind(g, self.w, BindMode::Train);
        let bias = b.bind(g, self.b, BindMode::Train);
        crate::numeric::linear_forward(g, x, w, bias)
    }
}

/// Spatial size after a 2×2 ceil-mode pool.
fn pooled(n: usize) -> usize {
    n.div_ceil(2)
}

/// im2col for a 3×3 same-padded convolution over activations laid out as
/// `[(sample, y, x) × c]`. Columns are ordered `(ky, kx, c)`.
fn im2col_index(n: usize, hgt: usize, wid: usize, c: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(n * hgt * wid * 9 * c);
    for s in 0..n {
        for y in 0..hgt {
            for x in 0..wid {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = ((y + ky) as isize - 1, (x + kx) as isize - 1);
                        let inside = yy >= 0 && xx >= 0 && (yy as usize) < hgt && (xx as usize) < wid;
                        for ch in 0..c {
                            idx.push(inside.then(|| ((s * hgt + yy as usize) * wid + xx as usize) * c + ch));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// 2×2 max-pool windows (ceil mode, windows clipped at the border).
fn pool_windows(n: usize, hgt: usize, wid: usize, c: usize) -> Vec<Vec<usize>> {
    let (ph, pw) = (pooled(hgt), pooled(wid));
    let mut out = Vec::with_capacity(n * ph * pw * c);
    for s in 0..n {
        for oy in 0..ph {
            for ox in 0..pw {
                for ch in 0..c {
                    let mut w = Vec::with_capacity(4);
                    for y in 2 * oy..(2 * oy + 2).min(hgt) {
                        for x in 2 * ox..(2 * ox + 2).min(wid) {
                            w.push(((s * hgt + y) * wid + x) * c + ch);
                        }
                    }
                    out.push(w);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    kernel: Dense,
    bn: BatchNorm,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum ProjectionParams {
    Flatten(Dense),
    PerFeature { w: ParamId, b: ParamId },
    Conv { stages: Vec<ConvStage>, out: Dense },
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
struct Projection {
    mode: ProjectionMode,
    d: usize,
    h: usize,
    out_dim: usize,
    params: ProjectionParams,
}

impl Projection {
    fn new(
        mode: ProjectionMode,
        d: usize,
        h: usize,
        proj_dim: usize,
        store: &mut ParamStore<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (params, out_dim) = match mode {
            ProjectionMode::LinearFlatten => (
                ProjectionParams::Flatten(Dense::new(store, "proj", d * h, proj_dim, rng)),
                proj_dim,
            ),
            ProjectionMode::LinearPerFeature => (
                ProjectionParams::PerFeature {
                    w: store.add("proj.weight", init_uniform(&[d, h], h, rng)),
                    b: store.add("proj.bias", init_uniform(&[d], h, rng)),
                },
                d,
            ),
            ProjectionMode::Conv => {
                let mut stages = Vec::new();
                let mut c_in = 1;
                for (k, &c_out) in CONV_CHANNELS.iter().enumerate() {
                    stages.push(ConvStage {
                        kernel: Dense::new(store, &format!("proj.conv{k}"), 9 * c_in, c_out, rng),
                        bn: BatchNorm::new(store, &format!("proj.bn{k}"), c_out),
                        c_in,
                        c_out,
                    });
                    c_in = c_out;
                }
                let flat = pooled(pooled(d)) * pooled(pooled(h)) * c_in;
                let out = Dense::new(store, "proj.out", flat, proj_dim, rng);
                (ProjectionParams::Conv { stages, out }, proj_dim)
            }
            ProjectionMode::MaxPool | ProjectionMode::MeanPool => (ProjectionParams::Pool, d),
        };
        Projection {
            mode,
            d,
            h,
            out_dim,
            params,
        }
    }

    fn forward(&mut self, g: &mut Graph<f64>, b: &mut Binder<'_, f64>, x: Var, train: bool) -> Result<Var> {
        let n = g.shape(x)[0];
        let (d, h) = (self.d, self.h);
        if g.value(x).cols() != d * h {
            return Err(Error::dim(format!(
                "projection expects {} columns, got {}",
                d * h,
                g.value(x).cols()
            )));
        }
        match &mut self.params {
            ProjectionParams::Flatten(dense) => dense.forward(g, b, x),
            ProjectionParams::PerFeature { w, b: bias } => {
                let w = b.bind(g, *w, BindMode::Train);
                let bias = b.bind(g, *bias, BindMode::Train);
                let rows = g.reshape(x, &[n * d, h])?;
                let tiled: Vec<Option<usize>> = (0..n * d * h).map(|k| Some(k % (d * h))).collect();
                let wt = g.gather(w, &tiled, &[n * d, h])?;
                let prod = g.mul(rows, wt)?;
                let m = g.row_mean(prod);
                let s = g.scale(m, h as f64);
                let s = g.reshape(s, &[n, d])?;
                g.add_row(s, bias)
            }
            ProjectionParams::Conv { stages, out } => {
                let (mut hgt, mut wid) = (d, h);
                let mut a = g.reshape(x, &[n * d * h, 1])?;
                for st in stages.iter_mut() {
                    let cols = g.gather(a, &im2col_index(n, hgt, wid, st.c_in), &[n * hgt * wid, 9 * st.c_in])?;
                    let y = st.kernel.forward(g, b, cols)?;
                    let y = st.bn.forward(g, b, y, train)?;
                    let y = g.relu(y);
                    let windows = pool_windows(n, hgt, wid, st.c_out);
                    hgt = pooled(hgt);
                    wid = pooled(wid);
                    a = g.window_max(y, &windows, &[n * hgt * wid, st.c_out])?;
                }
                let c = stages.last().map_or(1, |s| s.c_out);
                let flat = g.reshape(a, &[n, hgt * wid * c])?;
                out.forward(g, b, flat)
            }
            ProjectionParams::Pool => {
                let rows = g.reshape(x, &[n * d, h])?;
                let p = match self.mode {
                    ProjectionMode::MaxPool => g.row_max(rows)?,
                    _ => g.row_mean(rows),
                };
                g.reshape(p, &[n, d])
            }
        }
    }
}

/// Applies a parameter-free pooling projection to one `d×h` matrix.
pub fn pool(hm: &Tensor<f64>, mode: ProjectionMode) -> Result<Vec<f64>> {
    let d = hm.rows();
    match mode {
        ProjectionMode::MaxPool => Ok((0..d)
            .map(|i| hm.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()),
        ProjectionMode::MeanPool => Ok((0..d)
            .map(|i| hm.row(i).iter().sum::<f64>() / hm.cols() as f64)
            .collect()),
        other => Err(Error::Config(format!("{other} is not a parameter-free pooling"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HiddenBlock {
    dense: Dense,
    bn: BatchNorm,
}

/// Projection followed by a linear or MLP head.
#[derive(Debug, Clone)]
pub struct FittedHead {
    spec: HeadSpec,
    store: ParamStore<f64>,
    projection: Projection,
    input: Option<Dense>,
    blocks: Vec<HiddenBlock>,
    output: Dense,
    task: TaskKind,
    y_shift: f64,
    y_scale: f64,
    pub epochs_run: usize,
    /// Validation metric after each epoch (MLP head with a validation set).
    pub val_history: Vec<f64>,
}

impl FittedHead {
    fn init(spec: &HeadSpec, d: usize, h: usize, targets: &Targets) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x9e3d, 0));
        let mut store = ParamStore::new();
        let projection = Projection::new(spec.projection, d, h, spec.proj_dim, &mut store, &mut rng);
        let k = match targets {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Values(_) => 1,
        };
        let (input, blocks, output) = match spec.head {
            HeadKind::Linear => (None, Vec::new(), Dense::new(&mut store, "head.out", projection.out_dim, k, &mut rng)),
            HeadKind::Mlp => {
                let input = Dense::new(&mut store, "head.in", projection.out_dim, spec.hidden, &mut rng);
                let blocks = (0..spec.layers)
                    .map(|l| HiddenBlock {
                        dense: Dense::new(&mut store, &format!("head.block{l}"), spec.hidden, spec.hidden, &mut rng),
                        bn: BatchNorm::new(&mut store, &format!("head.block{l}.bn"), spec.hidden),
                    })
                    .collect();
                let output = Dense::new(&mut store, "head.out", spec.hidden, k, &mut rng);
                (Some(input), blocks, output)
            }
        };
        let (y_shift, y_scale) = match targets {
            Targets::Values(y) => {
                let m = y.iter().sum::<f64>() / y.len().max(1) as f64;
                let s = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len().max(1) as f64).sqrt();
                (m, if s > 0.0 { s } else { 1.0 })
            }
            Targets::Classes { .. } => (0.0, 1.0),
        };
        FittedHead {
            spec: spec.clone(),
            store,
            projection,
            input,
            blocks,
            output,
            task: targets.task(),
            y_shift,
            y_scale,
            epochs_run: 0,
            val_history: Vec::new(),
        }
    }

    /// Forward pass in its own graph. Parameters are bound from a snapshot so
    /// the batch-norm running statistics can be updated alongside.
    fn forward(
        &mut self,
        store: &ParamStore<f64>,
        g: &mut Graph<f64>,
        x: &Tensor<f64>,
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut b = Binder::new(store);
        let xv = g.constant(x.clone());
        let mut a = self.projection.forward(g, &mut b, xv, train)?;
        if let Some(input) = &self.input {
            a = input.forward(g, &mut b, a)?;
        }
        for blk in &mut self.blocks {
            let y = blk.dense.forward(g, &mut b, a)?;
            let y = g.relu(y);
            let y = dropout(g, y, if train { self.spec.dropout } else { 0.0 }, rng.as_deref_mut())?;
            a = blk.bn.forward(g, &mut b, y, train)?;
        }
        self.output.forward(g, &mut b, a)
    }

    fn loss(&self, g: &mut Graph<f64>, out: Var, y: &Targets) -> Result<Var> {
        match y {
            Targets::Classes { labels, .. } => g.softmax_cross_entropy(out, labels),
            Targets::Values(v) => {
                let n = v.len();
                let t = Tensor::new(vec![n, 1], v.iter().map(|y| (y - self.y_shift) / self.y_scale).collect())?;
                let t = g.constant(t);
                let diff = g.sub(out, t)?;
                let sq = g.sum_sq(diff);
                Ok(g.scale(sq, 1.0 / n as f64))
            }
        }
    }

    pub fn predict(&self, x: &ProbeInput) -> Result<Predictions> {
        let mut me = self.clone();
        let store = self.store.clone();
        let mut classes = Vec::new();
        let mut values = Vec::new();
        for start in (0..x.len()).step_by(EVAL_CHUNK) {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(x.len())).collect();
            let xb = x.x.select_rows(&rows)?;
            let mut g = Graph::no_grad();
            let out = me.forward(&store, &mut g, &xb, false, None)?;
            let o = g.value(out);
            for i in 0..o.rows() {
                let r = o.row(i);
                match self.task {
                    TaskKind::Classification => {
                        let mut best = 0;
                        for (k, v) in r.iter().enumerate() {
                            if *v > r[best] {
                                best = k;
                            }
                        }
                        classes.push(best);
                    }
                    TaskKind::Regression => values.push(r[0] * self.y_scale + self.y_shift),
                }
            }
        }
        Ok(match self.task {
            TaskKind::Classification => Predictions::Classes(classes),
            TaskKind::Regression => Predictions::Values(values),
        })
    }

    /// Higher is better for the early-stopping comparison.
    fn score(&self, x: &ProbeInput, y: &Targets) -> Result<f64> {
        let m = evaluate(&self.predict(x)?, y)?;
        Ok(match self.task {
            TaskKind::Classification => m,
            TaskKind::Regression => -m,
        })
    }
}

/// Trains a head on `train`. With `val`, the MLP head stops once the
/// validation metric has not improved for `patience` epochs and keeps the
/// best epoch's parameters.
pub fn fit_head(
    spec: &HeadSpec,
    train: &ProbeInput,
    y_train: &Targets,
    val: Option<(&ProbeInput, &Targets)>,
) -> Result<FittedHead> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if train.len() != y_train.len() {
        return Err(Error::dim(format!(
            "{} embeddings but {} labels",
            train.len(),
            y_train.len()
        )));
    }
    if let Some((vx, vy)) = val {
        if vx.len() != vy.len() {
            return Err(Error::dim(format!("{} validation embeddings but {} labels", vx.len(), vy.len())));
        }
    }
    if spec.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut head = FittedHead::init(spec, train.d, train.h, y_train);
    let ids: Vec<ParamId> = head.store.iter().map(|(id, _, _)| id).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: spec.weight_decay,
            ..AdamWConfig::default()
        },
        &head.store,
        &ids,
    );
    let n = train.len();
    let steps_per_epoch = n.div_ceil(spec.batch_size) as u64;
    let total = steps_per_epoch * spec.epochs as u64;
    let early_stop = spec.head == HeadKind::Mlp && val.is_some();
    let mut best: Option<(f64, FittedHead)> = None;
    let mut since_best = 0;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..spec.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, epoch as u64, 1)));
        for chunk in order.chunks(spec.batch_size) {
            let xb = train.x.select_rows(chunk)?;
            let yb = y_train.select(chunk);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, step, 2));
            let snapshot = head.store.clone();
            let mut g = Graph::new();
            let out = head.forward(&snapshot, &mut g, &xb, true, Some(&mut rng))?;
            let loss = head.loss(&mut g, out, &yb)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::NonFinite(format!("probe loss diverged at epoch {epoch}")));
            }
            g.backward(loss)?;
            let mut grads = Gradients::new(head.store.len());
            grads.accumulate_graph(&g);
            opt.step(&mut head.store, &grads, cosine_lr(step, total, spec.lr))?;
            step += 1;
        }
        head.epochs_run = epoch + 1;
        if early_stop {
            let (vx, vy) = val.expect("checked");
            let s = head.score(vx, vy)?;
            head.val_history.push(s.abs());
            match &best {
                Some((b, _)) if s <= *b => {
                    since_best += 1;
                    if since_best >= spec.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((s, head.clone()));
                    since_best = 0;
                }
            }
        }
    }
    if let Some((_, mut b)) = best {
        b.epochs_run = head.epochs_run;
        b.val_history = head.val_history;
        head = b;
    }
    Ok(head)
}

fn result(head: &FittedHead, eval: &ProbeInput, y_eval: &Targets, split: Split) -> Result<ProbeResult> {
    let value = evaluate(&head.predict(eval)?, y_eval)?;
    Ok(ProbeResult {
        task: y_eval.task(),
        metric: match y_eval.task() {
            TaskKind::Classification => "accuracy".into(),
            TaskKind::Regression => "rmse".into(),
        },
        value,
        split,
        seed: head.spec.seed,
        epochs_run: head.epochs_run,
    })
}

/// Single linear layer (after the projection) trained for `spec.epochs`
/// epochs, evaluated on `eval`.
pub fn train_linear_probe(
    spec: &HeadSpec,
    train: &ProbeInput,
    y_train: &Targets,
    eval: &ProbeInput,
    y_eval: &Targets,
    split: Split,
) -> Result<ProbeResult> {
    let spec = HeadSpec {
        head: HeadKind::Linear,
        ..spec.clone()
    };
    let head = fit_head(&spec, train, y_train, None)?;
    result(&head, eval, y_eval, split)
}

/// MLP head with early stopping on `val`, evaluated on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn train_mlp_head(
    spec: &HeadSpec,
    train: &ProbeInput,
    y_train: &Targets,
    val: &ProbeInput,
    y_val: &Targets,
    eval: &ProbeInput,
    y_eval: &Targets,
    split: Split,
) -> Result<ProbeResult> {
    let spec = HeadSpec {
        head: HeadKind::Mlp,
        ..spec.clone()
    };
    let head = fit_head(&spec, train, y_train, Some((val, y_val)))?;
    result(&head, eval, y_eval, split)
}
