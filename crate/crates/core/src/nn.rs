//! Dense sigmoid networks trained on cross-entropy with mini-batch nonlinear
//! conjugate gradient, greedy autoencoder pretraining and the reach decoder.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::sha256_bytes;
use crate::dataset::{ReachPair, Region};
use crate::muscle::ActivationTrajectory;
use crate::TRAJ_DIM;

pub const AUTOENCODER_DIMS: [usize; 7] = [TRAJ_DIM, 150, 50, 4, 50, 150, TRAJ_DIM];
pub const DECODER_DIMS: [usize; 4] = [4, 50, 150, TRAJ_DIM];
const MAGIC: &[u8; 4] = b"RGNN";
pub const WEIGHTS_VERSION: u32 = 1;
/// Steepest-descent restart period for conjugate gradient.
const CG_RESTART: usize = 10;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;
const MAX_EXPANSIONS: usize = 8;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("weights file version {found} is not supported (expected {WEIGHTS_VERSION})")]
    VersionMismatch { found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn mismatch(expected: impl ToString, found: impl ToString) -> NnError {
    NnError::DimensionMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Feedforward net with a sigmoid after every layer. Parameters live in one
/// flat buffer, layer by layer: row-major `W` (out x in), then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dims: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Network {
    /// Network with every parameter zero.
    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(mismatch("at least two positive layer widths", format!("{dims:?}")));
        }
        let n = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Uniform weights in `±4 sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims)?;
        for span in net.spans() {
            let r = 4.0 * (6.0 / (span.n_in + span.n_out) as f64).sqrt();
            for w in &mut net.params[span.w..span.b] {
                *w = rng.random_range(-r..r);
            }
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(mismatch(net.params.len(), params.len()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims nonempty")
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut off = 0;
        self.dims
            .windows(2)
            .map(|d| {
                let span = LayerSpan {
                    n_in: d[0],
                    n_out: d[1],
                    w: off,
                    b: off + d[0] * d[1],
                };
                off = span.b + d[1];
                span
            })
            .collect()
    }

    fn weights_of<'a>(params: &'a [f64], s: &LayerSpan) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((s.n_out, s.n_in), &params[s.w..s.b]).expect("span matches shape")
    }

    fn bias_of<'a>(params: &'a [f64], s: &LayerSpan) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[s.b..s.b + s.n_out])
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        Self::weights_of(&self.params, &self.spans()[layer])
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        Self::bias_of(&self.params, &self.spans()[layer])
    }

    /// Sub-network made of layers `range`.
    pub fn slice_layers(&self, range: std::ops::Range<usize>) -> Network {
        let spans = self.spans();
        let start = spans[range.start].w;
        let last = &spans[range.end - 1];
        Network {
            dims: self.dims[range.start..=range.end].to_vec(),
            params: self.params[start..last.b + last.n_out].to_vec(),
        }
    }

    /// Concatenates layer stacks whose widths chain.
    pub fn stack(parts: &[Network]) -> Result<Network, NnError> {
        let mut dims = parts[0].dims.clone();
        let mut params = parts[0].params.clone();
        for p in &parts[1..] {
            if p.input_dim() != *dims.last().expect("nonempty") {
                return Err(mismatch(dims.last().expect("nonempty"), p.input_dim()));
            }
            dims.extend_from_slice(&p.dims[1..]);
            params.extend_from_slice(&p.params);
        }
        Ok(Network { dims, params })
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(mismatch(
                format!("{} input columns", self.input_dim()),
                x.ncols(),
            ));
        }
        Ok(())
    }

    fn activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.to_owned()];
        for s in self.spans() {
            let w = Self::weights_of(&self.params, &s);
            let b = Self::bias_of(&self.params, &s);
            let mut z = acts.last().expect("nonempty").dot(&w.t());
            z += &b;
            z.mapv_inplace(sigmoid);
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        Ok(self.activations(x).pop().expect("nonempty"))
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    pub fn loss(&self, x: ArrayView2<f64>, t: ArrayView2<f64>, eps: f64) -> Result<f64, NnError> {
        cross_entropy(self.forward(x)?.view(), t, eps)
    }

    /// Loss and its gradient with respect to [`Network::params`].
    pub fn gradient(
        &self,
        x: ArrayView2<f64>,
        t: ArrayView2<f64>,
        eps: f64,
    ) -> Result<(f64, Vec<f64>), NnError> {
        self.check_input(&x)?;
        let acts = self.activations(x);
        let y = acts.last().expect("nonempty");
        let loss = cross_entropy(y.view(), t, eps)?;
        let n = x.nrows() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = (y - &t) / n;
        let spans = self.spans();
        for (l, s) in spans.iter().enumerate().rev() {
            {
                let (gw, gb) = grad[s.w..s.b + s.n_out].split_at_mut(s.b - s.w);
                let mut gw = ArrayViewMut2::from_shape((s.n_out, s.n_in), gw).expect("shape");
                gw.assign(&delta.t().dot(&acts[l]));
                for (g, v) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = v;
                }
            }
            if l > 0 {
                let w = Self::weights_of(&self.params, s);
                let mut back = delta.dot(&w);
                back.zip_mut_with(&acts[l], |d, a| *d *= a * (1.0 - a));
                delta = back;
            }
        }
        Ok((loss, grad))
    }
}

/// Cross-entropy summed over output dimensions and averaged over rows, with
/// predictions clamped to `[eps, 1 - eps]`.
pub fn cross_entropy(pred: ArrayView2<f64>, target: ArrayView2<f64>, eps: f64) -> Result<f64, NnError> {
    if pred.dim() != target.dim() {
        return Err(mismatch(format!("{:?}", target.dim()), format!("{:?}", pred.dim())));
    }
    let mut sum = 0.0;
    ndarray::Zip::from(&pred).and(&target).for_each(|&y, &t| {
        let y = y.clamp(eps, 1.0 - eps);
        sum -= t * y.ln() + (1.0 - t) * (1.0 - y).ln();
    });
    Ok(sum / pred.nrows() as f64)
}

/// Smallest attainable cross-entropy for `target`: its mean row entropy.
pub fn entropy_floor(target: ArrayView2<f64>) -> f64 {
    let h = |t: f64| {
        let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
        -(xlogx(t) + xlogx(1.0 - t))
    };
    target.iter().map(|&t| h(t)).sum::<f64>() / target.nrows() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub cg_iters_per_batch: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub decoder_epochs: usize,
    pub seed: u64,
    pub eps_clamp: f64,
    /// Margin (m) added around the sampling region when normalizing decoder
    /// inputs to `[0, 1]`.
    pub input_margin: f64,
    /// Re-initialize the decoder's input layer instead of reusing the
    /// pretrained one.
    pub fresh_first_layer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            cg_iters_per_batch: 20,
            pretrain_epochs: 10,
            finetune_epochs: 20,
            decoder_epochs: 75,
            seed: 1,
            eps_clamp: 1e-12,
            input_margin: 0.10,
            fresh_first_layer: false,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if self.cg_iters_per_batch == 0 {
            out.push("cg_iters_per_batch must be at least 1".into());
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp <= 1e-6) {
            out.push(format!("eps_clamp must lie in (0, 1e-6], got {}", self.eps_clamp));
        }
        if !(self.input_margin >= 0.0) {
            out.push("input_margin must be non-negative".into());
        }
        out
    }

    fn check(&self) -> Result<(), NnError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(NnError::InvalidConfig(v.join("; ")))
        }
    }
}

/// Full-dataset loss before training and after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub initial: f64,
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gather_rows(m: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Line search along `d`: backtrack until the Armijo condition holds, then
/// move toward the minimizer of the quadratic through `f0`, `slope` and the
/// current point while that keeps lowering the loss. Returns the accepted
/// step and loss, or `None` if no step gives sufficient decrease.
#[allow(clippy::too_many_arguments)]
fn line_search(
    net: &Network,
    x: &ArrayView2<f64>,
    t: &ArrayView2<f64>,
    eps: f64,
    f0: f64,
    slope: f64,
    d: &[f64],
    alpha0: f64,
) -> Option<(f64, f64)> {
    let mut trial = net.clone();
    let mut eval = |alpha: f64| -> f64 {
        for ((p, base), di) in trial.params.iter_mut().zip(&net.params).zip(d) {
            *p = base + alpha * di;
        }
        trial.loss(x.view(), t.view(), eps).unwrap_or(f64::INFINITY)
    };
    let armijo = |alpha: f64, f: f64| f.is_finite() && f <= f0 + ARMIJO_C * alpha * slope;
    // Minimizer of the quadratic with value f0 and slope at 0 through (alpha, f).
    let model_min = |alpha: f64, f: f64| {
        let curv = f - f0 - slope * alpha;
        (f.is_finite() && curv > 0.0).then(|| -slope * alpha * alpha / (2.0 * curv))
    };

    let mut alpha = alpha0;
    let mut f = eval(alpha);
    let mut backtracks = 0;
    while !armijo(alpha, f) {
        backtracks += 1;
        if backtracks > MAX_BACKTRACKS {
            return None;
        }
        let next = model_min(alpha, f).unwrap_or(0.5 * alpha);
        alpha = next.clamp(0.1 * alpha, 0.5 * alpha);
        f = eval(alpha);
    }
    for _ in 0..MAX_EXPANSIONS {
        let next = model_min(alpha, f)
            .unwrap_or(4.0 * alpha)
            .clamp(0.1 * alpha, 8.0 * alpha);
        if (next - alpha).abs() <= 0.1 * alpha {
            break;
        }
        let f_next = eval(next);
        if !(armijo(next, f_next) && f_next < f) {
            break;
        }
        alpha = next;
        f = f_next;
    }
    Some((alpha, f))
}

/// Polak-Ribiere+ conjugate gradient on one batch. Returns the step length
/// of the last accepted line search.
fn cg_batch(
    net: &mut Network,
    x: &ArrayView2<f64>,
    t: &ArrayView2<f64>,
    cfg: &TrainConfig,
    mut alpha: f64,
    epoch: usize,
    batch: usize,
) -> Result<f64, NnError> {
    let (mut f, mut g) = net.gradient(x.view(), t.view(), cfg.eps_clamp)?;
    if !f.is_finite() {
        return Err(NnError::NonFiniteLoss { epoch, batch, loss: f });
    }
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    for k in 0..cfg.cg_iters_per_batch {
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        if slope == 0.0 {
            break;
        }
        let Some((step, f_new)) = line_search(net, x, t, cfg.eps_clamp, f, slope, &d, alpha) else {
            break;
        };
        for (p, di) in net.params.iter_mut().zip(&d) {
            *p += step * di;
        }
        alpha = step;
        if k + 1 == cfg.cg_iters_per_batch {
            break;
        }
        let (f_next, g_new) = net.gradient(x.view(), t.view(), cfg.eps_clamp)?;
        debug_assert!((f_next - f_new).abs() <= 1e-9 * f_new.abs().max(1.0));
        let gg = dot(&g, &g);
        let beta = if (k + 1) % CG_RESTART == 0 || gg == 0.0 {
            0.0
        } else {
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            (dot(&g_new, &y) / gg).max(0.0)
        };
        for (di, gi) in d.iter_mut().zip(&g_new) {
            *di = -gi + beta * *di;
        }
        f = f_next;
        g = g_new;
    }
    Ok(alpha)
}

/// Mini-batch conjugate-gradient training. Rows are reshuffled every epoch
/// from `cfg.seed`. An epoch that raises the full-dataset loss is rolled back,
/// so the curve never increases.
pub fn cg_train(
    net: &mut Network,
    x: ArrayView2<f64>,
    t: ArrayView2<f64>,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<LossCurve, NnError> {
    cfg.check()?;
    if x.nrows() == 0 || x.nrows() != t.nrows() {
        return Err(mismatch(format!("{} nonempty target rows", x.nrows()), t.nrows()));
    }
    if t.ncols() != net.output_dim() {
        return Err(mismatch(format!("{} target columns", net.output_dim()), t.ncols()));
    }
    let initial = net.loss(x.view(), t.view(), cfg.eps_clamp)?;
    if !initial.is_finite() {
        return Err(NnError::NonFiniteLoss { epoch: 0, batch: 0, loss: initial });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut best = initial;
    let mut epochs_out = Vec::with_capacity(epochs);
    let mut alpha = 1.0 / (dot(&net.params, &net.params).sqrt().max(1.0));
    for epoch in 0..epochs {
        let snapshot = net.params.clone();
        order.shuffle(&mut rng);
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows(&x, rows);
            let tb = gather_rows(&t, rows);
            alpha = cg_batch(net, &xb.view(), &tb.view(), cfg, alpha, epoch, batch)?;
        }
        let loss = net.loss(x.view(), t.view(), cfg.eps_clamp)?;
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch, batch: 0, loss });
        }
        if loss <= best {
            best = loss;
        } else {
            net.params = snapshot;
        }
        epochs_out.push(best);
    }
    Ok(LossCurve { initial, epochs: epochs_out })
}

fn check_unit_interval(m: &ArrayView2<f64>) -> Result<(), NnError> {
    if m.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(mismatch("values in [0, 1]", "out-of-range entries"))
    }
}

/// Record of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub stages: Vec<LossCurve>,
    pub finetune: LossCurve,
}

/// Greedy layer-wise pretraining of the `dims` encoder and its mirror
/// decoder, then end-to-end fine-tuning of the reconstruction.
pub fn pretrain_autoencoder(
    data: ArrayView2<f64>,
    dims: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, PretrainReport), NnError> {
    cfg.check()?;
    if data.nrows() == 0 || data.ncols() != dims[0] {
        return Err(mismatch(format!("n x {} data", dims[0]), format!("{:?}", data.dim())));
    }
    check_unit_interval(&data)?;
    let mut codes = data.to_owned();
    let mut encoders = Vec::new();
    let mut decoders = Vec::new();
    let mut stages = Vec::new();
    for (k, w) in dims.windows(2).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64 + 1);
        let mut shallow = Network::init(&[w[0], w[1], w[0]], &mut rng)?;
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64 + 1),
            ..cfg.clone()
        };
        stages.push(cg_train(&mut shallow, codes.view(), codes.view(), cfg.pretrain_epochs, &stage_cfg)?);
        let enc = shallow.slice_layers(0..1);
        codes = enc.forward(codes.view())?;
        encoders.push(enc);
        decoders.push(shallow.slice_layers(1..2));
    }
    decoders.reverse();
    encoders.extend(decoders);
    let mut net = Network::stack(&encoders)?;
    let finetune = cg_train(&mut net, data, data, cfg.finetune_epochs, cfg)?;
    Ok((net, PretrainReport { stages, finetune }))
}

/// Affine map from reach endpoints (m) to `[0, 1]^4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

impl InputNormalization {
    /// Region bounds widened by `margin` on every side, applied to both the
    /// start and the end point.
    pub fn from_region(region: &Region, margin: f64) -> Self {
        let lo = [region.x_min - margin, region.y_min - margin];
        let hi = [region.x_max + margin, region.y_max + margin];
        Self {
            lo: [lo[0], lo[1], lo[0], lo[1]],
            hi: [hi[0], hi[1], hi[0], hi[1]],
        }
    }

    pub fn apply(&self, pair: &ReachPair) -> [f64; 4] {
        let raw = pair.to_array();
        std::array::from_fn(|i| (raw[i] - self.lo[i]) / (self.hi[i] - self.lo[i]))
    }

    pub fn matrix<'a>(&self, pairs: impl IntoIterator<Item = &'a ReachPair>) -> Array2<f64> {
        let rows: Vec<f64> = pairs.into_iter().flat_map(|p| self.apply(p)).collect();
        Array2::from_shape_vec((rows.len() / 4, 4), rows).expect("four columns")
    }
}

/// Retrains the decoder half of a pretrained autoencoder to map normalized
/// reach endpoints `x` (n x 4) to trajectories `t` (n x 300).
pub fn train_decoder(
    pretrained: &Network,
    x: ArrayView2<f64>,
    t: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(Network, LossCurve), NnError> {
    cfg.check()?;
    if pretrained.dims() != AUTOENCODER_DIMS {
        return Err(mismatch(format!("{AUTOENCODER_DIMS:?}"), format!("{:?}", pretrained.dims())));
    }
    let mut net = pretrained.slice_layers(3..6);
    if cfg.fresh_first_layer {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let fresh = Network::init(&DECODER_DIMS[..2], &mut rng)?;
        net.params[..fresh.params.len()].copy_from_slice(&fresh.params);
    }
    let curve = cg_train(&mut net, x, t, cfg.decoder_epochs, cfg)?;
    Ok((net, curve))
}

/// Trained 4-50-150-300 decoder together with its input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachDecoder {
    pub net: Network,
    pub norm: InputNormalization,
}

impl ReachDecoder {
    pub fn new(net: Network, norm: InputNormalization) -> Result<Self, NnError> {
        if net.dims() != DECODER_DIMS {
            return Err(mismatch(format!("{DECODER_DIMS:?}"), format!("{:?}", net.dims())));
        }
        Ok(Self { net, norm })
    }

    pub fn predict(&self, pair: &ReachPair) -> ActivationTrajectory {
        let out = self
            .net
            .forward_one(&self.norm.apply(pair))
            .expect("decoder input is four-dimensional");
        ActivationTrajectory::from_flat(&out).expect("sigmoid outputs lie in [0, 1]")
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        save_weights(&self.net, Some(&self.norm), path)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let (net, norm) = load_weights(path)?;
        let norm = norm.ok_or_else(|| NnError::Format("decoder file lacks input bounds".into()))?;
        Self::new(net, norm)
    }
}

/// Serializes `net` (and optional decoder input bounds) to the versioned
/// little-endian container with a SHA-256 trailer.
pub fn encode_weights(net: &Network, norm: Option<&InputNormalization>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.n_layers() as u32).to_le_bytes());
    for s in net.spans() {
        out.extend_from_slice(&(s.n_in as u32).to_le_bytes());
        out.extend_from_slice(&(s.n_out as u32).to_le_bytes());
        for v in &net.params[s.w..s.b + s.n_out] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match norm {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(n) => {
            out.extend_from_slice(&8u32.to_le_bytes());
            for v in n.lo.iter().chain(&n.hi) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = sha256_bytes(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NnError::Format(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<(Network, Option<InputNormalization>), NnError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(NnError::Format("missing RGNN magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != WEIGHTS_VERSION {
        return Err(NnError::VersionMismatch { found: version });
    }
    if bytes.len() < 12 + 32 {
        return Err(NnError::Format("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if sha256_bytes(body) != trailer {
        return Err(NnError::Format("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    let n_layers = c.u32()? as usize;
    if n_layers == 0 {
        return Err(NnError::Format("no layers".into()));
    }
    let mut dims = Vec::with_capacity(n_layers + 1);
    let mut params = Vec::new();
    for layer in 0..n_layers {
        let n_in = c.u32()? as usize;
        let n_out = c.u32()? as usize;
        if n_in == 0 || n_out == 0 {
            return Err(NnError::Format(format!("layer {layer} has a zero dimension")));
        }
        match dims.last() {
            None => dims.push(n_in),
            Some(&prev) if prev != n_in => {
                return Err(NnError::Format(format!(
                    "layer {layer} input width {n_in} does not match previous output width {prev}"
                )))
            }
            Some(_) => {}
        }
        dims.push(n_out);
        let count = n_out
            .checked_mul(n_in + 1)
            .ok_or_else(|| NnError::Format("layer size overflows".into()))?;
        if count * 8 > body.len() - c.pos {
            return Err(NnError::Format(format!("layer {layer} is truncated")));
        }
        for _ in 0..count {
            params.push(c.f64()?);
        }
    }
    let norm = match c.u32()? {
        0 => None,
        8 => {
            let v: Vec<f64> = (0..8).map(|_| c.f64()).collect::<Result<_, _>>()?;
            Some(InputNormalization {
                lo: v[..4].try_into().expect("4"),
                hi: v[4..].try_into().expect("4"),
            })
        }
        n => return Err(NnError::Format(format!("unexpected input-bound count {n}"))),
    };
    if c.pos != body.len() {
        return Err(NnError::Format(format!("{} trailing bytes", body.len() - c.pos)));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(NnError::Format("non-finite parameter".into()));
    }
    Ok((Network::from_params(&dims, params)?, norm))
}

pub fn save_weights(net: &Network, norm: Option<&InputNormalization>, path: &Path) -> Result<(), NnError> {
    fs::write(path, encode_weights(net, norm))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(Network, Option<InputNormalization>), NnError> {
    decode_weights(&fs::read(path)?)
}

/// Builds an `n x d` matrix from equal-length rows.
pub fn rows_to_matrix<I, R>(rows: I, d: usize) -> Array2<f64>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let flat: Vec<f64> = rows
        .into_iter()
        .flat_map(|r| r.as_ref().to_vec())
        .collect();
    Array2::from_shape_vec((flat.len() / d, d), flat).expect("rows have d columns")
}

pub fn column_means(m: ArrayView2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).expect("nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| r.random_range(lo..hi))
    }

    #[test]
    fn zero_net_outputs_half() {
        let net = Network::zeros(&DECODER_DIMS).unwrap();
        let y = net.forward_one(&[0.3, 0.1, 0.9, 0.2]).unwrap();
        assert_eq!(y.len(), 300);
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let mut r = rng(1);
        let net = Network::init(&[4, 7, 5], &mut r).unwrap();
        let x = random_matrix(&mut r, 6, 4, 0.0, 1.0);
        let y = net.forward(x.view()).unwrap();
        for i in 0..6 {
            let single = net.forward_one(x.row(i).as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::zeros(&[4, 3]).unwrap();
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(net.forward(x.view()), Err(NnError::DimensionMismatch { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let eps = 1e-12;
        let half = Array2::from_elem((1, 300), 0.5);
        let t = Array2::from_shape_fn((1, 300), |(_, j)| (j % 7) as f64 / 7.0);
        let l = cross_entropy(half.view(), t.view(), eps).unwrap();
        assert!((l - 300.0 * 2f64.ln()).abs() < 1e-9);

        let hard = Array2::from_shape_fn((1, 300), |(_, j)| (j % 2) as f64);
        let l = cross_entropy(hard.view(), hard.view(), eps).unwrap();
        assert!((l - 300.0 * -(1.0 - eps).ln()).abs() < 1e-12);

        let l = cross_entropy(array![[1.0 - eps]].view(), array![[0.0]].view(), eps).unwrap();
        assert!((l + eps.ln()).abs() < 1e-3 && l.is_finite());

        assert!(cross_entropy(half.view(), array![[0.5]].view(), eps).is_err());
    }

    #[test]
    fn output_gradient_vanishes_on_exact_hard_targets() {
        // Saturated last layer: huge bias gives outputs of exactly 0 or 1.
        let mut net = Network::zeros(&[2, 3]).unwrap();
        let b = 6;
        net.params[b..b + 3].copy_from_slice(&[800.0, -800.0, 800.0]);
        let x = array![[0.2, 0.4]];
        let t = array![[1.0, 0.0, 1.0]];
        let (_, g) = net.gradient(x.view(), t.view(), 1e-12).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    /// Central differences of the loss with a step scaled to the parameter.
    fn fd_gradient(net: &Network, x: &Array2<f64>, t: &Array2<f64>) -> Vec<f64> {
        let mut probe = net.clone();
        (0..net.params.len())
            .map(|i| {
                let p = net.params[i];
                let h = 1e-5 * p.abs().max(1.0);
                probe.params[i] = p + h;
                let up = probe.loss(x.view(), t.view(), 1e-12).unwrap();
                probe.params[i] = p - h;
                let down = probe.loss(x.view(), t.view(), 1e-12).unwrap();
                probe.params[i] = p;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(5);
        let net = Network::init(&[4, 3, 2], &mut r).unwrap();
        let x = random_matrix(&mut r, 5, 4, 0.0, 1.0);
        let t = random_matrix(&mut r, 5, 2, 0.0, 1.0);
        let (_, g) = net.gradient(x.view(), t.view(), 1e-12).unwrap();
        for (a, b) in g.iter().zip(fd_gradient(&net, &x, &t)) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn duplicated_rows_leave_gradient_unchanged() {
        let mut r = rng(9);
        let net = Network::init(&[3, 4, 2], &mut r).unwrap();
        let x = random_matrix(&mut r, 4, 3, 0.0, 1.0);
        let t = random_matrix(&mut r, 4, 2, 0.0, 1.0);
        let dup = |m: &Array2<f64>| {
            let idx: Vec<usize> = (0..m.nrows()).flat_map(|i| [i, i]).collect();
            m.select(Axis(0), &idx)
        };
        let (l1, g1) = net.gradient(x.view(), t.view(), 1e-12).unwrap();
        let (l2, g2) = net.gradient(dup(&x).view(), dup(&t).view(), 1e-12).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn toy_targets(r: &mut ChaCha8Rng, n: usize) -> (Array2<f64>, Array2<f64>) {
        let x = random_matrix(r, n, 4, 0.0, 1.0);
        let t = Array2::from_shape_fn((n, TRAJ_DIM), |(i, j)| {
            let phase = (j / 6) as f64 / 50.0 * std::f64::consts::PI;
            0.05 + 0.1 * (x[[i, j % 4]] * phase.sin()).powi(2)
        });
        (x, t)
    }

    #[test]
    fn decoder_memorizes_small_set() {
        let mut r = rng(11);
        let (x, t) = toy_targets(&mut r, 10);
        let mut net = Network::init(&DECODER_DIMS, &mut r).unwrap();
        let cfg = TrainConfig::default();
        let curve = cg_train(&mut net, x.view(), t.view(), 200, &cfg).unwrap();
        let floor = entropy_floor(t.view());
        assert!(curve.last() <= 1.01 * floor, "{} vs floor {floor}", curve.last());
        assert!(curve.epochs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_noop() {
        let mut r = rng(12);
        let (x, t) = toy_targets(&mut r, 30);
        let base = Network::init(&DECODER_DIMS, &mut r).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut a = base.clone();
        let mut b = base.clone();
        let ca = cg_train(&mut a, x.view(), t.view(), 5, &cfg).unwrap();
        let cb = cg_train(&mut b, x.view(), t.view(), 5, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        let mut c = base.clone();
        cg_train(&mut c, x.view(), t.view(), 0, &cfg).unwrap();
        assert_eq!(c, base);
    }

    #[test]
    fn pretraining_builds_mirrored_stack() {
        let mut r = rng(13);
        let data = random_matrix(&mut r, 20, 12, 0.0, 0.3);
        let cfg = TrainConfig {
            pretrain_epochs: 3,
            finetune_epochs: 3,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (net, report) = pretrain_autoencoder(data.view(), &[12, 6, 2], &cfg).unwrap();
        assert_eq!(net.dims(), &[12, 6, 2, 6, 12]);
        assert_eq!(report.stages.len(), 2);
        assert!(report.finetune.last() <= report.finetune.initial);
    }

    #[test]
    fn single_repeated_trajectory_is_reconstructed() {
        let mut r = rng(14);
        let row: Vec<f64> = (0..TRAJ_DIM).map(|_| r.random_range(0.0..0.2)).collect();
        let data = rows_to_matrix(std::iter::repeat_n(&row, 20), TRAJ_DIM);
        let cfg = TrainConfig {
            pretrain_epochs: 10,
            finetune_epochs: 40,
            ..TrainConfig::default()
        };
        let (net, _) = pretrain_autoencoder(data.view(), &AUTOENCODER_DIMS[..4], &cfg).unwrap();
        let y = net.forward(data.view()).unwrap();
        let rms = ((&y - &data).mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    #[test]
    fn decoder_requires_autoencoder_shape() {
        let net = Network::zeros(&[4, 3]).unwrap();
        let x = Array2::<f64>::zeros((1, 4));
        let t = Array2::<f64>::zeros((1, 300));
        assert!(matches!(
            train_decoder(&net, x.view(), t.view(), &TrainConfig::default()),
            Err(NnError::DimensionMismatch { .. })
        ));
    }

    fn sample_decoder() -> ReachDecoder {
        let net = Network::init(&DECODER_DIMS, &mut rng(15)).unwrap();
        ReachDecoder::new(net, InputNormalization::from_region(&Region::default(), 0.10)).unwrap()
    }

    #[test]
    fn predict_shape_and_continuity() {
        let dec = sample_decoder();
        let pair = ReachPair::new(0.05, 0.3, 0.1, 0.35);
        let a = dec.predict(&pair);
        assert_eq!(a.steps(), 50);
        assert!(a.flatten().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, dec.predict(&pair));
        let b = dec.predict(&ReachPair::new(0.05 + 1e-13, 0.3, 0.1, 0.35));
        for (u, v) in a.flatten().iter().zip(b.flatten()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_maps_region_into_unit_box() {
        let norm = InputNormalization::from_region(&Region::default(), 0.10);
        let lo = norm.apply(&ReachPair::new(-0.35, 0.15, -0.35, 0.15));
        let hi = norm.apply(&ReachPair::new(0.35, 0.55, 0.35, 0.55));
        for v in lo {
            assert!(v.abs() < 1e-12);
        }
        for v in hi {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rgnn");
        let dec = sample_decoder();
        dec.save(&path).unwrap();
        let back = ReachDecoder::load(&path).unwrap();
        assert_eq!(
            dec.net.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.net.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back, dec);
    }

    fn resealed(mut body: Vec<u8>) -> Vec<u8> {
        let d = sha256_bytes(&body);
        body.extend_from_slice(&d);
        body
    }

    #[test]
    fn mismatched_dims_are_a_format_error() {
        let net = Network::zeros(&[3, 2, 2]).unwrap();
        let mut bytes = encode_weights(&net, None);
        bytes.truncate(bytes.len() - 32);
        // Second layer header sits after the first layer's 8 (=2*(3+1)) values.
        let second = 12 + 8 + 8 * 8;
        bytes[second..second + 4].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_weights(&resealed(bytes)), Err(NnError::Format(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let net = Network::zeros(&[3, 2]).unwrap();
        let mut bytes = encode_weights(&net, None);
        bytes.truncate(bytes.len() - 32);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_weights(&resealed(bytes)),
            Err(NnError::VersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let net = Network::init(&[3, 2], &mut rng(2)).unwrap();
        let mut bytes = encode_weights(&net, None);
        bytes[20] ^= 1;
        assert!(matches!(decode_weights(&bytes), Err(NnError::Format(_))));
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_interval(seed in 0u64..1000, scale in 0.0f64..50.0) {
            let mut r = rng(seed);
            let net = Network::init(&[4, 6, 3], &mut r).unwrap();
            let x = random_matrix(&mut r, 3, 4, -scale, scale);
            let y = net.forward(x.view()).unwrap();
            prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn loss_never_below_entropy_floor(seed in 0u64..1000) {
            let mut r = rng(seed);
            let p = random_matrix(&mut r, 4, 5, 0.0, 1.0);
            let t = random_matrix(&mut r, 4, 5, 0.0, 1.0);
            let eps: f64 = 1e-12;
            let bound = entropy_floor(t.view()) - 5.0 * (1.0 - eps).ln();
            prop_assert!(cross_entropy(p.view(), t.view(), eps).unwrap() >= bound - 1e-9);
        }
    }
}
