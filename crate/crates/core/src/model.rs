//! Tiny fully convolutional density regressor.
//!
//! ```text
//! conv1 3x3 s1 (1->16) relu
//! conv2 3x3 s2 (16->16) relu
//! conv3 3x3 s2 (16->8) relu   -> features, stride 4
//! head  1x1    (8->1)  relu   -> density, stride 4
//! ```
//!
//! Gradients are written out by hand; the ReLU derivative at zero is zero.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::Image;
use crate::density::DensityMap;
use crate::error::{validation, Error, Result};
use crate::losses::{bdf_loss_grad, LossBreakdown, LossConfig, ModelViews, OtStats};
use crate::ot::CostMatrix;

/// Input pixels per output cell along each axis.
pub const OUTPUT_STRIDE: usize = 4;
pub const FEATURE_CHANNELS: usize = 8;

/// Channel-major activation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(validation!(
                "feature buffer has {} entries, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape3(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered parameter set: `[conv1.weight, conv1.bias, ..., head.bias]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

struct LayerSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
}

const LAYERS: [LayerSpec; 4] = [
    LayerSpec {
        name: "conv1",
        cin: 1,
        cout: 16,
        kernel: 3,
        stride: 1,
    },
    LayerSpec {
        name: "conv2",
        cin: 16,
        cout: 16,
        kernel: 3,
        stride: 2,
    },
    LayerSpec {
        name: "conv3",
        cin: 16,
        cout: FEATURE_CHANNELS,
        kernel: 3,
        stride: 2,
    },
    LayerSpec {
        name: "head",
        cin: FEATURE_CHANNELS,
        cout: 1,
        kernel: 1,
        stride: 1,
    },
];

impl Params {
    fn layout() -> Vec<(String, Vec<usize>)> {
        LAYERS
            .iter()
            .flat_map(|l| {
                [
                    (
                        format!("{}.weight", l.name),
                        vec![l.cout, l.cin, l.kernel, l.kernel],
                    ),
                    (format!("{}.bias", l.name), vec![l.cout]),
                ]
            })
            .collect()
    }

    pub fn zeros() -> Self {
        let tensors = Self::layout()
            .into_iter()
            .map(|(name, shape)| Tensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Self { tensors }
    }

    /// Uniform weights in `±sqrt(6 / fan_in)` and zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for (layer, pair) in LAYERS.iter().zip(p.tensors.chunks_mut(2)) {
            let fan_in = (layer.cin * layer.kernel * layer.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for w in pair[0].data.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Flat view in tensor order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn value_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("parameter index out of range");
    }

    fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    fn check_layout(&self) -> Result<()> {
        let expected = Self::layout();
        if expected.len() != self.tensors.len()
            || expected.iter().zip(&self.tensors).any(|((n, s), t)| {
                n != &t.name || s != &t.shape || t.data.len() != s.iter().product::<usize>()
            })
        {
            return Err(validation!(
                "parameter set does not match the regressor layout"
            ));
        }
        Ok(())
    }
}

/// Activations kept for the backward pass of one image.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    dims: [(usize, usize); 5],
    /// Pre-activations of each layer.
    pub pre: [Vec<f64>; 4],
    /// Post-activations of each layer.
    pub post: [Vec<f64>; 4],
}

impl Trace {
    pub fn features(&self) -> FeatureMap {
        let (h, w) = self.dims[3];
        FeatureMap {
            channels: FEATURE_CHANNELS,
            height: h,
            width: w,
            data: self.post[2].clone(),
        }
    }

    pub fn density(&self) -> DensityMap {
        let (h, w) = self.dims[4];
        DensityMap::from_vec(h, w, OUTPUT_STRIDE, self.post[3].clone())
            .expect("relu output is non-negative")
    }

    /// Smallest |pre-activation| over the network, used to avoid ReLU kinks.
    pub fn kink_margin(&self) -> f64 {
        self.pre
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

fn conv_out(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// Output indices `o` such that `o*stride + k - pad` lies in `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // o*stride + k - pad <= n - 1  ->  o <= (n - 1 + pad - k) / stride
    let hi = if n + pad > k {
        ((n - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    (h, w): (usize, usize),
    weight: &[f64],
    bias: &[f64],
    layer: &LayerSpec,
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    let (k, s, pad) = (layer.kernel, layer.stride, layer.kernel / 2);
    for co in 0..layer.cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias[co]);
        for ci in 0..layer.cin {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(h, oh, ky, pad, s);
                for kx in 0..k {
                    let wv = weight[((co * layer.cin + ci) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(w, ow, kx, pad, s);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    (h, w): (usize, usize),
    weight: &[f64],
    layer: &LayerSpec,
    (oh, ow): (usize, usize),
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let (k, s, pad) = (layer.kernel, layer.stride, layer.kernel / 2);
    let mut d_input = d_input;
    for co in 0..layer.cout {
        let g = &d_out[co * oh * ow..(co + 1) * oh * ow];
        d_bias[co] += g.iter().sum::<f64>();
        for ci in 0..layer.cin {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = valid_range(h, oh, ky, pad, s);
                for kx in 0..k {
                    let widx = ((co * layer.cin + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (x0, x1) = valid_range(w, ow, kx, pad, s);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let grow = &g[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            acc += grow[ox] * row[ox * s + kx - pad];
                        }
                    }
                    d_weight[widx] += acc;
                    if let Some(din) = d_input.as_deref_mut() {
                        let dplane = &mut din[ci * h * w..(ci + 1) * h * w];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - pad;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let drow = &mut dplane[iy * w..(iy + 1) * w];
                            for ox in x0..x1 {
                                drow[ox * s + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_image(image: &Image) -> Result<()> {
    let (h, w) = image.shape();
    if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(validation!(
            "model input must be a non-empty multiple of {OUTPUT_STRIDE} on both axes, got {h}x{w}"
        ));
    }
    Ok(())
}

fn trace_forward(params: &Params, image: &Image) -> Result<Trace> {
    check_image(image)?;
    let mut dims = [(0, 0); 5];
    dims[0] = image.shape();
    let mut pre: [Vec<f64>; 4] = Default::default();
    let mut post: [Vec<f64>; 4] = Default::default();
    for (l, layer) in LAYERS.iter().enumerate() {
        let (h, w) = dims[l];
        let out_dims = (
            conv_out(h, layer.kernel, layer.stride),
            conv_out(w, layer.kernel, layer.stride),
        );
        dims[l + 1] = out_dims;
        let input = if l == 0 {
            image.as_slice()
        } else {
            &post[l - 1]
        };
        let mut z = vec![0.0; layer.cout * out_dims.0 * out_dims.1];
        conv_forward(
            input,
            (h, w),
            &params.tensors[2 * l].data,
            &params.tensors[2 * l + 1].data,
            layer,
            out_dims,
            &mut z,
        );
        post[l] = z.iter().map(|v| v.max(0.0)).collect();
        pre[l] = z;
    }
    Ok(Trace {
        input: image.as_slice().to_vec(),
        dims,
        pre,
        post,
    })
}

/// Parameter gradient for one traced image.
fn trace_backward(
    params: &Params,
    trace: &Trace,
    d_density: &[f64],
    d_features: Option<&[f64]>,
) -> Params {
    let mut grads = Params::zeros();
    let mut upstream = d_density.to_vec();
    for l in (0..LAYERS.len()).rev() {
        let layer = &LAYERS[l];
        if l == 2 {
            if let Some(df) = d_features {
                for (u, d) in upstream.iter_mut().zip(df) {
                    *u += d;
                }
            }
        }
        for (u, z) in upstream.iter_mut().zip(&trace.pre[l]) {
            if *z <= 0.0 {
                *u = 0.0;
            }
        }
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.post[l - 1]
        };
        let mut d_input = (l > 0).then(|| vec![0.0; input.len()]);
        let (dw, db) = grads.tensors.split_at_mut(2 * l + 1);
        conv_backward(
            input,
            trace.dims[l],
            &params.tensors[2 * l].data,
            layer,
            trace.dims[l + 1],
            &upstream,
            &mut dw[2 * l].data,
            &mut db[0].data,
            d_input.as_deref_mut(),
        );
        if let Some(d) = d_input {
            upstream = d;
        }
    }
    grads
}

/// Features and densities for a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Vec<FeatureMap>,
    pub density: Vec<DensityMap>,
}

fn batch_forward(params: &Params, images: &[Image]) -> Result<ForwardOutput> {
    if images.is_empty() {
        return Err(validation!("forward needs at least one image"));
    }
    let mut features = Vec::with_capacity(images.len());
    let mut density = Vec::with_capacity(images.len());
    for image in images {
        let t = trace_forward(params, image)?;
        features.push(t.features());
        density.push(t.density());
    }
    Ok(ForwardOutput { features, density })
}

/// Student network; the only mutable model in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRegressor {
    params: Params,
    seed: u64,
}

impl DensityRegressor {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Params::init(seed),
            seed,
        }
    }

    pub fn from_params(params: Params, seed: u64) -> Result<Self> {
        params.check_layout()?;
        Ok(Self { params, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(&self, images: &[Image]) -> Result<ForwardOutput> {
        batch_forward(&self.params, images)
    }

    pub fn trace(&self, image: &Image) -> Result<Trace> {
        trace_forward(&self.params, image)
    }

    /// Predicted count (density mass) per image.
    pub fn predict_counts(&self, images: &[Image]) -> Result<Vec<f64>> {
        Ok(self
            .forward(images)?
            .density
            .iter()
            .map(|d| d.mass())
            .collect())
    }

    pub fn snapshot(&self, taken_after_domain: usize) -> FrozenSnapshot {
        FrozenSnapshot {
            params: self.params.clone(),
            taken_after_domain,
        }
    }

    /// Objective value and parameter gradient without updating anything.
    pub fn loss_and_grad(
        &self,
        batch: &TrainBatch,
        teacher: Option<&FrozenSnapshot>,
        cfg: &LossConfig,
        cost: &CostMatrix,
    ) -> Result<(LossBreakdown, OtStats, Params)> {
        batch.validate()?;
        let traces = batch
            .images
            .iter()
            .map(|img| self.trace(img))
            .collect::<Result<Vec<_>>>()?;
        let output: Vec<DensityMap> = traces.iter().map(Trace::density).collect();
        let features: Vec<FeatureMap> = traces.iter().map(Trace::features).collect();
        let student = ModelViews {
            output: &output,
            features: &features,
        };

        let teacher_out = match teacher {
            Some(t) if cfg.distill_output || cfg.distill_feature => Some(t.forward(&batch.images)?),
            _ => None,
        };
        let teacher_views = teacher_out.as_ref().map(|o| ModelViews {
            output: &o.density,
            features: &o.features,
        });

        let lg = bdf_loss_grad(&batch.targets, teacher_views, student, cfg, cost)?;
        if !lg.breakdown.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite loss {:?}; lower the learning rate or raise the sinkhorn eps",
                lg.breakdown
            )));
        }
        let mut grads = Params::zeros();
        for (b, trace) in traces.iter().enumerate() {
            let df = lg.d_features.get(b).map(|v| v.as_slice());
            grads.add_assign(&trace_backward(&self.params, trace, &lg.d_output[b], df));
        }
        Ok((lg.breakdown, lg.ot_stats, grads))
    }

    /// One optimizer update; returns the loss measured before the update.
    pub fn train_step(
        &mut self,
        opt: &mut OptimizerState,
        batch: &TrainBatch,
        teacher: Option<&FrozenSnapshot>,
        cfg: &LossConfig,
        cost: &CostMatrix,
    ) -> Result<(LossBreakdown, OtStats)> {
        let (breakdown, stats, grads) = self.loss_and_grad(batch, teacher, cfg, cost)?;
        opt.step(&mut self.params, &grads)?;
        Ok((breakdown, stats))
    }
}

/// Frozen copy of a trained model used as the distillation teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSnapshot {
    params: Params,
    taken_after_domain: usize,
}

impl FrozenSnapshot {
    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Index (1-based) of the domain whose training produced this snapshot.
    pub fn taken_after_domain(&self) -> usize {
        self.taken_after_domain
    }

    pub fn forward(&self, images: &[Image]) -> Result<ForwardOutput> {
        batch_forward(&self.params, images)
    }

    /// Little-endian bytes of every parameter, for equality audits.
    pub fn fingerprint(&self) -> Vec<u8> {
        self.params.values().flat_map(f64::to_le_bytes).collect()
    }
}

/// Images and stride-4 targets from a single domain.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Vec<Image>,
    pub targets: Vec<DensityMap>,
    /// Domain the samples were drawn from.
    pub domain: usize,
}

impl TrainBatch {
    fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.targets.len() {
            return Err(validation!(
                "batch has {} images and {} targets",
                self.images.len(),
                self.targets.len()
            ));
        }
        for (img, t) in self.images.iter().zip(&self.targets) {
            check_image(img)?;
            let (h, w) = img.shape();
            if t.shape() != (h / OUTPUT_STRIDE, w / OUTPUT_STRIDE) {
                return Err(validation!(
                    "target {:?} does not match model output for {h}x{w} input",
                    t.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Params,
    second: Params,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Params::zeros(),
            second: Params::zeros(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(
                "non-finite gradient; lower the learning rate or raise the sinkhorn eps".into(),
            ));
        }
        let c = &self.config;
        self.step += 1;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.first.tensors)
            .zip(&mut self.second.tensors)
        {
            for i in 0..p.data.len() {
                let grad = g.data[i] + c.weight_decay * p.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * grad;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = m.data[i] / bias1;
                let v_hat = v.data[i] / bias2;
                p.data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON sidecar describing a binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    pub step: usize,
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (raw little-endian f64 values in tensor order) and a
/// sibling `.json` manifest.
pub fn save_checkpoint(model: &DensityRegressor, step: usize, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = model.params.values().flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let manifest = CheckpointManifest {
        tensors: model
            .params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        seed: model.seed,
        step,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = manifest_path(path);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DensityRegressor, CheckpointManifest)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let total: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 8 {
        return Err(Error::parse(
            path,
            format!(
                "expected {} bytes for {total} values, found {}",
                total * 8,
                bytes.len()
            ),
        ));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = manifest
        .tensors
        .iter()
        .map(|t| Tensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: values.by_ref().take(t.shape.iter().product()).collect(),
        })
        .collect();
    let model = DensityRegressor::from_params(Params { tensors }, manifest.seed)
        .map_err(|e| Error::parse(path, e))?;
    Ok((model, manifest))
}
