//! A small convolutional classifier with hand-written backpropagation.
//!
//! Every stage is a 3×3 convolution (zero padding 1, with bias), ReLU and a
//! 2×2 max-pool; a fully connected layer maps the flattened features to class
//! logits. All arithmetic is `f64`.
//!
//! Parameters live in one flat vector, stage by stage:
//! `[w(F,C,3,3), b(F)]` per stage, then `[w(K,D), b(K)]` for the classifier.
//! A filter's index set is its kernel slice plus its bias entry.

use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::FilterMeta;

const KERNEL: usize = 3;
const KK: usize = KERNEL * KERNEL;

/// Shape of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    /// Height and width of the (square) input.
    pub input_size: usize,
    /// Filter count per convolution stage.
    pub stages: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    in_channels: usize,
    filters: usize,
    size: usize,
    weight_offset: usize,
    bias_offset: usize,
    first_filter: usize,
}

impl Architecture {
    /// 1×16×16 input, stages of 8/16/32 filters, 4 classes.
    pub fn standard() -> Self {
        Architecture {
            input_channels: 1,
            input_size: 16,
            stages: vec![8, 16, 32],
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.stages.len() as u32;
        if self.input_channels == 0 || self.num_classes == 0 || self.stages.is_empty() {
            return Err(Error::Config(
                "architecture needs channels, classes and stages".into(),
            ));
        }
        if self.stages.contains(&0) {
            return Err(Error::Config("every stage needs at least one filter".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(2usize.pow(depth)) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 2^{depth}",
                self.input_size
            )));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<Stage> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut offset = 0;
        let mut in_channels = self.input_channels;
        let mut size = self.input_size;
        let mut first_filter = 0;
        for &filters in &self.stages {
            let weight_offset = offset;
            let bias_offset = weight_offset + filters * in_channels * KK;
            out.push(Stage {
                in_channels,
                filters,
                size,
                weight_offset,
                bias_offset,
                first_filter,
            });
            offset = bias_offset + filters;
            in_channels = filters;
            size /= 2;
            first_filter += filters;
        }
        out
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_size * self.input_size
    }

    pub fn feature_len(&self) -> usize {
        let side = self.input_size >> self.stages.len();
        self.stages.last().copied().unwrap_or(0) * side * side
    }

    fn fc_offset(&self) -> usize {
        let last = *self.layout().last().expect("validated");
        last.bias_offset + last.filters
    }

    pub fn num_params(&self) -> usize {
        self.fc_offset() + self.num_classes * self.feature_len() + self.num_classes
    }

    pub fn num_filters(&self) -> usize {
        self.stages.iter().sum()
    }

    /// Layer group label of a stage (`conv1`, `conv2`, …).
    pub fn group_name(stage: usize) -> String {
        format!("conv{}", stage + 1)
    }

    pub fn last_group(&self) -> String {
        Self::group_name(self.stages.len() - 1)
    }

    pub fn filter_meta(&self) -> Vec<FilterMeta> {
        self.layout()
            .iter()
            .enumerate()
            .flat_map(|(s, st)| {
                (0..st.filters).map(move |f| FilterMeta {
                    filter_id: st.first_filter + f,
                    layer_name: format!("stage{}.conv", s + 1),
                    layer_group: Self::group_name(s),
                    num_params: st.in_channels * KK + 1,
                })
            })
            .collect()
    }

    /// Kernel range and bias index of filter `j` in the flat parameter vector.
    pub fn filter_params(&self, j: usize) -> Result<(Range<usize>, usize)> {
        for st in self.layout() {
            if j < st.first_filter + st.filters {
                let f = j - st.first_filter;
                let per = st.in_channels * KK;
                let start = st.weight_offset + f * per;
                return Ok((start..start + per, st.bias_offset + f));
            }
        }
        Err(Error::Index {
            index: j,
            len: self.num_filters(),
        })
    }
}

/// Logits and softmax confidences for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Highest-confidence class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

struct StageCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<usize>,
}

struct ForwardCache {
    stages: Vec<StageCache>,
    features: Vec<f64>,
    logits: Vec<f64>,
}

/// Loss gradient with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub values: Vec<f64>,
}

/// Network weights together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    arch: Architecture,
    params: Vec<f64>,
}

impl ToyCnn {
    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Shape {
                expected: arch.num_params(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite network parameter".into()));
        }
        Ok(ToyCnn { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Self::from_params(arch, vec![0.0; n])
    }

    /// He-normal kernels, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.num_params()];
        for st in arch.layout() {
            let fan_in = (st.in_channels * KK) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for p in &mut params[st.weight_offset..st.bias_offset] {
                *p = normal.sample(&mut rng);
            }
        }
        let fc = arch.fc_offset();
        let d = arch.feature_len();
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        for p in &mut params[fc..fc + arch.num_classes * d] {
            *p = normal.sample(&mut rng);
        }
        Self::from_params(arch, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_filters(&self) -> usize {
        self.arch.num_filters()
    }

    fn check_input(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.arch.input_len() {
            return Err(Error::Shape {
                expected: self.arch.input_len(),
                actual: image.len(),
            });
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite input pixel".into()));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label < self.arch.num_classes {
            Ok(())
        } else {
            Err(Error::Index {
                index: label,
                len: self.arch.num_classes,
            })
        }
    }

    fn run(&self, image: &[f64]) -> ForwardCache {
        let mut x = image.to_vec();
        let mut stages = Vec::with_capacity(self.arch.stages.len());
        for st in self.arch.layout() {
            let pre = conv_forward(&x, &st, &self.params);
            let (pooled, argmax) = relu_pool_forward(&pre, st.filters, st.size);
            stages.push(StageCache {
                input: std::mem::replace(&mut x, pooled),
                pre,
                argmax,
            });
        }
        let features = x;
        let (k, d) = (self.arch.num_classes, features.len());
        let fc = self.arch.fc_offset();
        let w = &self.params[fc..fc + k * d];
        let b = &self.params[fc + k * d..fc + k * d + k];
        let logits = (0..k)
            .map(|c| b[c] + dot(&w[c * d..(c + 1) * d], &features))
            .collect();
        ForwardCache {
            stages,
            features,
            logits,
        }
    }

    pub fn forward(&self, image: &[f64]) -> Result<Prediction> {
        self.check_input(image)?;
        let logits = self.run(image).logits;
        let probs = softmax(&logits);
        Ok(Prediction { logits, probs })
    }

    pub fn loss(&self, image: &[f64], label: usize) -> Result<f64> {
        self.check_input(image)?;
        self.check_label(label)?;
        Ok(cross_entropy(&self.run(image).logits, label))
    }

    /// Cross-entropy gradient for one labelled input.
    pub fn backward(&self, image: &[f64], label: usize) -> Result<Gradient> {
        self.check_input(image)?;
        self.check_label(label)?;
        let cache = self.run(image);
        let mut grad = vec![0.0; self.params.len()];

        let mut dlogits = softmax(&cache.logits);
        dlogits[label] -= 1.0;

        let (k, d) = (self.arch.num_classes, cache.features.len());
        let fc = self.arch.fc_offset();
        let mut dfeat = vec![0.0; d];
        for c in 0..k {
            let g = dlogits[c];
            let row = fc + c * d;
            for i in 0..d {
                grad[row + i] += g * cache.features[i];
                dfeat[i] += g * self.params[row + i];
            }
            grad[fc + k * d + c] += g;
        }

        let layout = self.arch.layout();
        let mut dout = dfeat;
        for (st, sc) in layout.iter().zip(&cache.stages).rev() {
            let mut dpre = vec![0.0; sc.pre.len()];
            for (o, &src) in sc.argmax.iter().enumerate() {
                if sc.pre[src] > 0.0 {
                    dpre[src] += dout[o];
                }
            }
            dout = conv_backward(&sc.input, &dpre, st, &self.params, &mut grad);
        }
        Ok(Gradient {
            loss: cross_entropy(&cache.logits, label),
            values: grad,
        })
    }

    /// Mean absolute gradient over each filter's kernel and bias.
    pub fn profile_from_gradient(&self, grad: &[f64]) -> Vec<f64> {
        (0..self.num_filters())
            .map(|j| {
                let (kernel, bias) = self.arch.filter_params(j).expect("in range");
                let n = kernel.len() + 1;
                let sum: f64 = grad[kernel].iter().map(|g| g.abs()).sum::<f64>() + grad[bias].abs();
                sum / n as f64
            })
            .collect()
    }

    pub fn filter_saliency_profile(&self, image: &[f64], label: usize) -> Result<Vec<f64>> {
        let grad = self.backward(image, label)?;
        Ok(self.profile_from_gradient(&grad.values))
    }

    fn check_filters(&self, filter_ids: &[usize]) -> Result<()> {
        match filter_ids.iter().find(|&&j| j >= self.num_filters()) {
            Some(&j) => Err(Error::Index {
                index: j,
                len: self.num_filters(),
            }),
            None => Ok(()),
        }
    }

    /// Copy with the named filters' kernels and biases set to zero.
    pub fn zero_filters(&self, filter_ids: &[usize]) -> Result<ToyCnn> {
        self.check_filters(filter_ids)?;
        let mut out = self.clone();
        for &j in filter_ids {
            let (kernel, bias) = self.arch.filter_params(j)?;
            out.params[kernel].fill(0.0);
            out.params[bias] = 0.0;
        }
        Ok(out)
    }

    /// Copy with `θ ← θ - lr·grad` applied to the named filters only.
    pub fn apply_update(&self, grad: &[f64], filter_ids: &[usize], lr: f64) -> Result<ToyCnn> {
        self.check_filters(filter_ids)?;
        if grad.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                actual: grad.len(),
            });
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        let mut out = self.clone();
        let mut touched = vec![false; self.num_filters()];
        for &j in filter_ids {
            if std::mem::replace(&mut touched[j], true) {
                continue;
            }
            let (kernel, bias) = self.arch.filter_params(j)?;
            for i in kernel.chain(std::iter::once(bias)) {
                out.params[i] = self.params[i] - lr * grad[i];
            }
        }
        Ok(out)
    }

    /// One gradient step on the named filters, gradient taken at `self`.
    pub fn one_step_finetune(
        &self,
        image: &[f64],
        label: usize,
        filter_ids: &[usize],
        lr: f64,
    ) -> Result<ToyCnn> {
        self.check_filters(filter_ids)?;
        let grad = self.backward(image, label)?;
        self.apply_update(&grad.values, filter_ids, lr)
    }

    /// Post-ReLU convolution outputs of every stage (before pooling), one
    /// `filters × size × size` block per stage.
    pub fn conv_activations(&self, image: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(image)?;
        Ok(self
            .run(image)
            .stages
            .into_iter()
            .map(|s| s.pre.into_iter().map(|v| v.max(0.0)).collect())
            .collect())
    }

    /// Active ReLU set and pooling winners. Two parameter settings with the
    /// same signature lie in the same piece of the network's piecewise-smooth
    /// loss surface.
    pub fn activation_signature(&self, image: &[f64]) -> Result<Vec<usize>> {
        self.check_input(image)?;
        let cache = self.run(image);
        let mut sig = Vec::new();
        for s in &cache.stages {
            sig.extend(s.pre.iter().map(|&v| usize::from(v > 0.0)));
            sig.extend_from_slice(&s.argmax);
        }
        Ok(sig)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(x: &[f64], st: &Stage, params: &[f64]) -> Vec<f64> {
    let (c_in, n, size) = (st.in_channels, st.filters, st.size);
    let w = &params[st.weight_offset..st.bias_offset];
    let b = &params[st.bias_offset..st.bias_offset + n];
    let mut out = vec![0.0; n * size * size];
    for f in 0..n {
        let plane = &mut out[f * size * size..(f + 1) * size * size];
        plane.fill(b[f]);
        for c in 0..c_in {
            let kernel = &w[(f * c_in + c) * KK..(f * c_in + c + 1) * KK];
            let input = &x[c * size * size..(c + 1) * size * size];
            for di in 0..KERNEL {
                for dj in 0..KERNEL {
                    let k = kernel[di * KERNEL + dj];
                    for i in 0..size {
                        let ii = i + di;
                        if ii < 1 || ii > size {
                            continue;
                        }
                        let row_in = &input[(ii - 1) * size..ii * size];
                        let row_out = &mut plane[i * size..(i + 1) * size];
                        for (j, out) in row_out.iter_mut().enumerate() {
                            let jj = j + dj;
                            if jj >= 1 && jj <= size {
                                *out += k * row_in[jj - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the pooled map and, for each pooled cell, the flat index of the
/// winning pre-activation (first maximum in scan order).
fn relu_pool_forward(pre: &[f64], filters: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let half = size / 2;
    let mut pooled = Vec::with_capacity(filters * half * half);
    let mut argmax = Vec::with_capacity(filters * half * half);
    for f in 0..filters {
        for i in 0..half {
            for j in 0..half {
                let mut best_idx = f * size * size + 2 * i * size + 2 * j;
                let mut best = pre[best_idx].max(0.0);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = f * size * size + (2 * i + di) * size + 2 * j + dj;
                    let v = pre[idx].max(0.0);
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                pooled.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (pooled, argmax)
}

/// Accumulates kernel and bias gradients into `grad`; returns the gradient
/// with respect to the stage input.
fn conv_backward(x: &[f64], dpre: &[f64], st: &Stage, params: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let (c_in, n, size) = (st.in_channels, st.filters, st.size);
    let mut dx = vec![0.0; x.len()];
    for f in 0..n {
        let dplane = &dpre[f * size * size..(f + 1) * size * size];
        grad[st.bias_offset + f] += dplane.iter().sum::<f64>();
        for c in 0..c_in {
            let base = st.weight_offset + (f * c_in + c) * KK;
            let input = &x[c * size * size..(c + 1) * size * size];
            let dinput = &mut dx[c * size * size..(c + 1) * size * size];
            for di in 0..KERNEL {
                for dj in 0..KERNEL {
                    let k = params[base + di * KERNEL + dj];
                    let mut acc = 0.0;
                    for i in 0..size {
                        let ii = i + di;
                        if ii < 1 || ii > size {
                            continue;
                        }
                        for j in 0..size {
                            let jj = j + dj;
                            if jj >= 1 && jj <= size {
                                let g = dplane[i * size + j];
                                let src = (ii - 1) * size + jj - 1;
                                acc += g * input[src];
                                dinput[src] += g * k;
                            }
                        }
                    }
                    grad[base + di * KERNEL + dj] += acc;
                }
            }
        }
    }
    dx
}

const WEIGHTS_MAGIC: &[u8; 8] = b"POTSALW1";

/// JSON header stored in front of the raw parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub architecture: Architecture,
    pub seed: u64,
    pub num_params: usize,
    /// Always `"f64le"`.
    pub dtype: String,
    /// Free-form provenance (training hyperparameters and the like).
    #[serde(default)]
    pub notes: serde_json::Value,
}

/// Weights file: 8-byte magic `POTSALW1`, u64 LE header length, UTF-8 JSON
/// header, then `num_params` little-endian f64 values.
pub fn save_weights(net: &ToyCnn, seed: u64, notes: serde_json::Value, path: &Path) -> Result<()> {
    let header = WeightsHeader {
        architecture: net.arch.clone(),
        seed,
        num_params: net.params.len(),
        dtype: "f64le".into(),
        notes,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * net.params.len());
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &net.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(ToyCnn, WeightsHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::format(path, "missing weights magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: WeightsHeader =
        serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    if header.dtype != "f64le" {
        return Err(Error::format(
            path,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    header
        .architecture
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.num_params != header.architecture.num_params() {
        return Err(Error::format(path, "parameter count does not match architecture"));
    }
    let blob = &bytes[16 + header_len..];
    if blob.len() != 8 * header.num_params {
        return Err(Error::format(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                8 * header.num_params,
                blob.len()
            ),
        ));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = ToyCnn::from_params(header.architecture.clone(), params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((net, header))
}
