//! Dense ReLU network with exact backpropagation.
//!
//! The network is split into an encoder (layers `0..encoder_split`) and a
//! classification head (the remaining layers). `forward` returns both the
//! encoder output (post-ReLU activations at the split) and the final logits.
//!
//! Flattened parameter order is layer-major: for each layer in order, the
//! weight matrix in row-major `(out, in)` layout followed by the bias vector.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major matrix of `f64`, used for input batches, features and logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks rows of equal length. An empty slice gives a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices are special-cased.
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }
}

/// Layer sizes plus the encoder/head boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    layer_dims: Vec<usize>,
    encoder_split: usize,
}

impl Architecture {
    /// `layer_dims` lists input dim, hidden dims and class count. The encoder
    /// consists of the first `encoder_split` linear layers.
    pub fn new(layer_dims: Vec<usize>, encoder_split: usize) -> Result<Self> {
        let arch = Self {
            layer_dims,
            encoder_split,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Head is the final linear layer; the encoder is everything before it.
    /// A single-layer network has no room for an encoder and is rejected.
    pub fn with_default_split(layer_dims: Vec<usize>) -> Result<Self> {
        let split = layer_dims.len().saturating_sub(2);
        Self::new(layer_dims, split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least 2 layer dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "architecture dims must be positive, got {:?}",
                self.layer_dims
            )));
        }
        let n_layers = self.num_layers();
        if self.encoder_split < 1 || self.encoder_split >= n_layers {
            return Err(Error::Config(format!(
                "encoder_split must be in [1, {n_layers}), got {}",
                self.encoder_split
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn encoder_split(&self) -> usize {
        self.encoder_split
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.encoder_split]
    }

    pub fn is_head_layer(&self, layer: usize) -> bool {
        layer >= self.encoder_split
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One affine layer. `weights` is row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }
}

/// Weights and biases of a network conforming to an [`Architecture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<Layer>,
}

/// Partial derivatives of a scalar loss, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(ModelParams);

impl Gradient {
    pub fn zeros(arch: &Architecture) -> Self {
        Gradient(ModelParams::zeros(arch))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.0.layers
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) -> Result<()> {
        check_congruent(&self.0.arch, &other.0.arch)?;
        for (a, b) in self.0.layers.iter_mut().zip(&other.0.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        for l in &mut self.0.layers {
            l.weights.iter_mut().for_each(|w| *w *= scale);
            l.biases.iter_mut().for_each(|b| *b *= scale);
        }
        self
    }
}

fn check_congruent(a: &Architecture, b: &Architecture) -> Result<()> {
    if a.layer_dims != b.layer_dims {
        return Err(Error::Shape(format!(
            "incongruent architectures {:?} and {:?}",
            a.layer_dims, b.layer_dims
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    /// Builds parameters from explicit layers, checking every shape.
    pub fn from_layers(arch: &Architecture, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.num_layers() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                arch.num_layers(),
                layers.len()
            )));
        }
        for (i, (l, w)) in layers.iter().zip(arch.layer_dims.windows(2)).enumerate() {
            if l.weights.len() != w[0] * w[1] || l.biases.len() != w[1] {
                return Err(Error::Shape(format!(
                    "layer {i} expects {}x{} weights and {} biases",
                    w[1], w[0], w[1]
                )));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn unflatten(arch: &Architecture, values: &[f64]) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "unflatten expects {} values, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(arch.num_layers());
        for w in arch.layer_dims.windows(2) {
            let nw = w[0] * w[1];
            let weights = values[offset..offset + nw].to_vec();
            offset += nw;
            let biases = values[offset..offset + w[1]].to_vec();
            offset += w[1];
            layers.push(Layer { weights, biases });
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }
}

/// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng::seeded(seed);
    let mut params = ModelParams::zeros(arch);
    for (layer, w) in params.layers.iter_mut().zip(arch.layer_dims.windows(2)) {
        let std = (2.0 / w[0] as f64).sqrt();
        for v in &mut layer.weights {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * std;
        }
    }
    Ok(params)
}

/// Encoder output and logits for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Matrix,
    pub logits: Matrix,
}

/// Per-layer pre-activations `z` and activations `a` (a[0] is the input).
struct Trace {
    pre: Vec<Matrix>,
    act: Vec<Matrix>,
}

fn affine(layer: &Layer, input: &Matrix, n_out: usize) -> Matrix {
    let n_in = input.cols();
    let mut out = Matrix::zeros(input.rows(), n_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let y = out.row_mut(r);
        for (o, yo) in y.iter_mut().enumerate() {
            let w = &layer.weights[o * n_in..(o + 1) * n_in];
            let mut s = layer.biases[o];
            for (wi, xi) in w.iter().zip(x) {
                s += wi * xi;
            }
            *yo = s;
        }
    }
    out
}

fn relu(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn check_input(params: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.rows() > 0 && inputs.cols() != params.arch.input_dim() {
        return Err(Error::Shape(format!(
            "input dim {} does not match architecture input dim {}",
            inputs.cols(),
            params.arch.input_dim()
        )));
    }
    Ok(())
}

fn empty_input(params: &ModelParams) -> Matrix {
    Matrix::zeros(0, params.arch.input_dim())
}

fn trace(params: &ModelParams, inputs: &Matrix) -> Trace {
    let n_layers = params.arch.num_layers();
    let mut pre = Vec::with_capacity(n_layers);
    let mut act = Vec::with_capacity(n_layers + 1);
    act.push(inputs.clone());
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(layer, &act[i], params.arch.layer_dims[i + 1]);
        let a = if i + 1 < n_layers {
            relu(&z)
        } else {
            z.clone()
        };
        pre.push(z);
        act.push(a);
    }
    Trace { pre, act }
}

pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<ForwardOutput> {
    check_input(params, inputs)?;
    let inputs = if inputs.rows() == 0 {
        empty_input(params)
    } else {
        inputs.clone()
    };
    let mut t = trace(params, &inputs);
    let logits = t.act.pop().expect("at least one layer");
    let features = t.act.swap_remove(params.arch.encoder_split);
    Ok(ForwardOutput { features, logits })
}

/// Encoder output only; skips the head.
pub fn encode(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    check_input(params, inputs)?;
    let mut a = if inputs.rows() == 0 {
        empty_input(params)
    } else {
        inputs.clone()
    };
    for i in 0..params.arch.encoder_split {
        // encoder layers are never the final layer, so ReLU always applies
        a = relu(&affine(
            &params.layers[i],
            &a,
            params.arch.layer_dims[i + 1],
        ));
    }
    Ok(a)
}

/// Numerically stable softmax of `logits + offsets`.
pub fn softmax(logits: &[f64], offsets: Option<&[f64]>) -> Vec<f64> {
    let shifted: Vec<f64> = match offsets {
        Some(off) => logits.iter().zip(off).map(|(l, o)| l + o).collect(),
        None => logits.to_vec(),
    };
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], offsets: Option<&[f64]>, target: usize) -> f64 {
    let shifted: Vec<f64> = match offsets {
        Some(off) => logits.iter().zip(off).map(|(l, o)| l + o).collect(),
        None => logits.to_vec(),
    };
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + shifted.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    shifted[target] - lse
}

/// Mean softmax cross-entropy over unmasked samples and its exact gradient.
///
/// `class_offsets` are added to the logits before the softmax (logit
/// adjustment). With every sample masked out the loss is 0 and the gradient
/// is zero.
pub fn loss_and_grad(
    params: &ModelParams,
    inputs: &Matrix,
    targets: &[usize],
    sample_mask: &[bool],
    class_offsets: Option<&[f64]>,
) -> Result<(f64, Gradient)> {
    check_input(params, inputs)?;
    let n = inputs.rows();
    let c = params.arch.class_count();
    if targets.len() != n || sample_mask.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} samples with {} targets and {} mask entries",
            targets.len(),
            sample_mask.len()
        )));
    }
    if let Some(off) = class_offsets {
        if off.len() != c {
            return Err(Error::Shape(format!(
                "{} class offsets for {c} classes",
                off.len()
            )));
        }
    }
    if let Some((i, &t)) = targets
        .iter()
        .enumerate()
        .find(|&(i, &t)| sample_mask[i] && t >= c)
    {
        return Err(Error::Data(format!(
            "target {t} of sample {i} is outside [0, {c})"
        )));
    }

    let active = sample_mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Ok((0.0, Gradient::zeros(&params.arch)));
    }
    let scale = 1.0 / active as f64;

    let t = trace(params, inputs);
    let logits = t.act.last().expect("at least one layer");

    let mut loss = 0.0;
    let mut delta = Matrix::zeros(n, c);
    for i in 0..n {
        if !sample_mask[i] {
            continue;
        }
        let row = logits.row(i);
        loss -= log_softmax_at(row, class_offsets, targets[i]);
        let p = softmax(row, class_offsets);
        let d = delta.row_mut(i);
        for k in 0..c {
            d[k] = p[k] * scale;
        }
        d[targets[i]] -= scale;
    }
    loss *= scale;

    let mut grad = Gradient::zeros(&params.arch);
    for l in (0..params.arch.num_layers()).rev() {
        let n_in = params.arch.layer_dims[l];
        let n_out = params.arch.layer_dims[l + 1];
        let a_prev = &t.act[l];
        let g = &mut grad.0.layers[l];
        for r in 0..n {
            let d = delta.row(r);
            let x = a_prev.row(r);
            for (o, &dv) in d.iter().enumerate().take(n_out) {
                if dv == 0.0 {
                    continue;
                }
                g.biases[o] += dv;
                let gw = &mut g.weights[o * n_in..(o + 1) * n_in];
                for (gi, xi) in gw.iter_mut().zip(x) {
                    *gi += dv * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.layers[l].weights;
        let z_prev = &t.pre[l - 1];
        let mut next = Matrix::zeros(n, n_in);
        for r in 0..n {
            let d = delta.row(r);
            let z = z_prev.row(r);
            let out = next.row_mut(r);
            for (o, &dv) in d.iter().enumerate().take(n_out) {
                if dv == 0.0 {
                    continue;
                }
                let wr = &w[o * n_in..(o + 1) * n_in];
                for (oi, wi) in out.iter_mut().zip(wr) {
                    *oi += dv * wi;
                }
            }
            for (oi, zi) in out.iter_mut().zip(z) {
                if *zi <= 0.0 {
                    *oi = 0.0;
                }
            }
        }
        delta = next;
    }
    Ok((loss, grad))
}

/// One plain SGD step: `p - lr * (g + wd * p)`.
///
/// Weight decay applies to weight matrices only, never biases, and skips head
/// layers unless `decay_head` is set.
pub fn sgd_step(
    params: &ModelParams,
    grad: &Gradient,
    lr: f64,
    weight_decay: f64,
    decay_head: bool,
) -> Result<ModelParams> {
    check_congruent(&params.arch, &grad.0.arch)?;
    if !grad.is_finite() {
        return Err(Error::Numerical("non-finite gradient, step refused".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!(
            "weight decay must be non-negative, got {weight_decay}"
        )));
    }
    let mut out = params.clone();
    for (l, (p, g)) in out.layers.iter_mut().zip(&grad.0.layers).enumerate() {
        let wd = if params.arch.is_head_layer(l) && !decay_head {
            0.0
        } else {
            weight_decay
        };
        for (w, gw) in p.weights.iter_mut().zip(&g.weights) {
            *w -= lr * (gw + wd * *w);
        }
        for (b, gb) in p.biases.iter_mut().zip(&g.biases) {
            *b -= lr * gb;
        }
    }
    if !out.is_finite() {
        return Err(Error::Numerical(
            "step produced non-finite parameters".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arch(dims: &[usize]) -> Architecture {
        Architecture::with_default_split(dims.to_vec()).unwrap()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        let data = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![4], 1).is_err());
        assert!(Architecture::new(vec![4, 0, 3], 1).is_err());
        assert!(Architecture::new(vec![4, 8, 3], 0).is_err());
        assert!(Architecture::new(vec![4, 8, 3], 2).is_err());
        assert!(Architecture::with_default_split(vec![4, 3]).is_err());
        let a = arch(&[4, 8, 3]);
        assert_eq!(a.encoder_split(), 1);
        assert_eq!(a.feature_dim(), 8);
        assert!(init_params(
            &Architecture {
                layer_dims: vec![4, 3],
                encoder_split: 0
            },
            1
        )
        .is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(&[4, 8, 3]);
        let p1 = init_params(&a, 7).unwrap();
        let p2 = init_params(&a, 7).unwrap();
        assert_eq!(p1.flatten(), p2.flatten());
        assert!(p1
            .layers()
            .iter()
            .all(|l| l.biases.iter().all(|&b| b == 0.0)));
        assert_ne!(p1.flatten(), init_params(&a, 8).unwrap().flatten());
    }

    #[test]
    fn init_std_matches_kaiming() {
        let a = arch(&[100, 50, 10]);
        let p = init_params(&a, 3).unwrap();
        let w = &p.layers()[0].weights;
        assert_eq!(w.len(), 5000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = (2.0f64 / 100.0).sqrt();
        assert!(
            (var.sqrt() - expected).abs() < 0.15 * expected,
            "std {}",
            var.sqrt()
        );
    }

    #[test]
    fn zero_network_outputs_zero() {
        let a = arch(&[4, 8, 3]);
        let p = ModelParams::zeros(&a);
        let out = forward(&p, &random_batch(5, 4, 1)).unwrap();
        assert!(out.features.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.logits.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(out.features.cols(), 8);
        assert_eq!(out.logits.cols(), 3);
    }

    #[test]
    fn identity_encoder_passes_positive_inputs() {
        let a = Architecture::new(vec![3, 3, 2], 1).unwrap();
        let mut p = ModelParams::zeros(&a);
        for i in 0..3 {
            p.layers_mut()[0].weights[i * 3 + i] = 1.0;
        }
        let x = Matrix::from_rows(&[vec![0.5, 1.0, 2.0], vec![3.0, 0.1, 0.2]]).unwrap();
        let out = forward(&p, &x).unwrap();
        assert_eq!(out.features, x);
    }

    #[test]
    fn batch_matches_single_samples() {
        let a = arch(&[4, 8, 3]);
        let p = init_params(&a, 11).unwrap();
        let x = random_batch(2, 4, 5);
        let batch = forward(&p, &x).unwrap();
        for i in 0..2 {
            let single = forward(&p, &Matrix::from_rows(&[x.row(i)]).unwrap()).unwrap();
            for (u, v) in batch.logits.row(i).iter().zip(single.logits.row(0)) {
                assert!((u - v).abs() < 1e-12);
            }
            for (u, v) in batch.features.row(i).iter().zip(single.features.row(0)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert_eq!(encode(&p, &x).unwrap(), batch.features);
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let a = arch(&[4, 8, 3]);
        let p = init_params(&a, 1).unwrap();
        assert!(matches!(
            forward(&p, &random_batch(2, 5, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let a = arch(&[3, 5, 4]);
        let p = ModelParams::zeros(&a);
        let x = random_batch(3, 3, 2);
        let (loss, _) = loss_and_grad(&p, &x, &[0, 3, 2], &[true; 3], None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_zero() {
        let a = arch(&[3, 5, 4]);
        let p = init_params(&a, 2).unwrap();
        let x = random_batch(3, 3, 2);
        let (loss, g) = loss_and_grad(&p, &x, &[0, 1, 2], &[false; 3], None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_out_of_range_is_data_error() {
        let a = arch(&[3, 5, 4]);
        let p = init_params(&a, 2).unwrap();
        let x = random_batch(2, 3, 2);
        let r = loss_and_grad(&p, &x, &[0, 4], &[true, true], None);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = arch(&[3, 5, 4]);
        let p = init_params(&a, 9).unwrap();
        let x = random_batch(6, 3, 4);
        let targets = [0, 1, 2, 3, 1, 0];
        let mask = [true, true, false, true, true, true];
        let (_, g) = loss_and_grad(&p, &x, &targets, &mask, None).unwrap();
        let flat = p.flatten();
        let analytic = g.flatten();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = loss_and_grad(
                &ModelParams::unflatten(&a, &plus).unwrap(),
                &x,
                &targets,
                &mask,
                None,
            )
            .unwrap()
            .0;
            let lm = loss_and_grad(
                &ModelParams::unflatten(&a, &minus).unwrap(),
                &x,
                &targets,
                &mask,
                None,
            )
            .unwrap()
            .0;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4
                    || (numeric - analytic[i]).abs() < 1e-9,
                "param {i}: numeric {numeric} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let a = Architecture::new(vec![1, 1, 1], 1).unwrap();
        let mut p = ModelParams::zeros(&a);
        p.layers_mut()[0].weights[0] = 1.0;
        let mut gp = ModelParams::zeros(&a);
        gp.layers_mut()[0].weights[0] = 0.5;
        let out = sgd_step(&p, &Gradient(gp), 0.1, 0.0, false).unwrap();
        assert!((out.layers()[0].weights[0] - 0.95).abs() < 1e-15);

        let unchanged = sgd_step(&p, &Gradient::zeros(&a), 0.1, 0.0, false).unwrap();
        assert_eq!(unchanged, p);
    }

    #[test]
    fn head_is_not_decayed() {
        let a = arch(&[3, 5, 4]);
        let p = init_params(&a, 1).unwrap();
        let x = random_batch(4, 3, 1);
        let (_, g) = loss_and_grad(&p, &x, &[0, 1, 2, 3], &[true; 4], None).unwrap();
        let plain = sgd_step(&p, &g, 0.03, 0.0, false).unwrap();
        let decayed = sgd_step(&p, &g, 0.03, 5e-4, false).unwrap();
        assert_eq!(plain.layers()[1], decayed.layers()[1]);
        assert_ne!(plain.layers()[0].weights, decayed.layers()[0].weights);
        assert_eq!(plain.layers()[0].biases, decayed.layers()[0].biases);
        let all = sgd_step(&p, &g, 0.03, 5e-4, true).unwrap();
        assert_ne!(plain.layers()[1].weights, all.layers()[1].weights);
    }

    #[test]
    fn sgd_refuses_non_finite() {
        let a = arch(&[3, 5, 4]);
        let p = init_params(&a, 1).unwrap();
        let mut g = ModelParams::zeros(&a);
        g.layers_mut()[0].weights[0] = f64::NAN;
        assert!(matches!(
            sgd_step(&p, &Gradient(g), 0.1, 0.0, false),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn flatten_layout() {
        let a = arch(&[4, 8, 3]);
        assert_eq!(a.param_count(), 67);
        let p = init_params(&a, 5).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), 67);
        assert_eq!(&flat[..32], &p.layers()[0].weights[..]);
        assert_eq!(ModelParams::unflatten(&a, &flat).unwrap(), p);
        assert!(ModelParams::zeros(&a).flatten().iter().all(|&v| v == 0.0));
        assert!(ModelParams::unflatten(&a, &flat[1..]).is_err());
    }
}
