//! Fully connected networks with exact backward passes, Adam, and the
//! versioned `MLUDE01` parameter file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8] = b"MLUDE01";
const MAX_WIDTH: u64 = 1 << 24;
const MAX_LAYERS: u64 = 1 << 10;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Transform applied after the final affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    Sigmoid,
    /// Raw class scores, consumed by a softmax loss.
    Logits,
}

impl OutputHead {
    fn code(self) -> u8 {
        match self {
            OutputHead::Linear => 0,
            OutputHead::Sigmoid => 1,
            OutputHead::Logits => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputHead::Linear),
            1 => Some(OutputHead::Sigmoid),
            2 => Some(OutputHead::Logits),
            _ => None,
        }
    }
}

/// Layer widths from input to output; hidden layers use ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    head: OutputHead,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("a network needs at least an input and an output size".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {layer_sizes:?}")));
        }
        Ok(Self { layer_sizes, head })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Affine map `x·W + b` with `W` stored input-major (in×out).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    stamp: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl NetworkParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            layers,
            stamp: fresh_stamp(),
        }
    }

    /// Uniform He initialization for hidden layers, Glorot for the output
    /// layer; biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = layer.weights.dim();
            let limit = if l == last {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            layer
                .weights
                .mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        params
    }

    pub fn from_layers(spec: &MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != spec.layer_count() {
            return Err(Error::Shape(format!(
                "{} layers for a {}-layer spec",
                layers.len(),
                spec.layer_count()
            )));
        }
        for (l, (layer, w)) in layers.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            if layer.weights.dim() != (w[0], w[1]) || layer.bias.len() != w[1] {
                return Err(Error::Shape(format!(
                    "layer {l}: weights {:?} / bias {} do not match {}x{}",
                    layer.weights.dim(),
                    layer.bias.len(),
                    w[0],
                    w[1]
                )));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                weights: l.weights.as_standard_layout().into_owned(),
                bias: l.bias,
            })
            .collect();
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stamp = fresh_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Gradients with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Activations recorded by [`forward`] for use by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    /// Output of the last hidden layer (the input of the final affine map).
    pub fn last_hidden(&self) -> &Array2<f64> {
        self.inputs.last().expect("at least one layer")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn forward(
    spec: &MlpSpec,
    params: &NetworkParams,
    batch: ArrayView2<f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    if batch.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch width {} but network input is {}",
            batch.ncols(),
            spec.input_dim()
        )));
    }
    if params.layers.len() != spec.layer_count() {
        return Err(Error::Shape("parameters do not match the spec".into()));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut a = batch.to_owned();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = a.dot(&layer.weights);
        z += &layer.bias;
        inputs.push(a);
        a = if l == last {
            match spec.head {
                OutputHead::Linear | OutputHead::Logits => z.clone(),
                OutputHead::Sigmoid => z.mapv(sigmoid),
            }
        } else {
            z.mapv(|v| v.max(0.0))
        };
        pre_activations.push(z);
    }
    let cache = ForwardCache {
        stamp: params.stamp,
        inputs,
        pre_activations,
        output: a.clone(),
    };
    Ok((a, cache))
}

/// Gradients of an upstream scalar with respect to parameters and input,
/// given its gradient with respect to the network output.
///
/// ReLU uses derivative 0 at exactly 0.
pub fn backward(
    spec: &MlpSpec,
    params: &NetworkParams,
    cache: &ForwardCache,
    output_grad: ArrayView2<f64>,
) -> Result<(ParamGrads, Array2<f64>)> {
    if cache.stamp != params.stamp || cache.inputs.len() != params.layers.len() {
        return Err(Error::Cache);
    }
    if output_grad.dim() != cache.output.dim() {
        return Err(Error::Shape(format!(
            "output gradient {:?} vs output {:?}",
            output_grad.dim(),
            cache.output.dim()
        )));
    }
    let mut g = match spec.head {
        OutputHead::Linear | OutputHead::Logits => output_grad.to_owned(),
        OutputHead::Sigmoid => Zip::from(&output_grad)
            .and(&cache.output)
            .map_collect(|&g, &s| g * s * (1.0 - s)),
    };
    let mut grads = ParamGrads::zeros_like(params);
    for l in (0..params.layers.len()).rev() {
        grads.layers[l].weights = cache.inputs[l].t().dot(&g);
        grads.layers[l].bias = g.sum_axis(Axis(0));
        let mut upstream = g.dot(&params.layers[l].weights.t());
        if l > 0 {
            Zip::from(&mut upstream)
                .and(&cache.pre_activations[l - 1])
                .for_each(|u, &z| {
                    if z <= 0.0 {
                        *u = 0.0;
                    }
                });
        }
        g = upstream;
    }
    Ok((grads, g))
}

/// A spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: NetworkParams,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = NetworkParams::init(&spec, rng);
        Self { spec, params }
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        forward(&self.spec, &self.params, batch)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        backward(&self.spec, &self.params, cache, output_grad)
    }

    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(batch)?.0)
    }

    /// Row-wise argmax of the outputs, lowest index on ties.
    pub fn classify(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.predict(batch)?.view()))
    }

    /// Activations of the last hidden layer.
    pub fn hidden_features(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (_, cache) = self.forward(batch)?;
        Ok(cache.last_hidden().clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_networks(&mut w, &[self])?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut nets = read_networks(BufReader::new(File::open(path)?))?;
        if nets.len() != 1 {
            return Err(Error::Persist(format!(
                "field `network_count` = {}, expected 1",
                nets.len()
            )));
        }
        Ok(nets.remove(0))
    }
}

pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, tensor_sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            first: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_network(params: &NetworkParams, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = params
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self::new(cfg, &sizes)
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One bias-corrected Adam update over matching parameter/gradient
    /// tensors. Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, mut params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, ((p, g), m)) in params.iter().zip(&grads).zip(&self.first).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(format!("tensor {t} size mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Grad { tensor: t });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut NetworkParams, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    state.update(params.tensors_mut(), grads.tensors())
}

/// Mean squared error over every entry, and its gradient `2(x̂ − x)/(n·d)`.
pub fn reconstruction_loss(
    x_hat: ArrayView2<f64>,
    x: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let n = x_hat.nrows();
    let (per_row, grad) = reconstruction_loss_weighted(x_hat, x, &vec![1.0 / n.max(1) as f64; n])?;
    Ok((per_row.sum() / n.max(1) as f64, grad))
}

/// Per-row mean squared errors and the gradient of `Σ_i w_i·mse_i`.
pub fn reconstruction_loss_weighted(
    x_hat: ArrayView2<f64>,
    x: ArrayView2<f64>,
    weights: &[f64],
) -> Result<(Array1<f64>, Array2<f64>)> {
    if x_hat.dim() != x.dim() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    if weights.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} rows but {} weights",
            x.nrows(),
            weights.len()
        )));
    }
    let d = x.ncols().max(1) as f64;
    let diff = &x_hat - &x;
    let per_row = diff.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / d);
    let mut grad = diff * (2.0 / d);
    for (mut row, &w) in grad.rows_mut().into_iter().zip(weights) {
        row *= w;
    }
    Ok((per_row, grad))
}

/// Layer widths of the four networks, excluding the image and latent sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_classifier_hidden: Vec<usize>,
    pub image_classifier_hidden: Vec<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            latent_dim: 12,
            encoder_hidden: vec![256],
            decoder_hidden: vec![256],
            latent_classifier_hidden: vec![64],
            image_classifier_hidden: vec![256, 64],
        }
    }
}

impl ArchitectureConfig {
    fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut v = vec![input];
        v.extend_from_slice(hidden);
        v.push(output);
        v
    }

    pub fn encoder_spec(&self, pixels: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::sizes(pixels, &self.encoder_hidden, self.latent_dim),
            OutputHead::Linear,
        )
    }

    pub fn decoder_spec(&self, pixels: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::sizes(self.latent_dim, &self.decoder_hidden, pixels),
            OutputHead::Sigmoid,
        )
    }

    pub fn latent_classifier_spec(&self, classes: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::sizes(self.latent_dim, &self.latent_classifier_hidden, classes),
            OutputHead::Logits,
        )
    }

    pub fn image_classifier_spec(&self, pixels: usize, classes: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::sizes(pixels, &self.image_classifier_hidden, classes),
            OutputHead::Logits,
        )
    }
}

/// Encoder, decoder, latent classifier and image classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelQuartet {
    pub encoder: Network,
    pub decoder: Network,
    pub latent_classifier: Network,
    pub image_classifier: Network,
}

impl ModelQuartet {
    pub fn new<R: Rng + ?Sized>(
        arch: &ArchitectureConfig,
        pixels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let quartet = Self {
            encoder: Network::new(arch.encoder_spec(pixels)?, rng),
            decoder: Network::new(arch.decoder_spec(pixels)?, rng),
            latent_classifier: Network::new(arch.latent_classifier_spec(classes)?, rng),
            image_classifier: Network::new(arch.image_classifier_spec(pixels, classes)?, rng),
        };
        quartet.validate()?;
        Ok(quartet)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec.output_dim()
    }

    pub fn pixels(&self) -> usize {
        self.encoder.spec.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.latent_classifier.spec.output_dim()
    }

    fn named(&self) -> [(&'static str, &Network); 4] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("latent_classifier", &self.latent_classifier),
            ("image_classifier", &self.image_classifier),
        ]
    }

    /// Checks that the four networks chain together.
    pub fn validate(&self) -> Result<()> {
        let h = self.encoder.spec.output_dim();
        let pixels = self.encoder.spec.input_dim();
        let k = self.latent_classifier.spec.output_dim();
        let checks = [
            ("decoder.input (h)", self.decoder.spec.input_dim(), h),
            ("latent_classifier.input (h)", self.latent_classifier.spec.input_dim(), h),
            ("decoder.output (pixels)", self.decoder.spec.output_dim(), pixels),
            ("image_classifier.input (pixels)", self.image_classifier.spec.input_dim(), pixels),
            ("image_classifier.output (K)", self.image_classifier.spec.output_dim(), k),
        ];
        for (field, got, want) in checks {
            if got != want {
                return Err(Error::Persist(format!(
                    "field `{field}` = {got}, expected {want}"
                )));
            }
        }
        Ok(())
    }

    /// Checks the quartet against dataset dimensions.
    pub fn expect_dims(&self, pixels: usize, classes: usize, latent_dim: usize) -> Result<()> {
        let checks = [
            ("K", self.class_count(), classes),
            ("pixels", self.pixels(), pixels),
            ("h", self.latent_dim(), latent_dim),
        ];
        for (field, got, want) in checks {
            if got != want {
                return Err(Error::Persist(format!(
                    "field `{field}` = {got} in model file, expected {want}"
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let nets = self.named().map(|(_, n)| n);
        write_networks(w, &nets)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let nets = read_networks(r)?;
        let [encoder, decoder, latent_classifier, image_classifier]: [Network; 4] =
            nets.try_into().map_err(|v: Vec<Network>| {
                Error::Persist(format!("field `network_count` = {}, expected 4", v.len()))
            })?;
        let quartet = Self {
            encoder,
            decoder,
            latent_classifier,
            image_classifier,
        };
        quartet.validate()?;
        Ok(quartet)
    }
}

pub fn save_params(quartet: &ModelQuartet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    quartet.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelQuartet> {
    ModelQuartet::read_from(BufReader::new(File::open(path)?))
}

/// `MLUDE01`, network count, then a spec table (head code and layer sizes
/// per network), then every layer's row-major weights and bias as
/// little-endian f64.
fn write_networks<W: Write>(w: &mut W, nets: &[&Network]) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    codec::put_u64(w, nets.len() as u64)?;
    for net in nets {
        w.write_all(&[net.spec.head.code()])?;
        codec::put_u64(w, net.spec.layer_sizes.len() as u64)?;
        for &s in &net.spec.layer_sizes {
            codec::put_u64(w, s as u64)?;
        }
    }
    for net in nets {
        for layer in &net.params.layers {
            codec::put_f64s(w, layer.weights.iter().copied())?;
            codec::put_f64s(w, layer.bias.iter().copied())?;
        }
    }
    Ok(())
}

fn read_networks<R: Read>(r: R) -> Result<Vec<Network>> {
    let mut r = Reader::new(r, "model file");
    r.magic(MODEL_MAGIC)?;
    let count = r.len("network_count", 64)?;
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let head = OutputHead::from_code(r.u8()?)
            .ok_or_else(|| Error::Persist(format!("network {i}: unknown output head")))?;
        let n_sizes = r.len("layer_count", MAX_LAYERS)?;
        let sizes = (0..n_sizes)
            .map(|_| r.len("layer_size", MAX_WIDTH))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(sizes, head).map_err(|e| Error::Persist(format!("network {i}: {e}")))?;
        specs.push(spec);
    }
    let mut nets = Vec::with_capacity(count);
    for spec in specs {
        let mut layers = Vec::with_capacity(spec.layer_count());
        for w in spec.layer_sizes.windows(2) {
            let weights = Array2::from_shape_vec((w[0], w[1]), r.f64s(w[0] * w[1])?)
                .map_err(|e| Error::Persist(e.to_string()))?;
            let bias = Array1::from(r.f64s(w[1])?);
            layers.push(Layer { weights, bias });
        }
        let params = NetworkParams::from_layers(&spec, layers)?;
        if !params.is_finite() {
            return Err(Error::Persist("non-finite parameter in model file".into()));
        }
        nets.push(Network { spec, params });
    }
    r.expect_eof()?;
    Ok(nets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 4, 2], OutputHead::Linear).unwrap();
        let params = NetworkParams::zeros(&spec);
        let (out, _) = forward(&spec, &params, array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn single_affine_and_sigmoid() {
        let spec = MlpSpec::new(vec![1, 1], OutputHead::Linear).unwrap();
        let params = NetworkParams::from_layers(
            &spec,
            vec![Layer {
                weights: array![[2.0]],
                bias: array![1.0],
            }],
        )
        .unwrap();
        let (out, _) = forward(&spec, &params, array![[3.0]].view()).unwrap();
        assert_eq!(out[[0, 0]], 7.0);

        let spec = MlpSpec::new(vec![1, 1], OutputHead::Sigmoid).unwrap();
        let params = NetworkParams::zeros(&spec);
        let (out, _) = forward(&spec, &params, array![[5.0]].view()).unwrap();
        assert_eq!(out[[0, 0]], 0.5);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = MlpSpec::new(vec![3, 2], OutputHead::Linear).unwrap();
        let params = NetworkParams::zeros(&spec);
        assert!(matches!(
            forward(&spec, &params, array![[1.0, 2.0]].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::new(vec![3, 5, 2], OutputHead::Sigmoid).unwrap();
        let params = NetworkParams::init(&spec, &mut rng);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let (_, cache) = forward(&spec, &params, x.view()).unwrap();
        let (grads, input_grad) = backward(&spec, &params, &cache, Array2::zeros((2, 2)).view()).unwrap();
        assert!(grads.is_zero());
        assert!(input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // hidden pre-activation is exactly 0 for this input
        let spec = MlpSpec::new(vec![1, 1, 1], OutputHead::Linear).unwrap();
        let params = NetworkParams::from_layers(
            &spec,
            vec![
                Layer { weights: array![[1.0]], bias: array![-2.0] },
                Layer { weights: array![[3.0]], bias: array![0.0] },
            ],
        )
        .unwrap();
        let (_, cache) = forward(&spec, &params, array![[2.0]].view()).unwrap();
        let (grads, input_grad) = backward(&spec, &params, &cache, array![[1.0]].view()).unwrap();
        assert_eq!(grads.layers[0].weights[[0, 0]], 0.0);
        assert_eq!(grads.layers[0].bias[0], 0.0);
        assert_eq!(input_grad[[0, 0]], 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = MlpSpec::new(vec![2, 2], OutputHead::Linear).unwrap();
        let mut params = NetworkParams::init(&spec, &mut rng);
        let (_, cache) = forward(&spec, &params, array![[1.0, 1.0]].view()).unwrap();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = AdamState::for_network(&params, AdamConfig::default());
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert!(matches!(
            backward(&spec, &params, &cache, array![[1.0, 1.0]].view()),
            Err(Error::Cache)
        ));
    }

    #[test]
    fn adam_zero_lr_moves_moments_only() {
        let mut state = AdamState::new(AdamConfig { lr: 0.0, ..Default::default() }, &[2]);
        let mut p = vec![1.0, 2.0];
        state.update(vec![&mut p], vec![&[0.5, -0.5]]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(state.step, 1);
        assert!(state.first_moments()[0].iter().all(|&m| m != 0.0));
    }

    #[test]
    fn adam_zero_grad_fresh_state_no_move() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, 2.0, 3.0];
        state.update(vec![&mut p], vec![&[0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_hand_computed() {
        let mut state = AdamState::new(
            AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            &[1],
        );
        let mut p = vec![0.0];
        state.update(vec![&mut p], vec![&[1.0]]).unwrap();
        // m̂ = v̂ = 1, so Δ = −0.1·1/(1 + 1e-8)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut state = AdamState::new(AdamConfig::default(), &[1, 1]);
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        let err = state
            .update(vec![&mut a, &mut b], vec![&[1.0], &[f64::INFINITY]])
            .unwrap_err();
        assert!(matches!(err, Error::Grad { tensor: 1 }));
        assert_eq!(state.step, 0);
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let x = array![[0.2, 0.4]];
        assert_eq!(reconstruction_loss(x.view(), x.view()).unwrap().0, 0.0);
        let (l, g) = reconstruction_loss(array![[1.0, 1.0]].view(), array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, array![[1.0, 1.0]]);
    }

    #[test]
    fn quartet_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = ArchitectureConfig {
            latent_dim: 3,
            encoder_hidden: vec![5],
            decoder_hidden: vec![4],
            latent_classifier_hidden: vec![2],
            image_classifier_hidden: vec![6, 3],
        };
        let quartet = ModelQuartet::new(&arch, 8, 4, &mut rng).unwrap();
        let mut bytes = Vec::new();
        quartet.write_to(&mut bytes).unwrap();
        let back = ModelQuartet::read_from(&bytes[..]).unwrap();
        assert_eq!(back, quartet);
        for (a, b) in back.named().iter().zip(quartet.named().iter()) {
            for (la, lb) in a.1.params.layers().iter().zip(b.1.params.layers()) {
                assert!(la.weights.iter().zip(lb.weights.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        let mut corrupt = bytes.clone();
        corrupt[2] ^= 0xff;
        assert!(matches!(ModelQuartet::read_from(&corrupt[..]), Err(Error::Persist(_))));
        assert!(matches!(
            ModelQuartet::read_from(&bytes[..bytes.len() - 1]),
            Err(Error::Persist(_))
        ));
    }

    #[test]
    fn mismatched_class_count_names_the_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = ArchitectureConfig {
            latent_dim: 2,
            encoder_hidden: vec![3],
            decoder_hidden: vec![3],
            latent_classifier_hidden: vec![3],
            image_classifier_hidden: vec![3],
        };
        let mut quartet = ModelQuartet::new(&arch, 4, 3, &mut rng).unwrap();
        quartet.image_classifier = Network::new(arch.image_classifier_spec(4, 5).unwrap(), &mut rng);
        let mut bytes = Vec::new();
        quartet.write_to(&mut bytes).unwrap();
        let err = ModelQuartet::read_from(&bytes[..]).unwrap_err().to_string();
        assert!(err.contains("image_classifier.output (K)"), "{err}");

        let ok = ModelQuartet::new(&arch, 4, 3, &mut rng).unwrap();
        let err = ok.expect_dims(4, 10, 2).unwrap_err().to_string();
        assert!(err.contains("`K`"), "{err}");
    }
}
