//! Fully connected layers, forward/backward passes and plain SGD.
//!
//! A [`Network`] is a stack of dense layers where every layer before the
//! feature layer uses ReLU, the feature layer (second to last) is linear, and
//! the last layer produces logits. During training an inverted-dropout mask
//! is applied to the feature-layer outputs on the path into the logit layer
//! only, so the features themselves stay deterministic.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

const NET_MAGIC: &[u8; 8] = b"HSICNET1";

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_WEIGHT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            other => Err(Error::Malformed(format!("unknown activation code {other}"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    // Subgradient at 0 is 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[n_out × n_in]`
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::shape("dense layer biases", weights.nrows(), biases.len()));
        }
        if weights.is_empty() {
            return Err(Error::InvalidArgument("layer with zero width".into()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    /// `b + W·v` for every row `v` of `inputs`.
    pub fn pre_activation(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = inputs.dot(&self.weights.t());
        z += &self.biases;
        z
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.n_in() {
            return Err(Error::shape("layer input width", self.n_in(), inputs.ncols()));
        }
        let act = self.activation;
        Ok(self.pre_activation(inputs).mapv_into(|x| act.apply(x)))
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }
}

/// Labeled mini-batch; labels are 1-based class ids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::shape("batch labels", inputs.nrows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 1..={num_classes}")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub enum Mode<'a> {
    /// Dropout masks are drawn from the given generator.
    Train(&'a mut dyn RngCore),
    Infer,
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Array2<f64>,
    pub pre_activations: Vec<Array2<f64>>,
    /// Post-activation outputs per layer; the feature layer entry is pre-dropout.
    pub activations: Vec<Array2<f64>>,
    /// Feature-layer mask, entries in `{0, 1/(1-p)}` when training and 1 otherwise.
    pub mask: Array2<f64>,
    /// Features after the mask, i.e. the input of the logit layer.
    pub dropped: Array2<f64>,
    feature_layer: usize,
}

impl ForwardTrace {
    pub fn features(&self) -> &Array2<f64> {
        &self.activations[self.feature_layer]
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.len()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.iter().chain(g.biases.iter()).all(|v| v.is_finite()))
    }

    pub fn scaled_add(&mut self, factor: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(factor, &b.weights);
            a.biases.scaled_add(factor, &b.biases);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.biases.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    feature_layer: usize,
    dropout_ratio: f64,
    rng_seed: u64,
}

/// Builds `dims.len() - 1` layers: ReLU hidden layers, a linear feature layer
/// of width `dims[len-2]` and a linear logit layer of width `dims[len-1]`.
/// Weights are drawn from N(0, 0.01²) and biases start at 0.
pub fn init_network(dims: &[usize], seed: u64) -> Result<Network> {
    if dims.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need input, feature and output sizes, got {} dims",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument("zero layer size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_WEIGHT_STD).unwrap();
    let n_layers = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = Array2::from_shape_simple_fn((n_out, n_in), || normal.sample(&mut rng));
            let activation = if i + 2 < n_layers {
                Activation::Relu
            } else {
                Activation::Identity
            };
            DenseLayer {
                weights,
                biases: Array1::zeros(n_out),
                activation,
            }
        })
        .collect();
    let mut net = Network::from_layers(layers, 0.0)?;
    net.rng_seed = seed;
    Ok(net)
}

impl Network {
    /// Wraps hand-built layers. The second-to-last layer is the feature layer
    /// and must be linear.
    pub fn from_layers(layers: Vec<DenseLayer>, dropout_ratio: f64) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidArgument(
                "network needs a feature layer and an output layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::shape(
                    "consecutive layer widths",
                    pair[0].n_out(),
                    pair[1].n_in(),
                ));
            }
        }
        let feature_layer = layers.len() - 2;
        if layers[feature_layer].activation != Activation::Identity {
            return Err(Error::InvalidArgument(
                "feature layer must use the identity activation".into(),
            ));
        }
        if !layers.iter().all(DenseLayer::is_finite) {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut net = Self {
            layers,
            feature_layer,
            dropout_ratio: 0.0,
            rng_seed: 0,
        };
        net.set_dropout_ratio(dropout_ratio)?;
        Ok(net)
    }

    pub fn with_dropout(mut self, ratio: f64) -> Result<Self> {
        self.set_dropout_ratio(ratio)?;
        Ok(self)
    }

    pub fn set_dropout_ratio(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("dropout ratio {ratio} outside [0, 1)")));
        }
        self.dropout_ratio = ratio;
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access for hand-setting parameters; shapes must not change.
    pub fn layer_mut(&mut self, index: usize) -> &mut DenseLayer {
        &mut self.layers[index]
    }

    pub fn feature_layer_index(&self) -> usize {
        self.feature_layer
    }

    pub fn dropout_ratio(&self) -> f64 {
        self.dropout_ratio
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn feature_size(&self) -> usize {
        self.layers[self.feature_layer].n_out()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>, mode: Mode<'_>) -> Result<ForwardTrace> {
        let m = inputs.nrows();
        let d = self.feature_size();
        let mask = match mode {
            Mode::Infer => Array2::ones((m, d)),
            Mode::Train(rng) => self.sample_mask(m, rng),
        };
        self.forward_with_mask(inputs, mask)
    }

    /// Draws an inverted-dropout mask for `m` samples.
    pub fn sample_mask(&self, m: usize, rng: &mut dyn RngCore) -> Array2<f64> {
        let d = self.feature_size();
        let p = self.dropout_ratio;
        if p == 0.0 {
            return Array2::ones((m, d));
        }
        let keep = 1.0 / (1.0 - p);
        Array2::from_shape_simple_fn((m, d), || if rng.random::<f64>() < p { 0.0 } else { keep })
    }

    /// Forward pass with an explicit feature-layer mask.
    pub fn forward_with_mask(&self, inputs: ArrayView2<'_, f64>, mask: Array2<f64>) -> Result<ForwardTrace> {
        if inputs.ncols() != self.input_size() {
            return Err(Error::shape("network input width", self.input_size(), inputs.ncols()));
        }
        if mask.dim() != (inputs.nrows(), self.feature_size()) {
            return Err(Error::shape(
                "dropout mask",
                format!("{:?}", (inputs.nrows(), self.feature_size())),
                format!("{:?}", mask.dim()),
            ));
        }
        let n = self.layers.len();
        let mut pre_activations = Vec::with_capacity(n);
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut dropped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 {
                inputs.view()
            } else if i == self.feature_layer + 1 {
                dropped.as_ref().map(|d: &Array2<f64>| d.view()).unwrap()
            } else {
                activations[i - 1].view()
            };
            let z = layer.pre_activation(input);
            let act = layer.activation;
            let a = z.mapv(|x| act.apply(x));
            if i == self.feature_layer {
                dropped = Some(&a * &mask);
            }
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardTrace {
            inputs: inputs.to_owned(),
            pre_activations,
            activations,
            mask,
            dropped: dropped.unwrap(),
            feature_layer: self.feature_layer,
        })
    }

    /// Inference-mode features for every row of `inputs`.
    pub fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_size() {
            return Err(Error::shape("network input width", self.input_size(), inputs.ncols()));
        }
        let mut x = inputs.to_owned();
        for layer in &self.layers[..=self.feature_layer] {
            x = layer.forward(x.view())?;
        }
        Ok(x)
    }

    /// Gradients of a loss whose upstream derivatives are given at the logits
    /// and at the (pre-dropout) features.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: ArrayView2<'_, f64>,
        d_features: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        self.check_trace(trace)?;
        let m = trace.batch_size();
        if d_logits.dim() != (m, self.num_classes()) {
            return Err(Error::shape(
                "logit gradient",
                format!("{:?}", (m, self.num_classes())),
                format!("{:?}", d_logits.dim()),
            ));
        }
        if d_features.dim() != (m, self.feature_size()) {
            return Err(Error::shape(
                "feature gradient",
                format!("{:?}", (m, self.feature_size())),
                format!("{:?}", d_features.dim()),
            ));
        }
        let mut grads: Vec<LayerGradient> = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if layer.activation != Activation::Identity {
                let act = layer.activation;
                Zip::from(&mut delta)
                    .and(&trace.pre_activations[i])
                    .for_each(|g, &z| *g *= act.derivative(z));
            }
            let input = if i == 0 {
                &trace.inputs
            } else if i == self.feature_layer + 1 {
                &trace.dropped
            } else {
                &trace.activations[i - 1]
            };
            grads.push(LayerGradient {
                weights: delta.t().dot(input),
                biases: delta.sum_axis(Axis(0)),
            });
            if i == 0 {
                break;
            }
            let mut upstream = delta.dot(&layer.weights);
            if i == self.feature_layer + 1 {
                upstream *= &trace.mask;
                upstream += &d_features;
            }
            delta = upstream;
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let ok = trace.feature_layer == self.feature_layer
            && trace.pre_activations.len() == self.layers.len()
            && trace.activations.len() == self.layers.len()
            && trace.inputs.ncols() == self.input_size()
            && self
                .layers
                .iter()
                .zip(&trace.pre_activations)
                .all(|(l, z)| z.ncols() == l.n_out() && z.nrows() == trace.inputs.nrows());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "forward trace was not produced by this network".into(),
            ))
        }
    }

    /// `θ ← θ − lr·∂L/∂θ`. Nothing is modified if the gradients are not finite.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weights.dim() != l.weights.dim() || g.biases.len() != l.biases.len())
        {
            return Err(Error::InvalidArgument("gradient shapes do not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.biases.scaled_add(-lr, &g.biases);
        }
        if !self.layers.iter().all(DenseLayer::is_finite) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(())
    }

    /// Checkpoint bytes: magic, layer count, per-layer `n_in, n_out,
    /// activation` (all u32 LE), then every weight matrix row-major followed
    /// by every bias vector, both in layer order, as f64 LE.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(NET_MAGIC);
        w.u32(binio::dim_u32(self.layers.len(), "layer count")?);
        for l in &self.layers {
            w.u32(binio::dim_u32(l.n_in(), "n_in")?);
            w.u32(binio::dim_u32(l.n_out(), "n_out")?);
            w.u32(l.activation.code());
        }
        for l in &self.layers {
            w.f64s(l.weights.iter());
        }
        for l in &self.layers {
            w.f64s(l.biases.iter());
        }
        Ok(w.bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(NET_MAGIC)?;
        let count = r.u32()? as usize;
        r.require(count.checked_mul(12).ok_or(Error::DimensionOverflow)?)?;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let n_in = r.u32()? as usize;
            let n_out = r.u32()? as usize;
            let act = Activation::from_code(r.u32()?)?;
            shapes.push((n_in, n_out, act));
        }
        let total: usize = shapes
            .iter()
            .map(|&(i, o, _)| {
                binio::checked_product(&[i, o]).and_then(|w| w.checked_add(o).ok_or(Error::DimensionOverflow))
            })
            .sum::<Result<usize>>()?;
        r.require(total.checked_mul(8).ok_or(Error::DimensionOverflow)?)?;
        let mut weights = Vec::with_capacity(count);
        for &(n_in, n_out, _) in &shapes {
            let v = r.f64_vec(n_in * n_out)?;
            weights.push(Array2::from_shape_vec((n_out, n_in), v).unwrap());
        }
        let mut layers = Vec::with_capacity(count);
        for (w, &(_, n_out, act)) in weights.into_iter().zip(&shapes) {
            let b = Array1::from(r.f64_vec(n_out)?);
            layers.push(DenseLayer::new(w, b, act)?);
        }
        r.finish()?;
        Network::from_layers(layers, 0.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes()?)
    }

    /// Loads a checkpoint. The dropout ratio is not persisted and starts at 0.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Row slice helper used by callers batching from a larger sample matrix.
pub fn gather_rows(source: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), source.ncols()));
    for (dst, &r) in out.outer_iter_mut().zip(rows) {
        dst.into_slice()
            .unwrap()
            .copy_from_slice(source.slice(s![r, ..]).as_slice().unwrap());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_layer(n: usize, act: Activation) -> DenseLayer {
        DenseLayer::new(Array2::eye(n), Array1::zeros(n), act).unwrap()
    }

    #[test]
    fn init_biases_are_zero_and_deterministic() {
        let a = init_network(&[6, 8, 6, 4, 3], 7).unwrap();
        let b = init_network(&[6, 8, 6, 4, 3], 7).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.biases.iter().all(|&v| v == 0.0)));
        let c = init_network(&[6, 8, 6, 4, 3], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_variance() {
        let net = init_network(&[6, 8, 6, 4, 3], 1).unwrap();
        let w: Vec<f64> = net.layers().iter().flat_map(|l| l.weights.iter().copied()).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(var > 0.5e-4 && var < 2e-4, "variance {var}");
    }

    #[test]
    fn init_layout() {
        let net = init_network(&[6, 8, 6, 4, 3], 1).unwrap();
        let acts: Vec<_> = net.layers().iter().map(|l| l.activation).collect();
        use Activation::*;
        assert_eq!(acts, vec![Relu, Relu, Identity, Identity]);
        assert_eq!(net.feature_layer_index(), 2);
        assert_eq!(net.feature_size(), 4);
        assert_eq!(net.num_classes(), 3);
        let tiny = init_network(&[2, 3, 2], 0).unwrap();
        assert_eq!(tiny.layers()[0].activation, Identity);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_network(&[], 0).is_err());
        assert!(init_network(&[4, 3], 0).is_err());
        assert!(init_network(&[4, 0, 3], 0).is_err());
    }

    #[test]
    fn relu_identity_layer() {
        let l = identity_layer(3, Activation::Relu);
        let out = l.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert_eq!(out, array![[1.0, 2.0, 3.0]]);
        let l = identity_layer(2, Activation::Relu);
        let out = l.forward(array![[-1.0, -2.0]].view()).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // feature layer: W=[[1,2],[3,-1]], b=[0.5,-0.25]; output: W=[[2,0],[-1,1]], b=[0,1]
        let l0 = DenseLayer::new(
            array![[1.0, 2.0], [3.0, -1.0]],
            array![0.5, -0.25],
            Activation::Identity,
        )
        .unwrap();
        let l1 = DenseLayer::new(array![[2.0, 0.0], [-1.0, 1.0]], array![0.0, 1.0], Activation::Identity).unwrap();
        let net = Network::from_layers(vec![l0, l1], 0.0).unwrap();
        let x = array![[0.3, -0.7]];
        let trace = net.forward(x.view(), Mode::Infer).unwrap();
        let h = [0.5 + 0.3 - 1.4, -0.25 + 0.9 + 0.7];
        let y = [2.0 * h[0], 1.0 - h[0] + h[1]];
        for j in 0..2 {
            assert!((trace.features()[[0, j]] - h[j]).abs() < 1e-12);
            assert!((trace.logits()[[0, j]] - y[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = init_network(&[6, 8, 4, 3], 0).unwrap();
        assert!(net.forward(Array2::zeros((2, 5)).view(), Mode::Infer).is_err());
    }

    #[test]
    fn infer_mask_is_ones_and_train_mask_is_scaled() {
        let net = init_network(&[6, 8, 4, 3], 0).unwrap().with_dropout(0.3).unwrap();
        let x = Array2::from_elem((50, 6), 0.5);
        let t = net.forward(x.view(), Mode::Infer).unwrap();
        assert!(t.mask.iter().all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = net.forward(x.view(), Mode::Train(&mut rng)).unwrap();
        let keep = 1.0 / 0.7;
        assert!(t.mask.iter().all(|&v| v == 0.0 || v == keep));
        assert!(t.mask.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = init_network(&[6, 8, 6, 4, 3], 2).unwrap();
        let x = Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - j as f64) * 0.3);
        let t = net.forward(x.view(), Mode::Infer).unwrap();
        let g = net
            .backward(&t, Array2::zeros((5, 3)).view(), Array2::zeros((5, 4)).view())
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn dead_relu_layer_has_zero_incoming_gradient() {
        let mut net = init_network(&[3, 4, 2, 2], 5).unwrap();
        net.layer_mut(0).biases.fill(-100.0);
        let x = Array2::from_elem((4, 3), 0.1);
        let t = net.forward(x.view(), Mode::Infer).unwrap();
        assert!(t.pre_activations[0].iter().all(|&z| z < 0.0));
        let g = net
            .backward(&t, Array2::ones((4, 2)).view(), Array2::ones((4, 2)).view())
            .unwrap();
        assert!(g.layers[0].weights.iter().all(|&v| v == 0.0));
        assert!(g.layers[0].biases.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = init_network(&[6, 8, 4, 3], 0).unwrap();
        let b = init_network(&[6, 5, 4, 3], 0).unwrap();
        let t = a.forward(Array2::zeros((2, 6)).view(), Mode::Infer).unwrap();
        assert!(b
            .backward(&t, Array2::zeros((2, 3)).view(), Array2::zeros((2, 4)).view())
            .is_err());
        assert!(a
            .backward(&t, Array2::zeros((3, 3)).view(), Array2::zeros((2, 4)).view())
            .is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let l0 = DenseLayer::new(array![[1.0]], array![0.0], Activation::Identity).unwrap();
        let l1 = DenseLayer::new(array![[1.0]], array![0.0], Activation::Identity).unwrap();
        let mut net = Network::from_layers(vec![l0, l1], 0.0).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[[0, 0]] = 2.0;
        let before = net.clone();
        net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(net, before);
        net.sgd_step(&g, 0.1).unwrap();
        assert!((net.layers()[0].weights[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let l0 = DenseLayer::new(array![[0.4, -0.2]], array![0.1], Activation::Identity).unwrap();
        let l1 = DenseLayer::new(array![[0.0]], array![0.0], Activation::Identity).unwrap();
        let base = Network::from_layers(vec![l0, l1], 0.0).unwrap();
        let mut g1 = Gradients::zeros_like(&base);
        let mut g2 = Gradients::zeros_like(&base);
        g1.layers[0].weights = array![[0.3, -1.1]];
        g1.layers[0].biases = array![0.7];
        g2.layers[0].weights = array![[-0.25, 2.0]];
        g2.layers[0].biases = array![0.05];
        let lr = 0.01;
        let mut two = base.clone();
        two.sgd_step(&g1, lr).unwrap();
        two.sgd_step(&g2, lr).unwrap();
        let mut sum = g1.clone();
        sum.scaled_add(1.0, &g2);
        let mut one = base.clone();
        one.sgd_step(&sum, lr).unwrap();
        for (a, b) in two.layers().iter().zip(one.layers()) {
            for (x, y) in a
                .weights
                .iter()
                .chain(a.biases.iter())
                .zip(b.weights.iter().chain(b.biases.iter()))
            {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut net = init_network(&[2, 2, 2], 0).unwrap();
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        g.layers[1].biases[0] = f64::NAN;
        assert!(matches!(net.sgd_step(&g, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(net, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = init_network(&[5, 7, 3, 2], 11).unwrap();
        let bytes = net.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"HSICNET1");
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back.layers(), net.layers());
        assert!(matches!(
            Network::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Network::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }
}
