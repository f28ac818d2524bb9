use std::ops::Range;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::layer::{softplus, Activation, Layer, LayerKind};
use super::tensor::Tensor;
use crate::error::{AdamError, Result};
use crate::fingerprint::Label;

/// One training example, borrowed.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub label: Label,
}

/// A training example with its contribution weight in a summed loss.
#[derive(Clone, Copy, Debug)]
pub struct WeightedSample<'a> {
    pub input: &'a [f64],
    pub label: Label,
    pub weight: f64,
}

/// Binary cross-entropy summed over the two sigmoid outputs, from logits.
pub fn bce_from_logits(logits: &[f64], label: Label) -> f64 {
    let y = label.one_hot();
    logits
        .iter()
        .zip(y)
        .map(|(&z, t)| softplus(z) - t * z)
        .sum()
}

/// Layered network whose last layer is a sigmoid over two outputs
/// (`[p_benign, p_malware]`). Layers `[0, base_boundary)` form the base.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    name: String,
    input_width: usize,
    layers: Vec<Layer>,
    base_boundary: Option<usize>,
    offsets: Vec<usize>,
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        input_width: usize,
        layers: Vec<Layer>,
        base_boundary: Option<usize>,
    ) -> Result<Self> {
        let mut shape = vec![input_width];
        for l in &layers {
            let expected = Layer::param_shapes(&l.kind);
            if expected.len() != l.params.len()
                || expected
                    .iter()
                    .zip(&l.params)
                    .any(|(s, p)| s.as_slice() != p.shape())
            {
                return Err(AdamError::ShapeMismatch(format!(
                    "parameters of {:?} do not match its kind",
                    l.kind
                )));
            }
            shape = Layer::output_shape(&l.kind, &shape)?;
        }
        if shape != [2] {
            return Err(AdamError::ShapeMismatch(format!(
                "network output must be [2], got {shape:?}"
            )));
        }
        if layers.last().map(|l| &l.kind) != Some(&LayerKind::Activation(Activation::Sigmoid)) {
            return Err(AdamError::ShapeMismatch(
                "last layer must be a sigmoid".into(),
            ));
        }
        if let Some(b) = base_boundary {
            if b == 0 || b >= layers.len() {
                return Err(AdamError::InvalidArgument(format!(
                    "base boundary {b} out of range"
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        for l in &layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        offsets.push(acc);
        Ok(Self {
            name: name.into(),
            input_width,
            layers,
            base_boundary,
            offsets,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn base_boundary(&self) -> Option<usize> {
        self.base_boundary
    }

    pub fn param_count(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Parameter count of the layers in `range`.
    pub fn range_param_count(&self, range: Range<usize>) -> usize {
        self.offsets[range.end] - self.offsets[range.start]
    }

    /// Output shape after `layers[..upto]`.
    pub fn shape_after(&self, upto: usize) -> Vec<usize> {
        let mut shape = vec![self.input_width];
        for l in &self.layers[..upto] {
            shape = Layer::output_shape(&l.kind, &shape).expect("validated at construction");
        }
        shape
    }

    pub fn set_trainable(&mut self, range: Range<usize>, trainable: bool) {
        for l in &mut self.layers[range] {
            l.trainable = trainable;
        }
    }

    /// All parameters, flattened in layer order.
    pub fn parameters(&self) -> Vec<f64> {
        self.range_parameters(0..self.layers.len())
    }

    pub fn range_parameters(&self, range: Range<usize>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.range_param_count(range.clone()));
        for l in &self.layers[range] {
            for p in &l.params {
                out.extend_from_slice(p.data());
            }
        }
        out
    }

    /// Concatenation of every trainable tensor.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers.iter().filter(|l| l.trainable) {
            for p in &l.params {
                out.extend_from_slice(p.data());
            }
        }
        out
    }

    pub fn set_range_parameters(&mut self, range: Range<usize>, values: &[f64]) -> Result<()> {
        let expected = self.range_param_count(range.clone());
        if values.len() != expected {
            return Err(AdamError::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        let mut cursor = 0;
        for l in &mut self.layers[range] {
            for p in &mut l.params {
                let n = p.len();
                p.data_mut().copy_from_slice(&values[cursor..cursor + n]);
                cursor += n;
            }
        }
        Ok(())
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        self.set_range_parameters(0..self.layers.len(), values)
    }

    /// Hex SHA-256 of the parameter bytes in `range`.
    pub fn range_hash(&self, range: Range<usize>) -> String {
        let mut h = Sha256::new();
        for v in self.range_parameters(range) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rounds every parameter to the nearest f32 so the network survives a
    /// checkpoint round trip bit for bit.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            for p in &mut l.params {
                for v in p.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    pub fn tensors(&self, range: Range<usize>) -> Vec<&Tensor> {
        self.layers[range]
            .iter()
            .flat_map(|l| l.params.iter())
            .collect()
    }

    pub fn load_tensors(&mut self, range: Range<usize>, tensors: &[Tensor]) -> Result<()> {
        let targets: Vec<&mut Tensor> = self.layers[range]
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect();
        if targets.len() != tensors.len() {
            return Err(AdamError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                targets.len(),
                tensors.len()
            )));
        }
        if targets
            .iter()
            .zip(tensors)
            .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(AdamError::ShapeMismatch("tensor shapes differ".into()));
        }
        for (a, b) in targets.into_iter().zip(tensors) {
            *a = b.clone();
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width {
            return Err(AdamError::ShapeMismatch(format!(
                "input width {} but network expects {}",
                input.len(),
                self.input_width
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(AdamError::NonFinite("input".into()));
        }
        Ok(())
    }

    /// Runs `layers[range]` on `x`. The caller is responsible for `x` having
    /// the shape those layers expect.
    pub fn forward_range(&self, range: Range<usize>, x: Tensor) -> Result<Tensor> {
        let mut shape = x.shape().to_vec();
        for l in &self.layers[range.clone()] {
            shape = Layer::output_shape(&l.kind, &shape)?;
        }
        let mut x = x;
        for l in &self.layers[range] {
            x = l.forward(&x);
        }
        Ok(x)
    }

    /// Class probabilities `[p_benign, p_malware]`.
    pub fn forward(&self, input: &[f64]) -> Result<[f64; 2]> {
        self.check_input(input)?;
        let y = self.forward_range(0..self.layers.len(), Tensor::vector(input.to_vec()))?;
        Ok([y.data()[0], y.data()[1]])
    }

    /// Activations before every layer and after the last one.
    fn trace(&self, input: &[f64]) -> Vec<Tensor> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(Tensor::vector(input.to_vec()));
        for l in &self.layers {
            let next = l.forward(acts.last().expect("nonempty"));
            acts.push(next);
        }
        acts
    }

    fn first_trainable(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.trainable && !l.params.is_empty())
    }

    /// Weighted loss `sum_i weight_i * BCE_i` and its gradient with respect to
    /// every parameter (zero for frozen layers).
    pub fn loss_and_gradient(&self, batch: &[WeightedSample<'_>]) -> Result<(f64, Vec<f64>)> {
        let (loss, grad, _) = self.batch_pass(batch)?;
        Ok((loss, grad))
    }

    /// Loss, gradient and the per-sample probabilities seen on the way.
    pub(crate) fn batch_pass(
        &self,
        batch: &[WeightedSample<'_>],
    ) -> Result<(f64, Vec<f64>, Vec<[f64; 2]>)> {
        let mut probs_out = Vec::with_capacity(batch.len());
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        let first = self.first_trainable();
        let n_layers = self.layers.len();
        for s in batch {
            self.check_input(s.input)?;
            let acts = self.trace(s.input);
            let logits = &acts[n_layers - 1];
            loss += s.weight * bce_from_logits(logits.data(), s.label);
            let probs = &acts[n_layers];
            probs_out.push([probs.data()[0], probs.data()[1]]);
            let Some(first) = first else { continue };
            let y = s.label.one_hot();
            // d(BCE)/d(logit) = p - y; skip the sigmoid layer itself
            let dz: Vec<f64> = probs
                .data()
                .iter()
                .zip(y)
                .map(|(p, t)| s.weight * (p - t))
                .collect();
            let mut dy = Tensor::vector(dz);
            for li in (first..n_layers - 1).rev() {
                let layer = &self.layers[li];
                let g = (layer.trainable && !layer.params.is_empty())
                    .then(|| &mut grad[self.offsets[li]..self.offsets[li + 1]]);
                match layer.backward(&acts[li], &acts[li + 1], &dy, g, li > first) {
                    Some(dx) => dy = dx,
                    None => break,
                }
            }
        }
        Ok((loss, grad, probs_out))
    }

    /// `W <- W - lr * grad` on trainable layers only.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (li, l) in self.layers.iter_mut().enumerate() {
            if !l.trainable {
                continue;
            }
            let mut cursor = self.offsets[li];
            for p in &mut l.params {
                let n = p.len();
                for (w, g) in p.data_mut().iter_mut().zip(&grad[cursor..cursor + n]) {
                    *w -= lr * g;
                }
                cursor += n;
            }
        }
    }

    /// One SGD step on the mean BCE of `batch`; returns the pre-step loss.
    /// A non-finite gradient leaves the weights untouched and is reported.
    pub fn backward_and_step(&mut self, batch: &[Sample<'_>], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(AdamError::Empty("batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        let weighted: Vec<WeightedSample> = batch
            .iter()
            .map(|s| WeightedSample {
                input: s.input,
                label: s.label,
                weight: w,
            })
            .collect();
        self.weighted_step(&weighted, lr)
    }

    pub fn weighted_step(&mut self, batch: &[WeightedSample<'_>], lr: f64) -> Result<f64> {
        self.step_with_probs(batch, lr).map(|(loss, _)| loss)
    }

    /// Like [`Network::weighted_step`], also returning the pre-step
    /// probabilities. On a non-finite gradient the error carries no step.
    pub(crate) fn step_with_probs(
        &mut self,
        batch: &[WeightedSample<'_>],
        lr: f64,
    ) -> Result<(f64, Vec<[f64; 2]>)> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(AdamError::InvalidArgument(format!("learning rate {lr}")));
        }
        let (loss, grad, probs) = self.batch_pass(batch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(AdamError::NonFinite("gradient".into()));
        }
        self.apply_gradient(&grad, lr);
        Ok((loss, probs))
    }

    /// Mean BCE over `batch`.
    pub fn mean_loss(&self, batch: &[Sample<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(AdamError::Empty("batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            self.check_input(s.input)?;
            let acts = self.trace(s.input);
            total += bce_from_logits(acts[self.layers.len() - 1].data(), s.label);
        }
        Ok(total / batch.len() as f64)
    }
}

/// Sequential network construction with Glorot-uniform initialisation.
pub struct NetworkBuilder<'r, R: Rng> {
    name: String,
    input_width: usize,
    shape: Vec<usize>,
    layers: Vec<Layer>,
    boundary: Option<usize>,
    rng: &'r mut R,
    error: Option<AdamError>,
}

impl<'r, R: Rng> NetworkBuilder<'r, R> {
    pub fn new(name: impl Into<String>, input_width: usize, rng: &'r mut R) -> Self {
        Self {
            name: name.into(),
            input_width,
            shape: vec![input_width],
            layers: Vec::new(),
            boundary: None,
            rng,
            error: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn glorot(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        Tensor::new(shape, data).expect("sized")
    }

    fn push(mut self, kind: LayerKind) -> Self {
        if self.error.is_some() {
            return self;
        }
        let out = match Layer::output_shape(&kind, &self.shape) {
            Ok(s) => s,
            Err(e) => {
                self.error = Some(e);
                return self;
            }
        };
        let params = match kind {
            LayerKind::Dense { inputs, units } => vec![
                self.glorot(vec![units, inputs], inputs, units),
                Tensor::zeros(vec![units]),
            ],
            LayerKind::Conv2d {
                in_channels,
                filters,
            } => vec![
                self.glorot(
                    vec![filters, in_channels, 3, 3],
                    in_channels * 9,
                    filters * 9,
                ),
                Tensor::zeros(vec![filters]),
            ],
            _ => Vec::new(),
        };
        self.layers.push(Layer {
            kind,
            params,
            trainable: true,
        });
        self.shape = out;
        self
    }

    pub fn dense(self, units: usize) -> Self {
        let inputs = self.shape.first().copied().unwrap_or(0);
        self.push(LayerKind::Dense { inputs, units })
    }

    pub fn conv(self, filters: usize) -> Self {
        let in_channels = self.shape.first().copied().unwrap_or(0);
        self.push(LayerKind::Conv2d {
            in_channels,
            filters,
        })
    }

    pub fn maxpool(self) -> Self {
        self.push(LayerKind::MaxPool)
    }

    pub fn global_avg_pool(self) -> Self {
        self.push(LayerKind::GlobalAvgPool)
    }

    pub fn act(self, a: Activation) -> Self {
        self.push(LayerKind::Activation(a))
    }

    pub fn flatten(self) -> Self {
        self.push(LayerKind::Flatten)
    }

    pub fn reshape(self, side: usize) -> Self {
        self.push(LayerKind::Reshape { side })
    }

    /// Marks the current end of the layer list as the base/head boundary.
    pub fn boundary(mut self) -> Self {
        self.boundary = Some(self.layers.len());
        self
    }

    pub fn build(self) -> Result<Network> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Network::new(self.name, self.input_width, self.layers, self.boundary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_net(w1: f64, w2: f64) -> Network {
        let layers = vec![
            Layer {
                kind: LayerKind::Dense {
                    inputs: 1,
                    units: 2,
                },
                params: vec![
                    Tensor::new(vec![2, 1], vec![w1, w2]).unwrap(),
                    Tensor::vector(vec![0.0, 0.0]),
                ],
                trainable: true,
            },
            Layer {
                kind: LayerKind::Activation(Activation::Sigmoid),
                params: vec![],
                trainable: true,
            },
        ];
        Network::new("d", 1, layers, None).unwrap()
    }

    fn mlp(rng: &mut ChaCha8Rng) -> Network {
        NetworkBuilder::new("m", 6, rng)
            .dense(5)
            .act(Activation::Tanh)
            .boundary()
            .dense(4)
            .act(Activation::Relu)
            .dense(2)
            .act(Activation::Sigmoid)
            .build()
            .unwrap()
    }

    #[test]
    fn zero_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = mlp(&mut rng);
        let n = net.param_count();
        net.set_parameters(&vec![0.0; n]).unwrap();
        assert_eq!(
            net.forward(&[0.3, -1.0, 2.0, 0.0, 1.0, 5.0]).unwrap(),
            [0.5, 0.5]
        );
    }

    #[test]
    fn single_dense_closed_form() {
        let net = dense_net(0.7, -1.3);
        let p = net.forward(&[2.0]).unwrap();
        assert_eq!(p, [sigmoid(1.4), sigmoid(-2.6)]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = dense_net(1.0, 1.0);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(AdamError::ShapeMismatch(_))
        ));
        assert!(matches!(
            net.forward(&[f64::NAN]),
            Err(AdamError::NonFinite(_))
        ));
    }

    #[test]
    fn zero_rate_leaves_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = mlp(&mut rng);
        let before = net.parameters();
        let x = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let loss = net
            .backward_and_step(
                &[Sample {
                    input: &x,
                    label: Label::Malware,
                }],
                0.0,
            )
            .unwrap();
        assert!(loss > 0.0);
        assert_eq!(net.parameters(), before);
    }

    #[test]
    fn frozen_layers_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = mlp(&mut rng);
        net.set_trainable(0..2, false);
        let base = net.range_parameters(0..2);
        let head = net.range_parameters(2..net.layers().len());
        let x = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        for i in 0..100 {
            let label = if i % 2 == 0 {
                Label::Benign
            } else {
                Label::Malware
            };
            net.backward_and_step(&[Sample { input: &x, label }], 0.1)
                .unwrap();
        }
        assert_eq!(net.range_parameters(0..2), base);
        assert_ne!(net.range_parameters(2..net.layers().len()), head);
    }

    #[test]
    fn loss_is_mean_of_per_sample_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = mlp(&mut rng);
        let xs = [
            [1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 1.0, 1.0],
        ];
        let labels = [Label::Benign, Label::Malware];
        let batch: Vec<Sample> = xs
            .iter()
            .zip(labels)
            .map(|(x, label)| Sample { input: x, label })
            .collect();
        // scalar oracle from probabilities
        let mut expected = 0.0;
        for (x, l) in xs.iter().zip(labels) {
            let p = net.forward(x).unwrap();
            let y = l.one_hot();
            for k in 0..2 {
                expected -= y[k] * p[k].ln() + (1.0 - y[k]) * (1.0 - p[k]).ln();
            }
        }
        expected /= 2.0;
        assert!((net.mean_loss(&batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_networks_without_sigmoid_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = NetworkBuilder::new("x", 3, &mut rng).dense(2).build();
        assert!(r.is_err());
        let r = NetworkBuilder::new("x", 3, &mut rng)
            .dense(3)
            .act(Activation::Sigmoid)
            .build();
        assert!(r.is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = mlp(&mut rng);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
