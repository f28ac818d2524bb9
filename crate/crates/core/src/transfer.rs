//! Base/head splitting. A collaborative model keeps a pre-trained network's
//! base frozen and trains a freshly initialised head on top of it.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AdamError, Result};
use crate::nn::{
    load_checkpoint, save_checkpoint, Activation, Checkpoint, Network, NetworkBuilder, Tensor,
};
use crate::zoo::{ModelKind, ModelName, ModelSpec};

/// Replacement head: tanh dense layers of the given widths, then a
/// two-unit sigmoid output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    /// Width the head is built for; checked against the base when set.
    #[serde(default)]
    pub input_width: Option<usize>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            input_width: None,
        }
    }
}

impl HeadSpec {
    pub fn param_count(&self, input_width: usize) -> usize {
        let mut prev = input_width;
        let mut total = 0;
        for &h in self.hidden.iter().chain(std::iter::once(&2)) {
            total += prev * h + h;
            prev = h;
        }
        total
    }

    /// A standalone head network taking `input_width` features.
    pub fn build(&self, name: &str, input_width: usize, seed: u64) -> Result<Network> {
        if let Some(w) = self.input_width {
            if w != input_width {
                return Err(AdamError::ShapeMismatch(format!(
                    "head expects {w} inputs but the base emits {input_width}"
                )));
            }
        }
        if self.hidden.contains(&0) {
            return Err(AdamError::InvalidArgument("head layer of width 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = NetworkBuilder::new(name, input_width, &mut rng);
        for &h in &self.hidden {
            b = b.dense(h).act(Activation::Tanh);
        }
        b.dense(2).act(Activation::Sigmoid).build()
    }
}

/// Marks the base of `net` non-trainable and returns the width a new head
/// must accept.
pub fn split_and_freeze(net: &mut Network) -> Result<usize> {
    let b = net.base_boundary().ok_or(AdamError::MissingBoundary)?;
    net.set_trainable(0..b, false);
    net.set_trainable(b..net.layers().len(), true);
    let shape = net.shape_after(b);
    if shape.len() != 1 {
        return Err(AdamError::ShapeMismatch(format!(
            "base output {shape:?} is not a vector"
        )));
    }
    Ok(shape[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollaborativeModel {
    source: ModelName,
    network: Network,
    boundary: usize,
    finite: bool,
}

/// Composes the frozen base of `pretrained` with a head built from `spec`.
pub fn attach_head(
    source: ModelName,
    pretrained: &Network,
    spec: &HeadSpec,
    seed: u64,
) -> Result<CollaborativeModel> {
    let mut base = pretrained.clone();
    let width = split_and_freeze(&mut base)?;
    let boundary = base.base_boundary().expect("checked by split_and_freeze");
    let head = spec.build("head", width, seed)?;
    let mut layers: Vec<_> = base.layers()[..boundary].to_vec();
    layers.extend(head.layers().iter().cloned());
    let network = Network::new(
        format!("{}-collab", source.as_str()),
        pretrained.input_width(),
        layers,
        Some(boundary),
    )?;
    Ok(CollaborativeModel {
        source,
        network,
        boundary,
        finite: true,
    })
}

impl CollaborativeModel {
    /// Collaborative counterpart of a zoo model; only CNN kinds have one.
    pub fn from_zoo(
        spec: &ModelSpec,
        pretrained: &Network,
        head: &HeadSpec,
        seed: u64,
    ) -> Result<Self> {
        if spec.kind != ModelKind::Cnn {
            return Err(AdamError::WrongModel(format!(
                "{} is not CNN-based and has no collaborative model",
                spec.name
            )));
        }
        attach_head(spec.name, pretrained, head, seed)
    }

    pub fn source(&self) -> ModelName {
        self.source
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn base_range(&self) -> Range<usize> {
        0..self.boundary
    }

    pub fn head_range(&self) -> Range<usize> {
        self.boundary..self.network.layers().len()
    }

    pub fn embedding_width(&self) -> usize {
        self.network.shape_after(self.boundary)[0]
    }

    pub fn head_param_count(&self) -> usize {
        self.network.range_param_count(self.head_range())
    }

    pub fn base_hash(&self) -> String {
        self.network.range_hash(self.base_range())
    }

    /// Output of the frozen base for one input.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.network.input_width() {
            return Err(AdamError::ShapeMismatch(format!(
                "input width {} but model expects {}",
                input.len(),
                self.network.input_width()
            )));
        }
        Ok(self
            .network
            .forward_range(self.base_range(), Tensor::vector(input.to_vec()))?
            .into_data())
    }

    pub fn forward(&self, input: &[f64]) -> Result<[f64; 2]> {
        self.network.forward(input)
    }

    /// The head as a standalone network over embeddings.
    pub fn head_network(&self) -> Network {
        let layers = self.network.layers()[self.head_range()].to_vec();
        Network::new("head", self.embedding_width(), layers, None)
            .expect("head layers form a valid network")
    }

    pub fn export_head(&self) -> Vec<f64> {
        self.network.range_parameters(self.head_range())
    }

    /// Replaces the head weights. Non-finite values are accepted and
    /// reported through [`CollaborativeModel::is_finite`].
    pub fn import_head(&mut self, weights: &[f64]) -> Result<()> {
        self.network
            .set_range_parameters(self.head_range(), weights)?;
        self.finite = weights.iter().all(|v| v.is_finite());
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.finite
    }

    pub fn head_checkpoint(&self, spec: &ModelSpec) -> Checkpoint {
        Checkpoint {
            name: format!("{}-head", self.source.as_str()),
            tensors: self
                .network
                .tensors(self.head_range())
                .into_iter()
                .cloned()
                .collect(),
            meta: Some(spec.checkpoint_meta(true)),
        }
    }

    pub fn save_head(&self, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.head_checkpoint(spec), path)
    }

    pub fn load_head(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let ck = load_checkpoint(path)?;
        if !ck.meta.as_ref().is_some_and(|m| m.head_only) {
            return Err(AdamError::InvalidArgument(
                "checkpoint is not head-only".into(),
            ));
        }
        let range = self.head_range();
        self.network.load_tensors(range, &ck.tensors)?;
        self.finite = self.export_head().iter().all(|v| v.is_finite());
        Ok(())
    }
}
