//! The seven feature-specific models: the static CNN over the whole
//! fingerprint and six helper models over template subsets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AdamError, Result};
use crate::fingerprint::{
    project, Fingerprint, TemplateRegistry, API_CLASSES, API_SENSITIVE_METHODS, CATEGORIES,
    DEVICE_FEATURES, INTENTS, MANIFEST_ATTRIBUTES, PERMISSIONS, PROTECTION_LEVELS, PROVIDERS,
    RECEIVERS, SERVICES,
};
use crate::nn::{
    load_checkpoint, save_checkpoint, Activation, Checkpoint, CheckpointMeta, Network,
    NetworkBuilder,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelName {
    Static,
    #[serde(rename = "HM1")]
    Hm1,
    #[serde(rename = "HM2")]
    Hm2,
    #[serde(rename = "HM3")]
    Hm3,
    #[serde(rename = "HM4")]
    Hm4,
    #[serde(rename = "HM5")]
    Hm5,
    #[serde(rename = "HM6")]
    Hm6,
}

impl ModelName {
    pub const ALL: [ModelName; 7] = [
        ModelName::Static,
        ModelName::Hm1,
        ModelName::Hm2,
        ModelName::Hm3,
        ModelName::Hm4,
        ModelName::Hm5,
        ModelName::Hm6,
    ];

    /// The CNN-based kinds, which are the ones with collaborative models.
    pub const CNN: [ModelName; 4] = [
        ModelName::Static,
        ModelName::Hm3,
        ModelName::Hm5,
        ModelName::Hm6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Static => "Static",
            ModelName::Hm1 => "HM1",
            ModelName::Hm2 => "HM2",
            ModelName::Hm3 => "HM3",
            ModelName::Hm4 => "HM4",
            ModelName::Hm5 => "HM5",
            ModelName::Hm6 => "HM6",
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            ModelName::Hm1 | ModelName::Hm2 | ModelName::Hm4 => ModelKind::Mlp,
            _ => ModelKind::Cnn,
        }
    }

    /// Feature templates per model, in registry order.
    pub fn templates(self) -> &'static [&'static str] {
        const BASE: [&str; 3] = [PERMISSIONS, PROTECTION_LEVELS, DEVICE_FEATURES];
        match self {
            ModelName::Static => &[
                PERMISSIONS,
                PROTECTION_LEVELS,
                DEVICE_FEATURES,
                INTENTS,
                CATEGORIES,
                PROVIDERS,
                RECEIVERS,
                SERVICES,
                API_CLASSES,
                API_SENSITIVE_METHODS,
                MANIFEST_ATTRIBUTES,
            ],
            ModelName::Hm1 => &BASE,
            ModelName::Hm2 => &[
                PERMISSIONS,
                PROTECTION_LEVELS,
                DEVICE_FEATURES,
                INTENTS,
                CATEGORIES,
                PROVIDERS,
                RECEIVERS,
                SERVICES,
            ],
            ModelName::Hm3 => &[
                PERMISSIONS,
                PROTECTION_LEVELS,
                DEVICE_FEATURES,
                API_CLASSES,
                API_SENSITIVE_METHODS,
            ],
            ModelName::Hm4 => &[PERMISSIONS, PROTECTION_LEVELS, DEVICE_FEATURES, API_CLASSES],
            ModelName::Hm5 => &[
                PERMISSIONS,
                PROTECTION_LEVELS,
                DEVICE_FEATURES,
                INTENTS,
                CATEGORIES,
                PROVIDERS,
                RECEIVERS,
                SERVICES,
                API_CLASSES,
            ],
            ModelName::Hm6 => &[
                PERMISSIONS,
                PROTECTION_LEVELS,
                DEVICE_FEATURES,
                INTENTS,
                CATEGORIES,
                PROVIDERS,
                RECEIVERS,
                SERVICES,
                API_CLASSES,
                API_SENSITIVE_METHODS,
            ],
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = AdamError;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| AdamError::InvalidArgument(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    #[default]
    Desk,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        }
    }

    fn static_filters(self) -> [usize; 4] {
        match self {
            Scale::Paper => [16, 32, 64, 128],
            Scale::Desk => [4, 8, 16, 32],
        }
    }

    fn static_dense(self) -> usize {
        match self {
            Scale::Paper => 1024,
            Scale::Desk => 64,
        }
    }

    fn helper_filters(self) -> [usize; 4] {
        self.static_filters()
    }

    fn helper_dense(self) -> usize {
        match self {
            Scale::Paper => 256,
            Scale::Desk => 32,
        }
    }

    fn mlp_hidden(self) -> [usize; 2] {
        match self {
            Scale::Paper => [512, 256],
            Scale::Desk => [64, 32],
        }
    }
}

impl FromStr for Scale {
    type Err = AdamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(AdamError::InvalidArgument(format!("unknown scale `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: ModelName,
    pub kind: ModelKind,
    pub feature_templates: Vec<String>,
    pub scale: Scale,
}

impl ModelSpec {
    pub fn new(name: ModelName, scale: Scale) -> Self {
        Self {
            name,
            kind: name.kind(),
            feature_templates: name.templates().iter().map(|s| s.to_string()).collect(),
            scale,
        }
    }

    pub fn input_width(&self, registry: &TemplateRegistry) -> Result<usize> {
        self.check_templates(registry)?;
        registry.selected_width(&self.feature_templates)
    }

    fn check_templates(&self, registry: &TemplateRegistry) -> Result<()> {
        for t in &self.feature_templates {
            if registry.get(t).is_none() {
                return Err(AdamError::MissingTemplate(t.clone()));
            }
        }
        Ok(())
    }

    /// The model's input for `fp`: its templates' slices, as f64.
    pub fn project(&self, fp: &Fingerprint, registry: &TemplateRegistry) -> Result<Vec<f64>> {
        Ok(project(fp, registry, &self.feature_templates)?.to_f64())
    }

    /// Projects many fingerprints by precomputed index list; cheaper than
    /// [`ModelSpec::project`] in bulk.
    pub fn projector(&self, registry: &TemplateRegistry) -> Result<Projector> {
        self.check_templates(registry)?;
        Ok(Projector {
            total: registry.total_features(),
            indices: registry.selected_indices(&self.feature_templates)?,
        })
    }

    pub fn build(&self, registry: &TemplateRegistry, seed: u64) -> Result<Network> {
        let width = self.input_width(registry)?;
        match self.kind {
            ModelKind::Cnn if self.name == ModelName::Static => {
                build_static(width, self.scale, seed)
            }
            ModelKind::Cnn => build_cnn_helper(self.name, width, self.scale, seed),
            ModelKind::Mlp => build_mlp_helper(self.name, width, self.scale, seed),
        }
    }

    pub fn checkpoint_meta(&self, head_only: bool) -> CheckpointMeta {
        CheckpointMeta {
            model: self.name.as_str().to_string(),
            scale: self.scale.as_str().to_string(),
            templates: self.feature_templates.clone(),
            head_only,
        }
    }

    /// Reads back the spec recorded in checkpoint metadata.
    pub fn from_meta(meta: &CheckpointMeta) -> Result<Self> {
        Ok(Self {
            name: meta.model.parse()?,
            kind: meta.model.parse::<ModelName>()?.kind(),
            feature_templates: meta.templates.clone(),
            scale: meta.scale.parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projector {
    total: usize,
    indices: Vec<usize>,
}

impl Projector {
    pub fn width(&self) -> usize {
        self.indices.len()
    }

    pub fn apply(&self, fp: &Fingerprint) -> Result<Vec<f64>> {
        if fp.bits.len() != self.total {
            return Err(AdamError::FeatureMismatch {
                expected: self.total,
                found: fp.bits.len(),
            });
        }
        Ok(self.indices.iter().map(|&i| fp.bits[i] as f64).collect())
    }
}

/// Side of the square grid a vector of `width` features is padded into.
pub fn grid_side(width: usize) -> usize {
    let mut s = (width as f64).sqrt() as usize;
    while s * s < width {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= width {
        s -= 1;
    }
    s
}

const STATIC_MIN_SIDE: usize = 16;
const HELPER_MIN_SIDE: usize = 4;

fn checked_side(width: usize, min: usize) -> Result<usize> {
    let side = grid_side(width);
    if side < min {
        return Err(AdamError::GridTooSmall { side, min });
    }
    Ok(side)
}

/// Static CNN: four blocks of two 3x3 convolutions and a 2x2 pool, global
/// average pooling (base ends here), two tanh dense layers, sigmoid output.
pub fn build_static(f_sel: usize, scale: Scale, seed: u64) -> Result<Network> {
    let side = checked_side(f_sel, STATIC_MIN_SIDE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = NetworkBuilder::new("Static", f_sel, &mut rng).reshape(side);
    for f in scale.static_filters() {
        b = b
            .conv(f)
            .act(Activation::Relu)
            .conv(f)
            .act(Activation::Relu)
            .maxpool();
    }
    let d = scale.static_dense();
    b.global_avg_pool()
        .boundary()
        .dense(d)
        .act(Activation::Tanh)
        .dense(d)
        .act(Activation::Tanh)
        .dense(2)
        .act(Activation::Sigmoid)
        .build()
}

/// MLP helper with two tanh hidden layers; the base is the first of them.
pub fn build_mlp_helper(name: ModelName, f_sel: usize, scale: Scale, seed: u64) -> Result<Network> {
    if name.kind() != ModelKind::Mlp {
        return Err(AdamError::WrongModel(name.to_string()));
    }
    let [h1, h2] = scale.mlp_hidden();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkBuilder::new(name.as_str(), f_sel, &mut rng)
        .flatten()
        .dense(h1)
        .act(Activation::Tanh)
        .boundary()
        .dense(h2)
        .act(Activation::Tanh)
        .dense(2)
        .act(Activation::Sigmoid)
        .build()
}

/// CNN helper: four single 3x3 convolutions with a pool after every second
/// one, global average pooling (base ends here), one tanh dense layer.
pub fn build_cnn_helper(name: ModelName, f_sel: usize, scale: Scale, seed: u64) -> Result<Network> {
    if name.kind() != ModelKind::Cnn || name == ModelName::Static {
        return Err(AdamError::WrongModel(name.to_string()));
    }
    let side = checked_side(f_sel, HELPER_MIN_SIDE)?;
    let [f1, f2, f3, f4] = scale.helper_filters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkBuilder::new(name.as_str(), f_sel, &mut rng)
        .reshape(side)
        .conv(f1)
        .act(Activation::Relu)
        .conv(f2)
        .act(Activation::Relu)
        .maxpool()
        .conv(f3)
        .act(Activation::Relu)
        .conv(f4)
        .act(Activation::Relu)
        .maxpool()
        .global_avg_pool()
        .boundary()
        .dense(scale.helper_dense())
        .act(Activation::Tanh)
        .dense(2)
        .act(Activation::Sigmoid)
        .build()
}

#[derive(Clone, Debug)]
pub struct ZooModel {
    pub spec: ModelSpec,
    pub network: Network,
}

impl ZooModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            name: self.spec.name.as_str().to_string(),
            tensors: self
                .network
                .tensors(0..self.network.layers().len())
                .into_iter()
                .cloned()
                .collect(),
            meta: Some(self.spec.checkpoint_meta(false)),
        }
    }

    /// Saves the network at f32 precision; the in-memory copy is rounded too
    /// so that it matches what a reload produces.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.network.round_to_f32();
        save_checkpoint(&self.checkpoint(), path)
    }

    /// Rebuilds the architecture from the checkpoint metadata and loads the
    /// stored weights.
    pub fn load(path: impl AsRef<Path>, registry: &TemplateRegistry) -> Result<Self> {
        let path = path.as_ref();
        let ck = load_checkpoint(path)?;
        let meta = ck.meta.as_ref().ok_or_else(|| {
            AdamError::MalformedHeader(format!("{} has no model metadata", path.display()))
        })?;
        if meta.head_only {
            return Err(AdamError::InvalidArgument(format!(
                "{} holds head weights only",
                path.display()
            )));
        }
        let spec = ModelSpec::from_meta(meta)?;
        let mut network = spec.build(registry, 0)?;
        let n = network.layers().len();
        network.load_tensors(0..n, &ck.tensors)?;
        Ok(Self { spec, network })
    }
}

/// Builds every model in table order, each seeded from `seed` and its rank.
pub fn build_all(registry: &TemplateRegistry, scale: Scale, seed: u64) -> Result<Vec<ZooModel>> {
    ModelName::ALL
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let spec = ModelSpec::new(name, scale);
            let network = spec.build(registry, seed.wrapping_add(i as u64))?;
            Ok(ZooModel { spec, network })
        })
        .collect()
}
