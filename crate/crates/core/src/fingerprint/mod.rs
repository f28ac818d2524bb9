//! Application fingerprints: feature templates, registries, labeled datasets,
//! subset projection, the synthetic corpus generator and the on-disk formats.
//!
//! A fingerprint is a 0/1 vector over `F` features. The features are grouped
//! into named, disjoint, contiguous templates (permissions, intents, API
//! classes, ...) that together cover `[0, F)`.

mod format;
mod synth;

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{AdamError, Result};

pub use format::{
    decode_dataset, decode_dataset_jsonl, encode_dataset, encode_dataset_jsonl, load_dataset,
    save_dataset, MAGIC as FINGERPRINT_MAGIC, VERSION as FINGERPRINT_VERSION,
};
pub use synth::{planted_features, synth_generate, PlantedFeatures, SynthParams, BACKGROUND_RATE};

pub const PERMISSIONS: &str = "permissions";
pub const PROTECTION_LEVELS: &str = "protection-levels";
pub const DEVICE_FEATURES: &str = "device-features";
pub const INTENTS: &str = "intents";
pub const CATEGORIES: &str = "categories";
pub const PROVIDERS: &str = "providers";
pub const RECEIVERS: &str = "receivers";
pub const SERVICES: &str = "services";
pub const API_CLASSES: &str = "api-classes";
pub const API_SENSITIVE_METHODS: &str = "api-sensitive-methods";
pub const MANIFEST_ATTRIBUTES: &str = "manifest-attributes";

/// Desk-scale template widths. Sums to 256 so the full fingerprint lays out
/// as a 16x16 grid.
pub const DESK_WIDTHS: [(&str, usize); 11] = [
    (PERMISSIONS, 64),
    (PROTECTION_LEVELS, 8),
    (DEVICE_FEATURES, 24),
    (INTENTS, 24),
    (CATEGORIES, 8),
    (PROVIDERS, 8),
    (RECEIVERS, 16),
    (SERVICES, 16),
    (API_CLASSES, 40),
    (API_SENSITIVE_METHODS, 32),
    (MANIFEST_ATTRIBUTES, 16),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTemplate {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl FeatureTemplate {
    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Ordered, disjoint templates covering `[0, total_features)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    templates: Vec<FeatureTemplate>,
    total_features: usize,
}

impl TemplateRegistry {
    /// Builds a registry by laying the templates out contiguously in list order.
    pub fn build<S: AsRef<str>>(spec: &[(S, usize)]) -> Result<Self> {
        if spec.is_empty() {
            return Err(AdamError::Empty("template list".into()));
        }
        let mut seen = HashSet::new();
        let mut templates = Vec::with_capacity(spec.len());
        let mut start = 0usize;
        for (name, width) in spec {
            let name = name.as_ref();
            if !seen.insert(name.to_string()) {
                return Err(AdamError::DuplicateTemplate(name.to_string()));
            }
            if *width == 0 {
                return Err(AdamError::ZeroWidth(name.to_string()));
            }
            let end = start
                .checked_add(*width)
                .ok_or_else(|| AdamError::InvalidArgument("template widths overflow".into()))?;
            templates.push(FeatureTemplate {
                name: name.to_string(),
                start,
                end,
            });
            start = end;
        }
        Ok(Self {
            templates,
            total_features: start,
        })
    }

    /// Rebuilds a registry from explicit ranges (as read from a file), checking
    /// that they are non-empty, disjoint, and cover `[0, total_features)`.
    pub fn from_templates(templates: Vec<FeatureTemplate>, total_features: usize) -> Result<Self> {
        let reg = Self {
            templates,
            total_features,
        };
        reg.validate()?;
        Ok(reg)
    }

    /// The eleven fingerprint categories at desk-scale widths (F = 256).
    pub fn desk_default() -> Self {
        Self::build(&DESK_WIDTHS).expect("desk widths are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() || self.total_features == 0 {
            return Err(AdamError::MalformedHeader(
                "registry has no features".into(),
            ));
        }
        let mut names = HashSet::new();
        let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(self.templates.len());
        for t in &self.templates {
            if !names.insert(t.name.as_str()) {
                return Err(AdamError::DuplicateTemplate(t.name.clone()));
            }
            if t.start >= t.end {
                return Err(AdamError::ZeroWidth(t.name.clone()));
            }
            ranges.push((t.start, t.end));
        }
        ranges.sort_unstable();
        let mut cursor = 0;
        for (s, e) in ranges {
            if s != cursor {
                return Err(AdamError::MalformedHeader(format!(
                    "template ranges leave a gap or overlap at index {cursor}"
                )));
            }
            cursor = e;
        }
        if cursor != self.total_features {
            return Err(AdamError::FeatureMismatch {
                expected: self.total_features,
                found: cursor,
            });
        }
        Ok(())
    }

    pub fn templates(&self) -> &[FeatureTemplate] {
        &self.templates
    }

    pub fn total_features(&self) -> usize {
        self.total_features
    }

    pub fn get(&self, name: &str) -> Option<&FeatureTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    /// Sum of the named templates' widths.
    pub fn selected_width<S: AsRef<str>>(&self, names: &[S]) -> Result<usize> {
        Ok(self.selection(names)?.iter().map(|t| t.width()).sum())
    }

    /// Resolves names to templates, returned in registry order.
    fn selection<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<&FeatureTemplate>> {
        if names.is_empty() {
            return Err(AdamError::EmptySelection);
        }
        for n in names {
            if self.get(n.as_ref()).is_none() {
                return Err(AdamError::UnknownTemplate(n.as_ref().to_string()));
            }
        }
        Ok(self
            .templates
            .iter()
            .filter(|t| names.iter().any(|n| n.as_ref() == t.name))
            .collect())
    }

    /// Global indices selected by `names`, in registry order.
    pub fn selected_indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        Ok(self
            .selection(names)?
            .iter()
            .flat_map(|t| t.range())
            .collect())
    }
}

/// Concatenates the named templates' slices of `bits` in registry order.
pub fn project<S: AsRef<str>>(
    fp: &Fingerprint,
    registry: &TemplateRegistry,
    names: &[S],
) -> Result<Fingerprint> {
    if fp.bits.len() != registry.total_features() {
        return Err(AdamError::FeatureMismatch {
            expected: registry.total_features(),
            found: fp.bits.len(),
        });
    }
    let mut bits = Vec::new();
    for t in registry.selection(names)? {
        bits.extend_from_slice(&fp.bits[t.range()]);
    }
    Ok(Fingerprint {
        bits,
        app_id: fp.app_id.clone(),
    })
}

/// Registry describing the output of [`project`] for the same selection.
pub fn projected_registry<S: AsRef<str>>(
    registry: &TemplateRegistry,
    names: &[S],
) -> Result<TemplateRegistry> {
    let spec: Vec<(&str, usize)> = registry
        .selection(names)?
        .iter()
        .map(|t| (t.name.as_str(), t.width()))
        .collect();
    TemplateRegistry::build(&spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub bits: Vec<f32>,
    pub app_id: String,
}

impl Fingerprint {
    pub fn new(app_id: impl Into<String>, bits: Vec<f32>) -> Result<Self> {
        let fp = Self {
            bits,
            app_id: app_id.into(),
        };
        fp.check_domain()?;
        Ok(fp)
    }

    pub fn check_domain(&self) -> Result<()> {
        match self.bits.iter().position(|&b| b != 0.0 && b != 1.0) {
            Some(index) => Err(AdamError::DomainViolation {
                index,
                value: self.bits[index],
            }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// The two classes. Benign is output 0, malware output 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malware,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Benign => Label::Malware,
            Label::Malware => Label::Benign,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malware => 1,
        }
    }

    /// One-hot target `[benign, malware]`.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Benign => [1.0, 0.0],
            Label::Malware => [0.0, 1.0],
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Label::Benign => "B",
            Label::Malware => "M",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Stock-ROM app; always benign.
    System,
    User,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub fingerprint: Fingerprint,
    /// `None` means unlabeled.
    pub label: Option<Label>,
    pub provenance: Provenance,
    pub split: Split,
    /// Ground truth of an unlabeled sample. Only evaluation code reads this.
    pub hidden_truth: Option<Label>,
}

impl LabeledSample {
    /// Label if present, else the hidden truth.
    pub fn truth(&self) -> Option<Label> {
        self.label.or(self.hidden_truth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub registry: TemplateRegistry,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(registry: TemplateRegistry, samples: Vec<LabeledSample>) -> Result<Self> {
        let ds = Self { registry, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.registry.validate()?;
        let f = self.registry.total_features();
        for s in &self.samples {
            if s.fingerprint.len() != f {
                return Err(AdamError::FeatureMismatch {
                    expected: f,
                    found: s.fingerprint.len(),
                });
            }
            s.fingerprint.check_domain()?;
            if s.provenance == Provenance::System && s.label != Some(Label::Benign) {
                return Err(AdamError::InvalidArgument(format!(
                    "system app {} must be labeled benign",
                    s.fingerprint.app_id
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn labeled(&self) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(|s| s.label.is_some())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(|s| s.label.is_none())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
