use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Fingerprint, Label, LabeledSample, Provenance, Split, TemplateRegistry};
use crate::error::{AdamError, Result};

/// Firing probability of features that carry no class signal.
pub const BACKGROUND_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_benign: usize,
    pub n_malware: usize,
    pub n_unlabeled: usize,
    pub signal_strength: f64,
    pub seed: u64,
}

/// Indices whose firing depends on the class, split per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedFeatures {
    pub benign: Vec<usize>,
    pub malware: Vec<usize>,
}

impl PlantedFeatures {
    /// Draws, inside every template, `max(1, width / 8)` indices per class
    /// (disjoint between classes, or shared when the template has width 1).
    pub fn draw(registry: &TemplateRegistry, rng: &mut impl Rng) -> Self {
        let mut benign = Vec::new();
        let mut malware = Vec::new();
        for t in registry.templates() {
            let mut idx: Vec<usize> = t.range().collect();
            idx.shuffle(rng);
            let k = (t.width() / 8).max(1);
            if t.width() >= 2 * k {
                malware.extend_from_slice(&idx[..k]);
                benign.extend_from_slice(&idx[k..2 * k]);
            } else {
                malware.extend_from_slice(&idx[..k]);
            }
        }
        benign.sort_unstable();
        malware.sort_unstable();
        Self { benign, malware }
    }

    fn for_class(&self, label: Label) -> &[usize] {
        match label {
            Label::Benign => &self.benign,
            Label::Malware => &self.malware,
        }
    }
}

/// The planted features [`synth_generate`] uses for a given registry and seed.
pub fn planted_features(registry: &TemplateRegistry, seed: u64) -> PlantedFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PlantedFeatures::draw(registry, &mut rng)
}

/// Generates a labeled corpus with a controllable class signal.
///
/// Each class owns planted features which fire with probability
/// `signal_strength` on that class and `1 - signal_strength` on the other;
/// every other feature fires with probability 0.1. Splits are assigned
/// 80:10:10 within each group (benign, malware, unlabeled).
pub fn synth_generate(registry: &TemplateRegistry, params: &SynthParams) -> Result<Dataset> {
    let s = params.signal_strength;
    if !(0.5..=1.0).contains(&s) {
        return Err(AdamError::InvalidArgument(format!(
            "signal_strength {s} outside [0.5, 1.0]"
        )));
    }
    if params.n_benign == 0 && params.n_malware == 0 {
        return Err(AdamError::InvalidArgument(
            "at least one labeled class needs samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let planted = PlantedFeatures::draw(registry, &mut rng);
    let f = registry.total_features();

    // per-feature firing probability for each class
    let mut rate = [vec![BACKGROUND_RATE; f], vec![BACKGROUND_RATE; f]];
    for label in [Label::Benign, Label::Malware] {
        for &i in planted.for_class(label) {
            rate[label.index()][i] = s;
            rate[label.flipped().index()][i] = 1.0 - s;
        }
    }

    let mut samples = Vec::with_capacity(params.n_benign + params.n_malware + params.n_unlabeled);
    let mut counter = 0usize;
    let mut draw = |rng: &mut ChaCha8Rng, class: Label| -> Fingerprint {
        let bits = rate[class.index()]
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        let id = format!("syn-{}-{:06}", params.seed, counter);
        counter += 1;
        Fingerprint { bits, app_id: id }
    };

    let groups = [
        (params.n_benign, Some(Label::Benign)),
        (params.n_malware, Some(Label::Malware)),
        (params.n_unlabeled, None),
    ];
    for (count, label) in groups {
        let splits = split_tags(count, &mut rng);
        for split in splits {
            let class = match label {
                Some(l) => l,
                None => {
                    if rng.random::<bool>() {
                        Label::Malware
                    } else {
                        Label::Benign
                    }
                }
            };
            let fingerprint = draw(&mut rng, class);
            samples.push(LabeledSample {
                fingerprint,
                label,
                provenance: if label.is_some() {
                    Provenance::Synthetic
                } else {
                    Provenance::User
                },
                split,
                hidden_truth: if label.is_none() { Some(class) } else { None },
            });
        }
    }
    Dataset::new(registry.clone(), samples)
}

/// Shuffled 80:10:10 split tags for `n` samples.
fn split_tags(n: usize, rng: &mut impl Rng) -> Vec<Split> {
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut tags: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            }
        })
        .collect();
    tags.shuffle(rng);
    tags
}
