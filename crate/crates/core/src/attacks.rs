//! Poisoning behaviours of malicious clients: weight manipulation, feature
//! manipulation and label flipping, plus the per-round adversary draw.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AdamError, Result};
use crate::fingerprint::{Fingerprint, Label, LabeledSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    WeightManipulation,
    FeatureManipulation,
    LabelFlip,
    /// Feature manipulation followed by label flipping.
    Combined,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::WeightManipulation => "weight_manipulation",
            AttackKind::FeatureManipulation => "feature_manipulation",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::Combined => "combined",
        }
    }

    pub fn tampers_weights(self) -> bool {
        self == AttackKind::WeightManipulation
    }

    pub fn tampers_features(self) -> bool {
        matches!(self, AttackKind::FeatureManipulation | AttackKind::Combined)
    }

    pub fn tampers_labels(self) -> bool {
        matches!(self, AttackKind::LabelFlip | AttackKind::Combined)
    }
}

impl std::str::FromStr for AttackKind {
    type Err = AdamError;

    fn from_str(s: &str) -> Result<Self> {
        [
            AttackKind::WeightManipulation,
            AttackKind::FeatureManipulation,
            AttackKind::LabelFlip,
            AttackKind::Combined,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| AdamError::InvalidArgument(format!("unknown attack kind `{s}`")))
    }
}

/// Bounds left unset cover the whole target buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default)]
    pub lb: Option<usize>,
    #[serde(default)]
    pub ub: Option<usize>,
    pub seed: u64,
    pub malicious_fraction: f64,
    #[serde(default = "one")]
    pub flip_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl AttackConfig {
    pub fn new(kind: AttackKind, malicious_fraction: f64, seed: u64) -> Self {
        Self {
            kind,
            lb: None,
            ub: None,
            seed,
            malicious_fraction,
            flip_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("malicious_fraction", self.malicious_fraction),
            ("flip_fraction", self.flip_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AdamError::InvalidArgument(format!(
                    "{what} {v} outside [0, 1]"
                )));
            }
        }
        if let (Some(lb), Some(ub)) = (self.lb, self.ub) {
            if lb >= ub {
                return Err(AdamError::InvalidBounds { lb, ub, len: ub });
            }
        }
        Ok(())
    }

    /// Concrete slice for a buffer of length `len`.
    pub fn bounds(&self, len: usize) -> Result<Range<usize>> {
        let lb = self.lb.unwrap_or(0);
        let ub = self.ub.unwrap_or(len);
        check_bounds(lb, ub, len)
    }
}

pub fn check_bounds(lb: usize, ub: usize, len: usize) -> Result<Range<usize>> {
    if lb >= ub || ub > len {
        return Err(AdamError::InvalidBounds { lb, ub, len });
    }
    Ok(lb..ub)
}

/// Multiplier applied to one weight: `u * (ub - lb)`.
pub fn weight_multiplier(u: f64, lb: usize, ub: usize) -> f64 {
    u * (ub - lb) as f64
}

/// Scales `w[lb..ub]` elementwise by `u * (ub - lb)`, taking each `u` from
/// `draw`. Everything outside the slice is left untouched.
pub fn manipulate_weights_with(
    w: &[f64],
    lb: usize,
    ub: usize,
    mut draw: impl FnMut() -> f64,
) -> Result<Vec<f64>> {
    let range = check_bounds(lb, ub, w.len())?;
    let mut out = w.to_vec();
    for v in &mut out[range] {
        *v *= weight_multiplier(draw(), lb, ub);
    }
    Ok(out)
}

/// [`manipulate_weights_with`] with independent `u ~ U[-1, 1]` per index.
pub fn manipulate_weights(w: &[f64], lb: usize, ub: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    manipulate_weights_with(w, lb, ub, || rng.random_range(-1.0..=1.0))
}

/// Replaces `bits[lb..ub]` with fair coin flips.
pub fn manipulate_features(
    fp: &Fingerprint,
    lb: usize,
    ub: usize,
    rng: &mut impl Rng,
) -> Result<Fingerprint> {
    let range = check_bounds(lb, ub, fp.bits.len())?;
    let mut out = fp.clone();
    for b in &mut out.bits[range] {
        *b = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Swaps benign and malware on a random `floor(fraction * n)` subset of the
/// `n` labeled entries. Unlabeled entries are skipped. Applying it twice with
/// identically seeded generators restores the input.
pub fn flip_labels(labels: &mut [Option<Label>], fraction: f64, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(AdamError::InvalidArgument(format!(
            "flip fraction {fraction} outside [0, 1]"
        )));
    }
    let labeled: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|_| i))
        .collect();
    let k = (fraction * labeled.len() as f64).floor() as usize;
    for j in sample(rng, labeled.len(), k) {
        let i = labeled[j];
        labels[i] = labels[i].map(Label::flipped);
    }
    Ok(())
}

/// [`flip_labels`] over the labels of a sample batch.
pub fn flip_sample_labels(
    batch: &[LabeledSample],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledSample>> {
    let mut labels: Vec<Option<Label>> = batch.iter().map(|s| s.label).collect();
    flip_labels(&mut labels, fraction, rng)?;
    Ok(batch
        .iter()
        .zip(labels)
        .map(|(s, label)| LabeledSample { label, ..s.clone() })
        .collect())
}

/// Which of `n` clients are malicious in `round`: `round(fraction * n)`
/// drawn uniformly, independently per round.
pub fn draw_malicious(n: usize, fraction: f64, seed: u64, round: usize) -> Vec<bool> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = round_rng(seed, round as u64);
    let mut out = vec![false; n];
    for i in sample(&mut rng, n, k) {
        out[i] = true;
    }
    out
}

/// Generator for one (seed, stream) pair, so rounds and clients draw from
/// independent streams.
pub fn round_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tampering of a malicious client's local training batch: feature
/// manipulation first, then label flipping, as the kind requires.
pub fn tamper_batch(
    cfg: &AttackConfig,
    fingerprints: &mut [Fingerprint],
    labels: &mut [Option<Label>],
    rng: &mut impl Rng,
) -> Result<()> {
    if fingerprints.len() != labels.len() {
        return Err(AdamError::LengthMismatch {
            expected: fingerprints.len(),
            found: labels.len(),
        });
    }
    if cfg.kind.tampers_features() {
        for fp in fingerprints.iter_mut() {
            let r = cfg.bounds(fp.bits.len())?;
            *fp = manipulate_features(fp, r.start, r.end, rng)?;
        }
    }
    if cfg.kind.tampers_labels() {
        flip_labels(labels, cfg.flip_fraction, rng)?;
    }
    Ok(())
}

/// Tampering of an outgoing head weight vector.
pub fn tamper_weights(cfg: &AttackConfig, w: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !cfg.kind.tampers_weights() {
        return Ok(w.to_vec());
    }
    let r = cfg.bounds(w.len())?;
    manipulate_weights(w, r.start, r.end, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn hash_f64(v: &[f64]) -> Vec<u8> {
        let mut h = Sha256::new();
        for x in v {
            h.update(x.to_le_bytes());
        }
        h.finalize().to_vec()
    }

    fn hash_f32(v: &[f32]) -> Vec<u8> {
        let mut h = Sha256::new();
        for x in v {
            h.update(x.to_le_bytes());
        }
        h.finalize().to_vec()
    }

    #[test]
    fn single_index_formula() {
        let w = vec![5.0, 2.0, 3.0];
        let out = manipulate_weights_with(&w, 1, 2, || 0.5).unwrap();
        assert_eq!(out, vec![5.0, 1.0, 3.0]);
    }

    #[test]
    fn full_range_multiplier_bounded() {
        let w = vec![1.0; 50];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = manipulate_weights(&w, 0, 50, &mut rng).unwrap();
        assert!(out.iter().all(|m| m.abs() <= 50.0));
        assert!(out.iter().any(|&m| m != 1.0));
    }

    #[test]
    fn multiplier_is_symmetric() {
        // 10^5 independent multipliers over a slice of width 10
        let (lb, ub) = (3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = vec![1.0; 20];
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut bins = [0usize; 10];
        while n < 100_000 {
            let out = manipulate_weights(&w, lb, ub, &mut rng).unwrap();
            for &m in &out[lb..ub] {
                sum += m;
                let u = m / (ub - lb) as f64;
                bins[(((u + 1.0) / 2.0 * 10.0) as usize).min(9)] += 1;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 0.02 * (ub - lb) as f64, "mean {mean}");
        // chi-square, 9 degrees of freedom, critical value at p = 0.01
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 21.666, "chi2 {chi2}");
    }

    #[test]
    fn feature_slice_density() {
        let fp = Fingerprint::new("a", vec![0.0; 1000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ones = 0usize;
        let mut n = 0usize;
        for _ in 0..100 {
            let out = manipulate_features(&fp, 0, 1000, &mut rng).unwrap();
            ones += out.bits.iter().filter(|&&b| b == 1.0).count();
            n += 1000;
        }
        let density = ones as f64 / n as f64;
        assert!((density - 0.5).abs() < 0.01, "density {density}");
        // chi-square, 1 degree of freedom, critical value at p = 0.01
        let e = n as f64 / 2.0;
        let chi2 = ((ones as f64 - e).powi(2) + ((n - ones) as f64 - e).powi(2)) / e;
        assert!(chi2 < 6.635, "chi2 {chi2}");
    }

    #[test]
    fn empty_slice_rejected() {
        let fp = Fingerprint::new("a", vec![0.0; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            manipulate_features(&fp, 3, 3, &mut rng),
            Err(AdamError::InvalidBounds { .. })
        ));
        assert!(manipulate_features(&fp, 2, 9, &mut rng).is_err());
        assert!(manipulate_weights(&[1.0; 4], 4, 2, &mut rng).is_err());
    }

    #[test]
    fn flip_identity_and_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = vec![Some(Label::Benign), None, Some(Label::Benign)];
        let mut l = orig.clone();
        flip_labels(&mut l, 0.0, &mut rng).unwrap();
        assert_eq!(l, orig);
        flip_labels(&mut l, 1.0, &mut rng).unwrap();
        assert_eq!(l, vec![Some(Label::Malware), None, Some(Label::Malware)]);
    }

    #[test]
    fn malicious_count_and_redraw() {
        let rounds: Vec<Vec<bool>> = (0..20).map(|r| draw_malicious(7, 0.4, 9, r)).collect();
        for m in &rounds {
            assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        }
        assert!(rounds.iter().any(|m| m != &rounds[0]));
        assert_eq!(draw_malicious(7, 0.4, 9, 3), rounds[3]);
        assert!(draw_malicious(5, 0.0, 1, 0).iter().all(|&b| !b));
        assert!(draw_malicious(5, 1.0, 1, 0).iter().all(|&b| b));
    }

    #[test]
    fn combined_is_features_then_labels() {
        let cfg = AttackConfig {
            lb: Some(0),
            ub: Some(16),
            ..AttackConfig::new(AttackKind::Combined, 1.0, 3)
        };
        let fps0 = vec![Fingerprint::new("a", vec![0.0; 16]).unwrap(); 4];
        let labels0 = vec![Some(Label::Benign); 4];

        let (mut fps, mut labels) = (fps0.clone(), labels0.clone());
        tamper_batch(
            &cfg,
            &mut fps,
            &mut labels,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();

        // same stream consumed manually in the documented order
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let manual: Vec<Fingerprint> = fps0
            .iter()
            .map(|f| manipulate_features(f, 0, 16, &mut rng).unwrap())
            .collect();
        let mut manual_labels = labels0.clone();
        flip_labels(&mut manual_labels, 1.0, &mut rng).unwrap();
        assert_eq!(fps, manual);
        assert_eq!(labels, manual_labels);
        assert!(labels.iter().all(|l| *l == Some(Label::Malware)));
    }

    #[test]
    fn weight_kind_leaves_batches_alone() {
        let cfg = AttackConfig::new(AttackKind::WeightManipulation, 1.0, 0);
        let mut fps = vec![Fingerprint::new("a", vec![1.0; 4]).unwrap()];
        let mut labels = vec![Some(Label::Benign)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        tamper_batch(&cfg, &mut fps, &mut labels, &mut rng).unwrap();
        assert_eq!(fps[0].bits, vec![1.0; 4]);
        assert_eq!(labels[0], Some(Label::Benign));
        let flip = AttackConfig::new(AttackKind::LabelFlip, 1.0, 0);
        assert_eq!(
            tamper_weights(&flip, &[1.0, 2.0], &mut rng).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::new(AttackKind::LabelFlip, 1.5, 0);
        assert!(cfg.validate().is_err());
        cfg.malicious_fraction = 0.4;
        assert!(cfg.validate().is_ok());
        cfg.lb = Some(5);
        cfg.ub = Some(5);
        assert!(cfg.validate().is_err());
        cfg.lb = None;
        cfg.ub = None;
        assert_eq!(cfg.bounds(10).unwrap(), 0..10);
    }

    proptest! {
        #[test]
        fn weight_complement_untouched(
            w in prop::collection::vec(-10.0f64..10.0, 2..64),
            a in 0usize..64, b in 0usize..64, seed in any::<u64>(),
        ) {
            let len = w.len();
            let (lb, ub) = (a.min(b) % len, (a.max(b) % len).max(a.min(b) % len + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = manipulate_weights(&w, lb, ub, &mut rng).unwrap();
            prop_assert_eq!(hash_f64(&out[..lb]), hash_f64(&w[..lb]));
            prop_assert_eq!(hash_f64(&out[ub..]), hash_f64(&w[ub..]));
            let again = manipulate_weights(&w, lb, ub, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(hash_f64(&out), hash_f64(&again));
        }

        #[test]
        fn feature_complement_untouched(
            bits in prop::collection::vec(prop::bool::ANY, 2..128),
            a in 0usize..128, b in 0usize..128, seed in any::<u64>(),
        ) {
            let len = bits.len();
            let bits: Vec<f32> = bits.into_iter().map(|x| x as u8 as f32).collect();
            let fp = Fingerprint::new("p", bits).unwrap();
            let (lb, ub) = (a.min(b) % len, (a.max(b) % len).max(a.min(b) % len + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = manipulate_features(&fp, lb, ub, &mut rng).unwrap();
            prop_assert_eq!(hash_f32(&out.bits[..lb]), hash_f32(&fp.bits[..lb]));
            prop_assert_eq!(hash_f32(&out.bits[ub..]), hash_f32(&fp.bits[ub..]));
            prop_assert!(out.check_domain().is_ok());
        }

        #[test]
        fn flip_is_involution(
            labels in prop::collection::vec(prop::option::of(prop::bool::ANY), 0..64),
            fraction in 0.0f64..=1.0, seed in any::<u64>(),
        ) {
            let orig: Vec<Option<Label>> = labels
                .into_iter()
                .map(|o| o.map(|b| if b { Label::Malware } else { Label::Benign }))
                .collect();
            let mut l = orig.clone();
            flip_labels(&mut l, fraction, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let labeled = orig.iter().filter(|x| x.is_some()).count();
            let changed = l.iter().zip(&orig).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, (fraction * labeled as f64).floor() as usize);
            prop_assert!(l.iter().zip(&orig).all(|(a, b)| a.is_some() == b.is_some()));
            flip_labels(&mut l, fraction, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(l, orig);
        }
    }
}
