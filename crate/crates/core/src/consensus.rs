//! Class decisions, Boyer-Moore majority consensus over the model zoo, and
//! the pseudo-label weighted loss `L = L_labeled + delta(epoch) * L_pseudo`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AdamError, Result};
use crate::fingerprint::{Fingerprint, Label, TemplateRegistry};
use crate::nn::{Network, Sample, WeightedSample};
use crate::zoo::ZooModel;

/// Benign iff `p_benign >= p_malware`. Anything that fails the comparison
/// (NaN) is treated as malware.
pub fn decide(p: [f64; 2]) -> Label {
    if p[0] >= p[1] {
        Label::Benign
    } else {
        Label::Malware
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub model_name: String,
    pub p_benign: f64,
    pub p_malware: f64,
}

impl ClassProbabilities {
    pub fn new(model_name: impl Into<String>, p_benign: f64, p_malware: f64) -> Result<Self> {
        let p = Self {
            model_name: model_name.into(),
            p_benign,
            p_malware,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.p_benign, self.p_malware] {
            if !v.is_finite() {
                return Err(AdamError::NonFinite(format!(
                    "{} probabilities",
                    self.model_name
                )));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(AdamError::InvalidArgument(format!(
                    "probability {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

pub fn classify(probs: &ClassProbabilities) -> Result<Label> {
    probs.validate()?;
    Ok(decide([probs.p_benign, probs.p_malware]))
}

/// Boyer-Moore majority vote: one pass to find the candidate, one pass to
/// count it. Without a strict majority (an even split) the result is malware
/// with its count.
pub fn majority_vote(labels: &[Label]) -> Result<(Label, usize)> {
    if labels.is_empty() {
        return Err(AdamError::Empty("vote".into()));
    }
    let mut candidate = labels[0];
    let mut count = 0usize;
    for &l in labels {
        if count == 0 {
            candidate = l;
            count = 1;
        } else if l == candidate {
            count += 1;
        } else {
            count -= 1;
        }
    }
    let votes = labels.iter().filter(|&&l| l == candidate).count();
    if 2 * votes > labels.len() {
        Ok((candidate, votes))
    } else {
        let malware = labels.iter().filter(|&&l| l == Label::Malware).count();
        Ok((Label::Malware, malware))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub label: Label,
    pub votes_for: usize,
    pub total_voters: usize,
    pub per_model: Vec<ClassProbabilities>,
}

impl ConsensusResult {
    pub fn from_probabilities(per_model: Vec<ClassProbabilities>) -> Result<Self> {
        let labels = per_model.iter().map(classify).collect::<Result<Vec<_>>>()?;
        let (label, votes_for) = majority_vote(&labels)?;
        Ok(Self {
            label,
            votes_for,
            total_voters: per_model.len(),
            per_model,
        })
    }

    pub fn model_labels(&self) -> Vec<Label> {
        self.per_model
            .iter()
            .map(|p| decide([p.p_benign, p.p_malware]))
            .collect()
    }
}

/// Runs every model on its own projection of `fp` and takes the majority.
pub fn pseudo_label(
    fp: &Fingerprint,
    registry: &TemplateRegistry,
    models: &[ZooModel],
) -> Result<ConsensusResult> {
    let mut per_model = Vec::with_capacity(models.len());
    for m in models {
        let input = m.spec.project(fp, registry)?;
        let [pb, pm] = m.network.forward(&input)?;
        per_model.push(ClassProbabilities::new(m.spec.name.as_str(), pb, pm)?);
    }
    ConsensusResult::from_probabilities(per_model)
}

/// Linear ramp of the pseudo-label weight: 0 before `start_epoch`,
/// `delta_max` from `end_epoch` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelSchedule {
    pub delta_max: f64,
    pub start_epoch: usize,
    pub end_epoch: usize,
}

impl Default for PseudoLabelSchedule {
    fn default() -> Self {
        Self {
            delta_max: 3.0,
            start_epoch: 5,
            end_epoch: 25,
        }
    }
}

impl PseudoLabelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_max >= 0.0 && self.delta_max.is_finite()) {
            return Err(AdamError::InvalidArgument("delta_max must be >= 0".into()));
        }
        if self.end_epoch < self.start_epoch {
            return Err(AdamError::InvalidArgument("ramp end precedes start".into()));
        }
        Ok(())
    }

    pub fn delta(&self, epoch: usize) -> f64 {
        if epoch < self.start_epoch {
            0.0
        } else if epoch >= self.end_epoch {
            self.delta_max
        } else {
            let span = (self.end_epoch - self.start_epoch) as f64;
            self.delta_max * (epoch - self.start_epoch) as f64 / span
        }
    }
}

/// `mean(labeled) + delta * mean(pseudo)`, an empty side contributing zero.
pub fn combine_losses(labeled: &[f64], pseudo: &[f64], delta: f64) -> Result<f64> {
    if labeled.is_empty() && pseudo.is_empty() {
        return Err(AdamError::Empty(
            "labeled and pseudo-labeled batches".into(),
        ));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(mean(labeled) + delta * mean(pseudo))
}

/// Per-sample weights realising [`combine_losses`] as one weighted batch.
pub fn combined_batch<'a>(
    labeled: &[Sample<'a>],
    pseudo: &[Sample<'a>],
    delta: f64,
) -> Result<Vec<WeightedSample<'a>>> {
    if labeled.is_empty() && pseudo.is_empty() {
        return Err(AdamError::Empty(
            "labeled and pseudo-labeled batches".into(),
        ));
    }
    let wl = if labeled.is_empty() {
        0.0
    } else {
        1.0 / labeled.len() as f64
    };
    let wp = if pseudo.is_empty() {
        0.0
    } else {
        delta / pseudo.len() as f64
    };
    Ok(labeled
        .iter()
        .map(|s| WeightedSample {
            input: s.input,
            label: s.label,
            weight: wl,
        })
        .chain(pseudo.iter().map(|s| WeightedSample {
            input: s.input,
            label: s.label,
            weight: wp,
        }))
        .collect())
}

pub fn combined_loss(
    net: &Network,
    labeled: &[Sample<'_>],
    pseudo: &[Sample<'_>],
    epoch: usize,
    schedule: &PseudoLabelSchedule,
) -> Result<f64> {
    let per_sample = |batch: &[Sample<'_>]| -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|s| net.mean_loss(std::slice::from_ref(s)))
            .collect()
    };
    combine_losses(
        &per_sample(labeled)?,
        &per_sample(pseudo)?,
        schedule.delta(epoch),
    )
}

/// One SGD step on the combined loss; returns the pre-step loss.
pub fn combined_step(
    net: &mut Network,
    labeled: &[Sample<'_>],
    pseudo: &[Sample<'_>],
    epoch: usize,
    schedule: &PseudoLabelSchedule,
    lr: f64,
) -> Result<f64> {
    let batch = combined_batch(labeled, pseudo, schedule.delta(epoch))?;
    net.weighted_step(&batch, lr)
}

/// Audit CSV: app id, each model's label and probabilities, consensus, votes.
pub fn audit_csv(rows: &[(String, ConsensusResult)]) -> String {
    let mut out = String::from("app_id");
    if let Some((_, first)) = rows.first() {
        for p in &first.per_model {
            let _ = write!(out, ",{0}_label,{0}_p_benign,{0}_p_malware", p.model_name);
        }
    }
    out.push_str(",consensus,votes\n");
    for (id, r) in rows {
        out.push_str(id);
        for p in &r.per_model {
            let l = decide([p.p_benign, p.p_malware]);
            let _ = write!(out, ",{},{:.4},{:.4}", l.symbol(), p.p_benign, p.p_malware);
        }
        let _ = writeln!(
            out,
            ",{},{}/{}",
            r.label.symbol(),
            r.votes_for,
            r.total_voters
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Label::{Benign as B, Malware as M};
    use crate::nn::{Activation, NetworkBuilder};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cp(name: &str, pb: f64, pm: f64) -> ClassProbabilities {
        ClassProbabilities::new(name, pb, pm).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&cp("a", 0.7, 0.3)).unwrap(), B);
        assert_eq!(classify(&cp("a", 0.5, 0.5)).unwrap(), B);
        assert_eq!(classify(&cp("a", 0.02, 0.98)).unwrap(), M);
        assert!(ClassProbabilities::new("a", f64::NAN, 0.1).is_err());
        assert!(ClassProbabilities::new("a", 1.2, 0.1).is_err());
    }

    #[test]
    fn two_app_case_study() {
        let names = ["Static", "HM1", "HM2", "HM3", "HM4", "HM5", "HM6"];
        let row1 = [
            (0.0, 1.0),
            (1.0, 0.0),
            (0.99, 0.01),
            (1.0, 0.0),
            (0.99, 0.01),
            (1.0, 0.0),
            (0.99, 0.01),
        ];
        let row2 = [
            (0.0, 1.0),
            (0.9, 0.1),
            (0.99, 0.01),
            (0.0, 1.0),
            (0.0, 1.0),
            (0.0, 1.0),
            (0.02, 0.98),
        ];
        let build = |row: &[(f64, f64)]| {
            names
                .iter()
                .zip(row)
                .map(|(n, &(b, m))| cp(n, b, m))
                .collect::<Vec<_>>()
        };
        let r1 = ConsensusResult::from_probabilities(build(&row1)).unwrap();
        assert_eq!((r1.label, r1.votes_for, r1.total_voters), (B, 6, 7));
        assert_eq!(r1.model_labels()[0], M);
        let r2 = ConsensusResult::from_probabilities(build(&row2)).unwrap();
        assert_eq!((r2.label, r2.votes_for), (M, 5));
        assert_eq!(r2.model_labels()[1..3], [B, B]);
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_vote(&[B, B, M]).unwrap(), (B, 2));
        assert_eq!(majority_vote(&[B, M, B, M]).unwrap(), (M, 2));
        assert_eq!(majority_vote(&[M; 7]).unwrap(), (M, 7));
        assert!(matches!(majority_vote(&[]), Err(AdamError::Empty(_))));
    }

    #[test]
    fn majority_matches_exhaustive_count() {
        for n in 1..=15usize {
            for mask in 0u32..(1 << n) {
                let labels: Vec<Label> = (0..n)
                    .map(|i| if mask >> i & 1 == 1 { M } else { B })
                    .collect();
                let m = mask.count_ones() as usize;
                let (label, count) = majority_vote(&labels).unwrap();
                if 2 * m > n {
                    assert_eq!((label, count), (M, m));
                } else if 2 * (n - m) > n {
                    assert_eq!((label, count), (B, n - m));
                } else {
                    assert_eq!((label, count), (M, m));
                }
            }
        }
    }

    #[test]
    fn schedule_ramp() {
        let s = PseudoLabelSchedule::default();
        assert_eq!(s.delta(0), 0.0);
        assert_eq!(s.delta(4), 0.0);
        assert_eq!(s.delta(5), 0.0);
        assert!((s.delta(15) - 1.5).abs() < 1e-12);
        assert_eq!(s.delta(25), 3.0);
        assert_eq!(s.delta(100), 3.0);
        let mut prev = 0.0;
        for e in 0..60 {
            assert!(s.delta(e) >= prev);
            prev = s.delta(e);
        }
        let bad = PseudoLabelSchedule { end_epoch: 1, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn combine_arithmetic() {
        assert!((combine_losses(&[0.2, 0.4], &[0.6, 0.6], 0.5).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(
            combine_losses(&[0.2, 0.4], &[9.0], 0.0).unwrap(),
            0.30000000000000004
        );
        assert_eq!(combine_losses(&[], &[0.7, 0.5], 1.0).unwrap(), 0.6);
        assert!(combine_losses(&[], &[], 1.0).is_err());
    }

    fn small_net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        NetworkBuilder::new("s", 3, &mut rng)
            .dense(4)
            .act(Activation::Tanh)
            .dense(2)
            .act(Activation::Sigmoid)
            .build()
            .unwrap()
    }

    #[test]
    fn combined_loss_matches_parts_and_weights() {
        let net = small_net();
        let xs = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        let lab = [
            Sample {
                input: &xs[0],
                label: B,
            },
            Sample {
                input: &xs[1],
                label: M,
            },
        ];
        let pse = [Sample {
            input: &xs[2],
            label: M,
        }];
        let sched = PseudoLabelSchedule::default();
        let l0 = net.mean_loss(&lab).unwrap();
        let p0 = net.mean_loss(&pse).unwrap();
        assert_eq!(combined_loss(&net, &lab, &pse, 0, &sched).unwrap(), l0);
        let l = combined_loss(&net, &lab, &pse, 15, &sched).unwrap();
        assert!((l - (l0 + 1.5 * p0)).abs() < 1e-12);
        // the weighted batch realises the same objective, gradients included
        let batch = combined_batch(&lab, &pse, 1.5).unwrap();
        let (wl, grad) = net.loss_and_gradient(&batch).unwrap();
        assert!((wl - l).abs() < 1e-12);
        let (_, gl) = net
            .loss_and_gradient(&combined_batch(&lab, &[], 0.0).unwrap())
            .unwrap();
        let (_, gp) = net
            .loss_and_gradient(&combined_batch(&[], &pse, 1.0).unwrap())
            .unwrap();
        for i in 0..grad.len() {
            assert!((grad[i] - (gl[i] + 1.5 * gp[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_step_moves_weights() {
        let mut net = small_net();
        let x = [1.0, 0.0, 1.0];
        let lab = [Sample {
            input: &x,
            label: M,
        }];
        let before = net.parameters();
        combined_step(
            &mut net,
            &lab,
            &[],
            30,
            &PseudoLabelSchedule::default(),
            0.1,
        )
        .unwrap();
        assert_ne!(net.parameters(), before);
        assert!(
            combined_step(&mut net, &[], &[], 30, &PseudoLabelSchedule::default(), 0.1).is_err()
        );
    }

    #[test]
    fn audit_log_layout() {
        let r = ConsensusResult::from_probabilities(vec![
            cp("Static", 0.0, 1.0),
            cp("HM1", 1.0, 0.0),
            cp("HM2", 0.9, 0.1),
        ])
        .unwrap();
        let csv = audit_csv(&[("app-1".into(), r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "app_id,Static_label,Static_p_benign,Static_p_malware,HM1_label,HM1_p_benign,HM1_p_malware,HM2_label,HM2_p_benign,HM2_p_malware,consensus,votes"
        );
        assert_eq!(
            lines[1],
            "app-1,M,0.0000,1.0000,B,1.0000,0.0000,B,0.9000,0.1000,B,2/3"
        );
    }

    fn label_of(b: bool) -> Label {
        if b {
            M
        } else {
            B
        }
    }

    proptest! {
        #[test]
        fn classify_is_argmax_invariant(pb in 0.0f64..=1.0, pm in 0.0f64..=1.0, a in 0.01f64..10.0, c in -5.0f64..5.0) {
            // strictly increasing transform x -> a*x^3 + c; floats only keep
            // it strict above rounding resolution
            prop_assume!(pb == pm || (pb - pm).abs() > 1e-9);
            let t = |x: f64| a * x * x * x + c;
            prop_assert_eq!(decide([pb, pm]), decide([t(pb), t(pm)]));
        }

        // flipping fewer votes than the winning margin cannot change the outcome
        #[test]
        fn consensus_needs_margin_many_changes(
            votes in prop::collection::vec(prop::bool::ANY, 7),
            flips in prop::collection::vec(prop::bool::ANY, 7),
        ) {
            let before: Vec<Label> = votes.iter().map(|&b| label_of(b)).collect();
            let after: Vec<Label> = votes.iter().zip(&flips).map(|(&b, &f)| label_of(b ^ f)).collect();
            let (lb, count) = majority_vote(&before).unwrap();
            let (la, _) = majority_vote(&after).unwrap();
            let changed = flips.iter().filter(|&&f| f).count();
            if la != lb {
                prop_assert!(changed >= count - 7 / 2);
            }
            if count == 7 && la != lb {
                prop_assert!(changed >= 4);
            }
        }

        #[test]
        fn schedule_monotone(dmax in 0.0f64..10.0, start in 0usize..30, len in 0usize..30, e in 0usize..100) {
            let s = PseudoLabelSchedule { delta_max: dmax, start_epoch: start, end_epoch: start + len };
            prop_assert!(s.delta(e + 1) >= s.delta(e));
            prop_assert!(s.delta(e) >= 0.0 && s.delta(e) <= dmax);
        }
    }
}
