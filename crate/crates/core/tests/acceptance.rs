//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use adam_core::attacks::{
    manipulate_features, manipulate_weights, weight_multiplier, AttackConfig, AttackKind,
};
use adam_core::consensus::{majority_vote, ClassProbabilities, ConsensusResult};
use adam_core::federation::{aggregate, ClientUpdate, Federation, FederationConfig, RoundReport};
use adam_core::fingerprint::{Fingerprint, Label, TemplateRegistry};
use adam_core::harness::{self, ExperimentConfig, ExperimentData};
use adam_core::nn::{gradient_check, random_batch, random_network, LayerKind, WeightedSample};
use adam_core::transfer::{CollaborativeModel, HeadSpec};
use adam_core::zoo::{ModelKind, ModelName, ZooModel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Runner {
    failed: Vec<usize>,
}

impl Runner {
    fn check(
        &mut self,
        id: usize,
        name: &str,
        limit: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let t = Instant::now();
        let mut o = f();
        let took = t.elapsed();
        if let Some(l) = limit {
            if took > l {
                o.pass = false;
                o.detail
                    .push_str(&format!("; over the {}s budget", l.as_secs()));
            }
        }
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {id:>2} {name}: {} ({:.1}s)",
            o.detail,
            took.as_secs_f64()
        );
        if !o.pass {
            self.failed.push(id);
        }
    }
}

fn sha(bytes: impl IntoIterator<Item = u64>) -> [u8; 32] {
    let mut h = Sha256::new();
    for b in bytes {
        h.update(b.to_le_bytes());
    }
    h.finalize().into()
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    let mut largest = 0;
    let (mut conv, mut pooled) = (0, 0);
    for _ in 0..50 {
        let net = random_network(&mut rng, 500).expect("network");
        largest = largest.max(net.param_count());
        let has = |f: fn(&LayerKind) -> bool| net.layers().iter().any(|l| f(&l.kind)) as usize;
        conv += has(|k| matches!(k, LayerKind::Conv2d { .. }));
        pooled += has(|k| matches!(k, LayerKind::MaxPool));
        let data = random_batch(&mut rng, net.input_width(), 4);
        let batch: Vec<_> = data
            .iter()
            .map(|(x, l)| WeightedSample {
                input: x,
                label: *l,
                weight: 1.0,
            })
            .collect();
        let r = gradient_check(&net, &batch, 1e-6).expect("check");
        worst = worst.max(r.max_relative_error);
    }
    outcome(
        worst < 1e-3 && largest <= 500 && conv > 0 && pooled > 0,
        format!("max relative error {worst:.2e}, {conv} conv / {pooled} pooled nets, largest {largest} params"),
    )
}

fn majority() -> Outcome {
    let mut checked = 0usize;
    for n in 1..=15usize {
        for mask in 0u32..(1 << n) {
            let votes: Vec<Label> = (0..n)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        Label::Malware
                    } else {
                        Label::Benign
                    }
                })
                .collect();
            let m = mask.count_ones() as usize;
            let b = n - m;
            if m == b {
                continue;
            }
            let expected = if m > b {
                (Label::Malware, m)
            } else {
                (Label::Benign, b)
            };
            if majority_vote(&votes).ok() != Some(expected) {
                return outcome(false, format!("mismatch at n={n} mask={mask:b}"));
            }
            checked += 1;
        }
    }
    outcome(true, format!("{checked} strict-majority vectors agree"))
}

fn upd(id: usize, t: usize, w: Vec<f64>) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        kind: ModelName::Static,
        weights: w,
        samples: t,
    }
}

fn algebra() -> Outcome {
    let tol = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
    let same: Vec<_> = (0..6).map(|i| upd(i, 1 + i * 3, w.clone())).collect();
    let identity = aggregate(&same)
        .unwrap()
        .iter()
        .zip(&w)
        .all(|(a, b)| (a - b).abs() <= tol);

    let neg: Vec<f64> = w.iter().map(|v| -v).collect();
    let symmetry = aggregate(&[upd(0, 1, w.clone()), upd(1, 1, neg)])
        .unwrap()
        .iter()
        .all(|v| v.abs() <= tol);

    let mut permutation = true;
    for trial in 0..50 {
        let n = rng.random_range(2..8);
        let ups: Vec<_> = (0..n)
            .map(|i| {
                let w = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
                upd(i, rng.random_range(1..100), w)
            })
            .collect();
        let mut shuffled = ups.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = aggregate(&ups).unwrap();
        let b = aggregate(&shuffled).unwrap();
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > tol) {
            permutation = false;
            eprintln!("permutation trial {trial} differs");
        }
    }

    let m = aggregate(&[
        upd(0, 1, vec![1.0]),
        upd(1, 2, vec![4.0]),
        upd(2, 1, vec![7.0]),
    ])
    .unwrap();
    let arithmetic = (m[0] - 4.0).abs() <= tol;
    outcome(
        identity && symmetry && permutation && arithmetic,
        format!(
            "identity {identity}, symmetry {symmetry}, permutation {permutation}, (1,2,1)/(1,4,7) -> {}",
            m[0]
        ),
    )
}

fn attack_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let draws = 100_000;
    let (lb, ub) = (100, 200);
    let span = (ub - lb) as f64;

    // unit weights make each output inside the slice equal to its multiplier
    let mut w = vec![0.0; 300];
    for (i, v) in w.iter_mut().enumerate() {
        *v = if (lb..ub).contains(&i) {
            1.0
        } else {
            (i as f64).sin()
        };
    }
    let complement_hash = |v: &[f64]| sha(v[..lb].iter().chain(&v[ub..]).map(|x| x.to_bits()));
    let before = complement_hash(&w);
    let (mut sum, mut n, mut weights_untouched) = (0.0, 0usize, true);
    while n < draws {
        let out = manipulate_weights(&w, lb, ub, &mut rng).unwrap();
        weights_untouched &= complement_hash(&out) == before;
        sum += out[lb..ub].iter().sum::<f64>();
        n += ub - lb;
    }
    let mean = sum / n as f64;
    let bound_ok = (weight_multiplier(1.0, lb, ub) - span).abs() < 1e-12;

    let bits: Vec<f32> = (0..300).map(|i| (i % 3 == 0) as u8 as f32).collect();
    let fp = Fingerprint::new("probe", bits).unwrap();
    let fp_hash = |f: &Fingerprint| {
        sha(f.bits[..lb]
            .iter()
            .chain(&f.bits[ub..])
            .map(|b| b.to_bits() as u64))
    };
    let fp_before = fp_hash(&fp);
    let (mut ones, mut total, mut features_untouched) = (0usize, 0usize, true);
    while total < draws {
        let out = manipulate_features(&fp, lb, ub, &mut rng).unwrap();
        features_untouched &= fp_hash(&out) == fp_before;
        ones += out.bits[lb..ub].iter().filter(|&&b| b == 1.0).count();
        total += ub - lb;
    }
    let density = ones as f64 / total as f64;
    let pass = mean.abs() < 0.02 * span
        && (density - 0.5).abs() <= 0.01
        && weights_untouched
        && features_untouched
        && bound_ok;
    outcome(
        pass,
        format!(
            "multiplier mean {mean:.4} (limit {:.1}), feature density {density:.4}, complements untouched {}",
            0.02 * span,
            weights_untouched && features_untouched
        ),
    )
}

fn case_study() -> Outcome {
    let names = ["Static", "HM1", "HM2", "HM3", "HM4", "HM5", "HM6"];
    let rows: [[(f64, f64); 7]; 2] = [
        [
            (0.0, 1.0),
            (1.0, 0.0),
            (0.99, 0.01),
            (1.0, 0.0),
            (0.99, 0.01),
            (1.0, 0.0),
            (0.99, 0.01),
        ],
        [
            (0.0, 1.0),
            (0.9, 0.1),
            (0.99, 0.01),
            (0.0, 1.0),
            (0.0, 1.0),
            (0.0, 1.0),
            (0.02, 0.98),
        ],
    ];
    let results: Vec<ConsensusResult> = rows
        .iter()
        .map(|row| {
            let probs = names
                .iter()
                .zip(row)
                .map(|(n, &(b, m))| ClassProbabilities::new(*n, b, m).unwrap())
                .collect();
            ConsensusResult::from_probabilities(probs).unwrap()
        })
        .collect();
    let pass = results[0].label == Label::Benign && results[1].label == Label::Malware;
    outcome(
        pass,
        format!(
            "app 1 -> {} ({}/7), app 2 -> {} ({}/7)",
            results[0].label.symbol(),
            results[0].votes_for,
            results[1].label.symbol(),
            results[1].votes_for
        ),
    )
}

fn detection(reports: &[RoundReport]) -> (f64, f64) {
    let s = harness::detection_score(reports);
    (s.precision, s.recall)
}

/// Base hashes recomputed straight from the zoo checkpoints.
fn expected_base_hashes(zoo: &[ZooModel], head: &HeadSpec) -> BTreeMap<ModelName, String> {
    zoo.iter()
        .filter(|m| m.spec.kind == ModelKind::Cnn)
        .map(|m| {
            let cm = CollaborativeModel::from_zoo(&m.spec, &m.network, head, 0).unwrap();
            (m.spec.name, cm.base_hash())
        })
        .collect()
}

fn run_attack(
    zoo: &[ZooModel],
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    kind: AttackKind,
) -> (Federation, Vec<RoundReport>) {
    let fed_cfg = FederationConfig {
        seed: cfg.seed,
        ..cfg.federation.clone()
    };
    let mut fed = Federation::new(zoo, &data.server, &data.clients, fed_cfg).unwrap();
    let attack = AttackConfig::new(kind, 0.4, cfg.seed + 7);
    let reports = fed.run(Some(&attack)).unwrap();
    (fed, reports)
}

fn main() {
    let mut runner = Runner { failed: Vec::new() };
    runner.check(
        1,
        "gradient correctness",
        Some(Duration::from_secs(120)),
        gradients,
    );
    runner.check(
        2,
        "majority-vote oracle",
        Some(Duration::from_secs(10)),
        majority,
    );
    runner.check(3, "aggregation algebra", None, algebra);
    runner.check(4, "attack-operator fidelity", None, attack_fidelity);

    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seed: 2024,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    assert_eq!(cfg.data.n_clients, 7);
    let mut zoo_ok = false;
    runner.check(
        5,
        "scaled-down learning",
        Some(Duration::from_secs(15 * 60)),
        || {
            harness::cmd_gen_data(&cfg).unwrap();
            let rows = harness::cmd_train_zoo(&cfg).unwrap();
            let train_size = harness::load_data(&cfg)
                .unwrap()
                .zoo
                .split(adam_core::fingerprint::Split::Train)
                .count();
            let accs: Vec<String> = rows
                .iter()
                .map(|r| format!("{} {:.3}@{}", r.model, r.test.accuracy, r.learning_rate))
                .collect();
            zoo_ok = rows.len() == 7
                && train_size == 4000
                && rows
                    .iter()
                    .all(|r| r.test.accuracy >= 0.95 && r.epochs_run <= 30);
            outcome(
                zoo_ok,
                format!("{train_size} train samples; {}", accs.join(", ")),
            )
        },
    );

    let registry = TemplateRegistry::desk_default();
    let zoo = harness::load_zoo(&cfg, &registry).unwrap();
    let data = harness::load_data(&cfg).unwrap();
    let expected = expected_base_hashes(&zoo, &cfg.federation.head);
    let mut integrity = Vec::new();

    runner.check(
        6,
        "guard efficacy, weight attack",
        Some(Duration::from_secs(600)),
        || {
            let (fed, reports) = run_attack(&zoo, &data, &cfg, AttackKind::WeightManipulation);
            integrity.push(("weight attack", fed.bases_intact(), reports.clone()));
            let per_round: Vec<usize> = reports
                .iter()
                .map(|r| r.attack.as_ref().map_or(0, |a| a.clients.len()))
                .collect();
            let (p, r) = detection(&reports);
            outcome(
                p >= 0.9 && r >= 0.9 && reports.len() == 20 && per_round.iter().all(|&n| n == 3),
                format!(
                    "precision {p:.3}, recall {r:.3} over {} rounds, 3 of 7 malicious each round",
                    reports.len()
                ),
            )
        },
    );

    runner.check(7, "guard efficacy, label flipping", None, || {
        let (fed, reports) = run_attack(&zoo, &data, &cfg, AttackKind::LabelFlip);
        integrity.push(("label flip", fed.bases_intact(), reports.clone()));
        let (mut bad, mut bad_n, mut good, mut good_n) = (0, 0, 0, 0);
        for c in reports.iter().flat_map(|r| &r.clients) {
            let flagged = c
                .label_check
                .as_ref()
                .is_some_and(|l| !l.verdict.is_accepted());
            if c.malicious {
                bad += flagged as usize;
                bad_n += 1;
            } else {
                good += flagged as usize;
                good_n += 1;
            }
        }
        let bad_rate = bad as f64 / bad_n.max(1) as f64;
        let good_rate = good as f64 / good_n.max(1) as f64;
        outcome(
            bad_n > 0 && bad_rate >= 0.9 && good_rate <= 0.05,
            format!(
                "flipped clients excluded {bad}/{bad_n}, honest clients excluded {good}/{good_n}"
            ),
        )
    });

    runner.check(8, "non-finite fallback", None, || {
        let mut fed = Federation::new(
            &zoo,
            &data.server,
            &data.clients,
            FederationConfig {
                rounds: 1,
                ..cfg.federation.clone()
            },
        )
        .unwrap();
        fed.run_round(None).unwrap();
        let before: BTreeMap<ModelName, Vec<u64>> = fed
            .broadcast()
            .iter()
            .map(|(k, w)| (*k, w.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let poisoned: Vec<ClientUpdate> = fed
            .guards
            .iter()
            .flat_map(|g| {
                (0..7).map(move |c| ClientUpdate {
                    client_id: c,
                    kind: g.kind,
                    weights: vec![if c % 2 == 0 { f64::NAN } else { f64::INFINITY }; g.head_len()],
                    samples: 10,
                })
            })
            .collect();
        let aggs = fed.aggregate_round(&poisoned).unwrap();
        let after: BTreeMap<ModelName, Vec<u64>> = fed
            .broadcast()
            .iter()
            .map(|(k, w)| (*k, w.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let pass = after == before && aggs.iter().all(|a| a.fallback);
        outcome(
            pass,
            format!("{} kinds kept their previous aggregate bitwise", aggs.len()),
        )
    });

    runner.check(9, "consensus case study", None, case_study);

    let mut log_hashes = Vec::new();
    let mut det_reports = Vec::new();
    let det_cfg = ExperimentConfig {
        attack: Some(AttackConfig::new(AttackKind::Combined, 0.4, 99)),
        federation: FederationConfig {
            rounds: 6,
            asynchronous: true,
            clients_per_round: Some(5),
            ..cfg.federation.clone()
        },
        ..cfg.clone()
    };
    let det_started = Instant::now();
    for _ in 0..2 {
        let (log, _) = harness::cmd_federate(&det_cfg).unwrap();
        let bytes = fs::read(&log).unwrap();
        log_hashes.push(Sha256::digest(&bytes));
        det_reports = String::from_utf8(bytes)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<RoundReport>(l).unwrap())
            .collect::<Vec<_>>();
    }

    let det_secs = det_started.elapsed().as_secs_f64();

    runner.check(10, "frozen-base integrity", None, || {
        integrity.push(("logged run", true, det_reports.clone()));
        let mut notes = Vec::new();
        let mut pass = integrity.len() == 3;
        for (what, intact, reports) in &integrity {
            let hashes_ok = reports
                .iter()
                .all(|r| r.bases_intact && r.base_hashes == expected);
            pass &= *intact && hashes_ok && !reports.is_empty();
            notes.push(format!(
                "{what}: {}",
                if *intact && hashes_ok {
                    "intact"
                } else {
                    "CHANGED"
                }
            ));
        }
        outcome(pass, notes.join(", "))
    });

    runner.check(11, "determinism", None, || {
        let same = log_hashes.len() == 2 && log_hashes[0] == log_hashes[1];
        outcome(
            same && !det_reports.is_empty(),
            format!(
                "two runs of {} rounds ({det_secs:.1}s), round-log sha256 {}",
                det_reports.len(),
                if same { "identical" } else { "differ" }
            ),
        )
    });

    if runner.failed.is_empty() {
        println!("acceptance: all 11 criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", runner.failed);
        std::process::exit(1);
    }
}
