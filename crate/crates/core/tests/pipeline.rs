//! Small end-to-end run through the experiment commands.

use std::fs;

use adam_core::fingerprint::{load_dataset, Split, TemplateRegistry};
use adam_core::harness::{self, DataConfig, ExperimentConfig, ZooTrainingConfig};
use adam_core::nn::{evaluate, HISTORY_CSV_HEADER};
use adam_core::zoo::{ModelName, ZooModel};

fn config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 31,
        output_dir: dir.to_path_buf(),
        data: DataConfig {
            signal_strength: 1.0,
            zoo_per_class: 150,
            server_system: 30,
            server_benign_extras: 60,
            server_malware: 90,
            n_clients: 3,
            client_labeled: 12,
            client_unlabeled: 10,
        },
        training: ZooTrainingConfig {
            learning_rates: vec![0.1, 0.05],
            sweep_epochs: 1,
            sweep_subset: 60,
            epochs: 6,
            batch_size: 16,
            patience: None,
            models: Vec::new(),
        },
        ..ExperimentConfig::default()
    };
    cfg.federation.rounds = 3;
    cfg.federation.guard_training.epochs = 8;
    cfg
}

#[test]
fn commands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());

    let files = harness::cmd_gen_data(&cfg).unwrap();
    assert_eq!(files.len(), 2 + cfg.data.n_clients);

    let rows = harness::cmd_train_zoo(&cfg).unwrap();
    assert_eq!(rows.len(), 7);
    let zoo_dir = cfg.zoo_dir();
    let registry = TemplateRegistry::desk_default();
    let test_set = load_dataset(cfg.data_dir().join("train.adfp")).unwrap();
    for r in &rows {
        let csv = fs::read_to_string(zoo_dir.join(format!("{}_history.csv", r.model))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HISTORY_CSV_HEADER));
        assert_eq!(lines.count(), cfg.training.epochs, "{}", r.model);

        // reloaded checkpoints score exactly what training reported
        let m = ZooModel::load(zoo_dir.join(format!("{}.adwt", r.model)), &registry).unwrap();
        let te = harness::prepare(&test_set, &m.spec, Split::Test).unwrap();
        assert_eq!(evaluate(&m.network, &te.samples()).unwrap(), r.test);
    }
    assert!(zoo_dir.join("sweep.csv").exists());

    let pe = harness::cmd_pseudo_eval(&cfg).unwrap();
    assert_eq!(pe.models, ModelName::ALL.to_vec());
    assert_eq!(pe.consensus_match.len(), 7);
    assert!(pe
        .ground_truth_match
        .iter()
        .all(|row| row.len() == cfg.data.n_clients));
    // perfectly separable data
    assert!(
        pe.consensus_ground_truth_match.iter().all(|&a| a >= 0.9),
        "{pe:?}"
    );
    for i in 0..cfg.data.n_clients {
        let audit =
            fs::read_to_string(dir.path().join(format!("pseudo/audit-client-{i}.csv"))).unwrap();
        assert_eq!(audit.lines().count(), 1 + cfg.data.client_unlabeled);
    }

    let guards = harness::cmd_train_guards(&cfg).unwrap();
    assert_eq!(guards.len(), 4);
    assert!(guards.iter().all(|g| (0.0..=1.0).contains(&g.theta)));

    let (log, summary) = harness::cmd_federate(&cfg).unwrap();
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(summary.rounds, 3);
    assert!(summary.bases_intact);
    assert_eq!(summary.accuracy_per_round.len(), 4);
    assert!(cfg.federation_dir().join("summary.json").exists());
}
