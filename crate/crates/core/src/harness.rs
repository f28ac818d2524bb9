//! Experiment runner behind the `adam` command line: data generation, zoo
//! training with learning-rate sweeps, pseudo-label evaluation, guard
//! training, federated runs and attack statistics. Every output is a flat
//! CSV, JSON or JSON-lines file under the configured output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{manipulate_features, manipulate_weights, AttackConfig};
use crate::consensus::{audit_csv, decide, pseudo_label};
use crate::error::{AdamError, Result};
use crate::federation::{train_guards, Federation, FederationConfig, RoundReport};
use crate::fingerprint::{
    load_dataset, save_dataset, synth_generate, Dataset, Fingerprint, Label, LabeledSample,
    Provenance, Split, SynthParams, TemplateRegistry,
};
use crate::nn::{
    evaluate, history_csv, lr_sweep, train, Metrics, PreparedSet, SweepResult, TrainingConfig,
};
use crate::zoo::{ModelName, ModelSpec, Scale, ZooModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub signal_strength: f64,
    /// Labeled samples per class for zoo training (split 80:10:10).
    pub zoo_per_class: usize,
    pub server_system: usize,
    pub server_benign_extras: usize,
    pub server_malware: usize,
    pub n_clients: usize,
    /// Labeled samples per client, half of each class.
    pub client_labeled: usize,
    pub client_unlabeled: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            signal_strength: 0.9,
            zoo_per_class: 2500,
            server_system: 200,
            server_benign_extras: 1000,
            server_malware: 600,
            n_clients: 7,
            client_labeled: 40,
            client_unlabeled: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooTrainingConfig {
    pub learning_rates: Vec<f64>,
    pub sweep_epochs: usize,
    /// Training samples used by the sweep runs.
    pub sweep_subset: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    /// Restrict training to these models; all when empty.
    pub models: Vec<ModelName>,
}

impl Default for ZooTrainingConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.1, 0.05, 0.02],
            sweep_epochs: 3,
            sweep_subset: 1500,
            epochs: 30,
            batch_size: 32,
            patience: Some(5),
            models: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub training: ZooTrainingConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("adam-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            scale: Scale::Desk,
            data: DataConfig::default(),
            training: ZooTrainingConfig::default(),
            federation: FederationConfig::default(),
            attack: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AdamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| AdamError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AdamError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(0.5..=1.0).contains(&d.signal_strength) {
            return Err(AdamError::Config("signal_strength outside [0.5, 1]".into()));
        }
        if d.zoo_per_class < 10 {
            return Err(AdamError::Config(
                "zoo_per_class must be at least 10".into(),
            ));
        }
        if d.server_system + d.server_benign_extras == 0 || d.server_malware == 0 {
            return Err(AdamError::Config("server data needs both classes".into()));
        }
        if d.n_clients == 0 || d.client_labeled + d.client_unlabeled == 0 {
            return Err(AdamError::Config("clients need data".into()));
        }
        let t = &self.training;
        if t.learning_rates.is_empty() || t.learning_rates.iter().any(|&r| !(r > 0.0)) {
            return Err(AdamError::Config(
                "learning_rates must be positive and nonempty".into(),
            ));
        }
        if t.epochs == 0 || t.sweep_epochs == 0 || t.batch_size == 0 || t.sweep_subset == 0 {
            return Err(AdamError::Config("training counts must be positive".into()));
        }
        self.federation
            .validate()
            .map_err(|e| AdamError::Config(e.to_string()))?;
        if let Some(n) = self.federation.clients_per_round {
            if n > d.n_clients {
                return Err(AdamError::Config(format!(
                    "clients_per_round {n} exceeds n_clients {}",
                    d.n_clients
                )));
            }
        }
        if let Some(a) = &self.attack {
            a.validate().map_err(|e| AdamError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn zoo_dir(&self) -> PathBuf {
        self.output_dir.join("zoo")
    }

    pub fn guards_dir(&self) -> PathBuf {
        self.output_dir.join("guards")
    }

    pub fn federation_dir(&self) -> PathBuf {
        self.output_dir.join("federation")
    }
}

/// The partitioned corpus of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub zoo: Dataset,
    pub server: Dataset,
    pub clients: Vec<Dataset>,
}

/// Draws every sample from one generator run, so all partitions share the
/// same class signal, then deals them out: zoo data (80:10:10), server data
/// (system apps, benign extras, malware admixture; 80:20 train/validation)
/// and client shards (labeled plus unlabeled user apps).
pub fn generate_data(
    registry: &TemplateRegistry,
    cfg: &DataConfig,
    seed: u64,
) -> Result<ExperimentData> {
    let per_client_benign = cfg.client_labeled / 2;
    let per_client_malware = cfg.client_labeled - per_client_benign;
    let params = SynthParams {
        n_benign: cfg.zoo_per_class
            + cfg.server_system
            + cfg.server_benign_extras
            + cfg.n_clients * per_client_benign,
        n_malware: cfg.zoo_per_class + cfg.server_malware + cfg.n_clients * per_client_malware,
        n_unlabeled: cfg.n_clients * cfg.client_unlabeled,
        signal_strength: cfg.signal_strength,
        seed,
    };
    let all = synth_generate(registry, &params)?;
    let mut benign = Vec::new();
    let mut malware = Vec::new();
    let mut unlabeled = Vec::new();
    for s in all.samples {
        match s.label {
            Some(Label::Benign) => benign.push(s),
            Some(Label::Malware) => malware.push(s),
            None => unlabeled.push(s),
        }
    }
    let mut benign = benign.into_iter();
    let mut malware = malware.into_iter();
    let mut unlabeled = unlabeled.into_iter();
    let take = |it: &mut std::vec::IntoIter<LabeledSample>, n: usize| -> Vec<LabeledSample> {
        it.by_ref().take(n).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e4e_0001);
    let mut zoo = take(&mut benign, cfg.zoo_per_class);
    zoo.extend(take(&mut malware, cfg.zoo_per_class));
    zoo.shuffle(&mut rng);
    // exact 80:10:10 over the partition, not over the generator's groups
    let n = zoo.len();
    let (n_train, n_val) = (n * 8 / 10, n / 10);
    for (i, s) in zoo.iter_mut().enumerate() {
        s.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }

    let mut server: Vec<LabeledSample> = take(&mut benign, cfg.server_system)
        .into_iter()
        .map(|s| LabeledSample {
            provenance: Provenance::System,
            ..s
        })
        .collect();
    server.extend(take(&mut benign, cfg.server_benign_extras));
    server.extend(take(&mut malware, cfg.server_malware));
    server.shuffle(&mut rng);
    let n_val = server.len() / 5;
    for (i, s) in server.iter_mut().enumerate() {
        s.split = if i < n_val {
            Split::Validation
        } else {
            Split::Train
        };
    }

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for _ in 0..cfg.n_clients {
        let mut shard = take(&mut benign, per_client_benign);
        shard.extend(take(&mut malware, per_client_malware));
        shard.extend(take(&mut unlabeled, cfg.client_unlabeled));
        for s in &mut shard {
            s.split = Split::Train;
            s.provenance = Provenance::User;
        }
        shard.shuffle(&mut rng);
        clients.push(Dataset::new(registry.clone(), shard)?);
    }
    Ok(ExperimentData {
        zoo: Dataset::new(registry.clone(), zoo)?,
        server: Dataset::new(registry.clone(), server)?,
        clients,
    })
}

/// Projects the labeled samples of `split` for one model.
pub fn prepare(ds: &Dataset, spec: &ModelSpec, split: Split) -> Result<PreparedSet> {
    let projector = spec.projector(&ds.registry)?;
    let mut set = PreparedSet::default();
    for s in ds.split(split) {
        if let Some(l) = s.label {
            set.push(projector.apply(&s.fingerprint)?, l);
        }
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: ZooModel,
    pub sweep: SweepResult,
    pub history_csv: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: Metrics,
}

/// Sweeps the learning-rate grid on a training subset, then trains each
/// model at its best rate, keeping the best-validation snapshot.
pub fn train_zoo(
    ds: &Dataset,
    scale: Scale,
    cfg: &ZooTrainingConfig,
    seed: u64,
) -> Result<Vec<TrainedModel>> {
    let names: Vec<ModelName> = if cfg.models.is_empty() {
        ModelName::ALL.to_vec()
    } else {
        cfg.models.clone()
    };
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let spec = ModelSpec::new(name, scale);
        let tr = prepare(ds, &spec, Split::Train)?;
        let va = prepare(ds, &spec, Split::Validation)?;
        let te = prepare(ds, &spec, Split::Test)?;
        let init_seed = seed.wrapping_add(i as u64);
        // the corpus is class-ordered, so the subset must be drawn at random
        let mut idx: Vec<usize> = (0..tr.inputs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b));
        idx.truncate(cfg.sweep_subset);
        let sub = PreparedSet {
            inputs: idx.iter().map(|&i| tr.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| tr.labels[i]).collect(),
        };
        let base_cfg = TrainingConfig {
            learning_rate: cfg.learning_rates[0],
            batch_size: cfg.batch_size,
            epochs: cfg.sweep_epochs,
            seed,
            patience: None,
        };
        let sweep = lr_sweep(
            || spec.build(&ds.registry, init_seed),
            &sub,
            &va,
            &cfg.learning_rates,
            &base_cfg,
        )?;
        let full_cfg = TrainingConfig {
            learning_rate: sweep.best_learning_rate,
            epochs: cfg.epochs,
            patience: cfg.patience,
            ..base_cfg
        };
        let outcome = train(spec.build(&ds.registry, init_seed)?, &tr, &va, &full_cfg)?;
        let mut model = ZooModel {
            spec,
            network: outcome.best,
        };
        // evaluate what a checkpoint reload would see
        model.network.round_to_f32();
        let test = evaluate(&model.network, &te.samples())?;
        out.push(TrainedModel {
            model,
            sweep,
            history_csv: history_csv(&outcome.history),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            test,
        });
    }
    Ok(out)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(AdamError::MissingArtifact(path.display().to_string()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn client_path(cfg: &ExperimentConfig, i: usize) -> PathBuf {
    cfg.data_dir().join(format!("client-{i}.adfp"))
}

/// Writes `train.adfp`, `server.adfp` and one `client-<i>.adfp` per client.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let registry = TemplateRegistry::desk_default();
    let data = generate_data(&registry, &cfg.data, cfg.seed)?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    let mut written = vec![dir.join("train.adfp"), dir.join("server.adfp")];
    save_dataset(&data.zoo, &written[0])?;
    save_dataset(&data.server, &written[1])?;
    for (i, c) in data.clients.iter().enumerate() {
        let p = client_path(cfg, i);
        save_dataset(c, &p)?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let dir = cfg.data_dir();
    let load = |p: PathBuf| -> Result<Dataset> {
        require(&p)?;
        load_dataset(&p)
    };
    let zoo = load(dir.join("train.adfp"))?;
    let server = load(dir.join("server.adfp"))?;
    let clients = (0..cfg.data.n_clients)
        .map(|i| load(client_path(cfg, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentData {
        zoo,
        server,
        clients,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooSummaryRow {
    pub model: ModelName,
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: Metrics,
}

/// Trains the zoo; writes one checkpoint and history CSV per model, the
/// sweep table and a summary of test metrics.
pub fn cmd_train_zoo(cfg: &ExperimentConfig) -> Result<Vec<ZooSummaryRow>> {
    let path = cfg.data_dir().join("train.adfp");
    require(&path)?;
    let ds = load_dataset(&path)?;
    let trained = train_zoo(&ds, cfg.scale, &cfg.training, cfg.seed)?;
    let dir = cfg.zoo_dir();
    fs::create_dir_all(&dir)?;
    let mut sweep_csv = String::from("model,learning_rate,best_validation_accuracy,diverged\n");
    let mut rows = Vec::new();
    for mut t in trained {
        let name = t.model.spec.name;
        t.model.save(dir.join(format!("{name}.adwt")))?;
        write(&dir.join(format!("{name}_history.csv")), &t.history_csv)?;
        for r in &t.sweep.rows {
            let _ = writeln!(
                sweep_csv,
                "{name},{},{},{}",
                r.learning_rate, r.best_validation_accuracy, r.diverged
            );
        }
        rows.push(ZooSummaryRow {
            model: name,
            learning_rate: t.sweep.best_learning_rate,
            best_epoch: t.best_epoch,
            epochs_run: t.epochs_run,
            test: t.test,
        });
    }
    write(&dir.join("sweep.csv"), sweep_csv)?;
    write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    Ok(rows)
}

pub fn load_zoo(cfg: &ExperimentConfig, registry: &TemplateRegistry) -> Result<Vec<ZooModel>> {
    ModelName::ALL
        .iter()
        .map(|name| {
            let p = cfg.zoo_dir().join(format!("{name}.adwt"));
            require(&p)?;
            ZooModel::load(&p, registry)
        })
        .collect()
}

/// Agreement matrices, rows are models and columns clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEvalReport {
    pub models: Vec<ModelName>,
    pub clients: Vec<usize>,
    pub consensus_match: Vec<Vec<f64>>,
    pub ground_truth_match: Vec<Vec<f64>>,
    pub consensus_ground_truth_match: Vec<f64>,
}

/// Scores every model and the consensus on each client's unlabeled apps.
pub fn pseudo_eval(
    zoo: &[ZooModel],
    clients: &[Dataset],
) -> Result<(PseudoEvalReport, Vec<String>)> {
    let n_models = zoo.len();
    let mut consensus_match = vec![vec![0.0; clients.len()]; n_models];
    let mut truth_match = vec![vec![0.0; clients.len()]; n_models];
    let mut consensus_truth = vec![0.0; clients.len()];
    let mut audits = Vec::new();
    for (ci, c) in clients.iter().enumerate() {
        let mut rows = Vec::new();
        let mut n = 0usize;
        for s in c.unlabeled() {
            let r = pseudo_label(&s.fingerprint, &c.registry, zoo)?;
            let truth = s.truth();
            for (mi, p) in r.per_model.iter().enumerate() {
                let l = decide([p.p_benign, p.p_malware]);
                if l == r.label {
                    consensus_match[mi][ci] += 1.0;
                }
                if Some(l) == truth {
                    truth_match[mi][ci] += 1.0;
                }
            }
            if Some(r.label) == truth {
                consensus_truth[ci] += 1.0;
            }
            n += 1;
            rows.push((s.fingerprint.app_id.clone(), r));
        }
        if n > 0 {
            for mi in 0..n_models {
                consensus_match[mi][ci] /= n as f64;
                truth_match[mi][ci] /= n as f64;
            }
            consensus_truth[ci] /= n as f64;
        }
        audits.push(audit_csv(&rows));
    }
    Ok((
        PseudoEvalReport {
            models: zoo.iter().map(|m| m.spec.name).collect(),
            clients: (0..clients.len()).collect(),
            consensus_match,
            ground_truth_match: truth_match,
            consensus_ground_truth_match: consensus_truth,
        },
        audits,
    ))
}

pub fn cmd_pseudo_eval(cfg: &ExperimentConfig) -> Result<PseudoEvalReport> {
    let registry = TemplateRegistry::desk_default();
    let zoo = load_zoo(cfg, &registry)?;
    let data = load_data(cfg)?;
    let (report, audits) = pseudo_eval(&zoo, &data.clients)?;
    let dir = cfg.output_dir.join("pseudo");
    for (i, a) in audits.iter().enumerate() {
        write(&dir.join(format!("audit-client-{i}.csv")), a)?;
    }
    write(
        &dir.join("pseudo_eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardSummary {
    pub kind: ModelName,
    pub baseline: f64,
    pub theta: f64,
}

pub fn cmd_train_guards(cfg: &ExperimentConfig) -> Result<Vec<GuardSummary>> {
    let registry = TemplateRegistry::desk_default();
    let zoo = load_zoo(cfg, &registry)?;
    let path = cfg.data_dir().join("server.adfp");
    require(&path)?;
    let server = load_dataset(&path)?;
    let guards = train_guards(
        &server,
        &zoo,
        &cfg.federation.head,
        &cfg.federation.guard_training,
        cfg.federation.theta_margin,
    )?;
    let dir = cfg.guards_dir();
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    for g in &guards {
        let spec = ModelSpec::new(g.kind, cfg.scale);
        g.model
            .save_head(&spec, dir.join(format!("{}-head.adwt", g.kind)))?;
        out.push(GuardSummary {
            kind: g.kind,
            baseline: g.baseline,
            theta: g.theta,
        });
    }
    write(
        &dir.join("guards.json"),
        serde_json::to_string_pretty(&out)?,
    )?;
    Ok(out)
}

/// Exclusion quality against the adversary schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: f64,
    pub recall: f64,
}

pub fn detection_score(reports: &[RoundReport]) -> DetectionScore {
    let mut s = DetectionScore::default();
    for r in reports {
        for c in &r.clients {
            match (c.malicious, !c.verdict.is_accepted()) {
                (true, true) => s.true_positives += 1,
                (false, true) => s.false_positives += 1,
                (true, false) => s.false_negatives += 1,
                (false, false) => s.true_negatives += 1,
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    s.precision = ratio(s.true_positives, s.true_positives + s.false_positives);
    s.recall = ratio(s.true_positives, s.true_positives + s.false_negatives);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationSummary {
    pub rounds: usize,
    pub exclusions_per_round: Vec<usize>,
    pub accuracy_per_round: BTreeMap<ModelName, Vec<f64>>,
    /// Mean label-check match rate per kind, split by client role.
    pub match_accuracy: BTreeMap<ModelName, RoleMatch>,
    pub detection: DetectionScore,
    pub bases_intact: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleMatch {
    pub honest: Option<f64>,
    pub malicious: Option<f64>,
}

pub fn summarize(reports: &[RoundReport]) -> FederationSummary {
    let mut accuracy_per_round: BTreeMap<ModelName, Vec<f64>> = BTreeMap::new();
    let mut sums: BTreeMap<ModelName, [(f64, usize); 2]> = BTreeMap::new();
    for r in reports {
        for a in &r.aggregates {
            accuracy_per_round
                .entry(a.kind)
                .or_default()
                .push(a.validation_accuracy);
        }
        for c in &r.clients {
            if let Some(lc) = &c.label_check {
                for (k, &m) in &lc.match_rate {
                    let e = &mut sums.entry(*k).or_default()[c.malicious as usize];
                    e.0 += m;
                    e.1 += 1;
                }
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { None } else { Some(s / n as f64) };
    FederationSummary {
        rounds: reports.len(),
        exclusions_per_round: reports.iter().map(|r| r.excluded().len()).collect(),
        accuracy_per_round,
        match_accuracy: sums
            .into_iter()
            .map(|(k, [h, m])| {
                (
                    k,
                    RoleMatch {
                        honest: mean(h),
                        malicious: mean(m),
                    },
                )
            })
            .collect(),
        detection: detection_score(reports),
        bases_intact: reports.last().is_none_or(|r| r.bases_intact),
    }
}

/// Runs the configured federated experiment; writes `rounds.jsonl` and
/// `summary.json` and returns the path of the round log.
pub fn cmd_federate(cfg: &ExperimentConfig) -> Result<(PathBuf, FederationSummary)> {
    let registry = TemplateRegistry::desk_default();
    let zoo = load_zoo(cfg, &registry)?;
    let data = load_data(cfg)?;
    let reports = run_federation(&zoo, &data, cfg)?;
    let dir = cfg.federation_dir();
    let mut log = String::new();
    for r in &reports {
        log.push_str(&r.to_json_line()?);
        log.push('\n');
    }
    let log_path = dir.join("rounds.jsonl");
    write(&log_path, log)?;
    let summary = summarize(&reports);
    write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok((log_path, summary))
}

/// In-memory federated run with the experiment seed.
pub fn run_federation(
    zoo: &[ZooModel],
    data: &ExperimentData,
    cfg: &ExperimentConfig,
) -> Result<Vec<RoundReport>> {
    let fed_cfg = FederationConfig {
        seed: cfg.seed,
        ..cfg.federation.clone()
    };
    let mut fed = Federation::new(zoo, &data.server, &data.clients, fed_cfg)?;
    fed.run(cfg.attack.as_ref())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBench {
    pub draws: usize,
    pub weight_slice: usize,
    pub weight_multiplier_mean: f64,
    pub weight_multiplier_abs_max: f64,
    pub feature_density: f64,
}

/// Monte-Carlo statistics of the manipulation operators.
pub fn attack_bench(draws: usize, seed: u64) -> Result<AttackBench> {
    if draws == 0 {
        return Err(AdamError::InvalidArgument("draws must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slice = 100;
    let ones = vec![1.0; slice];
    let (mut sum, mut max, mut n) = (0.0f64, 0.0f64, 0usize);
    while n < draws {
        for m in manipulate_weights(&ones, 0, slice, &mut rng)? {
            sum += m;
            max = max.max(m.abs());
            n += 1;
        }
    }
    let fp = Fingerprint::new("bench", vec![0.0; slice])?;
    let (mut set, mut total) = (0usize, 0usize);
    while total < draws {
        let out = manipulate_features(&fp, 0, slice, &mut rng)?;
        set += out.bits.iter().filter(|&&b| b == 1.0).count();
        total += slice;
    }
    Ok(AttackBench {
        draws: n,
        weight_slice: slice,
        weight_multiplier_mean: sum / n as f64,
        weight_multiplier_abs_max: max,
        feature_density: set as f64 / total as f64,
    })
}

pub fn cmd_attack_bench(cfg: &ExperimentConfig, draws: usize) -> Result<AttackBench> {
    let bench = attack_bench(draws, cfg.seed)?;
    write(
        &cfg.output_dir.join("attack_bench.json"),
        serde_json::to_string_pretty(&bench)?,
    )?;
    Ok(bench)
}
