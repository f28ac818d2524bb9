//! Simulated federated learning over collaborative heads.
//!
//! Clients fine-tune the heads of the CNN-based collaborative models on their
//! own data (true labels plus consensus pseudo-labels). The server screens
//! every update with guard models, averages the accepted ones weighted by
//! sample count and broadcasts the result, falling back to the last usable
//! aggregate when a round yields nothing finite.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{round_rng, tamper_batch, tamper_weights, AttackConfig, AttackKind};
use crate::consensus::{combined_batch, decide, majority_vote, pseudo_label, PseudoLabelSchedule};
use crate::error::{AdamError, Result};
use crate::fingerprint::{Dataset, Fingerprint, Label, Split};
use crate::nn::{train, Network, PreparedSet, Sample, TrainingConfig};
use crate::transfer::{CollaborativeModel, HeadSpec};
use crate::zoo::{ModelKind, ModelName, Projector, ZooModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    /// Clients selected per round; all of them when unset.
    pub clients_per_round: Option<usize>,
    pub local_epochs: usize,
    pub local_learning_rate: f64,
    pub local_batch_size: usize,
    /// Guard threshold is the guard's baseline accuracy minus this margin.
    pub theta_margin: f64,
    pub label_check: bool,
    pub label_match_threshold: f64,
    /// Cap on the fingerprints a client sends for the label check.
    pub label_batch_cap: usize,
    pub asynchronous: bool,
    pub latency_mean_s: f64,
    pub latency_std_s: f64,
    pub deadline_s: f64,
    pub pseudo: PseudoLabelSchedule,
    pub head: HeadSpec,
    pub guard_training: TrainingConfig,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            clients_per_round: None,
            local_epochs: 3,
            local_learning_rate: 0.02,
            local_batch_size: 16,
            theta_margin: 0.05,
            label_check: true,
            label_match_threshold: 0.8,
            label_batch_cap: 200,
            asynchronous: false,
            latency_mean_s: 3.5,
            latency_std_s: 0.5,
            deadline_s: 5.0,
            pseudo: PseudoLabelSchedule::default(),
            head: HeadSpec::default(),
            guard_training: TrainingConfig {
                learning_rate: 0.1,
                batch_size: 16,
                epochs: 20,
                seed: 0,
                patience: Some(5),
            },
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AdamError::Config(m.to_string()));
        if self.clients_per_round == Some(0) {
            return bad("clients_per_round must be positive");
        }
        if !(self.local_learning_rate > 0.0) || self.local_batch_size == 0 {
            return bad("local training needs a positive learning rate and batch size");
        }
        if !(0.0..=1.0).contains(&self.theta_margin) {
            return bad("theta_margin outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.label_match_threshold) {
            return bad("label_match_threshold outside [0, 1]");
        }
        if self.label_batch_cap == 0 {
            return bad("label_batch_cap must be positive");
        }
        if !(self.latency_std_s >= 0.0 && self.deadline_s > 0.0) {
            return bad("latency model needs std >= 0 and a positive deadline");
        }
        self.pseudo.validate()?;
        self.guard_training.validate()
    }
}

/// Independent random streams, keyed by purpose, round and client.
#[derive(Clone, Copy)]
enum Stream {
    Selection = 1,
    Latency = 2,
    Tamper = 3,
    Shuffle = 4,
    Head = 5,
}

fn stream_rng(seed: u64, s: Stream, round: usize, client: usize) -> rand_chacha::ChaCha8Rng {
    round_rng(
        seed,
        ((s as u64) << 48) | ((round as u64) << 20) | client as u64,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    BelowThreshold,
    NonFinite,
    LabelMismatch,
    Straggler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Excluded(ExclusionReason),
}

impl Verdict {
    pub fn is_accepted(self) -> bool {
        self == Verdict::Accepted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub kind: ModelName,
    pub weights: Vec<f64>,
    pub samples: usize,
}

impl ClientUpdate {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite())
    }
}

/// Server-side evaluator: the shared frozen base with a head trained on the
/// server's trusted data, plus that data's validation split.
#[derive(Clone, Debug)]
pub struct GuardModel {
    pub kind: ModelName,
    pub model: CollaborativeModel,
    pub baseline: f64,
    pub theta: f64,
    projector: Projector,
    head: Network,
    val_embeddings: Vec<Vec<f64>>,
    val_labels: Vec<Label>,
}

impl GuardModel {
    pub fn head_weights(&self) -> Vec<f64> {
        self.model.export_head()
    }

    pub fn head_len(&self) -> usize {
        self.model.head_param_count()
    }

    pub fn embed(&self, fp: &Fingerprint) -> Result<Vec<f64>> {
        self.model.embed(&self.projector.apply(fp)?)
    }

    /// Validation accuracy of `weights` placed on the guard's base.
    pub fn accuracy_of(&self, weights: &[f64]) -> Result<f64> {
        let head = self.head_with(weights)?;
        let mut correct = 0usize;
        for (e, &l) in self.val_embeddings.iter().zip(&self.val_labels) {
            if decide(head.forward(e)?) == l {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.val_labels.len() as f64)
    }

    fn head_with(&self, weights: &[f64]) -> Result<Network> {
        let mut head = self.head.clone();
        head.set_parameters(weights)?;
        Ok(head)
    }
}

/// Trains one guard per CNN-based kind on the server dataset: train split
/// for fitting, validation split for the baseline.
pub fn train_guards(
    server: &Dataset,
    zoo: &[ZooModel],
    head: &HeadSpec,
    cfg: &TrainingConfig,
    theta_margin: f64,
) -> Result<Vec<GuardModel>> {
    let labeled: Vec<_> = server.labeled().collect();
    for class in [Label::Benign, Label::Malware] {
        if !labeled.iter().any(|s| s.label == Some(class)) {
            return Err(AdamError::InvalidArgument(format!(
                "server dataset has no {} samples",
                class.symbol()
            )));
        }
    }
    let mut guards = Vec::new();
    for (i, m) in zoo.iter().enumerate() {
        if m.spec.kind != ModelKind::Cnn {
            continue;
        }
        let projector = m.spec.projector(&server.registry)?;
        let mut cm = CollaborativeModel::from_zoo(&m.spec, &m.network, head, cfg.seed + i as u64)?;
        let mut sets = [PreparedSet::default(), PreparedSet::default()];
        for s in &labeled {
            let idx = match s.split {
                Split::Train => 0,
                Split::Validation => 1,
                Split::Test => continue,
            };
            let e = cm.embed(&projector.apply(&s.fingerprint)?)?;
            sets[idx].push(e, s.label.expect("labeled"));
        }
        let [tr, va] = sets;
        let out = train(cm.head_network(), &tr, &va, cfg)?;
        cm.import_head(&out.best.parameters())?;
        let baseline = out.best_validation_accuracy();
        guards.push(GuardModel {
            kind: m.spec.name,
            head: cm.head_network(),
            model: cm,
            baseline,
            theta: (baseline - theta_margin).clamp(0.0, 1.0),
            projector,
            val_embeddings: va.inputs,
            val_labels: va.labels,
        });
    }
    if guards.is_empty() {
        return Err(AdamError::Empty("CNN-based models for guards".into()));
    }
    Ok(guards)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightCheck {
    pub kind: ModelName,
    pub accuracy: Option<f64>,
    pub verdict: Verdict,
}

/// Accepted iff the update is finite and reaches the guard's threshold on the
/// server validation set.
pub fn guard_check_weights(guard: &GuardModel, update: &ClientUpdate) -> Result<WeightCheck> {
    if update.weights.len() != guard.head_len() {
        return Err(AdamError::LengthMismatch {
            expected: guard.head_len(),
            found: update.weights.len(),
        });
    }
    if !update.is_finite() {
        return Ok(WeightCheck {
            kind: guard.kind,
            accuracy: None,
            verdict: Verdict::Excluded(ExclusionReason::NonFinite),
        });
    }
    let acc = guard.accuracy_of(&update.weights)?;
    let verdict = if acc >= guard.theta {
        Verdict::Accepted
    } else {
        Verdict::Excluded(ExclusionReason::BelowThreshold)
    };
    Ok(WeightCheck {
        kind: guard.kind,
        accuracy: Some(acc),
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCheck {
    /// Agreement of each client head with the guard consensus.
    pub match_rate: BTreeMap<ModelName, f64>,
    pub verdict: Verdict,
}

/// Guards vote on every fingerprint (ties count as malware); each client head
/// is run on its guard's base over the same fingerprints and compared with
/// that vote. Any kind below `threshold` excludes the client.
pub fn guard_check_labels(
    guards: &[GuardModel],
    fingerprints: &[Fingerprint],
    updates: &[ClientUpdate],
    threshold: f64,
) -> Result<LabelCheck> {
    if fingerprints.is_empty() {
        return Err(AdamError::Empty("fingerprint batch".into()));
    }
    let mut embeddings = Vec::with_capacity(guards.len());
    let mut guard_labels = Vec::with_capacity(guards.len());
    for g in guards {
        let mut e = Vec::with_capacity(fingerprints.len());
        let mut l = Vec::with_capacity(fingerprints.len());
        for fp in fingerprints {
            let x = g.embed(fp)?;
            l.push(decide(g.head.forward(&x)?));
            e.push(x);
        }
        embeddings.push(e);
        guard_labels.push(l);
    }
    let consensus: Vec<Label> = (0..fingerprints.len())
        .map(|j| {
            let votes: Vec<Label> = guard_labels.iter().map(|l| l[j]).collect();
            majority_vote(&votes).map(|(l, _)| l)
        })
        .collect::<Result<_>>()?;

    let mut match_rate = BTreeMap::new();
    for u in updates {
        let gi = guards
            .iter()
            .position(|g| g.kind == u.kind)
            .ok_or_else(|| AdamError::InvalidArgument(format!("no guard for {}", u.kind)))?;
        let head = guards[gi].head_with(&u.weights)?;
        let mut agree = 0usize;
        for (e, &c) in embeddings[gi].iter().zip(&consensus) {
            // a non-finite head yields NaN probabilities, which never agree
            let p = head.forward(e)?;
            if p.iter().all(|v| v.is_finite()) && decide(p) == c {
                agree += 1;
            }
        }
        match_rate.insert(u.kind, agree as f64 / consensus.len() as f64);
    }
    let verdict = if match_rate.values().all(|&r| r >= threshold) {
        Verdict::Accepted
    } else {
        Verdict::Excluded(ExclusionReason::LabelMismatch)
    };
    Ok(LabelCheck {
        match_rate,
        verdict,
    })
}

/// Sample-count weighted mean of same-kind updates, `sum (t_i / T) w_i`.
///
/// Updates are folded in client-id order as a running mean
/// `m += (t_i / T_i) (w_i - m)`, which makes the result independent of
/// input order and exact on identical inputs.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let first = updates
        .first()
        .ok_or_else(|| AdamError::Empty("accepted updates".into()))?;
    let len = first.weights.len();
    for u in updates {
        if u.kind != first.kind {
            return Err(AdamError::InvalidArgument("updates mix model kinds".into()));
        }
        if u.weights.len() != len {
            return Err(AdamError::LengthMismatch {
                expected: len,
                found: u.weights.len(),
            });
        }
        if u.samples == 0 {
            return Err(AdamError::InvalidArgument(
                "update with zero samples".into(),
            ));
        }
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by(|a, b| {
        a.client_id.cmp(&b.client_id).then_with(|| {
            let ka = a.weights.iter().map(|v| v.to_bits());
            let kb = b.weights.iter().map(|v| v.to_bits());
            ka.cmp(kb)
        })
    });
    let mut mean = vec![0.0; len];
    let mut total = 0usize;
    for u in order {
        total += u.samples;
        let a = u.samples as f64 / total as f64;
        for (m, w) in mean.iter_mut().zip(&u.weights) {
            *m += a * (w - *m);
        }
    }
    Ok(mean)
}

fn weights_hash(w: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in w {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// A participant's local data and its collaborative models.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub fingerprints: Vec<Fingerprint>,
    /// Training label per sample: the true label where known, otherwise the
    /// zoo's consensus pseudo-label.
    pub labels: Vec<Label>,
    pub pseudo: Vec<bool>,
    pub hidden_truth: Vec<Option<Label>>,
    pub models: BTreeMap<ModelName, CollaborativeModel>,
    embeddings: BTreeMap<ModelName, Vec<Vec<f64>>>,
}

impl ClientState {
    /// Pseudo-labels the unlabeled part of `data` by zoo consensus and
    /// attaches one collaborative model per guard kind.
    pub fn new(
        client_id: usize,
        data: &Dataset,
        zoo: &[ZooModel],
        guards: &[GuardModel],
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(AdamError::Empty(format!("client {client_id} dataset")));
        }
        let mut fingerprints = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        let mut pseudo = Vec::with_capacity(data.len());
        let mut hidden_truth = Vec::with_capacity(data.len());
        for s in &data.samples {
            let (l, p) = match s.label {
                Some(l) => (l, false),
                None => (
                    pseudo_label(&s.fingerprint, &data.registry, zoo)?.label,
                    true,
                ),
            };
            fingerprints.push(s.fingerprint.clone());
            labels.push(l);
            pseudo.push(p);
            hidden_truth.push(s.truth());
        }
        let mut models = BTreeMap::new();
        let mut embeddings = BTreeMap::new();
        for g in guards {
            let cm = g.model.clone();
            let e = fingerprints
                .iter()
                .map(|fp| g.embed(fp))
                .collect::<Result<Vec<_>>>()?;
            models.insert(g.kind, cm);
            embeddings.insert(g.kind, e);
        }
        Ok(Self {
            client_id,
            fingerprints,
            labels,
            pseudo,
            hidden_truth,
            models,
            embeddings,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn base_hashes(&self) -> BTreeMap<ModelName, String> {
        self.models
            .iter()
            .map(|(k, m)| (*k, m.base_hash()))
            .collect()
    }

    /// Fraction of pseudo-labels that match the hidden ground truth.
    pub fn pseudo_label_accuracy(&self) -> Option<f64> {
        let pairs: Vec<_> = self
            .labels
            .iter()
            .zip(&self.pseudo)
            .zip(&self.hidden_truth)
            .filter_map(|((l, &p), t)| if p { t.map(|t| (*l, t)) } else { None })
            .collect();
        if pairs.is_empty() {
            return None;
        }
        Some(pairs.iter().filter(|(a, b)| a == b).count() as f64 / pairs.len() as f64)
    }
}

struct LocalResult {
    updates: Vec<ClientUpdate>,
    mean_loss: f64,
    sent: Vec<Fingerprint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSchedule {
    pub kind: AttackKind,
    pub lb: Option<usize>,
    pub ub: Option<usize>,
    pub clients: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub malicious: bool,
    pub latency_s: f64,
    pub verdict: Verdict,
    pub weight_checks: Vec<WeightCheck>,
    pub label_check: Option<LabelCheck>,
    pub local_loss: f64,
    pub loss_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindAggregate {
    pub kind: ModelName,
    pub accepted: Vec<usize>,
    pub finite: bool,
    pub fallback: bool,
    pub sha256: String,
    pub l2_norm: f64,
    pub validation_accuracy: f64,
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub attack: Option<AttackSchedule>,
    pub clients: Vec<ClientReport>,
    pub aggregates: Vec<KindAggregate>,
    /// Guard base hashes after the round.
    pub base_hashes: BTreeMap<ModelName, String>,
    /// Every client and guard base still matches its initial hash.
    pub bases_intact: bool,
}

impl RoundReport {
    pub fn excluded(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| !c.verdict.is_accepted())
            .map(|c| c.client_id)
            .collect()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Server, guards and clients of one federated experiment.
#[derive(Clone, Debug)]
pub struct Federation {
    pub config: FederationConfig,
    pub guards: Vec<GuardModel>,
    pub clients: Vec<ClientState>,
    broadcast: BTreeMap<ModelName, Vec<f64>>,
    initial_base_hashes: BTreeMap<ModelName, String>,
    round: usize,
}

impl Federation {
    /// Trains the guards and prepares the clients. The initial broadcast is
    /// each guard's head.
    pub fn new(
        zoo: &[ZooModel],
        server: &Dataset,
        clients: &[Dataset],
        config: FederationConfig,
    ) -> Result<Self> {
        config.validate()?;
        if clients.is_empty() {
            return Err(AdamError::Config(
                "federation needs at least one client".into(),
            ));
        }
        let guards = train_guards(
            server,
            zoo,
            &config.head,
            &config.guard_training,
            config.theta_margin,
        )?;
        let clients = clients
            .iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, d, zoo, &guards))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(config, guards, clients))
    }

    pub fn from_parts(
        config: FederationConfig,
        guards: Vec<GuardModel>,
        clients: Vec<ClientState>,
    ) -> Self {
        let broadcast = guards.iter().map(|g| (g.kind, g.head_weights())).collect();
        let initial_base_hashes = guards
            .iter()
            .map(|g| (g.kind, g.model.base_hash()))
            .collect();
        Self {
            config,
            guards,
            clients,
            broadcast,
            initial_base_hashes,
            round: 0,
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn broadcast(&self) -> &BTreeMap<ModelName, Vec<f64>> {
        &self.broadcast
    }

    pub fn initial_base_hashes(&self) -> &BTreeMap<ModelName, String> {
        &self.initial_base_hashes
    }

    /// True when every client and guard base still hashes to its initial value.
    pub fn bases_intact(&self) -> bool {
        let guards_ok = self
            .guards
            .iter()
            .all(|g| self.initial_base_hashes.get(&g.kind) == Some(&g.model.base_hash()));
        let clients_ok = self
            .clients
            .iter()
            .all(|c| c.base_hashes() == self.initial_base_hashes);
        guards_ok && clients_ok
    }

    fn select_participants(&self) -> Vec<usize> {
        let n = self.clients.len();
        let k = self.config.clients_per_round.unwrap_or(n).min(n);
        let mut rng = stream_rng(self.config.seed, Stream::Selection, self.round, 0);
        let mut chosen = sample(&mut rng, n, k).into_vec();
        chosen.sort_unstable();
        chosen
    }

    fn latency(&self, client: usize) -> f64 {
        let mut rng = stream_rng(self.config.seed, Stream::Latency, self.round, client);
        let d = Normal::new(self.config.latency_mean_s, self.config.latency_std_s)
            .expect("validated std");
        d.sample(&mut rng).max(0.0)
    }

    /// Local training of every collaborative head, starting from the
    /// broadcast; malicious clients tamper per `attack`.
    fn local_update(&mut self, ci: usize, attack: Option<&AttackConfig>) -> Result<LocalResult> {
        let seed = self.config.seed;
        let round = self.round;
        let cfg = self.config.clone();
        let client = &mut self.clients[ci];
        let mut fps = client.fingerprints.clone();
        let mut labels: Vec<Option<Label>> = client.labels.iter().map(|&l| Some(l)).collect();
        let mut tampered = false;
        if let Some(a) = attack {
            let mut rng = stream_rng(a.seed, Stream::Tamper, round, ci);
            tamper_batch(a, &mut fps, &mut labels, &mut rng)?;
            tampered = a.kind.tampers_features();
        }
        let labels: Vec<Label> = labels
            .into_iter()
            .map(|l| l.expect("all labeled"))
            .collect();
        let delta = cfg.pseudo.delta(round);

        let mut updates = Vec::new();
        let mut losses = Vec::new();
        for g in &self.guards {
            let embeddings = if tampered {
                fps.iter()
                    .map(|fp| g.embed(fp))
                    .collect::<Result<Vec<_>>>()?
            } else {
                client.embeddings[&g.kind].clone()
            };
            let cm = client.models.get_mut(&g.kind).expect("one model per guard");
            cm.import_head(&self.broadcast[&g.kind])?;
            let mut head = cm.head_network();
            let mut order: Vec<usize> = (0..embeddings.len()).collect();
            let mut rng = stream_rng(seed, Stream::Shuffle, round, ci);
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.local_batch_size) {
                    let (mut lab, mut pse) = (Vec::new(), Vec::new());
                    for &i in chunk {
                        let s = Sample {
                            input: &embeddings[i],
                            label: labels[i],
                        };
                        if client.pseudo[i] {
                            pse.push(s);
                        } else {
                            lab.push(s);
                        }
                    }
                    let batch = combined_batch(&lab, &pse, delta)?;
                    match head.weighted_step(&batch, cfg.local_learning_rate) {
                        Ok(l) => losses.push(l),
                        Err(AdamError::NonFinite(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            cm.import_head(&head.parameters())?;
            let mut weights = cm.export_head();
            if let Some(a) = attack {
                let mut rng = stream_rng(a.seed, Stream::Head, round, ci);
                weights = tamper_weights(a, &weights, &mut rng)?;
            }
            updates.push(ClientUpdate {
                client_id: client.client_id,
                kind: g.kind,
                weights,
                samples: client.sample_count(),
            });
        }
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        fps.truncate(cfg.label_batch_cap);
        Ok(LocalResult {
            updates,
            mean_loss,
            sent: fps,
        })
    }

    /// One round: selection, local training (with tampering for the clients
    /// the attack schedule marks malicious), guard screening, aggregation and
    /// broadcast.
    pub fn run_round(&mut self, attack: Option<&AttackConfig>) -> Result<RoundReport> {
        if let Some(a) = attack {
            a.validate()?;
        }
        let participants = self.select_participants();
        let malicious = match attack {
            Some(a) => crate::attacks::draw_malicious(
                self.clients.len(),
                a.malicious_fraction,
                a.seed,
                self.round,
            ),
            None => vec![false; self.clients.len()],
        };

        let mut reports = Vec::with_capacity(participants.len());
        let mut accepted_updates: Vec<ClientUpdate> = Vec::new();
        for &ci in &participants {
            let adversary = if malicious[ci] { attack } else { None };
            let local = self.local_update(ci, adversary)?;
            let latency = self.latency(ci);

            let mut weight_checks = Vec::new();
            let mut label_check = None;
            let verdict = if self.config.asynchronous && latency > self.config.deadline_s {
                Verdict::Excluded(ExclusionReason::Straggler)
            } else {
                let mut v = Verdict::Accepted;
                for (g, u) in self.guards.iter().zip(&local.updates) {
                    let wc = guard_check_weights(g, u)?;
                    if v.is_accepted() && !wc.verdict.is_accepted() {
                        v = wc.verdict;
                    }
                    weight_checks.push(wc);
                }
                if self.config.label_check && !local.sent.is_empty() {
                    let lc = guard_check_labels(
                        &self.guards,
                        &local.sent,
                        &local.updates,
                        self.config.label_match_threshold,
                    )?;
                    if v.is_accepted() && !lc.verdict.is_accepted() {
                        v = lc.verdict;
                    }
                    label_check = Some(lc);
                }
                v
            };
            if verdict.is_accepted() {
                accepted_updates.extend(local.updates.iter().cloned());
            }
            reports.push(ClientReport {
                client_id: self.clients[ci].client_id,
                malicious: malicious[ci],
                latency_s: latency,
                verdict,
                weight_checks,
                label_check,
                local_loss: local.mean_loss,
                loss_share: 0.0,
            });
        }
        let loss_total: f64 = reports.iter().map(|r| r.local_loss).sum();
        if loss_total > 0.0 && loss_total.is_finite() {
            for r in &mut reports {
                r.loss_share = r.local_loss / loss_total;
            }
        }

        let mut aggregates = Vec::new();
        for gi in 0..self.guards.len() {
            let kind = self.guards[gi].kind;
            let kind_updates: Vec<ClientUpdate> = accepted_updates
                .iter()
                .filter(|u| u.kind == kind)
                .cloned()
                .collect();
            aggregates.push(self.commit(gi, &kind_updates)?);
        }

        let schedule = attack.map(|a| AttackSchedule {
            kind: a.kind,
            lb: a.lb,
            ub: a.ub,
            clients: participants
                .iter()
                .copied()
                .filter(|&c| malicious[c])
                .collect(),
        });
        let report = RoundReport {
            round: self.round,
            participants,
            attack: schedule,
            clients: reports,
            aggregates,
            base_hashes: self
                .guards
                .iter()
                .map(|g| (g.kind, g.model.base_hash()))
                .collect(),
            bases_intact: self.bases_intact(),
        };
        self.round += 1;
        Ok(report)
    }

    /// Aggregates `accepted` into guard `gi`'s kind and broadcasts the result,
    /// keeping the previous broadcast when there is nothing finite to use.
    fn commit(&mut self, gi: usize, accepted: &[ClientUpdate]) -> Result<KindAggregate> {
        let kind = self.guards[gi].kind;
        let candidate = if accepted.is_empty() {
            None
        } else {
            Some(aggregate(accepted)?)
        };
        let finite = candidate
            .as_ref()
            .is_some_and(|w| w.iter().all(|v| v.is_finite()));
        if let (true, Some(w)) = (finite, candidate) {
            self.broadcast.insert(kind, w);
        }
        let w = &self.broadcast[&kind];
        Ok(KindAggregate {
            kind,
            accepted: accepted.iter().map(|u| u.client_id).collect(),
            finite,
            fallback: !finite,
            sha256: weights_hash(w),
            l2_norm: w.iter().map(|v| v * v).sum::<f64>().sqrt(),
            validation_accuracy: self.guards[gi].accuracy_of(w)?,
        })
    }

    /// Screens externally produced updates with the weight check, then
    /// aggregates and broadcasts as a normal round would.
    pub fn aggregate_round(&mut self, updates: &[ClientUpdate]) -> Result<Vec<KindAggregate>> {
        let mut out = Vec::new();
        for gi in 0..self.guards.len() {
            let mut accepted = Vec::new();
            for u in updates.iter().filter(|u| u.kind == self.guards[gi].kind) {
                if guard_check_weights(&self.guards[gi], u)?
                    .verdict
                    .is_accepted()
                {
                    accepted.push(u.clone());
                }
            }
            out.push(self.commit(gi, &accepted)?);
        }
        self.round += 1;
        Ok(out)
    }

    /// Runs the configured number of rounds, returning one report per round.
    pub fn run(&mut self, attack: Option<&AttackConfig>) -> Result<Vec<RoundReport>> {
        (0..self.config.rounds)
            .map(|_| self.run_round(attack))
            .collect()
    }
}
