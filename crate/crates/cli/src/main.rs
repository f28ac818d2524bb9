use std::path::PathBuf;
use std::process::ExitCode;

use adam_core::attacks::{AttackConfig, AttackKind};
use adam_core::harness::{self, ExperimentConfig};
use adam_core::zoo::{ModelName, Scale};
use adam_core::AdamError;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Android malware detection experiments: synthetic fingerprints, a model
/// zoo, consensus pseudo-labels and guarded federated learning.
#[derive(Parser, Debug)]
#[command(name = "adam", version)]
struct Cli {
    /// TOML experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Model widths: desk or paper.
    #[arg(long, global = true)]
    scale: Option<Scale>,
    /// Number of client shards.
    #[arg(long, global = true)]
    clients: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the zoo, server and client datasets.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        signal_strength: Option<f64>,
    },
    /// Sweep learning rates, train every zoo model, write checkpoints.
    TrainZoo {
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of models.
        #[arg(long, value_delimiter = ',')]
        models: Vec<ModelName>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare each model's pseudo-labels with the consensus and the truth.
    PseudoEval,
    /// Train the server guards and report their thresholds.
    TrainGuards {
        #[arg(long)]
        theta_margin: Option<f64>,
    },
    /// Run a federated experiment and write the round log.
    Federate(FederateArgs),
    /// Monte-Carlo statistics of the manipulation operators.
    AttackBench {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

#[derive(Args, Debug)]
struct FederateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    theta_margin: Option<f64>,
    /// Exclude clients that miss the round deadline.
    #[arg(long = "async")]
    asynchronous: bool,
    #[arg(long)]
    no_label_check: bool,
    /// weight_manipulation, feature_manipulation, label_flip or combined.
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long, requires = "attack")]
    malicious_fraction: Option<f64>,
    #[arg(long, requires = "attack")]
    lb: Option<usize>,
    #[arg(long, requires = "attack")]
    ub: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, AdamError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = cli.scale {
        cfg.scale = s;
    }
    if let Some(n) = cli.clients {
        cfg.data.n_clients = n;
    }
    match &cli.command {
        Command::GenData {
            seed,
            signal_strength,
        } => {
            cfg.seed = seed.unwrap_or(cfg.seed);
            if let Some(s) = signal_strength {
                cfg.data.signal_strength = *s;
            }
        }
        Command::TrainZoo {
            seed,
            models,
            epochs,
        } => {
            cfg.seed = seed.unwrap_or(cfg.seed);
            if !models.is_empty() {
                cfg.training.models = models.clone();
            }
            if let Some(e) = epochs {
                cfg.training.epochs = *e;
            }
        }
        Command::TrainGuards { theta_margin } => {
            if let Some(m) = theta_margin {
                cfg.federation.theta_margin = *m;
            }
        }
        Command::Federate(a) => {
            cfg.seed = a.seed;
            let f = &mut cfg.federation;
            if let Some(r) = a.rounds {
                f.rounds = r;
            }
            if a.clients_per_round.is_some() {
                f.clients_per_round = a.clients_per_round;
            }
            if let Some(m) = a.theta_margin {
                f.theta_margin = m;
            }
            f.asynchronous |= a.asynchronous;
            if a.no_label_check {
                f.label_check = false;
            }
            if let Some(kind) = a.attack {
                let mut attack = cfg
                    .attack
                    .take()
                    .filter(|c| c.kind == kind)
                    .unwrap_or_else(|| AttackConfig::new(kind, 0.4, a.seed));
                if let Some(fr) = a.malicious_fraction {
                    attack.malicious_fraction = fr;
                }
                attack.lb = a.lb.or(attack.lb);
                attack.ub = a.ub.or(attack.ub);
                cfg.attack = Some(attack);
            }
        }
        Command::AttackBench { seed, .. } => cfg.seed = seed.unwrap_or(cfg.seed),
        Command::PseudoEval | Command::ShowConfig => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> Result<(), AdamError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), AdamError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { .. } => {
            for p in harness::cmd_gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::TrainZoo { .. } => print_json(&harness::cmd_train_zoo(&cfg)?)?,
        Command::PseudoEval => print_json(&harness::cmd_pseudo_eval(&cfg)?)?,
        Command::TrainGuards { .. } => print_json(&harness::cmd_train_guards(&cfg)?)?,
        Command::Federate(_) => {
            let (log, summary) = harness::cmd_federate(&cfg)?;
            eprintln!("round log: {}", log.display());
            print_json(&summary)?;
        }
        Command::AttackBench { draws, .. } => {
            print_json(&harness::cmd_attack_bench(&cfg, *draws)?)?
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid usage")
                .trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
