use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dnd_core::attacks::{fgsm, iterative_fgsm};
use dnd_core::bundle::{save_pipeline, CheckpointPaths};
use dnd_core::data::{derive_seed, gen_synthetic_dataset, Dataset, DatasetConfig, Split};
use dnd_core::experiment::{
    attacker_pool, build_artifacts, extract_surrogate, run_experiment, run_scenarios, write_report,
    Artifacts, ExperimentConfig, Report,
};
use dnd_core::models::{load_checkpoint, save_checkpoint, Checkpoint, Classifier};
use dnd_core::search::search_ensemble;
use dnd_core::sentinel::static_oracle;
use dnd_core::Error;
use dnd_gateway::{run_redteam, GatewayConfig, RedTeamPlan, Server, ShutdownHandle};

#[derive(Parser)]
#[command(name = "dnd", version, about = "Randomized ensemble defense testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "dnd-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train and test glyph datasets.
    GenData(Common),
    /// Search the ensemble and train every defense model; writes checkpoints
    /// and gateway/red-team config templates.
    Train(Common),
    /// Run only the architecture search.
    Search(Common),
    /// White-box FGSM and iterative FGSM against the trained static model.
    Attack(Common),
    /// Serve the gateway described by a gateway config.
    Serve(Common),
    /// Drive a scripted red-team plan against a running gateway.
    Redteam(Common),
    /// Run every scenario and write the report.
    Report(Common),
    /// Everything: data, models, checkpoints and report.
    Run(Common),
}

/// Exit code 2: the inputs were rejected before any work ran.
struct Failure {
    code: u8,
    err: Error,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = if matches!(err, Error::Validation(_)) {
            2
        } else {
            3
        };
        Failure { code, err }
    }
}

fn invalid(err: Error) -> Failure {
    Failure { code: 2, err }
}

type CliResult<T> = Result<T, Failure>;

fn experiment_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(invalid)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let v = serde_json::to_value(value).map_err(Error::from)?;
    let mut s = serde_json::to_string_pretty(&v).map_err(Error::from)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e).into())
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(Error::io(path, e)))?;
    serde_json::from_str(&text)
        .map_err(|e| invalid(Error::Validation(format!("{}: {e}", path.display()))))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<(Dataset, Dataset)> {
    cfg.validate().map_err(invalid)?;
    create_dir(out)?;
    let (train, test) = gen_synthetic_dataset(&cfg.dataset, cfg.seed)?;
    train.save(out.join("train.dnd"))?;
    test.save(out.join("test.dnd"))?;
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct RedTeamConfig {
    addr: String,
    /// Classifier checkpoint the attacker crafts against.
    surrogate: PathBuf,
    dataset: DatasetConfig,
    dataset_seed: u64,
    plan: RedTeamPlan,
}

/// Saves checkpoints, an attacker surrogate and config templates for the
/// gateway and red-team subcommands.
fn save_deployment(art: &Artifacts, cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let ckpt = out.join("checkpoints");
    save_pipeline(&art.pipeline, &art.sequence_detector, &ckpt)?;
    write_json(&out.join("search_report.json"), &art.search)?;
    let pool = attacker_pool(cfg);
    let mut oracle = static_oracle(art.static_model());
    let sur = extract_surrogate(
        &mut oracle,
        &pool.images,
        &cfg.blackbox,
        derive_seed(cfg.seed, "surrogate-static"),
    )?;
    save_checkpoint(
        ckpt.join("attacker_surrogate.dndw"),
        &Checkpoint::Classifier(sur),
    )?;
    let gateway = GatewayConfig {
        listen: "127.0.0.1:7878".into(),
        root_seed: cfg.seed,
        defense: cfg.defense.clone(),
        sentinel: cfg.sentinel.clone(),
        checkpoints: CheckpointPaths::in_dir("checkpoints", art.registry().len()),
        reject_on_suspect: cfg.reject_on_suspect,
        audit_log: "audit.jsonl".into(),
    };
    write_json(&out.join("gateway.json"), &gateway)?;
    let sessions = (0..6)
        .map(|i| dnd_gateway::RedTeamSession {
            client_id: format!("redteam-{i}"),
            kind: [
                dnd_core::attacks::ProbeKind::FgsmProbe,
                dnd_core::attacks::ProbeKind::ExtractionProbe,
                dnd_core::attacks::ProbeKind::Benign,
            ][i % 3],
            len: cfg.sentinel_eval.session_len,
        })
        .collect();
    let redteam = RedTeamConfig {
        addr: "127.0.0.1:7878".into(),
        surrogate: PathBuf::from("checkpoints/attacker_surrogate.dndw"),
        dataset: cfg.dataset.clone(),
        dataset_seed: derive_seed(cfg.seed, "redteam"),
        plan: RedTeamPlan {
            seed: cfg.seed,
            attack: cfg.attack.clone(),
            sessions,
        },
    };
    write_json(&out.join("redteam.json"), &redteam)
}

fn print_report(r: &Report, out: &Path) {
    println!("config {} seed {}", r.config_hash, r.seed);
    for s in &r.scenarios {
        let metrics: Vec<String> = s
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect();
        println!("{:<18} {}", s.name, metrics.join(" "));
    }
    println!("report written to {}", out.display());
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData(c) => {
            let cfg = experiment_config(&c)?;
            let (train, test) = gen_data(&cfg, &c.out)?;
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                c.out.display()
            );
        }
        Cmd::Search(c) => {
            let cfg = experiment_config(&c)?;
            let (train, test) = gen_data(&cfg, &c.out)?;
            let outcome = search_ensemble(
                &cfg.space,
                train.labeled(),
                test.labeled(),
                &cfg.search,
                derive_seed(cfg.seed, "search"),
            )?;
            let dir = c.out.join("registry");
            create_dir(&dir)?;
            for (i, m) in outcome.models.iter().enumerate() {
                save_checkpoint(
                    dir.join(format!("registry_{i}.dndw")),
                    &Checkpoint::Classifier(m.clone()),
                )?;
            }
            write_json(&c.out.join("search_report.json"), &outcome.report)?;
            println!(
                "chosen {:?} accuracies {:?}",
                outcome.report.chosen, outcome.report.final_accuracies
            );
        }
        Cmd::Train(c) => {
            let cfg = experiment_config(&c)?;
            gen_data(&cfg, &c.out)?;
            let art = build_artifacts(&cfg)?;
            save_deployment(&art, &cfg, &c.out)?;
            println!("checkpoints and configs written to {}", c.out.display());
        }
        Cmd::Attack(c) => {
            let cfg = experiment_config(&c)?;
            cfg.validate().map_err(invalid)?;
            let path = c.out.join("checkpoints").join("registry_0.dndw");
            if !path.is_file() {
                return Err(invalid(Error::Validation(format!(
                    "{} not found; run `dnd train` first",
                    path.display()
                ))));
            }
            let model: Classifier = load_checkpoint(&path)?.into_classifier()?;
            let (_, test) = gen_synthetic_dataset(&cfg.dataset, cfg.seed)?;
            let n = cfg.eval_samples.min(test.len());
            let (mut clean, mut single, mut iter) = (0, 0, 0);
            for (x, &y) in test.images[..n].iter().zip(&test.labels[..n]) {
                clean += usize::from(model.predict(x)? == y);
                single +=
                    usize::from(model.predict(&fgsm(&model, x, y, cfg.attack.epsilon)?)? == y);
                iter +=
                    usize::from(model.predict(&iterative_fgsm(&model, x, y, &cfg.attack)?)? == y);
            }
            let acc = |k: usize| k as f64 / n as f64;
            let summary = serde_json::json!({
                "samples": n,
                "epsilon": cfg.attack.epsilon,
                "clean_accuracy": acc(clean),
                "fgsm_accuracy": acc(single),
                "iterative_accuracy": acc(iter),
            });
            write_json(&c.out.join("attack.json"), &summary)?;
            println!("{summary}");
        }
        Cmd::Serve(c) => {
            let mut cfg = GatewayConfig::load(&c.config).map_err(invalid)?;
            cfg.apply_env().map_err(invalid)?;
            if let Some(s) = c.seed {
                cfg.root_seed = s;
            }
            let gateway = dnd_gateway::Gateway::from_config(&cfg).map_err(invalid)?;
            let server = Server::bind(
                cfg.listen_addr().map_err(invalid)?,
                gateway,
                Some(cfg.audit_log.clone()),
            )?;
            let stop: ShutdownHandle = server.shutdown_handle();
            ctrlc::set_handler(move || stop.shutdown())
                .map_err(|e| Error::Contract(format!("cannot install signal handler: {e}")))?;
            println!("listening on {}", server.local_addr());
            let _ = std::io::stdout().flush();
            let n = server.run()?;
            println!(
                "handled {n} requests; audit log at {}",
                cfg.audit_log.display()
            );
        }
        Cmd::Redteam(c) => {
            let mut rc: RedTeamConfig = load_json(&c.config)?;
            if let Some(s) = c.seed {
                rc.plan.seed = s;
            }
            rc.dataset.validate().map_err(invalid)?;
            let base = c.config.parent().unwrap_or(Path::new("."));
            let sur_path = if rc.surrogate.is_absolute() {
                rc.surrogate.clone()
            } else {
                base.join(&rc.surrogate)
            };
            let surrogate = load_checkpoint(&sur_path)?.into_classifier()?;
            let addr: SocketAddr = rc.addr.parse().map_err(|_| {
                invalid(Error::Validation(format!(
                    "addr {:?} is not host:port",
                    rc.addr
                )))
            })?;
            let pool =
                Dataset::generate(rc.dataset.n_test, Split::Test, &rc.dataset, rc.dataset_seed);
            let transcript = run_redteam(addr, &surrogate, &pool.images, &rc.plan)?;
            create_dir(&c.out)?;
            let path = c.out.join("transcript.jsonl");
            std::fs::write(&path, transcript.concat()).map_err(|e| Error::io(&path, e))?;
            println!(
                "{} responses written to {}",
                transcript.len(),
                path.display()
            );
        }
        Cmd::Report(c) => {
            let cfg = experiment_config(&c)?;
            cfg.validate().map_err(invalid)?;
            let report = run_experiment(&cfg)?;
            write_report(&report, &c.out)?;
            print_report(&report, &c.out);
        }
        Cmd::Run(c) => {
            let cfg = experiment_config(&c)?;
            gen_data(&cfg, &c.out)?;
            let art = build_artifacts(&cfg)?;
            save_deployment(&art, &cfg, &c.out)?;
            let report = run_scenarios(&art, &cfg)?;
            write_report(&report, &c.out)?;
            print_report(&report, &c.out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}
