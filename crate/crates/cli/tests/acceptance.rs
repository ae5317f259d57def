//! Acceptance suite: prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed. The full default-config experiment runs four times
//! (three seeds, one repeat), so expect several minutes.

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dnd_core::attacks::{AttackConfig, ProbeKind};
use dnd_core::data::{Dataset, Split};
use dnd_core::defense::{defend_infer, DefenseConfig, DndPipeline, EnsembleRegistry};
use dnd_core::experiment::{ExperimentConfig, Report, Scenario};
use dnd_core::gradcheck::audit;
use dnd_core::models::{load_checkpoint, SequenceDetector};
use dnd_core::sentinel::SessionState;
use dnd_core::service::{AuditLogEntry, DefendedService, ServiceConfig};
use dnd_gateway::{
    run_redteam, Client, Gateway, GatewayConfig, RedTeamPlan, RedTeamSession, Server, WireError,
    WireRequest, WireResponse,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Run {
    dir: PathBuf,
    report: Report,
    report_bytes: Vec<u8>,
    elapsed: Duration,
}

fn default_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
}

fn dnd_run(seed: u64, out: &Path) -> Run {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_dnd"))
        .args(["run", "--config"])
        .arg(default_config_path())
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .env("RUST_LOG", "warn")
        .status()
        .expect("dnd binary runs");
    assert!(status.success(), "dnd run --seed {seed} failed: {status}");
    let elapsed = start.elapsed();
    let report_bytes = std::fs::read(out.join("report.json")).unwrap();
    let report = Report::from_json(std::str::from_utf8(&report_bytes).unwrap()).unwrap();
    Run {
        dir: out.to_path_buf(),
        report,
        report_bytes,
        elapsed,
    }
}

fn metric(r: &Report, s: Scenario, k: &str) -> f64 {
    r.metric(s, k)
        .unwrap_or_else(|| panic!("report lacks {}.{k}", s.name()))
}

struct Deployment {
    pipeline: DndPipeline,
    sequence: SequenceDetector,
    gateway_cfg: GatewayConfig,
    test: Dataset,
}

fn deployment(run: &Run) -> Deployment {
    let gateway_cfg = GatewayConfig::load(run.dir.join("gateway.json")).unwrap();
    let (pipeline, sequence) = gateway_cfg
        .checkpoints
        .load(gateway_cfg.defense.clone())
        .unwrap();
    let test = Dataset::load(run.dir.join("test.dnd"), Split::Test).unwrap();
    Deployment {
        pipeline,
        sequence,
        gateway_cfg,
        test,
    }
}

fn service(d: &Deployment, root_seed: u64) -> DefendedService {
    DefendedService::new(
        Arc::new(d.pipeline.clone()),
        Arc::new(d.sequence.clone()),
        ServiceConfig {
            root_seed,
            policy: d.gateway_cfg.sentinel.clone(),
            reject_on_suspect: false,
        },
    )
    .unwrap()
}

fn start_server(
    d: &Deployment,
    root_seed: u64,
) -> (
    std::net::SocketAddr,
    dnd_gateway::ShutdownHandle,
    std::thread::JoinHandle<dnd_core::Result<usize>>,
    Arc<Gateway>,
) {
    let server = Server::bind(
        "127.0.0.1:0".parse().unwrap(),
        Gateway::with_clock(service(d, root_seed), || 0),
        None,
    )
    .unwrap();
    let gw = server.gateway();
    let (addr, stop, h) = server.spawn();
    (addr, stop, h, gw)
}

fn surrogate(run: &Run) -> dnd_core::models::Classifier {
    load_checkpoint(run.dir.join("checkpoints/attacker_surrogate.dndw"))
        .unwrap()
        .into_classifier()
        .unwrap()
}

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = audit(20).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.worst.total_cmp(&b.worst))
        .unwrap();
    check(
        results.iter().all(|g| g.worst < 1e-4) && elapsed < Duration::from_secs(60),
        format!(
            "{} checks x 20 instances, worst {} at {:.2e}, {:.1}s",
            results.len(),
            worst.name,
            worst.worst,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(runs: &[Run]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let accs = &r.report.registry_accuracies;
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= min >= 0.90 && !accs.is_empty() && r.elapsed < Duration::from_secs(600);
        parts.push(format!(
            "seed {} min {min:.3} ({} models, {:.0}s)",
            r.report.seed,
            accs.len(),
            r.elapsed.as_secs_f64()
        ));
    }
    check(ok, parts.join("; "))
}

fn criterion_3(runs: &[Run]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let clean = metric(&r.report, Scenario::WhiteBoxStatic, "clean_accuracy");
        let single = metric(&r.report, Scenario::WhiteBoxStatic, "fgsm_accuracy");
        let iter = metric(&r.report, Scenario::WhiteBoxStatic, "iterative_accuracy");
        ok &= clean - single >= 0.25 && iter <= single;
        parts.push(format!(
            "seed {} clean {clean:.3} fgsm {single:.3} iterative {iter:.3}",
            r.report.seed
        ));
    }
    check(ok, parts.join("; "))
}

fn criterion_4(runs: &[Run]) -> Outcome {
    let cfg = ExperimentConfig::load(default_config_path()).unwrap();
    let n = runs.len() as f64;
    let s = runs
        .iter()
        .map(|r| metric(&r.report, Scenario::BlackBoxStatic, "success_rate"))
        .sum::<f64>()
        / n;
    let d = runs
        .iter()
        .map(|r| metric(&r.report, Scenario::BlackBoxDnd, "success_rate"))
        .sum::<f64>()
        / n;
    let samples_ok = runs.iter().all(|r| {
        r.report
            .logs
            .black_box_dnd
            .as_ref()
            .is_some_and(|l| l.labels.len() >= 500)
    });
    check(
        d <= 0.5 * s && samples_ok && cfg.blackbox.queries == 2000,
        format!(
            "mean success static {s:.3} vs dnd {d:.3} (ratio {:.3}) over {} seeds, {} queries",
            d / s,
            runs.len(),
            cfg.blackbox.queries
        ),
    )
}

fn criterion_5(runs: &[Run]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let sel = r.report.search.selected_mean_transfer;
        let rnd = r.report.search.random_subset_mean_transfer;
        match (sel, rnd) {
            (Some(a), Some(b)) => {
                ok &= a <= b;
                parts.push(format!(
                    "seed {} selected {a:.3} random {b:.3}",
                    r.report.seed
                ));
            }
            _ => {
                ok = false;
                parts.push(format!("seed {} transfer undefined", r.report.seed));
            }
        }
    }
    check(ok, parts.join("; "))
}

fn criterion_6(runs: &[Run], d0: &Deployment) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let roc = r.report.roc.as_ref().ok_or("no roc")?;
        let attacks = r
            .report
            .logs
            .sessions
            .iter()
            .filter(|s| s.kind != ProbeKind::Benign)
            .count();
        let benign = r.report.logs.sessions.len() - attacks;
        ok &=
            roc.auc >= 0.85 && roc.latency.within_budget >= 0.8 && attacks >= 100 && benign >= 100;
        parts.push(format!(
            "seed {} auc {:.3} decoy<=26 {:.2}",
            r.report.seed, roc.auc, roc.latency.within_budget
        ));
    }
    // the same behavior through the TCP gateway, checked on the audit log
    let (addr, stop, h, gw) = start_server(d0, 31);
    let plan = RedTeamPlan {
        seed: 4,
        attack: AttackConfig::default(),
        sessions: vec![RedTeamSession {
            client_id: "probe".into(),
            kind: ProbeKind::FgsmProbe,
            len: 30,
        }],
    };
    run_redteam(addr, &surrogate(&runs[0]), &d0.test.images, &plan).map_err(|e| e.to_string())?;
    stop.shutdown();
    h.join().unwrap().map_err(|e| e.to_string())?;
    let entries = gw.audit();
    let first = entries.iter().position(|e| e.state == SessionState::Decoy);
    let tail_ok = first.is_some_and(|i| entries[i..].iter().all(|e| e.served_by_decoy));
    ok &= first.is_some_and(|i| i < 26) && tail_ok;
    parts.push(format!(
        "gateway probe decoy at query {:?}",
        first.map(|i| i + 1)
    ));
    check(ok, parts.join("; "))
}

fn criterion_7(d: &Deployment) -> Outcome {
    let model = d.pipeline.models[0].clone();
    let collapsed = DndPipeline {
        models: Arc::new(vec![model.clone()]),
        cfg: DefenseConfig::minimal(),
        ..d.pipeline.clone()
    };
    let mut streams = collapsed.streams(9).unwrap();
    let n = d.test.len().min(1000);
    let mut agree = 0;
    for x in &d.test.images[..n] {
        let o = defend_infer(&collapsed, &mut streams, x, SessionState::Normal).unwrap();
        agree += usize::from(o.label == model.predict(x).unwrap());
    }
    check(agree == n && n == 1000, format!("{agree}/{n} labels equal"))
}

fn criterion_8(d: &Deployment) -> Outcome {
    let models: Vec<_> = d.pipeline.models.iter().cloned().collect();
    let n = models.len();
    let draws = 10_000usize;
    let mut a = EnsembleRegistry::new(models.clone(), 17).unwrap();
    let mut b = EnsembleRegistry::new(models, 17).unwrap();
    let mut counts = vec![0usize; n];
    let mut same = true;
    for _ in 0..draws {
        let i = a.select_random_model().unwrap();
        same &= i == b.select_random_model().unwrap();
        counts[i] += 1;
    }
    let p = 1.0 / n as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let within = counts
        .iter()
        .all(|&c| (c as f64 - mean).abs() <= 3.0 * sigma);
    check(
        within && same && n == 4,
        format!(
            "n {n} counts {counts:?} (mean {mean}, 3 sigma {:.1}), reproducible {same}",
            3.0 * sigma
        ),
    )
}

fn criterion_9(runs: &[Run], repeat: &Run, d0: &Deployment) -> Outcome {
    let reports_equal = runs[0].report_bytes == repeat.report_bytes;
    let plan = RedTeamPlan {
        seed: 8,
        attack: AttackConfig::default(),
        sessions: vec![
            RedTeamSession {
                client_id: "scripted".into(),
                kind: ProbeKind::FgsmProbe,
                len: 30,
            },
            RedTeamSession {
                client_id: "scripted".into(),
                kind: ProbeKind::Benign,
                len: 30,
            },
        ],
    };
    let sur = surrogate(&runs[0]);
    let transcript = || -> Result<String, String> {
        let (addr, stop, h, _) = start_server(d0, 99);
        let t = run_redteam(addr, &sur, &d0.test.images, &plan).map_err(|e| e.to_string())?;
        stop.shutdown();
        h.join().unwrap().map_err(|e| e.to_string())?;
        Ok(t.concat())
    };
    let (t1, t2) = (transcript()?, transcript()?);
    check(
        reports_equal && t1 == t2,
        format!(
            "report.json identical {reports_equal} ({} bytes); transcript identical {} ({} bytes)",
            repeat.report_bytes.len(),
            t1 == t2,
            t1.len()
        ),
    )
}

fn criterion_10(d: &Deployment, sur: &dnd_core::models::Classifier) -> Outcome {
    let (addr, stop, h, gw) = start_server(d, 5);
    let mut c = Client::connect(addr).map_err(|e| e.to_string())?;
    let good = WireRequest::from_tensor("robust", &d.test.images[0]);
    let mut short = good.clone();
    short.pixels.truncate(100);
    let mut hot = good.clone();
    hot.pixels[0] = 2.0;
    let parse = c
        .send_raw("{\"v\":1,\"client_id\":")
        .map_err(|e| e.to_string())?;
    let count = c.send(&short).map_err(|e| e.to_string())?;
    let range = c.send(&hot).map_err(|e| e.to_string())?;
    let errors_ok = parse == WireResponse::error(WireError::Parse).to_line()
        && count == WireResponse::error(WireError::InvalidInput)
        && range == WireResponse::error(WireError::InvalidInput);
    let alive = c.send(&good).map_err(|e| e.to_string())?.label().is_some();
    drop(c);
    let sessions = (0..10)
        .map(|i| RedTeamSession {
            client_id: format!("team{}", i % 3),
            kind: [
                ProbeKind::FgsmProbe,
                ProbeKind::ExtractionProbe,
                ProbeKind::Benign,
            ][i % 3],
            len: 100,
        })
        .collect();
    let plan = RedTeamPlan {
        seed: 6,
        attack: AttackConfig::default(),
        sessions,
    };
    let transcript = run_redteam(addr, sur, &d.test.images, &plan).map_err(|e| e.to_string())?;
    stop.shutdown();
    h.join().unwrap().map_err(|e| e.to_string())?;
    let entries: Vec<AuditLogEntry> = gw
        .audit()
        .into_iter()
        .filter(|e| e.client_id.starts_with("team"))
        .collect();
    let mut per: HashMap<&str, Vec<u64>> = HashMap::new();
    for e in &entries {
        per.entry(&e.client_id).or_default().push(e.seq);
    }
    let gap_free = per
        .values()
        .all(|s| *s == (0..s.len() as u64).collect::<Vec<_>>());
    check(
        errors_ok && alive && transcript.len() == 1000 && entries.len() == 1000 && gap_free,
        format!(
            "errors as specified {errors_ok}, alive after errors {alive}, {} responses, {} audit entries, gap-free {gap_free}",
            transcript.len(),
            entries.len()
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        let line = match o {
            Ok(d) => format!("CRITERION {n}: PASS - {d}"),
            Err(d) => format!("CRITERION {n}: FAIL - {d}"),
        };
        // bypass libtest capture so the summary shows without --nocapture
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        lines.push(line);
    };
    report(1, guarded(criterion_1));
    let runs: Vec<Run> = SEEDS
        .iter()
        .map(|&s| dnd_run(s, &tmp.path().join(format!("seed{s}"))))
        .collect();
    let repeat = dnd_run(0, &tmp.path().join("seed0-repeat"));
    let d0 = deployment(&runs[0]);
    let sur = surrogate(&runs[0]);
    report(2, guarded(|| criterion_2(&runs)));
    report(3, guarded(|| criterion_3(&runs)));
    report(4, guarded(|| criterion_4(&runs)));
    report(5, guarded(|| criterion_5(&runs)));
    report(6, guarded(|| criterion_6(&runs, &d0)));
    report(7, guarded(|| criterion_7(&d0)));
    report(8, guarded(|| criterion_8(&d0)));
    report(9, guarded(|| criterion_9(&runs, &repeat, &d0)));
    report(10, guarded(|| criterion_10(&d0, &sur)));
    let failed: Vec<&String> = lines.iter().filter(|l| l.contains(": FAIL")).collect();
    assert!(
        failed.is_empty(),
        "failed criteria:\n{}",
        failed
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    );
}
