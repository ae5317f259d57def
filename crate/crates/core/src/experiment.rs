//! End-to-end experiment driver and report emission.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    attack_success_rate, fgsm, iterative_fgsm, synth_attack_session, train_surrogate, AttackConfig,
    AttackTrace, ProbeKind, QueryLog,
};
use crate::data::{derive_seed, gen_synthetic_dataset, Dataset, DatasetConfig, Split};
use crate::defense::{
    defend_infer, train_adv_detector, AdvDetector, AdvDetectorConfig, DefenseConfig, DndPipeline,
};
use crate::error::{Error, Result};
use crate::models::{
    seeded, AeSpec, ArchitectureSpec, Classifier, DenoisingAutoencoder, Labeled, LstmSpec,
    SequenceDetector, TrainConfig, VaeSpec, VariationalAutoencoder,
};
use crate::search::{search_ensemble, SearchConfig, SearchReport, SearchSpace};
use crate::sentinel::{
    benign_trace, detect_sequence, gen_detector_dataset, record_query, roc_curve, ClientSession,
    SentinelPolicy, SessionGenConfig, SessionState, FEATURE_DIM,
};
use crate::service::{DefendedService, ServiceConfig};
use crate::tape::Activation;
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    CleanBaseline,
    WhiteBoxStatic,
    BlackBoxStatic,
    BlackBoxDnd,
    SentinelRoc,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::CleanBaseline,
        Scenario::WhiteBoxStatic,
        Scenario::BlackBoxStatic,
        Scenario::BlackBoxDnd,
        Scenario::SentinelRoc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CleanBaseline => "clean_baseline",
            Scenario::WhiteBoxStatic => "white_box_static",
            Scenario::BlackBoxStatic => "black_box_static",
            Scenario::BlackBoxDnd => "black_box_dnd",
            Scenario::SentinelRoc => "sentinel_roc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub activation: Activation,
    pub noise_level: f64,
    pub train: TrainConfig,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            hidden: 128,
            bottleneck: 48,
            activation: Activation::Relu,
            noise_level: 0.2,
            train: TrainConfig {
                lr: 2.0,
                ..TrainConfig::default().with_epochs(15)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    pub beta: f64,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden: 128,
            latent_dim: 24,
            activation: Activation::Relu,
            beta: 5e-4,
            train: TrainConfig {
                lr: 1.0,
                ..TrainConfig::default().with_epochs(30)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub hidden: usize,
    pub n_sessions: usize,
    pub sessions: SessionGenConfig,
    pub train: TrainConfig,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            hidden: crate::models::DEFAULT_LSTM_HIDDEN,
            n_sessions: 400,
            sessions: SessionGenConfig::default(),
            train: TrainConfig {
                lr: 0.1,
                batch_size: 16,
                ..TrainConfig::default().with_epochs(20)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackBoxConfig {
    /// Labels harvested from the target before crafting.
    pub queries: usize,
    pub attack_samples: usize,
    pub surrogate: ArchitectureSpec,
    pub train: TrainConfig,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        BlackBoxConfig {
            queries: 2000,
            attack_samples: 500,
            surrogate: ArchitectureSpec::mlp(
                &[64],
                Activation::Relu,
                &crate::data::INPUT_SHAPE,
                crate::data::NUM_CLASSES,
            ),
            train: TrainConfig::default().with_epochs(20),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SentinelEvalConfig {
    pub sessions_per_class: usize,
    pub session_len: usize,
}

impl Default for SentinelEvalConfig {
    fn default() -> Self {
        SentinelEvalConfig {
            sessions_per_class: 100,
            session_len: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoyConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for DecoyConfig {
    fn default() -> Self {
        DecoyConfig {
            hidden: vec![16],
            train: TrainConfig::default().with_epochs(15),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub space: SearchSpace,
    pub search: SearchConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub sentinel: SentinelPolicy,
    pub ae: AeConfig,
    pub vae: VaeConfig,
    pub adv_detector: AdvDetectorConfig,
    pub sequence: SequenceConfig,
    pub decoy: DecoyConfig,
    pub blackbox: BlackBoxConfig,
    pub sentinel_eval: SentinelEvalConfig,
    /// Test samples for clean and white-box figures.
    pub eval_samples: usize,
    /// Clean test samples pushed through the full pipeline.
    pub dnd_eval_samples: usize,
    pub reject_on_suspect: bool,
    pub scenarios: Vec<Scenario>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetConfig::default(),
            space: SearchSpace::default(),
            search: SearchConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            sentinel: SentinelPolicy::default(),
            ae: AeConfig::default(),
            vae: VaeConfig::default(),
            adv_detector: AdvDetectorConfig::default(),
            sequence: SequenceConfig::default(),
            decoy: DecoyConfig::default(),
            blackbox: BlackBoxConfig::default(),
            sentinel_eval: SentinelEvalConfig::default(),
            eval_samples: 1000,
            dnd_eval_samples: 500,
            reject_on_suspect: false,
            scenarios: Scenario::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "config_version {} unsupported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.dataset.validate()?;
        self.space.validate()?;
        self.search.validate()?;
        self.attack.validate()?;
        self.defense.validate()?;
        self.sentinel.validate()?;
        self.blackbox.surrogate.validate()?;
        for t in [
            &self.ae.train,
            &self.vae.train,
            &self.adv_detector.train,
            &self.sequence.train,
            &self.decoy.train,
            &self.blackbox.train,
        ] {
            t.validate()?;
        }
        if self.eval_samples == 0 || self.dnd_eval_samples == 0 || self.blackbox.attack_samples == 0
        {
            return Err(Error::Validation(
                "evaluation sample counts must be >= 1".into(),
            ));
        }
        if self.blackbox.queries == 0 {
            return Err(Error::Validation("blackbox.queries must be >= 1".into()));
        }
        if self.sequence.n_sessions < 2 || self.sentinel_eval.sessions_per_class == 0 {
            return Err(Error::Validation(
                "need >= 2 detector sessions and >= 1 eval session per class".into(),
            ));
        }
        if self.sentinel_eval.session_len < 2 || self.sequence.sessions.session_len < 2 {
            return Err(Error::Validation("session lengths must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.vae.beta.min(1.0)) || self.vae.beta < 0.0 {
            return Err(Error::Validation("vae.beta must be >= 0".into()));
        }
        Ok(())
    }

    /// A few-second profile for smoke tests; the numbers it produces are
    /// not meaningful.
    pub fn smoke(seed: u64) -> Self {
        let d = ExperimentConfig::default();
        let short = |t: &TrainConfig, epochs| t.clone().with_epochs(epochs);
        ExperimentConfig {
            seed,
            dataset: DatasetConfig {
                n_train: 400,
                n_test: 200,
                ..d.dataset.clone()
            },
            space: SearchSpace {
                kinds: vec![crate::models::ArchKind::Mlp],
                ..d.space.clone()
            },
            search: SearchConfig {
                n: 2,
                budget: 3,
                a_min: 0.2,
                train: short(&d.search.train, 4),
                finetune_epochs: 1,
                eval_samples: 40,
                ..d.search.clone()
            },
            ae: AeConfig {
                hidden: 32,
                bottleneck: 16,
                train: short(&d.ae.train, 2),
                ..d.ae.clone()
            },
            vae: VaeConfig {
                hidden: 32,
                latent_dim: 8,
                train: short(&d.vae.train, 2),
                ..d.vae.clone()
            },
            adv_detector: AdvDetectorConfig {
                hidden: vec![16],
                train: short(&d.adv_detector.train, 2),
                max_rounds: 1,
                ..d.adv_detector.clone()
            },
            sequence: SequenceConfig {
                hidden: 8,
                n_sessions: 16,
                train: short(&d.sequence.train, 2),
                ..d.sequence.clone()
            },
            decoy: DecoyConfig {
                hidden: vec![8],
                train: short(&d.decoy.train, 2),
            },
            blackbox: BlackBoxConfig {
                queries: 100,
                attack_samples: 40,
                train: short(&d.blackbox.train, 3),
                ..d.blackbox.clone()
            },
            sentinel_eval: SentinelEvalConfig {
                sessions_per_class: 6,
                session_len: 20,
            },
            eval_samples: 100,
            dnd_eval_samples: 40,
            ..d
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .and_then(|v| serde_json::to_string(&v))
            .expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("config_version").is_none() {
            return Err(Error::Validation("config is missing config_version".into()));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Every trained component of a run.
pub struct Artifacts {
    pub train: Dataset,
    pub test: Dataset,
    pub search: SearchReport,
    pub pipeline: Arc<DndPipeline>,
    pub sequence_detector: Arc<SequenceDetector>,
}

impl Artifacts {
    pub fn registry(&self) -> &[Classifier] {
        &self.pipeline.models
    }

    /// The first selected (accuracy-best) member, served alone as the
    /// undefended baseline.
    pub fn static_model(&self) -> &Classifier {
        &self.pipeline.models[0]
    }

    pub fn service(&self, cfg: &ExperimentConfig, root_seed: u64) -> Result<DefendedService> {
        DefendedService::new(
            Arc::clone(&self.pipeline),
            Arc::clone(&self.sequence_detector),
            ServiceConfig {
                root_seed,
                policy: cfg.sentinel.clone(),
                reject_on_suspect: cfg.reject_on_suspect,
            },
        )
    }
}

fn stage<T>(name: &str, hash: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("stage {name} (config {hash}): {m}")),
        other => Error::Contract(format!("stage {name} (config {hash}): {other}")),
    })
}

pub fn train_autoencoder(
    train: &Dataset,
    cfg: &AeConfig,
    seed: u64,
) -> Result<DenoisingAutoencoder> {
    let spec = AeSpec {
        input_shape: crate::data::INPUT_SHAPE.to_vec(),
        hidden: cfg.hidden,
        bottleneck: cfg.bottleneck,
        activation: cfg.activation,
    };
    let mut ae = DenoisingAutoencoder::build(spec, seed)?;
    ae.train_denoising(
        &train.images,
        None,
        cfg.noise_level,
        &cfg.train.clone().with_seed(seed),
    )?;
    Ok(ae)
}

pub fn train_vae(train: &Dataset, cfg: &VaeConfig, seed: u64) -> Result<VariationalAutoencoder> {
    let spec = VaeSpec {
        input_shape: crate::data::INPUT_SHAPE.to_vec(),
        hidden: cfg.hidden,
        latent_dim: cfg.latent_dim,
        activation: cfg.activation,
    };
    let mut vae = VariationalAutoencoder::build(spec, seed)?;
    vae.train(&train.images, cfg.beta, &cfg.train.clone().with_seed(seed))?;
    Ok(vae)
}

pub fn train_decoy(train: &Dataset, cfg: &DecoyConfig, seed: u64) -> Result<Classifier> {
    let spec = ArchitectureSpec::mlp(
        &cfg.hidden,
        Activation::Relu,
        &crate::data::INPUT_SHAPE,
        crate::data::NUM_CLASSES,
    );
    let mut decoy = Classifier::build(spec, seed)?;
    decoy.train_supervised(train.labeled(), None, &cfg.train.clone().with_seed(seed))?;
    Ok(decoy)
}

pub fn train_sequence_detector(
    victims: &[Classifier],
    pool: &[Tensor],
    cfg: &SequenceConfig,
    window: usize,
    seed: u64,
) -> Result<SequenceDetector> {
    let gen = SessionGenConfig {
        window,
        ..cfg.sessions.clone()
    };
    let data = gen_detector_dataset(
        victims,
        pool,
        cfg.n_sessions,
        &gen,
        derive_seed(seed, "sessions"),
    )?;
    let mut det = SequenceDetector::build(
        LstmSpec {
            input_dim: FEATURE_DIM,
            hidden: cfg.hidden,
        },
        seed,
    )?;
    det.train(&data.seqs, &data.labels, &cfg.train.clone().with_seed(seed))?;
    Ok(det)
}

/// Data generation, search and every model the pipeline needs.
pub fn build_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let hash = cfg.hash();
    let seed = cfg.seed;
    let (train, test) = stage("gen-data", &hash, gen_synthetic_dataset(&cfg.dataset, seed))?;
    info!("searching ensemble");
    let outcome = stage(
        "search",
        &hash,
        search_ensemble(
            &cfg.space,
            train.labeled(),
            test.labeled(),
            &cfg.search,
            derive_seed(seed, "search"),
        ),
    )?;
    info!("training autoencoder and vae");
    let ae = stage(
        "train-ae",
        &hash,
        train_autoencoder(&train, &cfg.ae, derive_seed(seed, "ae")),
    )?;
    let vae = stage(
        "train-vae",
        &hash,
        train_vae(&train, &cfg.vae, derive_seed(seed, "vae")),
    )?;
    info!("training adversarial detector");
    let det_cfg = AdvDetectorConfig {
        train: cfg
            .adv_detector
            .train
            .clone()
            .with_seed(derive_seed(seed, "adv-detector")),
        ..cfg.adv_detector.clone()
    };
    let n_det = train.len().min(2000);
    let detector = stage(
        "train-adv-detector",
        &hash,
        train_adv_detector(train.head(n_det), &outcome.models, &det_cfg),
    )?;
    let decoy = stage(
        "train-decoy",
        &hash,
        train_decoy(&train, &cfg.decoy, derive_seed(seed, "decoy")),
    )?;
    info!("training sequence detector");
    let seq_det = stage(
        "train-sequence-detector",
        &hash,
        train_sequence_detector(
            &outcome.models,
            &train.images,
            &cfg.sequence,
            cfg.sentinel.window,
            derive_seed(seed, "sequence"),
        ),
    )?;
    let pipeline = DndPipeline {
        models: Arc::new(outcome.models),
        ae,
        vae,
        detector,
        decoy,
        cfg: cfg.defense.clone(),
    };
    Ok(Artifacts {
        train,
        test,
        search: outcome.report,
        pipeline: Arc::new(pipeline),
        sequence_detector: Arc::new(seq_det),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WhiteBoxLog {
    pub labels: Vec<usize>,
    pub clean_pred: Vec<usize>,
    pub fgsm_pred: Vec<usize>,
    pub iterative_pred: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferAttackLog {
    pub labels: Vec<usize>,
    /// Target answers on the adversarial inputs.
    pub target_pred: Vec<i64>,
    /// Surrogate agreement with the target on held-out clean inputs.
    pub surrogate_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub kind: ProbeKind,
    pub score: f64,
    /// 1-based query at which the session was first served in DECOY state.
    pub decoy_at: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub sessions: usize,
    /// Fraction of fgsm_probe sessions in DECOY within `window + 10` queries.
    pub within_budget: f64,
    pub budget: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub latency: LatencyStats,
    /// Benign sessions that ever reached DECOY.
    pub benign_decoy_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLogs {
    pub clean_static: Vec<usize>,
    pub clean_dnd: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub clean_dnd_labels: Vec<usize>,
    pub white_box: Option<WhiteBoxLog>,
    pub black_box_static: Option<TransferAttackLog>,
    pub black_box_dnd: Option<TransferAttackLog>,
    pub sessions: Vec<SessionLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub scenarios: Vec<ScenarioRecord>,
    pub search: SearchReport,
    pub registry_accuracies: Vec<f64>,
    pub roc: Option<RocReport>,
    pub logs: SampleLogs,
}

impl Report {
    pub fn metric(&self, scenario: Scenario, key: &str) -> Option<f64> {
        self.scenarios
            .iter()
            .find(|s| s.name == scenario.name())
            .and_then(|s| s.metrics.get(key).copied())
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64
}

/// Harvests labels for `pool` from `oracle` and fits the configured surrogate.
pub fn extract_surrogate(
    oracle: &mut dyn FnMut(&Tensor) -> Result<(usize, f64)>,
    pool: &[Tensor],
    cfg: &BlackBoxConfig,
    seed: u64,
) -> Result<Classifier> {
    let log = QueryLog::harvest(pool, oracle)?;
    train_surrogate(&log, &cfg.surrogate, &cfg.train.clone().with_seed(seed))
}

fn agreement(
    a: &Classifier,
    b: &mut dyn FnMut(&Tensor) -> Result<usize>,
    xs: &[Tensor],
) -> Result<f64> {
    let mut same = 0;
    for x in xs {
        if a.predict(x)? == b(x)? {
            same += 1;
        }
    }
    Ok(same as f64 / xs.len().max(1) as f64)
}

/// Images the attacker owns: same generator, independent stream.
pub fn attacker_pool(cfg: &ExperimentConfig) -> Dataset {
    Dataset::generate(
        cfg.blackbox.queries,
        Split::Train,
        &cfg.dataset,
        derive_seed(cfg.seed, "attacker-pool"),
    )
}

fn transfer_attack(
    surrogate: &Classifier,
    target: &mut dyn FnMut(&Tensor) -> Result<i64>,
    samples: Labeled<'_>,
    epsilon: f64,
) -> Result<(Vec<i64>, f64)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut pairs = Vec::with_capacity(samples.len());
    for (x, &y) in samples.images.iter().zip(samples.labels) {
        let adv = fgsm(surrogate, x, y, epsilon)?;
        preds.push(target(&adv)?);
        pairs.push((adv, y));
    }
    let mut it = preds.iter();
    // recount through the shared scorer so the logged answers are what is scored
    let rate = attack_success_rate(
        |_| Ok(it.next().map(|&p| p as usize).unwrap_or(usize::MAX)),
        &pairs,
    )?;
    Ok((preds, rate))
}

fn latency_stats(logs: &[SessionLog], budget: usize) -> LatencyStats {
    let probes: Vec<&SessionLog> = logs
        .iter()
        .filter(|l| l.kind == ProbeKind::FgsmProbe)
        .collect();
    let mut reached: Vec<usize> = probes.iter().filter_map(|l| l.decoy_at).collect();
    reached.sort_unstable();
    let within = reached.iter().filter(|&&q| q <= budget).count();
    let median = if reached.is_empty() {
        None
    } else if reached.len() % 2 == 1 {
        Some(reached[reached.len() / 2] as f64)
    } else {
        Some((reached[reached.len() / 2 - 1] + reached[reached.len() / 2]) as f64 / 2.0)
    };
    LatencyStats {
        sessions: probes.len(),
        within_budget: within as f64 / probes.len().max(1) as f64,
        budget,
        mean: (!reached.is_empty())
            .then(|| reached.iter().sum::<usize>() as f64 / reached.len() as f64),
        median,
        max: reached.last().copied(),
    }
}

/// Rebuilds a sentinel session from a trace for offline scoring.
pub fn session_from_trace(trace: &AttackTrace, capacity: usize) -> Result<ClientSession> {
    let mut s = ClientSession::new("offline", capacity);
    for (r, x) in trace.records.iter().zip(trace.inputs()?) {
        record_query(&mut s, &x, r.label, r.confidence);
    }
    Ok(s)
}

/// Scripted attack and benign sessions served by the defended service.
pub fn sentinel_sessions(
    art: &Artifacts,
    cfg: &ExperimentConfig,
    surrogate: &Classifier,
) -> Result<Vec<SessionLog>> {
    let service = art.service(cfg, derive_seed(cfg.seed, "sentinel-eval"))?;
    let per = cfg.sentinel_eval.sessions_per_class;
    let len = cfg.sentinel_eval.session_len;
    let attack = AttackConfig {
        steps: len - 1,
        ..cfg.attack.clone()
    };
    let mut rng = seeded(derive_seed(cfg.seed, "sentinel-sessions"));
    let pool = &art.test.images;
    let mut logs = Vec::with_capacity(2 * per);
    for i in 0..2 * per {
        let client = format!("session-{i}");
        let mut decoy_at = None;
        let mut served = 0usize;
        let mut oracle = |x: &Tensor| -> Result<(usize, f64)> {
            let (answer, entry) = service.infer(&client, x, 0)?;
            served += 1;
            if decoy_at.is_none() && entry.state == SessionState::Decoy {
                decoy_at = Some(served);
            }
            Ok((answer.label.max(0) as usize, answer.confidence))
        };
        let trace = if i < per {
            let kind = if i % 2 == 0 {
                ProbeKind::FgsmProbe
            } else {
                ProbeKind::ExtractionProbe
            };
            let x0 = &pool[rand::Rng::random_range(&mut rng, 0..pool.len())];
            synth_attack_session(&mut oracle, surrogate, x0, kind, &attack)?
        } else {
            benign_trace(&mut oracle, pool, len, &mut rng)?
        };
        let session = session_from_trace(&trace, cfg.sentinel.capacity)?;
        let score = detect_sequence(&art.sequence_detector, &session, cfg.sentinel.window)?;
        logs.push(SessionLog {
            kind: trace.kind,
            score,
            decoy_at,
        });
    }
    Ok(logs)
}

pub fn run_scenarios(art: &Artifacts, cfg: &ExperimentConfig) -> Result<Report> {
    let hash = cfg.hash();
    let seed = cfg.seed;
    let static_model = art.static_model();
    let n_eval = cfg.eval_samples.min(art.test.len());
    let eval = art.test.head(n_eval);
    let eval_refs: Vec<&Tensor> = eval.images.iter().collect();
    let mut logs = SampleLogs::default();
    let mut scenarios = Vec::new();
    let mut roc = None;
    let mut static_surrogate: Option<Classifier> = None;
    let pool = attacker_pool(cfg);
    let n_attack = cfg.blackbox.attack_samples.min(art.test.len());
    let attack_set = art.test.head(n_attack);
    let held_out = &art.train.images[..art.train.len().min(500)];

    for &sc in &cfg.scenarios {
        let mut m = BTreeMap::new();
        match sc {
            Scenario::CleanBaseline => {
                let pred = stage("clean", &hash, static_model.predict_batch(&eval_refs))?;
                m.insert("static_accuracy".into(), accuracy_of(&pred, eval.labels));
                let n_dnd = cfg.dnd_eval_samples.min(n_eval);
                let mut streams = art.pipeline.streams(derive_seed(seed, "clean-eval"))?;
                let mut dnd = Vec::with_capacity(n_dnd);
                for x in &eval.images[..n_dnd] {
                    dnd.push(
                        stage(
                            "clean",
                            &hash,
                            defend_infer(&art.pipeline, &mut streams, x, SessionState::Normal),
                        )?
                        .label,
                    );
                }
                m.insert(
                    "dnd_accuracy".into(),
                    accuracy_of(&dnd, &eval.labels[..n_dnd]),
                );
                for (i, a) in art.search.final_accuracies.iter().enumerate() {
                    m.insert(format!("registry_{i}_accuracy"), *a);
                }
                logs.clean_static = pred;
                logs.clean_labels = eval.labels.to_vec();
                logs.clean_dnd = dnd;
                logs.clean_dnd_labels = eval.labels[..n_dnd].to_vec();
            }
            Scenario::WhiteBoxStatic => {
                let mut log = WhiteBoxLog {
                    labels: eval.labels.to_vec(),
                    clean_pred: stage("white-box", &hash, static_model.predict_batch(&eval_refs))?,
                    ..Default::default()
                };
                for (x, &y) in eval.images.iter().zip(eval.labels) {
                    let a = stage(
                        "white-box",
                        &hash,
                        fgsm(static_model, x, y, cfg.attack.epsilon),
                    )?;
                    let b = stage(
                        "white-box",
                        &hash,
                        iterative_fgsm(static_model, x, y, &cfg.attack),
                    )?;
                    log.fgsm_pred.push(static_model.predict(&a)?);
                    log.iterative_pred.push(static_model.predict(&b)?);
                }
                m.insert(
                    "clean_accuracy".into(),
                    accuracy_of(&log.clean_pred, &log.labels),
                );
                m.insert(
                    "fgsm_accuracy".into(),
                    accuracy_of(&log.fgsm_pred, &log.labels),
                );
                m.insert(
                    "iterative_accuracy".into(),
                    accuracy_of(&log.iterative_pred, &log.labels),
                );
                m.insert("epsilon".into(), cfg.attack.epsilon);
                logs.white_box = Some(log);
            }
            Scenario::BlackBoxStatic => {
                let mut oracle = crate::sentinel::static_oracle(static_model);
                let sur = stage(
                    "black-box-static",
                    &hash,
                    extract_surrogate(
                        &mut oracle,
                        &pool.images,
                        &cfg.blackbox,
                        derive_seed(seed, "surrogate-static"),
                    ),
                )?;
                let agree = agreement(&sur, &mut |x| static_model.predict(x), held_out)?;
                let (preds, rate) = stage(
                    "black-box-static",
                    &hash,
                    transfer_attack(
                        &sur,
                        &mut |x| Ok(static_model.predict(x)? as i64),
                        attack_set,
                        cfg.attack.epsilon,
                    ),
                )?;
                m.insert("success_rate".into(), rate);
                m.insert("surrogate_agreement".into(), agree);
                m.insert("queries".into(), cfg.blackbox.queries as f64);
                logs.black_box_static = Some(TransferAttackLog {
                    labels: attack_set.labels.to_vec(),
                    target_pred: preds,
                    surrogate_agreement: agree,
                });
                static_surrogate = Some(sur);
            }
            Scenario::BlackBoxDnd => {
                let service = art.service(cfg, derive_seed(seed, "gateway"))?;
                let client = "attacker";
                let mut oracle = |x: &Tensor| -> Result<(usize, f64)> {
                    let (a, _) = service.infer(client, x, 0)?;
                    Ok((a.label.max(0) as usize, a.confidence))
                };
                let sur = stage(
                    "black-box-dnd",
                    &hash,
                    extract_surrogate(
                        &mut oracle,
                        &pool.images,
                        &cfg.blackbox,
                        derive_seed(seed, "surrogate-dnd"),
                    ),
                )?;
                let (preds, rate) = stage(
                    "black-box-dnd",
                    &hash,
                    transfer_attack(
                        &sur,
                        &mut |x| Ok(service.infer(client, x, 0)?.0.label),
                        attack_set,
                        cfg.attack.epsilon,
                    ),
                )?;
                let mut probe_streams = art.pipeline.streams(derive_seed(seed, "agreement"))?;
                let agree = agreement(
                    &sur,
                    &mut |x| {
                        Ok(defend_infer(
                            &art.pipeline,
                            &mut probe_streams,
                            x,
                            SessionState::Normal,
                        )?
                        .label)
                    },
                    held_out,
                )?;
                m.insert("success_rate".into(), rate);
                m.insert("surrogate_agreement".into(), agree);
                m.insert("queries".into(), cfg.blackbox.queries as f64);
                let audit = service.audit_snapshot();
                let suspect = audit.iter().filter(|e| e.adversarial_suspect).count();
                m.insert(
                    "adversarial_suspect_rate".into(),
                    suspect as f64 / audit.len().max(1) as f64,
                );
                let decoy = audit.iter().filter(|e| e.served_by_decoy).count();
                m.insert(
                    "served_by_decoy_rate".into(),
                    decoy as f64 / audit.len().max(1) as f64,
                );
                if let (Some(s), Some(d)) = (
                    scenarios
                        .iter()
                        .find(|r: &&ScenarioRecord| r.name == Scenario::BlackBoxStatic.name())
                        .and_then(|r| r.metrics.get("success_rate")),
                    Some(rate),
                ) {
                    m.insert("ratio_to_static".into(), if *s > 0.0 { d / s } else { 0.0 });
                }
                logs.black_box_dnd = Some(TransferAttackLog {
                    labels: attack_set.labels.to_vec(),
                    target_pred: preds,
                    surrogate_agreement: agree,
                });
            }
            Scenario::SentinelRoc => {
                let sur = match &static_surrogate {
                    Some(s) => s.clone(),
                    None => {
                        let mut oracle = crate::sentinel::static_oracle(static_model);
                        extract_surrogate(
                            &mut oracle,
                            &pool.images,
                            &cfg.blackbox,
                            derive_seed(seed, "surrogate-static"),
                        )?
                    }
                };
                let sessions = stage("sentinel", &hash, sentinel_sessions(art, cfg, &sur))?;
                let scored: Vec<(f64, bool)> = sessions
                    .iter()
                    .map(|s| (s.score, s.kind != ProbeKind::Benign))
                    .collect();
                let (points, auc) = stage("sentinel", &hash, roc_curve(&scored))?;
                let latency = latency_stats(&sessions, cfg.sentinel.window + 10);
                let benign: Vec<&SessionLog> = sessions
                    .iter()
                    .filter(|s| s.kind == ProbeKind::Benign)
                    .collect();
                let benign_decoy_rate = benign.iter().filter(|s| s.decoy_at.is_some()).count()
                    as f64
                    / benign.len().max(1) as f64;
                m.insert("auc".into(), auc);
                m.insert("decoy_within_budget".into(), latency.within_budget);
                m.insert("benign_decoy_rate".into(), benign_decoy_rate);
                if let Some(mean) = latency.mean {
                    m.insert("mean_decoy_latency".into(), mean);
                }
                roc = Some(RocReport {
                    points,
                    auc,
                    latency,
                    benign_decoy_rate,
                });
                logs.sessions = sessions;
            }
        }
        info!("scenario {} done", sc.name());
        scenarios.push(ScenarioRecord {
            name: sc.name().to_string(),
            metrics: m,
        });
    }
    Ok(Report {
        config_hash: hash,
        seed,
        scenarios,
        search: art.search.clone(),
        registry_accuracies: art.search.final_accuracies.clone(),
        roc,
        logs,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let art = build_artifacts(cfg)?;
    run_scenarios(&art, cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_float(v: f64) -> String {
    format!("{v}")
}

pub fn transfer_csv(report: &Report) -> String {
    let n = report.search.transfer.len();
    let mut out = String::from("source");
    for j in 0..n {
        out.push_str(&format!(",target_{j}"));
    }
    out.push('\n');
    for (i, row) in report.search.transfer.cells.iter().enumerate() {
        out.push_str(&format!("{i}"));
        for c in row {
            out.push(',');
            if let Some(v) = c {
                out.push_str(&csv_float(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn roc_csv(report: &Report) -> String {
    let mut out = String::from("fpr,tpr\n");
    if let Some(r) = &report.roc {
        for (f, t) in &r.points {
            out.push_str(&format!("{},{}\n", csv_float(*f), csv_float(*t)));
        }
    }
    out
}

pub fn scenarios_csv(report: &Report) -> String {
    let mut out = String::from("scenario,metric,value\n");
    for s in &report.scenarios {
        for (k, v) in &s.metrics {
            out.push_str(&format!("{},{k},{}\n", s.name, csv_float(*v)));
        }
    }
    out
}

/// `report.json` plus the three CSV tables.
pub fn write_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("transfer_matrix.csv"), &transfer_csv(report))?;
    write_file(&dir.join("roc.csv"), &roc_csv(report))?;
    write_file(&dir.join("scenarios.csv"), &scenarios_csv(report))?;
    Ok(())
}

/// Trains a single model on data read from `train`/`test`; used by the
/// `train` subcommand.
pub fn train_single(
    spec: ArchitectureSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    let mut m = Classifier::build(spec, cfg.seed)?;
    m.train_supervised(train.labeled(), Some(test.labeled()), cfg)?;
    Ok(m)
}

/// Detector accuracy summary used in reports and tests.
pub fn adv_detector_rates(
    det: &AdvDetector,
    clean: &[Tensor],
    adv: &[Tensor],
    threshold: f64,
) -> Result<(f64, f64)> {
    let mut fp = 0;
    for x in clean {
        if crate::defense::detect_adversarial(det, x)? >= threshold {
            fp += 1;
        }
    }
    let mut tp = 0;
    for x in adv {
        if crate::defense::detect_adversarial(det, x)? >= threshold {
            tp += 1;
        }
    }
    Ok((
        tp as f64 / adv.len().max(1) as f64,
        fp as f64 / clean.len().max(1) as f64,
    ))
}
