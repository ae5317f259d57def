//! The defended inference pipeline: randomized model selection, input
//! sanitization, VAE variants and voting.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, iterative_fgsm, AttackConfig};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::models::{
    seeded, ArchitectureSpec, Classifier, DenoisingAutoencoder, Labeled, SeededRng, TrainConfig,
    VariationalAutoencoder,
};
use crate::sentinel::SessionState;
use crate::tensor::Tensor;

/// Trained ensemble members plus the stream that picks among them.
#[derive(Clone, Debug)]
pub struct EnsembleRegistry {
    models: Arc<Vec<Classifier>>,
    selection_rng: SeededRng,
}

impl EnsembleRegistry {
    pub fn new(models: Vec<Classifier>, seed: u64) -> Result<Self> {
        Self::shared(Arc::new(models), seed)
    }

    pub fn shared(models: Arc<Vec<Classifier>>, seed: u64) -> Result<Self> {
        if let Some(first) = models.first() {
            let (shape, classes) = (&first.spec.input_shape, first.spec.num_classes);
            if models
                .iter()
                .any(|m| &m.spec.input_shape != shape || m.spec.num_classes != classes)
            {
                return Err(Error::Validation(
                    "ensemble members disagree on input shape or classes".into(),
                ));
            }
        }
        Ok(EnsembleRegistry {
            models,
            selection_rng: seeded(seed),
        })
    }

    /// Same members, independent selection stream.
    pub fn fork(&self, seed: u64) -> Self {
        EnsembleRegistry {
            models: Arc::clone(&self.models),
            selection_rng: seeded(seed),
        }
    }

    pub fn models(&self) -> &[Classifier] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Uniform index in `0..n`, advancing the selection stream.
    pub fn select_random_model(&mut self) -> Result<usize> {
        if self.models.is_empty() {
            return Err(Error::Contract(
                "cannot select from an empty registry".into(),
            ));
        }
        Ok(self.selection_rng.random_range(0..self.models.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub m_draws: usize,
    pub quant_bits: u32,
    pub theta_adv: f64,
    pub sentinel: bool,
    /// Quantize, run the adversarial detector, denoise.
    pub sanitize: bool,
    /// VAE variants; when off the sanitized input itself is classified by
    /// `m_draws` random members.
    pub vote: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            k: 5,
            tau: 0.1,
            m_draws: 3,
            quant_bits: 5,
            theta_adv: 0.9,
            sentinel: true,
            sanitize: true,
            vote: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m_draws == 0 {
            return Err(Error::Validation("K and m_draws must be >= 1".into()));
        }
        if !(1..=8).contains(&self.quant_bits) {
            return Err(Error::Validation(format!(
                "quant_bits {} outside 1..=8",
                self.quant_bits
            )));
        }
        if !(0.0..=1.0).contains(&self.theta_adv) {
            return Err(Error::Validation(format!(
                "theta_adv {} outside [0, 1]",
                self.theta_adv
            )));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Validation(format!("tau {} must be >= 0", self.tau)));
        }
        Ok(())
    }

    /// Everything off: one member, one draw, the raw input.
    pub fn minimal() -> Self {
        DefenseConfig {
            k: 1,
            tau: 0.0,
            m_draws: 1,
            sentinel: false,
            sanitize: false,
            vote: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeFlags {
    pub adversarial_suspect: bool,
    pub served_by_decoy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub label: usize,
    /// Mean probability of `label` over every contributing inference.
    pub confidence: f64,
    pub tally: Vec<usize>,
    pub flags: OutcomeFlags,
    /// Registry indices in draw order; the decoy is reported as `n`.
    pub model_ids: Vec<usize>,
}

/// `round(x·(2^bits−1)) / (2^bits−1)` per element.
pub fn quantize_input(x: &Tensor, bits: u32) -> Result<Tensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Contract(format!("quant bits {bits} outside 1..=8")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    Ok(x.map(|v| (v * levels).round() / levels))
}

/// `decode(μ)` followed by `k − 1` temperature-`tau` samples.
pub fn generate_variants(
    vae: &VariationalAutoencoder,
    x: &Tensor,
    k: usize,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor>> {
    if k == 0 {
        return Err(Error::Contract("variant count must be >= 1".into()));
    }
    let (mu, logvar) = vae.encode(x)?;
    let mut out = Vec::with_capacity(k);
    out.push(vae.decode(&mu)?.reshape(x.shape())?);
    for _ in 1..k {
        out.push(
            vae.sample_from(&mu, &logvar, tau, rng)?
                .reshape(x.shape())?,
        );
    }
    Ok(out)
}

/// Winner of a tally: most votes, then larger summed probability, then the
/// lower class index.
pub fn tally_winner(tally: &[usize], mass: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..tally.len() {
        let better = tally[c] > tally[best] || (tally[c] == tally[best] && mass[c] > mass[best]);
        if better {
            best = c;
        }
    }
    best
}

fn outcome_from_probs(probs: &[Tensor], model_ids: Vec<usize>) -> InferenceOutcome {
    let classes = probs[0].len();
    let mut tally = vec![0usize; classes];
    let mut mass = vec![0.0; classes];
    for p in probs {
        tally[p.argmax()] += 1;
        for (m, &v) in mass.iter_mut().zip(p.data()) {
            *m += v;
        }
    }
    let label = tally_winner(&tally, &mass);
    InferenceOutcome {
        label,
        confidence: mass[label] / probs.len() as f64,
        tally,
        flags: OutcomeFlags::default(),
        model_ids,
    }
}

/// Each variant is classified by `m_draws` randomly selected members.
pub fn vote_classify(
    reg: &mut EnsembleRegistry,
    variants: &[Tensor],
    m_draws: usize,
) -> Result<InferenceOutcome> {
    if variants.is_empty() || m_draws == 0 {
        return Err(Error::Contract(
            "vote needs variants and m_draws >= 1".into(),
        ));
    }
    let mut probs = Vec::with_capacity(variants.len() * m_draws);
    let mut ids = Vec::with_capacity(variants.len() * m_draws);
    for v in variants {
        for _ in 0..m_draws {
            let i = reg.select_random_model()?;
            probs.push(reg.models()[i].classify(v)?);
            ids.push(i);
        }
    }
    Ok(outcome_from_probs(&probs, ids))
}

/// Two-way classifier (0 clean, 1 adversarial) trained to memorize crafted
/// examples.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvDetector {
    pub model: Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvDetectorConfig {
    pub hidden: Vec<usize>,
    pub attack: AttackConfig,
    pub train: TrainConfig,
    /// Upper bound on training rounds of `train.epochs` each.
    pub max_rounds: usize,
    pub target_accuracy: f64,
}

impl Default for AdvDetectorConfig {
    fn default() -> Self {
        AdvDetectorConfig {
            hidden: vec![64],
            attack: AttackConfig::default(),
            train: TrainConfig::default().with_epochs(10),
            max_rounds: 4,
            target_accuracy: 0.98,
        }
    }
}

/// Clean inputs paired with adversarial copies crafted on `craft_models`
/// (fgsm and iterative fgsm alternately); the attack strength is drawn
/// uniformly from `[epsilon/2, epsilon]` so the detector sees a range.
pub fn adversarial_training_set(
    clean: Labeled<'_>,
    craft_models: &[Classifier],
    attack: &AttackConfig,
    seed: u64,
) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if clean.is_empty() || craft_models.is_empty() {
        return Err(Error::Validation(
            "adversarial detector needs clean samples and craft models".into(),
        ));
    }
    let mut rng = seeded(seed);
    let mut xs = Vec::with_capacity(2 * clean.len());
    let mut ys = Vec::with_capacity(2 * clean.len());
    for (i, (x, &y)) in clean.images.iter().zip(clean.labels).enumerate() {
        let model = &craft_models[i % craft_models.len()];
        let eps = rng.random_range(attack.epsilon / 2.0..=attack.epsilon);
        let adv = if i % 2 == 0 {
            fgsm(model, x, y, eps)?
        } else {
            let cfg = AttackConfig {
                epsilon: eps,
                alpha: attack.alpha.min(eps),
                ..attack.clone()
            };
            iterative_fgsm(model, x, y, &cfg)?
        };
        xs.push(x.clone());
        ys.push(0);
        xs.push(adv);
        ys.push(1);
    }
    Ok((xs, ys))
}

pub fn train_adv_detector(
    clean: Labeled<'_>,
    craft_models: &[Classifier],
    cfg: &AdvDetectorConfig,
) -> Result<AdvDetector> {
    let (xs, ys) = adversarial_training_set(
        clean,
        craft_models,
        &cfg.attack,
        derive_seed(cfg.train.seed, "craft"),
    )?;
    let input_shape = &craft_models[0].spec.input_shape;
    let spec = ArchitectureSpec::mlp(&cfg.hidden, crate::tape::Activation::Relu, input_shape, 2);
    let mut model = Classifier::build(spec, cfg.train.seed)?;
    for round in 0..cfg.max_rounds.max(1) {
        let train = cfg
            .train
            .clone()
            .with_seed(derive_seed(cfg.train.seed, &format!("round{round}")));
        let stats = model.train_supervised(Labeled::new(&xs, &ys), None, &train)?;
        if stats.train_metric >= cfg.target_accuracy {
            break;
        }
    }
    Ok(AdvDetector { model })
}

/// Probability that `x` is adversarial.
pub fn detect_adversarial(det: &AdvDetector, x: &Tensor) -> Result<f64> {
    Ok(det.model.classify(x)?.data()[1])
}

/// Immutable parts of the defended service.
#[derive(Clone, Debug)]
pub struct DndPipeline {
    pub models: Arc<Vec<Classifier>>,
    pub ae: DenoisingAutoencoder,
    pub vae: VariationalAutoencoder,
    pub detector: AdvDetector,
    pub decoy: Classifier,
    pub cfg: DefenseConfig,
}

/// Mutable random streams of one session.
#[derive(Clone, Debug)]
pub struct DefenseStreams {
    pub registry: EnsembleRegistry,
    pub variant_rng: SeededRng,
}

impl DndPipeline {
    pub fn streams(&self, seed: u64) -> Result<DefenseStreams> {
        Ok(DefenseStreams {
            registry: EnsembleRegistry::shared(
                Arc::clone(&self.models),
                derive_seed(seed, "select"),
            )?,
            variant_rng: seeded(derive_seed(seed, "variants")),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.models[0].spec.input_shape
    }
}

/// Runs the layered defense on one query.
pub fn defend_infer(
    p: &DndPipeline,
    streams: &mut DefenseStreams,
    x: &Tensor,
    state: SessionState,
) -> Result<InferenceOutcome> {
    if x.shape() != p.input_shape() {
        return Err(Error::dim("defend_infer", p.input_shape(), x.shape()));
    }
    if p.cfg.sentinel && state == SessionState::Decoy {
        let mut out = outcome_from_probs(&[p.decoy.classify(x)?], vec![p.models.len()]);
        out.flags.served_by_decoy = true;
        return Ok(out);
    }
    let mut x = x.clone();
    let mut suspect = false;
    if p.cfg.sanitize {
        x = quantize_input(&x, p.cfg.quant_bits)?;
        suspect = detect_adversarial(&p.detector, &x)? >= p.cfg.theta_adv;
        x = p.ae.denoise(&x)?;
    }
    let variants = if p.cfg.vote {
        generate_variants(&p.vae, &x, p.cfg.k, p.cfg.tau, &mut streams.variant_rng)?
    } else {
        vec![x]
    };
    let mut out = vote_classify(&mut streams.registry, &variants, p.cfg.m_draws)?;
    out.flags.adversarial_suspect = suspect;
    Ok(out)
}
