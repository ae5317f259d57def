//! Random architecture search for a low-transferability ensemble.

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::fgsm;
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::models::{
    seeded, ArchKind, ArchitectureSpec, Classifier, ConvStage, Labeled, SeededRng, TrainConfig,
};
use crate::tape::Activation;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub kinds: Vec<ArchKind>,
    pub hidden_widths: Vec<usize>,
    /// Inclusive range of hidden layers for an MLP.
    pub mlp_depth: (usize, usize),
    /// Inclusive range of dense layers after the conv stages.
    pub head_depth: (usize, usize),
    /// Inclusive range of conv stages.
    pub conv_depth: (usize, usize),
    pub activations: Vec<Activation>,
    pub conv_stages: Vec<ConvStage>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let stage = |channels, kernel| ConvStage {
            channels,
            kernel,
            stride: 2,
        };
        SearchSpace {
            kinds: vec![ArchKind::Mlp, ArchKind::Convnet],
            hidden_widths: vec![24, 32, 48, 64],
            mlp_depth: (1, 2),
            head_depth: (1, 1),
            conv_depth: (1, 1),
            activations: vec![Activation::Relu, Activation::Tanh],
            conv_stages: vec![stage(4, 3), stage(6, 3), stage(4, 5)],
            input_shape: crate::data::INPUT_SHAPE.to_vec(),
            num_classes: crate::data::NUM_CLASSES,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("search space: {m}")));
        if self.kinds.is_empty() || self.activations.is_empty() {
            return bad("kinds and activations must be nonempty");
        }
        if self.kinds.contains(&ArchKind::Mlp)
            && (self.hidden_widths.is_empty() || self.mlp_depth.0 == 0)
        {
            return bad("mlp needs widths and depth >= 1");
        }
        if self.kinds.contains(&ArchKind::Convnet)
            && (self.conv_stages.is_empty() || self.conv_depth.0 == 0)
        {
            return bad("convnet needs stage choices and conv depth >= 1");
        }
        if self.head_depth.1 > 0 && self.hidden_widths.is_empty() {
            return bad("head layers need width choices");
        }
        for (lo, hi) in [self.mlp_depth, self.head_depth, self.conv_depth] {
            if lo > hi {
                return bad("empty depth range");
            }
        }
        // every reachable conv stack must fit the input
        if self.kinds.contains(&ArchKind::Convnet) {
            let worst = self
                .conv_stages
                .iter()
                .max_by_key(|s| s.kernel)
                .copied()
                .unwrap();
            let spec = ArchitectureSpec::convnet(
                &vec![worst; self.conv_depth.1],
                &[],
                self.activations[0],
                &self.input_shape,
                self.num_classes,
            );
            spec.validate()?;
        }
        Ok(())
    }
}

/// Uniform, independent choice along every dimension of `space`.
pub fn sample_architecture(space: &SearchSpace, rng: &mut impl Rng) -> ArchitectureSpec {
    let kind = *space.kinds.choose(rng).expect("nonempty kinds");
    let activation = *space.activations.choose(rng).expect("nonempty activations");
    let widths = |range: (usize, usize), rng: &mut _| -> Vec<usize> {
        let depth = Rng::random_range(rng, range.0..=range.1);
        (0..depth)
            .map(|_| *space.hidden_widths.choose(rng).unwrap())
            .collect()
    };
    match kind {
        ArchKind::Mlp => {
            let hidden = widths(space.mlp_depth, rng);
            ArchitectureSpec::mlp(&hidden, activation, &space.input_shape, space.num_classes)
        }
        ArchKind::Convnet => {
            let n = rng.random_range(space.conv_depth.0..=space.conv_depth.1);
            let stages: Vec<ConvStage> = (0..n)
                .map(|_| *space.conv_stages.choose(rng).unwrap())
                .collect();
            let head = widths(space.head_depth, rng);
            ArchitectureSpec::convnet(
                &stages,
                &head,
                activation,
                &space.input_shape,
                space.num_classes,
            )
        }
    }
}

/// `cells[i][j]`: success rate on model `j` of FGSM examples crafted on
/// model `i`, over samples both classify correctly; `None` when there are
/// no such samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityMatrix {
    pub epsilon: f64,
    pub cells: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

/// Raw per-sample outcomes behind a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferLog {
    pub labels: Vec<usize>,
    /// `clean_pred[i][s]`.
    pub clean_pred: Vec<Vec<usize>>,
    /// `adv_pred[i][j][s]`: model `j` on the example crafted on model `i`.
    pub adv_pred: Vec<Vec<Vec<usize>>>,
}

impl TransferabilityMatrix {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Rebuilds the matrix from per-sample outcomes.
    pub fn from_log(log: &TransferLog, epsilon: f64) -> Self {
        let n = log.clean_pred.len();
        let mut cells = vec![vec![None; n]; n];
        let mut counts = vec![vec![0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let (mut both, mut fooled) = (0usize, 0usize);
                for (s, &y) in log.labels.iter().enumerate() {
                    if log.clean_pred[i][s] == y && log.clean_pred[j][s] == y {
                        both += 1;
                        if log.adv_pred[i][j][s] != y {
                            fooled += 1;
                        }
                    }
                }
                counts[i][j] = both;
                cells[i][j] = (both > 0).then(|| fooled as f64 / both as f64);
            }
        }
        TransferabilityMatrix {
            epsilon,
            cells,
            counts,
        }
    }

    pub fn submatrix(&self, idx: &[usize]) -> Self {
        TransferabilityMatrix {
            epsilon: self.epsilon,
            cells: idx
                .iter()
                .map(|&i| idx.iter().map(|&j| self.cells[i][j]).collect())
                .collect(),
            counts: idx
                .iter()
                .map(|&i| idx.iter().map(|&j| self.counts[i][j]).collect())
                .collect(),
        }
    }

    /// Mean of the defined off-diagonal cells.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.len())
            .flat_map(|i| {
                (0..self.len())
                    .filter(move |&j| j != i)
                    .map(move |j| (i, j))
            })
            .filter_map(|(i, j)| self.cells[i][j])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn pairwise_transferability(
    models: &[Classifier],
    eval: Labeled<'_>,
    epsilon: f64,
) -> Result<(TransferabilityMatrix, TransferLog)> {
    if models.is_empty() || eval.is_empty() {
        return Err(Error::Validation(
            "transferability needs models and samples".into(),
        ));
    }
    let refs: Vec<&Tensor> = eval.images.iter().collect();
    let clean_pred = models
        .iter()
        .map(|m| m.predict_batch(&refs))
        .collect::<Result<Vec<_>>>()?;
    let mut adv_pred = Vec::with_capacity(models.len());
    for src in models {
        let adv = eval
            .images
            .iter()
            .zip(eval.labels)
            .map(|(x, &y)| fgsm(src, x, y, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let adv_refs: Vec<&Tensor> = adv.iter().collect();
        adv_pred.push(
            models
                .iter()
                .map(|m| m.predict_batch(&adv_refs))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let log = TransferLog {
        labels: eval.labels.to_vec(),
        clean_pred,
        adv_pred,
    };
    Ok((TransferabilityMatrix::from_log(&log, epsilon), log))
}

/// `mean(accs) − lambda · mean(defined off-diagonal T)`.
pub fn ensemble_score(accs: &[f64], t: &TransferabilityMatrix, lambda: f64) -> Result<f64> {
    if accs.is_empty() || accs.len() != t.len() {
        return Err(Error::Contract(
            "ensemble_score: accuracies and matrix disagree".into(),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda {lambda} must be >= 0")));
    }
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let penalty = if accs.len() > 1 {
        t.mean_off_diagonal().unwrap_or(0.0)
    } else {
        0.0
    };
    Ok(mean_acc - lambda * penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n: usize,
    pub budget: usize,
    pub lambda: f64,
    pub a_min: f64,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    /// Fine-tuning continues at a reduced step size.
    pub finetune_lr: f64,
    /// Test samples used for the transferability matrix.
    pub eval_samples: usize,
    pub epsilon: f64,
    /// Random same-size subsets drawn for the comparison baseline.
    pub random_subsets: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n: 4,
            budget: 12,
            lambda: 1.0,
            a_min: 0.85,
            train: TrainConfig::default().with_epochs(15),
            finetune_epochs: 15,
            finetune_lr: 0.01,
            eval_samples: 300,
            epsilon: 0.15,
            random_subsets: 5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.budget < self.n {
            return Err(Error::Validation(format!(
                "need budget >= n >= 1 (n {}, budget {})",
                self.n, self.budget
            )));
        }
        if !(self.lambda >= 0.0) || !(0.0..=1.0).contains(&self.a_min) {
            return Err(Error::Validation(
                "need lambda >= 0 and a_min in [0, 1]".into(),
            ));
        }
        if self.eval_samples == 0 {
            return Err(Error::Validation("eval_samples must be >= 1".into()));
        }
        if !(self.finetune_lr > 0.0) {
            return Err(Error::Validation("finetune_lr must be > 0".into()));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub accuracy: f64,
    pub survived: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub candidates: Vec<Candidate>,
    /// Candidate indices of the survivors, in candidate order.
    pub survivors: Vec<usize>,
    /// Matrix over the survivors (indices into `survivors`).
    pub transfer: TransferabilityMatrix,
    /// Candidate indices chosen, in selection order.
    pub chosen: Vec<usize>,
    /// Fewer survivors than requested.
    pub short: bool,
    pub selected_mean_transfer: Option<f64>,
    pub random_subset_mean_transfer: Option<f64>,
    /// Test accuracy of the chosen models after fine-tuning.
    pub final_accuracies: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub models: Vec<Classifier>,
    pub report: SearchReport,
}

/// Greedy growth from the most accurate survivor; each step adds the
/// candidate maximizing [`ensemble_score`], ties broken by spec hash then
/// position.
pub fn greedy_select(
    accs: &[f64],
    hashes: &[u64],
    t: &TransferabilityMatrix,
    n: usize,
    lambda: f64,
) -> Result<Vec<usize>> {
    let m = accs.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let key = |i: usize| (hashes[i], i);
    let first = (0..m)
        .max_by(|&a, &b| {
            accs[a]
                .total_cmp(&accs[b])
                .then_with(|| key(b).cmp(&key(a)))
        })
        .unwrap();
    let mut chosen = vec![first];
    while chosen.len() < n.min(m) {
        let mut best: Option<(f64, usize)> = None;
        for c in (0..m).filter(|c| !chosen.contains(c)) {
            let mut idx = chosen.clone();
            idx.push(c);
            let sub_accs: Vec<f64> = idx.iter().map(|&i| accs[i]).collect();
            let score = ensemble_score(&sub_accs, &t.submatrix(&idx), lambda)?;
            let better = match best {
                None => true,
                Some((s, b)) => score > s || (score == s && key(c) < key(b)),
            };
            if better {
                best = Some((score, c));
            }
        }
        chosen.push(best.unwrap().1);
    }
    Ok(chosen)
}

fn random_subset_baseline(
    t: &TransferabilityMatrix,
    n: usize,
    draws: usize,
    rng: &mut SeededRng,
) -> Option<f64> {
    let m = t.len();
    if n < 2 || m < n || draws == 0 {
        return None;
    }
    let all: Vec<usize> = (0..m).collect();
    let vals: Vec<f64> = (0..draws)
        .filter_map(|_| {
            let mut idx = all.clone();
            idx.shuffle(rng);
            idx.truncate(n);
            t.submatrix(&idx).mean_off_diagonal()
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn search_ensemble(
    space: &SearchSpace,
    train: Labeled<'_>,
    test: Labeled<'_>,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    cfg.validate()?;
    let mut space_rng = seeded(derive_seed(seed, "space"));
    let mut candidates = Vec::with_capacity(cfg.budget);
    let mut trained = Vec::with_capacity(cfg.budget);
    for k in 0..cfg.budget {
        let spec = sample_architecture(space, &mut space_rng);
        let cand_seed = derive_seed(seed, &format!("candidate{k}"));
        let mut model = Classifier::build(spec.clone(), cand_seed)?;
        model.train_supervised(train, None, &cfg.train.clone().with_seed(cand_seed))?;
        let accuracy = model.accuracy(test)?;
        log::info!(
            "candidate {k}: {} accuracy {accuracy:.3}",
            spec.canonical_json()
        );
        candidates.push(Candidate {
            spec,
            seed: cand_seed,
            accuracy,
            survived: accuracy >= cfg.a_min,
        });
        trained.push(model);
    }
    let survivors: Vec<usize> = (0..cfg.budget)
        .filter(|&k| candidates[k].survived)
        .collect();
    if survivors.is_empty() {
        let best = candidates.iter().map(|c| c.accuracy).fold(0.0, f64::max);
        return Err(Error::SearchFailure {
            best_accuracy: best,
        });
    }
    let pool: Vec<Classifier> = survivors.iter().map(|&k| trained[k].clone()).collect();
    let n_eval = cfg.eval_samples.min(test.len());
    let eval = Labeled::new(&test.images[..n_eval], &test.labels[..n_eval]);
    let (transfer, _) = pairwise_transferability(&pool, eval, cfg.epsilon)?;
    let accs: Vec<f64> = survivors.iter().map(|&k| candidates[k].accuracy).collect();
    let hashes: Vec<u64> = survivors
        .iter()
        .map(|&k| candidates[k].spec.spec_hash())
        .collect();
    let picked = greedy_select(&accs, &hashes, &transfer, cfg.n, cfg.lambda)?;
    let short = picked.len() < cfg.n;
    if short {
        warn!(
            "only {} of {} requested models survived the accuracy floor",
            picked.len(),
            cfg.n
        );
    }
    let selected_mean_transfer = transfer.submatrix(&picked).mean_off_diagonal();
    let mut subset_rng = seeded(derive_seed(seed, "subsets"));
    let random_subset_mean_transfer =
        random_subset_baseline(&transfer, picked.len(), cfg.random_subsets, &mut subset_rng);
    let mut models = Vec::with_capacity(picked.len());
    let mut final_accuracies = Vec::with_capacity(picked.len());
    for &p in &picked {
        let k = survivors[p];
        let mut model = trained[k].clone();
        if cfg.finetune_epochs > 0 {
            let ft = cfg
                .train
                .clone()
                .with_epochs(cfg.finetune_epochs)
                .with_lr(cfg.finetune_lr)
                .with_seed(derive_seed(candidates[k].seed, "finetune"));
            model.train_supervised(train, None, &ft)?;
        }
        final_accuracies.push(model.accuracy(test)?);
        models.push(model);
    }
    Ok(SearchOutcome {
        models,
        report: SearchReport {
            chosen: picked.iter().map(|&p| survivors[p]).collect(),
            candidates,
            survivors,
            transfer,
            short,
            selected_mean_transfer,
            random_subset_mean_transfer,
            final_accuracies,
        },
    })
}
