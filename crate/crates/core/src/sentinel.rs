//! Per-client query-sequence monitoring and decoy escalation.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{synth_attack_session, AttackConfig, AttackTrace, ProbeKind};
use crate::error::{Error, Result};
use crate::models::{seeded, Classifier, SequenceDetector};
use crate::tensor::Tensor;

/// Pixels whose absolute change exceeds this count as changed.
pub const CHANGE_THRESHOLD: f64 = 0.05;
/// Length of a feature vector.
pub const FEATURE_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Normal,
    Suspect,
    Decoy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SentinelPolicy {
    pub theta: f64,
    pub lam: f64,
    /// Number of consecutive pairs scored.
    pub window: usize,
    /// Ring buffer capacity.
    pub capacity: usize,
    pub idle_timeout_secs: u64,
}

impl Default for SentinelPolicy {
    fn default() -> Self {
        SentinelPolicy {
            theta: 0.8,
            lam: 0.7,
            window: 16,
            capacity: 64,
            idle_timeout_secs: 3600,
        }
    }
}

impl SentinelPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lam) {
            return Err(Error::Validation(format!(
                "lam {} outside [0, 1)",
                self.lam
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Validation(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        if self.window == 0 || self.capacity < self.window + 1 {
            return Err(Error::Validation(
                "need window >= 1 and capacity >= window + 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub seq: u64,
    pub input: Tensor,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientSession {
    pub client_id: String,
    records: VecDeque<QueryRecord>,
    capacity: usize,
    pub state: SessionState,
    pub score_ewma: f64,
    next_seq: u64,
}

impl ClientSession {
    pub fn new(client_id: impl Into<String>, capacity: usize) -> Self {
        ClientSession {
            client_id: client_id.into(),
            records: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            state: SessionState::Normal,
            score_ewma: 0.0,
            next_seq: 0,
        }
    }

    pub fn records(&self) -> &VecDeque<QueryRecord> {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sequence number the next recorded query will receive.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }
}

/// Appends a query, evicting the oldest record beyond capacity.
pub fn record_query(session: &mut ClientSession, x: &Tensor, label: usize, confidence: f64) {
    if session.records.len() == session.capacity {
        session.records.pop_front();
    }
    session.records.push_back(QueryRecord {
        seq: session.next_seq,
        input: x.clone(),
        label,
        confidence,
    });
    session.next_seq += 1;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub l_inf: f64,
    pub l2: f64,
    pub changed_fraction: f64,
    pub label_flip: f64,
    /// `cur.confidence − prev.confidence`.
    pub confidence_delta: f64,
}

impl QueryFeatures {
    /// Detector input; `l2` is divided by `sqrt(n)` so every feature is O(1).
    pub fn to_vector(&self, n: usize) -> Vec<f64> {
        vec![
            self.l_inf,
            self.l2 / (n.max(1) as f64).sqrt(),
            self.changed_fraction,
            self.label_flip,
            self.confidence_delta,
        ]
    }
}

fn pair_features(
    prev: &Tensor,
    prev_label: usize,
    prev_conf: f64,
    cur: &Tensor,
    label: usize,
    conf: f64,
) -> Result<QueryFeatures> {
    if prev.shape() != cur.shape() {
        return Err(Error::dim(
            "extract_pair_features",
            prev.shape(),
            cur.shape(),
        ));
    }
    let mut l_inf: f64 = 0.0;
    let mut sq = 0.0;
    let mut changed = 0usize;
    for (&a, &b) in prev.data().iter().zip(cur.data()) {
        let d = (b - a).abs();
        l_inf = l_inf.max(d);
        sq += d * d;
        if d > CHANGE_THRESHOLD {
            changed += 1;
        }
    }
    Ok(QueryFeatures {
        l_inf,
        l2: sq.sqrt(),
        changed_fraction: changed as f64 / cur.len() as f64,
        label_flip: if prev_label != label { 1.0 } else { 0.0 },
        confidence_delta: conf - prev_conf,
    })
}

pub fn extract_pair_features(prev: &QueryRecord, cur: &QueryRecord) -> Result<QueryFeatures> {
    pair_features(
        &prev.input,
        prev.label,
        prev.confidence,
        &cur.input,
        cur.label,
        cur.confidence,
    )
}

/// Feature vectors for consecutive pairs of a trace.
pub fn trace_features(trace: &AttackTrace) -> Result<Vec<Vec<f64>>> {
    let inputs = trace.inputs()?;
    let mut out = Vec::with_capacity(inputs.len().saturating_sub(1));
    for i in 1..inputs.len() {
        let (p, c) = (&trace.records[i - 1], &trace.records[i]);
        let f = pair_features(
            &inputs[i - 1],
            p.label,
            p.confidence,
            &inputs[i],
            c.label,
            c.confidence,
        )?;
        out.push(f.to_vector(inputs[i].len()));
    }
    Ok(out)
}

/// Feature vectors over the last `window + 1` records.
pub fn window_features(session: &ClientSession, window: usize) -> Result<Vec<Vec<f64>>> {
    let n = session.records.len();
    let start = n.saturating_sub(window + 1);
    let recs: Vec<&QueryRecord> = session.records.range(start..).collect();
    recs.windows(2)
        .map(|w| extract_pair_features(w[0], w[1]).map(|f| f.to_vector(w[1].input.len())))
        .collect()
}

/// LSTM attack probability over the recent window; 0.0 before two records.
pub fn detect_sequence(
    det: &SequenceDetector,
    session: &ClientSession,
    window: usize,
) -> Result<f64> {
    if session.records.len() < 2 {
        return Ok(0.0);
    }
    det.forward(&window_features(session, window)?)
}

/// Folds `score` into the session's EWMA and advances the state machine.
pub fn escalate(session: &mut ClientSession, score: f64, policy: &SentinelPolicy) -> SessionState {
    session.score_ewma = policy.lam * session.score_ewma + (1.0 - policy.lam) * score;
    let target = if session.score_ewma >= policy.theta {
        SessionState::Decoy
    } else if session.score_ewma >= policy.theta / 2.0 {
        SessionState::Suspect
    } else {
        SessionState::Normal
    };
    // states only move forward
    session.state = session.state.max(target);
    session.state
}

/// One line of the session audit export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionAuditRecord {
    pub client_id: String,
    pub seq: u64,
    pub label: usize,
    pub confidence: f64,
    pub score_ewma: f64,
    pub state: SessionState,
}

impl SessionAuditRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_value(self)
            .expect("audit record serializes")
            .to_string();
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionGenConfig {
    /// Queries per session, including the first.
    pub session_len: usize,
    pub attack: AttackConfig,
    /// Score windows of varying length ending anywhere in the session
    /// rather than only the full final window.
    pub random_prefixes: bool,
    pub window: usize,
}

impl Default for SessionGenConfig {
    fn default() -> Self {
        SessionGenConfig {
            session_len: 30,
            attack: AttackConfig {
                steps: 29,
                ..AttackConfig::default()
            },
            random_prefixes: true,
            window: 16,
        }
    }
}

/// A victim answering with its argmax label and top probability.
pub fn static_oracle(model: &Classifier) -> impl FnMut(&Tensor) -> Result<(usize, f64)> + '_ {
    move |x| {
        let p = model.classify(x)?;
        let l = p.argmax();
        Ok((l, p.data()[l]))
    }
}

/// Benign control trace: `len` i.i.d. draws from `pool`.
pub fn benign_trace(
    oracle: &mut dyn FnMut(&Tensor) -> Result<(usize, f64)>,
    pool: &[Tensor],
    len: usize,
    rng: &mut impl Rng,
) -> Result<AttackTrace> {
    let mut trace = AttackTrace::new(ProbeKind::Benign);
    for _ in 0..len {
        let x = &pool[rng.random_range(0..pool.len())];
        let (l, c) = oracle(x)?;
        trace.push(x, l, c);
    }
    Ok(trace)
}

/// Labelled feature sequences for training the sequence detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorDataset {
    pub seqs: Vec<Vec<Vec<f64>>>,
    /// 1.0 for attack sessions.
    pub labels: Vec<f64>,
    pub kinds: Vec<ProbeKind>,
}

/// Half benign, half attack sessions (alternating fgsm and extraction
/// probes), each converted to pair features.
pub fn gen_detector_dataset(
    victims: &[Classifier],
    pool: &[Tensor],
    n_sessions: usize,
    cfg: &SessionGenConfig,
    seed: u64,
) -> Result<DetectorDataset> {
    if n_sessions < 2 || victims.is_empty() || pool.is_empty() {
        return Err(Error::Validation(
            "need n_sessions >= 2, victims and a pool".into(),
        ));
    }
    if cfg.session_len < 2 {
        return Err(Error::Validation("session_len must be >= 2".into()));
    }
    let mut rng = seeded(seed);
    let attack_cfg = AttackConfig {
        steps: cfg.session_len - 1,
        ..cfg.attack.clone()
    };
    let n_attack = n_sessions / 2;
    let mut items = Vec::with_capacity(n_sessions);
    for i in 0..n_sessions {
        let victim = &victims[i % victims.len()];
        let mut oracle = static_oracle(victim);
        let trace = if i < n_attack {
            let kind = if i % 2 == 0 {
                ProbeKind::FgsmProbe
            } else {
                ProbeKind::ExtractionProbe
            };
            let surrogate = &victims[(i + 1) % victims.len()];
            let x0 = &pool[rng.random_range(0..pool.len())];
            synth_attack_session(&mut oracle, surrogate, x0, kind, &attack_cfg)?
        } else {
            benign_trace(&mut oracle, pool, cfg.session_len, &mut rng)?
        };
        let feats = trace_features(&trace)?;
        let end = if cfg.random_prefixes {
            rng.random_range(1..=feats.len())
        } else {
            feats.len()
        };
        let start = end.saturating_sub(cfg.window);
        let label = if i < n_attack { 1.0 } else { 0.0 };
        items.push((feats[start..end].to_vec(), label, trace.kind));
    }
    items.shuffle(&mut rng);
    let mut out = DetectorDataset {
        seqs: Vec::with_capacity(n_sessions),
        labels: Vec::with_capacity(n_sessions),
        kinds: Vec::with_capacity(n_sessions),
    };
    for (s, l, k) in items {
        out.seqs.push(s);
        out.labels.push(l);
        out.kinds.push(k);
    }
    Ok(out)
}

/// Trapezoidal ROC over `(score, is_positive)` pairs: returns the curve as
/// `(fpr, tpr)` points from (0,0) to (1,1) and the area under it.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<(Vec<(f64, f64)>, f64)> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(
            "roc needs both positive and negative samples".into(),
        ));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        // group tied scores into one step
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok((points, auc))
}
