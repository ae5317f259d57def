//! Session-aware defended inference: the transport-independent core of the
//! gateway.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::defense::{defend_infer, DefenseStreams, DndPipeline, InferenceOutcome};
use crate::error::Result;
use crate::models::SequenceDetector;
use crate::sentinel::{
    detect_sequence, escalate, record_query, ClientSession, SentinelPolicy, SessionState,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditLogEntry {
    /// Milliseconds as supplied by the caller's clock.
    pub timestamp: u64,
    pub client_id: String,
    pub request_id: String,
    pub seq: u64,
    /// `-1` when the answer was withheld.
    pub label: i64,
    pub confidence: f64,
    pub adversarial_suspect: bool,
    pub state: SessionState,
    pub score_ewma: f64,
    pub model_ids: Vec<usize>,
    pub served_by_decoy: bool,
}

impl AuditLogEntry {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_value(self)
            .expect("audit entry serializes")
            .to_string();
        s.push('\n');
        s
    }
}

/// What the caller is told.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub request_id: String,
    pub label: i64,
    pub confidence: f64,
}

struct SessionSlot {
    session: ClientSession,
    streams: DefenseStreams,
    last_seen_ms: u64,
    /// Requests answered for this client id across session resets.
    served: u64,
    generation: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub root_seed: u64,
    pub policy: SentinelPolicy,
    pub reject_on_suspect: bool,
}

/// Sessions, defended pipeline and an append-only audit trail.
pub struct DefendedService {
    pipeline: Arc<DndPipeline>,
    detector: Arc<SequenceDetector>,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionSlot>>>>,
    audit: Mutex<Vec<AuditLogEntry>>,
}

impl DefendedService {
    pub fn new(
        pipeline: Arc<DndPipeline>,
        detector: Arc<SequenceDetector>,
        cfg: ServiceConfig,
    ) -> Result<Self> {
        cfg.policy.validate()?;
        pipeline.cfg.validate()?;
        Ok(DefendedService {
            pipeline,
            detector,
            cfg,
            sessions: Mutex::new(HashMap::new()),
            audit: Mutex::new(Vec::new()),
        })
    }

    pub fn pipeline(&self) -> &DndPipeline {
        &self.pipeline
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    fn new_slot(
        &self,
        client_id: &str,
        generation: u64,
        served: u64,
        now_ms: u64,
    ) -> Result<SessionSlot> {
        let label = if generation == 0 {
            client_id.to_string()
        } else {
            format!("{client_id}#{generation}")
        };
        Ok(SessionSlot {
            session: ClientSession::new(client_id, self.cfg.policy.capacity),
            streams: self
                .pipeline
                .streams(derive_seed(self.cfg.root_seed, &label))?,
            last_seen_ms: now_ms,
            served,
            generation,
        })
    }

    fn slot(&self, client_id: &str, now_ms: u64) -> Result<Arc<Mutex<SessionSlot>>> {
        let mut map = self.sessions.lock().expect("session map poisoned");
        if let Some(s) = map.get(client_id) {
            return Ok(Arc::clone(s));
        }
        let slot = Arc::new(Mutex::new(self.new_slot(client_id, 0, 0, now_ms)?));
        map.insert(client_id.to_string(), Arc::clone(&slot));
        Ok(slot)
    }

    /// Handles one already validated query. Requests for the same client are
    /// serialized on that client's session lock.
    pub fn infer(
        &self,
        client_id: &str,
        x: &Tensor,
        now_ms: u64,
    ) -> Result<(Answer, AuditLogEntry)> {
        let slot = self.slot(client_id, now_ms)?;
        let mut slot = slot.lock().expect("session poisoned");
        let idle_ms = self.cfg.policy.idle_timeout_secs.saturating_mul(1000);
        if now_ms.saturating_sub(slot.last_seen_ms) > idle_ms {
            *slot = self.new_slot(client_id, slot.generation + 1, slot.served, now_ms)?;
        }
        slot.last_seen_ms = now_ms;
        let slot = &mut *slot;
        if self.pipeline.cfg.sentinel {
            let score = detect_sequence(&self.detector, &slot.session, self.cfg.policy.window)?;
            escalate(&mut slot.session, score, &self.cfg.policy);
        }
        let outcome: InferenceOutcome =
            defend_infer(&self.pipeline, &mut slot.streams, x, slot.session.state)?;
        record_query(&mut slot.session, x, outcome.label, outcome.confidence);
        let seq = slot.served;
        slot.served += 1;
        let request_id = format!("{client_id}-{seq}");
        let withheld = self.cfg.reject_on_suspect && outcome.flags.adversarial_suspect;
        let (label, confidence) = if withheld {
            (-1, 0.0)
        } else {
            (outcome.label as i64, outcome.confidence)
        };
        let entry = AuditLogEntry {
            timestamp: now_ms,
            client_id: client_id.to_string(),
            request_id: request_id.clone(),
            seq,
            label,
            confidence,
            adversarial_suspect: outcome.flags.adversarial_suspect,
            state: slot.session.state,
            score_ewma: slot.session.score_ewma,
            model_ids: outcome.model_ids,
            served_by_decoy: outcome.flags.served_by_decoy,
        };
        // appended while the session lock is held so per-client order is kept
        self.audit
            .lock()
            .expect("audit poisoned")
            .push(entry.clone());
        Ok((
            Answer {
                request_id,
                label,
                confidence,
            },
            entry,
        ))
    }

    pub fn audit_len(&self) -> usize {
        self.audit.lock().expect("audit poisoned").len()
    }

    pub fn audit_snapshot(&self) -> Vec<AuditLogEntry> {
        self.audit.lock().expect("audit poisoned").clone()
    }

    /// Current state of a client's session, if it exists.
    pub fn session_state(&self, client_id: &str) -> Option<SessionState> {
        let map = self.sessions.lock().expect("session map poisoned");
        map.get(client_id)
            .map(|s| s.lock().expect("session poisoned").session.state)
    }
}
