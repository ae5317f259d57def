//! Line-protocol client and the scripted red-team driver.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};

use rand::Rng;
use serde::{Deserialize, Serialize};

use dnd_core::attacks::{synth_attack_session, AttackConfig, ProbeKind};
use dnd_core::models::{seeded, Classifier};
use dnd_core::sentinel::benign_trace;
use dnd_core::tensor::Tensor;
use dnd_core::{Error, Result};

use crate::wire::{WireRequest, WireResponse};

pub struct Client {
    addr: SocketAddr,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    /// Raw response lines in arrival order.
    pub transcript: Vec<String>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let io = |e| Error::io(addr.to_string(), e);
        let writer = TcpStream::connect(addr).map_err(io)?;
        writer.set_nodelay(true).map_err(io)?;
        let reader = BufReader::new(writer.try_clone().map_err(io)?);
        Ok(Client {
            addr,
            reader,
            writer,
            transcript: Vec::new(),
        })
    }

    /// Sends one raw line (a newline is appended) and returns the raw reply.
    pub fn send_raw(&mut self, line: &str) -> Result<String> {
        let io = |e| Error::io(self.addr.to_string(), e);
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.writer.write_all(&buf).map_err(io)?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(io)?;
        if n == 0 {
            return Err(Error::Contract(format!(
                "{} closed the connection",
                self.addr
            )));
        }
        self.transcript.push(reply.clone());
        Ok(reply)
    }

    pub fn send(&mut self, req: &WireRequest) -> Result<WireResponse> {
        let line = serde_json::to_string(req)?;
        let reply = self.send_raw(&line)?;
        Ok(serde_json::from_str(&reply)?)
    }

    pub fn query(&mut self, client_id: &str, x: &Tensor) -> Result<WireResponse> {
        self.send(&WireRequest::from_tensor(client_id, x))
    }

    /// Oracle view for attack synthesis; withheld or failed answers read as
    /// label 0 with zero confidence.
    pub fn oracle<'a>(
        &'a mut self,
        client_id: &'a str,
    ) -> impl FnMut(&Tensor) -> Result<(usize, f64)> + 'a {
        move |x| match self.query(client_id, x)? {
            WireResponse::Answer {
                label, confidence, ..
            } => Ok((label.max(0) as usize, confidence)),
            WireResponse::Error { .. } => Ok((0, 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedTeamSession {
    pub client_id: String,
    pub kind: ProbeKind,
    /// Queries, including the starting image for attack kinds.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedTeamPlan {
    pub seed: u64,
    pub attack: AttackConfig,
    pub sessions: Vec<RedTeamSession>,
}

impl RedTeamPlan {
    pub fn total_requests(&self) -> usize {
        self.sessions.iter().map(|s| s.len).sum()
    }
}

/// Runs every session of `plan` over one connection and returns the raw
/// response transcript.
pub fn run_redteam(
    addr: SocketAddr,
    surrogate: &Classifier,
    pool: &[Tensor],
    plan: &RedTeamPlan,
) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::Validation("red-team image pool is empty".into()));
    }
    let mut client = Client::connect(addr)?;
    let mut rng = seeded(plan.seed);
    for s in &plan.sessions {
        if s.len == 0 {
            continue;
        }
        let mut oracle = client.oracle(&s.client_id);
        match s.kind {
            ProbeKind::Benign => {
                benign_trace(&mut oracle, pool, s.len, &mut rng)?;
            }
            kind => {
                let x0 = &pool[rng.random_range(0..pool.len())];
                let attack = AttackConfig {
                    steps: s.len.max(2) - 1,
                    ..plan.attack.clone()
                };
                synth_attack_session(&mut oracle, surrogate, x0, kind, &attack)?;
            }
        }
    }
    Ok(client.transcript)
}
