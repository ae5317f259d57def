use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{info, warn};

use dnd_core::service::{AuditLogEntry, DefendedService, ServiceConfig};
use dnd_core::{Error, Result};

use crate::config::GatewayConfig;
use crate::wire::{parse_request, WireError, WireRequest, WireResponse, WIRE_VERSION};

/// Requests longer than this are answered with a parse error.
pub const MAX_LINE_BYTES: usize = 1 << 20;
const POLL: Duration = Duration::from_millis(20);

type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Shared request-handling state.
pub struct Gateway {
    service: DefendedService,
    clock: Clock,
}

impl Gateway {
    pub fn new(service: DefendedService) -> Self {
        Gateway {
            service,
            clock: Box::new(wall_clock_ms),
        }
    }

    pub fn with_clock(
        service: DefendedService,
        clock: impl Fn() -> u64 + Send + Sync + 'static,
    ) -> Self {
        Gateway {
            service,
            clock: Box::new(clock),
        }
    }

    /// Loads every checkpoint named by `cfg`.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let (pipeline, seq) = cfg.checkpoints.load(cfg.defense.clone())?;
        let service = DefendedService::new(
            Arc::new(pipeline),
            Arc::new(seq),
            ServiceConfig {
                root_seed: cfg.root_seed,
                policy: cfg.sentinel.clone(),
                reject_on_suspect: cfg.reject_on_suspect,
            },
        )?;
        Ok(Gateway::new(service))
    }

    pub fn service(&self) -> &DefendedService {
        &self.service
    }

    pub fn handle_request(&self, req: &WireRequest) -> WireResponse {
        let Some(x) = req.validate(&self.service.pipeline().input_shape()) else {
            return WireResponse::error(WireError::InvalidInput);
        };
        match self.service.infer(&req.client_id, &x, (self.clock)()) {
            Ok((a, _)) => WireResponse::Answer {
                v: WIRE_VERSION,
                request_id: a.request_id,
                label: a.label,
                confidence: a.confidence,
            },
            Err(e) => {
                warn!("inference failed for {}: {e}", req.client_id);
                WireResponse::error(WireError::Internal)
            }
        }
    }

    pub fn handle_line(&self, line: &str) -> WireResponse {
        match parse_request(line) {
            Ok(req) => self.handle_request(&req),
            Err(kind) => WireResponse::error(kind),
        }
    }

    pub fn audit(&self) -> Vec<AuditLogEntry> {
        self.service.audit_snapshot()
    }
}

/// Writes the audit log as JSON lines via a temporary file and a rename.
pub fn export_audit(gateway: &Gateway, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let entries = gateway.audit();
    let mut body = String::new();
    for e in &entries {
        body.push_str(&e.to_json_line());
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(entries.len())
}

/// Cloneable stop switch for a running [`Server`].
#[derive(Clone, Debug, Default)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shutdown(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_shutdown(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct Server {
    listener: TcpListener,
    gateway: Arc<Gateway>,
    audit_path: Option<PathBuf>,
    shutdown: ShutdownHandle,
}

impl Server {
    pub fn bind(addr: SocketAddr, gateway: Gateway, audit_path: Option<PathBuf>) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr.to_string(), e))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::io(addr.to_string(), e))?;
        Ok(Server {
            listener,
            gateway: Arc::new(gateway),
            audit_path,
            shutdown: ShutdownHandle::new(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        self.shutdown.clone()
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        Arc::clone(&self.gateway)
    }

    /// Serves until shutdown, then drains connections and flushes the audit
    /// log. Returns the number of audit entries.
    pub fn run(self) -> Result<usize> {
        info!("listening on {}", self.local_addr());
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.shutdown.is_shutdown() {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let gw = Arc::clone(&self.gateway);
                    let stop = self.shutdown.clone();
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = connection(stream, &gw, &stop) {
                            warn!("connection {peer}: {e}");
                        }
                    }));
                    workers.retain(|h| !h.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        for h in workers {
            let _ = h.join();
        }
        let n = self.gateway.service().audit_len();
        if let Some(p) = &self.audit_path {
            export_audit(&self.gateway, p)?;
            info!("wrote {n} audit entries to {}", p.display());
        }
        Ok(n)
    }

    pub fn spawn(self) -> (SocketAddr, ShutdownHandle, JoinHandle<Result<usize>>) {
        let addr = self.local_addr();
        let stop = self.shutdown_handle();
        (addr, stop, std::thread::spawn(move || self.run()))
    }
}

fn connection(stream: TcpStream, gw: &Gateway, stop: &ShutdownHandle) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL * 5))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) => {
                if buf.last() != Some(&b'\n') {
                    // peer closed mid-line; answer what arrived
                    respond(&mut writer, gw, &buf)?;
                    return Ok(());
                }
                respond(&mut writer, gw, &buf)?;
                buf.clear();
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if stop.is_shutdown() {
                    return Ok(());
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
        if buf.len() > MAX_LINE_BYTES {
            writer.write_all(WireResponse::error(WireError::Parse).to_line().as_bytes())?;
            return Ok(());
        }
    }
}

fn respond(writer: &mut TcpStream, gw: &Gateway, raw: &[u8]) -> std::io::Result<()> {
    let resp = match std::str::from_utf8(raw) {
        Ok(line) if !line.trim().is_empty() => gw.handle_line(line.trim_end()),
        Ok(_) => return Ok(()),
        Err(_) => WireResponse::error(WireError::Parse),
    };
    writer.write_all(resp.to_line().as_bytes())
}

/// Loads the configured pipeline and serves until `stop` fires.
pub fn serve(cfg: &GatewayConfig, stop: ShutdownHandle) -> Result<usize> {
    let gateway = Gateway::from_config(cfg)?;
    let server = Server::bind(cfg.listen_addr()?, gateway, Some(cfg.audit_log.clone()))?;
    let inner = server.shutdown_handle();
    let watcher = std::thread::spawn(move || {
        while !stop.is_shutdown() && !inner.is_shutdown() {
            std::thread::sleep(POLL);
        }
        inner.shutdown();
    });
    let n = server.run();
    let _ = watcher.join();
    n
}
