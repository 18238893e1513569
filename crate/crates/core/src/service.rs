//! Newline-delimited JSON reward service.
//!
//! Every input line gets exactly one output line:
//!
//! ```text
//! -> {"id":"1","method":"ping","params":{}}
//! <- {"id":"1","ok":true,"result":{"version":"0.1.0"}}
//! ```
//!
//! Failures carry `"ok":false` and an `error` object with a `code` of
//! `parse_error`, `invalid_request`, `method_not_found`, `invalid_params` or
//! `batch_too_large`. Lines that are not JSON objects answer with `"id":""`.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::entity::{EntitySet, Gazetteer, GazetteerExtractor};
use crate::metric::{score_sets, EhiReport, MetricConfig, ReferenceMode};
use crate::text::normalize_entity_with;

pub const DEFAULT_PORT: u16 = 7431;
pub const DEFAULT_MAX_BATCH: usize = 1024;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcRequest {
    pub id: String,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcResponse {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RpcError>,
}

impl RpcResponse {
    fn success(id: String, result: Value) -> Self {
        Self {
            id,
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    fn failure(id: String, code: &str, message: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            result: None,
            error: Some(RpcError {
                code: code.to_string(),
                message: message.into(),
            }),
        }
    }
}

/// Parameters of one `score` call. Entity lists, when present, replace the
/// built-in extractor for that text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreParams {
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub summary: Option<String>,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub entities_source: Option<Vec<String>>,
    #[serde(default)]
    pub entities_summary: Option<Vec<String>>,
    #[serde(default)]
    pub entities_reference: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchParams {
    pairs: Vec<ScoreParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractParams {
    text: String,
}

#[derive(Debug)]
pub struct ServiceError {
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    fn params(message: impl Into<String>) -> Self {
        Self {
            code: "invalid_params",
            message: message.into(),
        }
    }
}

/// Stateless request handler shared by all transports.
#[derive(Debug, Clone)]
pub struct RewardService {
    gazetteer: Arc<Gazetteer>,
    config: MetricConfig,
    max_batch: usize,
}

impl RewardService {
    pub fn new(gazetteer: Arc<Gazetteer>, config: MetricConfig) -> Self {
        Self {
            gazetteer,
            config,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch;
        self
    }

    fn extractor(&self) -> GazetteerExtractor<'_> {
        GazetteerExtractor {
            gazetteer: &self.gazetteer,
            heuristics: self.config.heuristics_enabled,
        }
    }

    fn side(&self, text: Option<&str>, entities: Option<&[String]>, what: &str) -> Result<EntitySet, ServiceError> {
        match (entities, text) {
            (Some(list), _) => {
                let opts = self.gazetteer.normalize_options();
                let keys = list
                    .iter()
                    .map(|s| normalize_entity_with(s, opts))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| ServiceError::params(format!("entities_{what}: {e}")))?;
                Ok(EntitySet::from_keys(keys))
            }
            (None, Some(t)) => Ok(crate::entity::extract_entities(
                t,
                &self.gazetteer,
                self.config.heuristics_enabled,
            )),
            (None, None) => Err(ServiceError::params(format!(
                "either {what} or entities_{what} is required"
            ))),
        }
    }

    pub fn score(&self, p: &ScoreParams) -> Result<EhiReport, ServiceError> {
        let source = self.side(p.source.as_deref(), p.entities_source.as_deref(), "source")?;
        let summary = self.side(p.summary.as_deref(), p.entities_summary.as_deref(), "summary")?;
        let reference = match self.config.reference_mode {
            ReferenceMode::ReferenceFree => None,
            ReferenceMode::WithReference => {
                if p.reference.is_some() || p.entities_reference.is_some() {
                    Some(self.side(p.reference.as_deref(), p.entities_reference.as_deref(), "reference")?)
                } else {
                    None
                }
            }
        };
        Ok(score_sets(&source, &summary, reference.as_ref(), &self.config))
    }

    pub fn score_batch(&self, pairs: &[ScoreParams]) -> Result<Vec<EhiReport>, ServiceError> {
        if pairs.len() > self.max_batch {
            return Err(ServiceError {
                code: "batch_too_large",
                message: format!("{} pairs exceeds the limit of {}", pairs.len(), self.max_batch),
            });
        }
        pairs.iter().map(|p| self.score(p)).collect()
    }

    pub fn handle_request(&self, req: &RpcRequest) -> RpcResponse {
        let id = req.id.clone();
        let result = match req.method.as_str() {
            "ping" => Ok(json!({ "version": VERSION })),
            "score" => parse_params::<ScoreParams>(&req.params)
                .and_then(|p| self.score(&p))
                .map(|r| serde_json::to_value(r).expect("report serializes")),
            "score_batch" => parse_params::<BatchParams>(&req.params)
                .and_then(|p| self.score_batch(&p.pairs))
                .map(|r| json!({ "reports": r })),
            "extract" => parse_params::<ExtractParams>(&req.params).map(|p| {
                let set = crate::entity::EntityExtractor::extract(&self.extractor(), &p.text);
                json!({ "entities": set.mentions, "counts": set.counts })
            }),
            other => Err(ServiceError {
                code: "method_not_found",
                message: format!("unknown method {other:?}"),
            }),
        };
        match result {
            Ok(v) => RpcResponse::success(id, v),
            Err(e) => RpcResponse::failure(id, e.code, e.message),
        }
    }

    /// Handle one raw line (without its terminator).
    pub fn handle_line(&self, line: &[u8]) -> RpcResponse {
        let value: Value = match std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str(s).map_err(|e| e.to_string()))
        {
            Ok(v) => v,
            Err(e) => return RpcResponse::failure(String::new(), "parse_error", e),
        };
        let Value::Object(obj) = value else {
            return RpcResponse::failure(String::new(), "parse_error", "request must be a JSON object");
        };
        let id = match obj.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            _ => return RpcResponse::failure(String::new(), "invalid_request", "id must be a non-empty string"),
        };
        let method = match obj.get("method") {
            Some(Value::String(m)) => m.clone(),
            _ => return RpcResponse::failure(id, "invalid_request", "method must be a string"),
        };
        let params = obj.get("params").cloned().unwrap_or(Value::Null);
        self.handle_request(&RpcRequest { id, method, params })
    }

    pub fn handle_line_to_string(&self, line: &[u8]) -> String {
        serde_json::to_string(&self.handle_line(line)).expect("response serializes")
    }

    /// Serve one byte stream until EOF, answering each line in order.
    pub fn serve_stream<R: BufRead, W: Write>(&self, mut reader: R, mut writer: W) -> io::Result<()> {
        let mut buf = Vec::new();
        loop {
            buf.clear();
            if reader.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            let line = trim_line_end(&buf);
            writer.write_all(self.handle_line_to_string(line).as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(())
    }

    pub fn serve_stdio(&self) -> io::Result<()> {
        let stdin = io::stdin();
        let stdout = io::stdout();
        self.serve_stream(stdin.lock(), stdout.lock())
    }
}

fn trim_line_end(buf: &[u8]) -> &[u8] {
    let buf = buf.strip_suffix(b"\n").unwrap_or(buf);
    buf.strip_suffix(b"\r").unwrap_or(buf)
}

fn parse_params<T: serde::de::DeserializeOwned>(params: &Value) -> Result<T, ServiceError> {
    let params = if params.is_null() { json!({}) } else { params.clone() };
    serde_json::from_value(params).map_err(|e| ServiceError::params(e.to_string()))
}

/// A bound TCP listener; call [`TcpServer::run`] to accept connections.
pub struct TcpServer {
    listener: TcpListener,
    service: Arc<RewardService>,
    shutdown: Arc<AtomicBool>,
}

const POLL_INTERVAL: Duration = Duration::from_millis(50);

impl TcpServer {
    pub fn bind<A: ToSocketAddrs + std::fmt::Display>(addr: A, service: RewardService) -> io::Result<Self> {
        let listener = TcpListener::bind(&addr)
            .map_err(|e| io::Error::new(e.kind(), format!("cannot bind {addr}: {e}")))?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            service: Arc::new(service),
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Setting the flag stops accepting; open connections finish their
    /// current line and close.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    pub fn run(self) -> io::Result<()> {
        let mut workers = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    let service = Arc::clone(&self.service);
                    let shutdown = Arc::clone(&self.shutdown);
                    workers.push(thread::spawn(move || {
                        let _ = handle_connection(&service, stream, &shutdown);
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL_INTERVAL),
                Err(e) => return Err(e),
            }
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

fn handle_connection(service: &RewardService, stream: TcpStream, shutdown: &AtomicBool) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => {
                // EOF; a final unterminated line still gets an answer
                if !buf.is_empty() {
                    respond(service, &buf, &mut writer)?;
                }
                return Ok(());
            }
            Ok(_) if buf.ends_with(b"\n") => {
                respond(service, &buf, &mut writer)?;
                buf.clear();
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if shutdown.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(e) => return Err(e),
        }
    }
}

fn respond<W: Write>(service: &RewardService, raw: &[u8], writer: &mut W) -> io::Result<()> {
    writer.write_all(service.handle_line_to_string(trim_line_end(raw)).as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()
}
