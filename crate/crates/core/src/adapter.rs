//! Line-delimited JSON wire protocol for external agents.
//!
//! Request:  `{"id":1,"term":"red","pei":"ev-1","content":"..."}`
//! Response: `{"id":1,"verdict":"assent"}` with an optional `"rationale"`.
//!
//! One JSON object per line in each direction, over a child process's
//! standard streams or a TCP connection. Verdicts parse strictly: anything
//! other than `assent`, `neutral` or `dissent` is a protocol error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certification::{Event, ProviderError, VerdictProvider};
use crate::ledger::Verdict;
use crate::simagents::{AgentPolicy, Interval, SimProvider};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub id: u64,
    pub term: String,
    pub pei: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictResponse {
    pub id: u64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("bad adapter spec {0:?}: expected sim:<file>, cmd:<argv> or tcp:<host:port>")]
    BadSpec(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("bad policy file {path}: {source}")]
    PolicyFile { path: PathBuf, source: serde_json::Error },
    #[error("cannot start agent {agent}: {source}")]
    Spawn { agent: String, source: io::Error },
    #[error("cannot connect agent {agent} to {addr}: {source}")]
    Connect { agent: String, addr: String, source: io::Error },
}

/// Where an agent lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdapterSpec {
    /// In-process simulated agent read from a policy file.
    Sim(PathBuf),
    /// Child process, argv split on whitespace.
    Cmd(Vec<String>),
    Tcp(String),
}

impl FromStr for AdapterSpec {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AdapterError::BadSpec(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        if rest.trim().is_empty() {
            return Err(bad());
        }
        match kind {
            "sim" => Ok(Self::Sim(PathBuf::from(rest))),
            "cmd" => Ok(Self::Cmd(rest.split_whitespace().map(str::to_string).collect())),
            "tcp" => Ok(Self::Tcp(rest.to_string())),
            _ => Err(bad()),
        }
    }
}

/// Contents of a `sim:` policy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyFile {
    Interval(AgentPolicy),
    Table(VerdictTable),
}

impl PolicyFile {
    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        let text = fs::read_to_string(path).map_err(|source| AdapterError::Read { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| AdapterError::PolicyFile { path: path.to_path_buf(), source })
    }
}

/// Opens a provider. `agent` names external agents; `sim:` agents carry
/// their own id.
pub fn open_provider(spec: &AdapterSpec, agent: &str, timeout: Duration) -> Result<Box<dyn VerdictProvider>, AdapterError> {
    Ok(match spec {
        AdapterSpec::Sim(path) => match PolicyFile::load(path)? {
            PolicyFile::Interval(policy) => Box::new(SimProvider::new(policy)),
            PolicyFile::Table(table) => Box::new(TableProvider::new(table)),
        },
        AdapterSpec::Cmd(argv) => Box::new(ExternalProvider::spawn(agent, argv, timeout)?),
        AdapterSpec::Tcp(addr) => Box::new(ExternalProvider::connect(agent, addr, timeout)?),
    })
}

// -------------------------------------------------------------- external

struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    /// Requests that timed out; late replies to them are dropped.
    abandoned: BTreeSet<u64>,
    child: Option<Child>,
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A [`VerdictProvider`] speaking the wire protocol. Calls are serialized:
/// one session per agent.
pub struct ExternalProvider {
    agent: String,
    timeout: Duration,
    session: Mutex<Session>,
}

impl std::fmt::Debug for ExternalProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalProvider").field("agent", &self.agent).field("timeout", &self.timeout).finish()
    }
}

fn spawn_reader(reader: impl io::Read + Send + 'static) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl ExternalProvider {
    pub fn spawn(agent: &str, argv: &[String], timeout: Duration) -> Result<Self, AdapterError> {
        let spawn_err = |source| AdapterError::Spawn { agent: agent.to_string(), source };
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| spawn_err(io::Error::new(io::ErrorKind::InvalidInput, "empty command")))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(spawn_err)?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self::from_parts(agent, Box::new(BufWriter::new(stdin)), spawn_reader(stdout), Some(child), timeout))
    }

    pub fn connect(agent: &str, addr: &str, timeout: Duration) -> Result<Self, AdapterError> {
        let connect_err = |source| AdapterError::Connect { agent: agent.to_string(), addr: addr.to_string(), source };
        let stream = TcpStream::connect(addr).map_err(connect_err)?;
        let reader = stream.try_clone().map_err(connect_err)?;
        Ok(Self::from_parts(agent, Box::new(BufWriter::new(stream)), spawn_reader(reader), None, timeout))
    }

    fn from_parts(
        agent: &str,
        writer: Box<dyn Write + Send>,
        lines: Receiver<io::Result<String>>,
        child: Option<Child>,
        timeout: Duration,
    ) -> Self {
        let session = Session { writer, lines, next_id: 1, abandoned: BTreeSet::new(), child };
        Self { agent: agent.to_string(), timeout, session: Mutex::new(session) }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn transport(&self, detail: impl ToString) -> ProviderError {
        ProviderError::Transport { agent: self.agent.clone(), detail: detail.to_string() }
    }

    /// Sends every query before reading any reply, then matches replies by
    /// id in whatever order they arrive.
    pub fn query_many(&self, queries: &[(&str, &Event)]) -> Result<Vec<Verdict>, ProviderError> {
        let mut session = self.session.lock().unwrap_or_else(|p| p.into_inner());
        let mut outstanding: HashMap<u64, usize> = HashMap::with_capacity(queries.len());
        for (slot, (term, event)) in queries.iter().enumerate() {
            let id = session.next_id;
            session.next_id += 1;
            let request =
                VerdictRequest { id, term: term.to_string(), pei: event.pei.to_string(), content: event.content.clone() };
            let mut line = serde_json::to_string(&request).expect("request serializes");
            line.push('\n');
            session.writer.write_all(line.as_bytes()).map_err(|e| self.transport(e))?;
            outstanding.insert(id, slot);
        }
        session.writer.flush().map_err(|e| self.transport(e))?;

        let mut verdicts: Vec<Option<Verdict>> = vec![None; queries.len()];
        let deadline = Instant::now() + self.timeout;
        while !outstanding.is_empty() {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match session.lines.recv_timeout(remaining) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(self.transport(e)),
                Err(RecvTimeoutError::Timeout) => {
                    session.abandoned.extend(outstanding.keys());
                    return Err(ProviderError::Timeout {
                        agent: self.agent.clone(),
                        timeout_ms: self.timeout.as_millis() as u64,
                    });
                }
                Err(RecvTimeoutError::Disconnected) => return Err(self.transport("agent closed the connection")),
            };
            let response: VerdictResponse = serde_json::from_str(&line)
                .map_err(|e| ProviderError::Malformed { agent: self.agent.clone(), detail: format!("{e}: {line}") })?;
            if let Some(slot) = outstanding.remove(&response.id) {
                verdicts[slot] = Some(response.verdict);
            } else if !session.abandoned.remove(&response.id) {
                return Err(ProviderError::IdMismatch { agent: self.agent.clone(), got: response.id });
            }
        }
        Ok(verdicts.into_iter().map(|v| v.expect("every slot answered")).collect())
    }
}

impl VerdictProvider for ExternalProvider {
    fn agent_id(&self) -> &str {
        &self.agent
    }

    fn verdict(&self, term: &str, event: &Event, _epoch: u64) -> Result<Verdict, ProviderError> {
        Ok(self.query_many(&[(term, event)])?[0])
    }
}

// ----------------------------------------------------------- verdict table

/// Misbehaviour a mock agent can be scripted with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFault {
    /// Reply with an id one higher than requested.
    WrongId,
    /// Never reply.
    Silent,
    /// Reply with a line that is not JSON.
    Garbage,
}

/// A recorded verdict table: `verdicts[term][pei]`, falling back to
/// `default`. Values are kept as raw strings so a table can script invalid
/// replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictTable {
    pub agent: String,
    pub default: String,
    #[serde(default)]
    pub verdicts: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<MockFault>,
}

impl VerdictTable {
    pub fn constant(agent: impl Into<String>, verdict: Verdict) -> Self {
        Self { agent: agent.into(), default: verdict.as_str().to_string(), verdicts: BTreeMap::new(), fault: None }
    }

    pub fn raw(&self, term: &str, pei: &str) -> &str {
        self.verdicts.get(term).and_then(|t| t.get(pei)).unwrap_or(&self.default)
    }

    pub fn set(&mut self, term: &str, pei: &str, verdict: Verdict) {
        self.verdicts.entry(term.to_string()).or_default().insert(pei.to_string(), verdict.as_str().to_string());
    }
}

/// In-process provider answering from a [`VerdictTable`] with the same
/// strict parsing an external agent's replies get.
#[derive(Debug, Clone)]
pub struct TableProvider {
    pub table: VerdictTable,
}

impl TableProvider {
    pub fn new(table: VerdictTable) -> Self {
        Self { table }
    }
}

impl VerdictProvider for TableProvider {
    fn agent_id(&self) -> &str {
        &self.table.agent
    }

    fn verdict(&self, term: &str, event: &Event, _epoch: u64) -> Result<Verdict, ProviderError> {
        let raw = self.table.raw(term, event.pei.as_str());
        raw.parse().map_err(|_| ProviderError::Malformed {
            agent: self.table.agent.clone(),
            detail: format!("unknown verdict {raw:?}"),
        })
    }

    fn term_rule(&self, _term: &str) -> Option<Interval> {
        None
    }
}

/// Serves the wire protocol from a table until the input closes.
pub fn serve_mock(table: &VerdictTable, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: VerdictRequest =
            serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let raw = table.raw(&request.term, &request.pei);
        let reply = match table.fault {
            Some(MockFault::Silent) => continue,
            Some(MockFault::Garbage) => "not json".to_string(),
            Some(MockFault::WrongId) => serde_json::json!({ "id": request.id + 1, "verdict": raw }).to_string(),
            None => serde_json::json!({ "id": request.id, "verdict": raw }).to_string(),
        };
        output.write_all(reply.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Accepts connections one at a time and serves each until it closes.
pub fn serve_mock_tcp(table: &VerdictTable, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let reader = BufReader::new(stream.try_clone()?);
        serve_mock(table, reader, stream)?;
    }
    Ok(())
}
