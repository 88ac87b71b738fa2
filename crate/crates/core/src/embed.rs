//! Model responses: embedding matrices and the providers that produce them.
//!
//! Three providers exist behind one [`Provider`] trait:
//!
//! * the builtin toy embedder ([`ToyEmbedder`]), dependency free;
//! * precomputed FSAE or CSV files, looked up by request key;
//! * an external process speaking newline-delimited JSON on stdin/stdout.
//!
//! Request keys are image ids for unperturbed images and
//! `<id>@<kind>=<level>` for perturbed probes (see [`probe_key`]), which is
//! also how `fairsa embed` names rows in the files it writes.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::perturb::PerturbationKind;
use crate::scalar::Scalar;

/// Row-major `count x dim` matrix, row `i` belonging to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<S> {
    ids: Vec<String>,
    data: Vec<S>,
    dim: usize,
}

impl<S: Scalar> EmbeddingMatrix<S> {
    pub fn new(ids: Vec<String>, data: Vec<S>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form {} rows of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite embedding value in row {}",
                ids[pos / dim]
            )));
        }
        Ok(EmbeddingMatrix { ids, data, dim })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<S>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                found: r.len(),
            });
        }
        Self::new(ids, rows.concat(), dim)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    /// Element-wise conversion to another float type.
    pub fn cast<T: Scalar>(&self) -> EmbeddingMatrix<T> {
        EmbeddingMatrix {
            ids: self.ids.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_rounded(v.to_f64().expect("finite")))
                .collect(),
            dim: self.dim,
        }
    }

    /// Same rows under different ids.
    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return Err(Error::InvalidArgument("id count does not match row count".into()));
        }
        self.ids = ids;
        Ok(self)
    }
}

/// Key under which a (possibly perturbed) image is requested from a provider.
pub fn probe_key(id: &str, kind: PerturbationKind, delta: f64) -> String {
    if delta == 0.0 {
        id.to_string()
    } else {
        format!("{id}@{kind}={delta}")
    }
}

// ---------------------------------------------------------------------------
// Toy embedder
// ---------------------------------------------------------------------------

/// Deterministic stand-in for a face model.
///
/// Recipe: luma `0.299 R + 0.587 G + 0.114 B` on `[0, 1]` values, bilinear
/// resize to 16x16 (half-pixel centers, edge clamp), flatten row-major,
/// subtract the mean, L2-normalize. A pre-normalization norm below `1e-12`
/// yields the first basis vector instead.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyEmbedder;

impl ToyEmbedder {
    pub const SIDE: usize = 16;
    pub const DIM: usize = Self::SIDE * Self::SIDE;

    pub fn embed(&self, image: &RgbImage) -> Vec<f32> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let raw = image.as_raw();
        let luma: Vec<f64> = raw
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();

        let taps = |out: usize, size: usize| -> Vec<(usize, usize, f64)> {
            let scale = size as f64 / out as f64;
            (0..out)
                .map(|d| {
                    let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(size - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let xs = taps(Self::SIDE, w);
        let ys = taps(Self::SIDE, h);

        let mut v = Vec::with_capacity(Self::DIM);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = luma[y0 * w + x0] * (1.0 - fx) + luma[y0 * w + x1] * fx;
                let bottom = luma[y1 * w + x0] * (1.0 - fx) + luma[y1 * w + x1] * fx;
                v.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            let mut e0 = vec![0.0f32; Self::DIM];
            e0[0] = 1.0;
            return e0;
        }
        v.iter().map(|x| (x / norm) as f32).collect()
    }
}

// ---------------------------------------------------------------------------
// Embedding files
// ---------------------------------------------------------------------------

const FSAE_MAGIC: &[u8; 4] = b"FSAE";
const FSAE_VERSION: u32 = 1;

/// `FSAE | version u32 | count u32 | dim u32 | { id_len u16 | id | dim x f32 }*`, little endian.
pub fn write_fsae(matrix: &EmbeddingMatrix<f32>, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(FSAE_MAGIC)?;
    out.write_all(&FSAE_VERSION.to_le_bytes())?;
    out.write_all(&(matrix.len() as u32).to_le_bytes())?;
    out.write_all(&(matrix.dim() as u32).to_le_bytes())?;
    for (i, id) in matrix.ids().iter().enumerate() {
        let len = u16::try_from(id.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("id too long: {id}"))
        })?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for v in matrix.row(i) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_fsae(mut input: impl Read) -> Result<EmbeddingMatrix<f32>> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::format("FSAE", e.to_string()))?;
    let mut cur = &buf[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::format("FSAE", "truncated file"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != FSAE_MAGIC {
        return Err(Error::format("FSAE", "bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != FSAE_VERSION {
        return Err(Error::format("FSAE", format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let dim = u32_at(take(4)?) as usize;
    if dim == 0 {
        return Err(Error::format("FSAE", "dimension 0"));
    }
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let id = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::format("FSAE", "id is not UTF-8"))?;
        ids.push(id.to_string());
        for chunk in take(dim * 4)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    if !cur.is_empty() {
        return Err(Error::format("FSAE", format!("{} trailing bytes", cur.len())));
    }
    EmbeddingMatrix::new(ids, data, dim).map_err(|e| Error::format("FSAE", e.to_string()))
}

/// Header `id,v0,...,v{dim-1}`, one row per image.
pub fn write_embedding_csv(matrix: &EmbeddingMatrix<f32>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((0..matrix.dim()).map(|i| format!("v{i}")));
    let csv_err = |e: csv::Error| Error::format("embedding CSV", e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, id) in matrix.ids().iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(matrix.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::format("embedding CSV", e.to_string()))
}

pub fn read_embedding_csv(input: impl Read) -> Result<EmbeddingMatrix<f32>> {
    let err = |msg: String| Error::format("embedding CSV", msg);
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
    let dim = header.len().saturating_sub(1);
    if header.get(0) != Some("id") || dim == 0 {
        return Err(err("header must be id,v0,...".into()));
    }
    for (i, h) in header.iter().skip(1).enumerate() {
        if h != format!("v{i}") {
            return Err(err(format!("column {} should be v{i}, found {h}", i + 1)));
        }
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != dim + 1 {
            return Err(err(format!("row {} has {} fields", line + 2, rec.len())));
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            data.push(
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| err(format!("row {}: bad float {f:?}", line + 2)))?,
            );
        }
    }
    EmbeddingMatrix::new(ids, data, dim).map_err(|e| err(e.to_string()))
}

/// Load an embedding file, CSV by extension, FSAE otherwise.
pub fn read_embedding_file(path: &Path) -> Result<EmbeddingMatrix<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_embedding_csv(reader)
    } else {
        read_fsae(reader)
    }
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

/// Source of model responses. A handle serves one request at a time.
pub trait Provider: Send {
    fn dim(&self) -> usize;

    /// Human-readable identity recorded in run manifests.
    fn describe(&self) -> String;

    /// Embed the image behind `key`. `image` is only called when the provider
    /// actually needs pixels.
    fn embed(&mut self, key: &str, image: &mut dyn FnMut() -> Result<RgbImage>) -> Result<Vec<f32>>;

    /// Keys this provider cannot answer, checked before a batch starts.
    fn missing_keys(&self, _keys: &[String]) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderVariant {
    BuiltinToy,
    File,
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub variant: ProviderVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_dim: Option<usize>,
}

impl ProviderConfig {
    pub fn builtin_toy() -> Self {
        ProviderConfig {
            variant: ProviderVariant::BuiltinToy,
            path: None,
            command: None,
            expected_dim: None,
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        ProviderConfig {
            variant: ProviderVariant::File,
            path: Some(path.into()),
            ..Self::builtin_toy()
        }
    }

    pub fn process(command: Vec<String>) -> Self {
        ProviderConfig {
            variant: ProviderVariant::Process,
            command: Some(command),
            ..Self::builtin_toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.variant {
            ProviderVariant::BuiltinToy => self.path.is_none() && self.command.is_none(),
            ProviderVariant::File => self.path.is_some() && self.command.is_none(),
            ProviderVariant::Process => {
                self.path.is_none() && self.command.as_ref().is_some_and(|c| !c.is_empty())
            }
        };
        if !ok {
            return Err(Error::Config(format!(
                "provider variant {:?} needs exactly its own parameters (file: path, process: command)",
                self.variant
            )));
        }
        if self.expected_dim == Some(0) {
            return Err(Error::Config("expected_dim must be positive".into()));
        }
        Ok(())
    }

    fn check_dim(&self, dim: usize, transcript: &[String]) -> Result<()> {
        match self.expected_dim {
            Some(expected) if expected != dim => Err(Error::Provider {
                msg: format!("provider reports dim {dim}, config expects {expected}"),
                transcript: transcript.to_vec(),
            }),
            _ => Ok(()),
        }
    }
}

/// Open a single provider handle.
pub fn open_provider(config: &ProviderConfig) -> Result<Box<dyn Provider>> {
    config.validate()?;
    match config.variant {
        ProviderVariant::BuiltinToy => {
            config.check_dim(ToyEmbedder::DIM, &[])?;
            Ok(Box::new(ToyProvider))
        }
        ProviderVariant::File => {
            let store = Arc::new(EmbeddingStore::load(config.path.as_ref().expect("validated"))?);
            config.check_dim(store.matrix.dim(), &[])?;
            Ok(Box::new(FileProvider { store }))
        }
        ProviderVariant::Process => {
            let p = ProcessProvider::spawn(config.command.as_ref().expect("validated"))?;
            config.check_dim(p.dim, &p.transcript)?;
            Ok(Box::new(p))
        }
    }
}

struct ToyProvider;

impl Provider for ToyProvider {
    fn dim(&self) -> usize {
        ToyEmbedder::DIM
    }

    fn describe(&self) -> String {
        "builtin-toy".into()
    }

    fn embed(&mut self, _key: &str, image: &mut dyn FnMut() -> Result<RgbImage>) -> Result<Vec<f32>> {
        Ok(ToyEmbedder.embed(&image()?))
    }
}

struct EmbeddingStore {
    path: PathBuf,
    matrix: EmbeddingMatrix<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    fn load(path: &Path) -> Result<Self> {
        let matrix = read_embedding_file(path)?;
        let mut index = HashMap::with_capacity(matrix.len());
        for (i, id) in matrix.ids().iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::format("embedding file", format!("duplicate id {id}")));
            }
        }
        Ok(EmbeddingStore {
            path: path.to_path_buf(),
            matrix,
            index,
        })
    }
}

struct FileProvider {
    store: Arc<EmbeddingStore>,
}

impl Provider for FileProvider {
    fn dim(&self) -> usize {
        self.store.matrix.dim()
    }

    fn describe(&self) -> String {
        format!("file:{}", self.store.path.display())
    }

    fn embed(&mut self, key: &str, _image: &mut dyn FnMut() -> Result<RgbImage>) -> Result<Vec<f32>> {
        match self.store.index.get(key) {
            Some(&i) => Ok(self.store.matrix.row(i).to_vec()),
            None => Err(Error::MissingEmbeddings(vec![key.to_string()])),
        }
    }

    fn missing_keys(&self, keys: &[String]) -> Vec<String> {
        keys.iter()
            .filter(|k| !self.store.index.contains_key(*k))
            .cloned()
            .collect()
    }
}

const PROTOCOL_VERSION: u64 = 1;
const TRANSCRIPT_LINES: usize = 40;

/// External provider process speaking the newline-delimited JSON protocol.
pub struct ProcessProvider {
    command: Vec<String>,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    dim: usize,
    transcript: Vec<String>,
    scratch: tempfile::TempDir,
    requests: u64,
}

impl ProcessProvider {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty provider command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Provider {
                msg: format!("cannot start {program}: {e}"),
                transcript: Vec::new(),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let scratch = tempfile::Builder::new()
            .prefix("fairsa-probes")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let mut p = ProcessProvider {
            command: command.to_vec(),
            child,
            stdin,
            stdout,
            dim: 0,
            transcript: Vec::new(),
            scratch,
            requests: 0,
        };
        p.handshake()?;
        Ok(p)
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Provider {
            msg: msg.into(),
            transcript: self.transcript.clone(),
        }
    }

    fn log(&mut self, line: String) {
        if self.transcript.len() == TRANSCRIPT_LINES {
            self.transcript.remove(0);
        }
        self.transcript.push(line);
    }

    fn send(&mut self, msg: &Value) -> Result<()> {
        let line = msg.to_string();
        self.log(format!("> {line}"));
        let res = match self.stdin.as_mut() {
            Some(stdin) => writeln!(stdin, "{line}").and_then(|_| stdin.flush()),
            None => Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed")),
        };
        res.map_err(|e| self.fail(format!("write to provider failed: {e}")))
    }

    fn recv(&mut self) -> Result<Value> {
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| self.fail(format!("read from provider failed: {e}")))?;
        if n == 0 {
            return Err(self.fail("provider closed its output (crashed or exited)"));
        }
        let line = line.trim_end().to_string();
        self.log(format!("< {line}"));
        serde_json::from_str(&line).map_err(|e| self.fail(format!("reply is not JSON: {e}")))
    }

    fn handshake(&mut self) -> Result<()> {
        self.send(&json!({"op": "hello", "version": PROTOCOL_VERSION}))?;
        let reply = self.recv()?;
        if reply["op"] != "hello" {
            return Err(self.fail("expected a hello reply"));
        }
        if reply["version"].as_u64() != Some(PROTOCOL_VERSION) {
            return Err(self.fail(format!(
                "protocol version mismatch: provider speaks {}, harness speaks {PROTOCOL_VERSION}",
                reply["version"]
            )));
        }
        match reply["dim"].as_u64() {
            Some(d) if d > 0 => self.dim = d as usize,
            _ => return Err(self.fail(format!("invalid dimension {}", reply["dim"]))),
        }
        Ok(())
    }

    fn shutdown(&mut self) {
        if self.stdin.is_some() {
            let _ = self.send(&json!({"op": "shutdown"}));
            self.stdin = None;
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    if !status.success() {
                        log::warn!("provider {:?} exited with {status}", self.command);
                    }
                    return;
                }
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return;
                }
            }
        }
    }
}

impl Provider for ProcessProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn describe(&self) -> String {
        format!("process:{}", self.command.join(" "))
    }

    fn embed(&mut self, key: &str, image: &mut dyn FnMut() -> Result<RgbImage>) -> Result<Vec<f32>> {
        self.requests += 1;
        let path = self.scratch.path().join(format!("probe-{}.png", self.requests));
        image()?.save(&path).map_err(|source| Error::Image {
            what: format!("write {}", path.display()),
            source,
        })?;
        let abs = fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
        self.send(&json!({"op": "embed", "id": key, "path": abs.to_string_lossy()}))?;
        let reply = self.recv();
        let _ = fs::remove_file(&path);
        let reply = reply.map_err(|e| match e {
            Error::Provider { msg, transcript } => Error::Provider {
                msg: format!("{msg} (last request id {key})"),
                transcript,
            },
            other => other,
        })?;
        if reply["id"] != key {
            return Err(self.fail(format!("reply id {} does not match request {key}", reply["id"])));
        }
        match reply["op"].as_str() {
            Some("embedding") => {
                let vec: Vec<f32> = serde_json::from_value(reply["vec"].clone())
                    .map_err(|e| self.fail(format!("bad vector for {key}: {e}")))?;
                if vec.len() != self.dim {
                    return Err(self.fail(format!(
                        "vector for {key} has {} values, expected {}",
                        vec.len(),
                        self.dim
                    )));
                }
                if vec.iter().any(|v| !v.is_finite()) {
                    return Err(self.fail(format!("non-finite vector for {key}")));
                }
                Ok(vec)
            }
            Some("error") => Err(self.fail(format!(
                "provider error for {key}: {}",
                reply["msg"].as_str().unwrap_or("<no message>")
            ))),
            _ => Err(self.fail(format!("unexpected reply op {}", reply["op"]))),
        }
    }
}

impl Drop for ProcessProvider {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serve the provider protocol with the toy embedder until `shutdown` or EOF.
///
/// Unreadable images and malformed requests get an error reply; the loop
/// keeps running.
pub fn serve_toy(input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Err(e) => json!({"op": "error", "id": "", "msg": format!("malformed request: {e}")}),
            Ok(req) => match req["op"].as_str() {
                Some("hello") => json!({"op": "hello", "version": PROTOCOL_VERSION, "dim": ToyEmbedder::DIM}),
                Some("shutdown") => break,
                Some("embed") => {
                    let id = req["id"].as_str().unwrap_or("").to_string();
                    match req["path"].as_str() {
                        None => json!({"op": "error", "id": id, "msg": "missing path"}),
                        Some(path) => match image::open(path) {
                            Ok(img) => {
                                json!({"op": "embedding", "id": id, "vec": ToyEmbedder.embed(&img.to_rgb8())})
                            }
                            Err(e) => json!({"op": "error", "id": id, "msg": format!("{path}: {e}")}),
                        },
                    }
                }
                _ => json!({"op": "error", "id": req["id"].as_str().unwrap_or(""), "msg": "unknown op"}),
            },
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

/// A fixed set of provider handles used in parallel, one request in flight each.
pub struct ProviderPool {
    slots: Vec<Mutex<Box<dyn Provider>>>,
    dim: usize,
    describe: String,
}

impl ProviderPool {
    /// Open `count` handles. File stores are loaded once and shared.
    pub fn open(config: &ProviderConfig, count: usize) -> Result<Self> {
        let count = count.max(1);
        config.validate()?;
        let providers: Vec<Box<dyn Provider>> = match config.variant {
            ProviderVariant::File => {
                let store = Arc::new(EmbeddingStore::load(config.path.as_ref().expect("validated"))?);
                config.check_dim(store.matrix.dim(), &[])?;
                (0..count)
                    .map(|_| Box::new(FileProvider { store: store.clone() }) as Box<dyn Provider>)
                    .collect()
            }
            _ => (0..count).map(|_| open_provider(config)).collect::<Result<_>>()?,
        };
        Self::from_providers(providers)
    }

    pub fn from_providers(providers: Vec<Box<dyn Provider>>) -> Result<Self> {
        let first = providers
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty provider pool".into()))?;
        let dim = first.dim();
        let describe = first.describe();
        if let Some(p) = providers.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                found: p.dim(),
            });
        }
        Ok(ProviderPool {
            slots: providers.into_iter().map(Mutex::new).collect(),
            dim,
            describe,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.slots.len()
    }

    pub fn describe(&self) -> String {
        self.describe.clone()
    }

    /// Embed `keys.len()` images, image `i` produced on demand by `image(i)`.
    /// Rows come back in index order whatever the scheduling.
    pub fn embed_indexed<F>(&self, keys: &[String], image: F) -> Result<EmbeddingMatrix<f32>>
    where
        F: Fn(usize) -> Result<RgbImage> + Sync,
    {
        let missing = self.slots[0].lock().expect("provider lock").missing_keys(keys);
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings(missing));
        }
        let n = keys.len();
        let per_slot = n.div_ceil(self.slots.len()).max(1);
        let chunks: Vec<Result<Vec<f32>>> = self
            .slots
            .par_iter()
            .enumerate()
            .map(|(s, slot)| {
                let start = (s * per_slot).min(n);
                let end = ((s + 1) * per_slot).min(n);
                let mut provider = slot.lock().expect("provider lock");
                let mut rows = Vec::with_capacity((end - start) * self.dim);
                for i in start..end {
                    let v = provider.embed(&keys[i], &mut || image(i))?;
                    if v.len() != self.dim {
                        return Err(Error::DimMismatch {
                            expected: self.dim,
                            found: v.len(),
                        });
                    }
                    rows.extend(v);
                }
                Ok(rows)
            })
            .collect();
        let mut data = Vec::with_capacity(n * self.dim);
        for c in chunks {
            data.extend(c?);
        }
        EmbeddingMatrix::new(keys.to_vec(), data, self.dim)
    }
}

/// Embed in-memory images; rows follow input order.
pub fn embed_batch(pool: &ProviderPool, images: &[(String, RgbImage)]) -> Result<EmbeddingMatrix<f32>> {
    let keys: Vec<String> = images.iter().map(|(id, _)| id.clone()).collect();
    pool.embed_indexed(&keys, |i| Ok(images[i].1.clone()))
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;

    fn sh(script: &str) -> ProviderConfig {
        ProviderConfig::process(vec!["sh".into(), "-c".into(), script.into()])
    }

    #[test]
    fn toy_zero_variance_falls_back_to_e0() {
        let v = ToyEmbedder.embed(&RgbImage::new(20, 30));
        assert_eq!(v.len(), 256);
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn toy_output_is_unit_norm() {
        let img = RgbImage::from_fn(23, 17, |x, y| Rgb([(x * 11) as u8, (y * 13) as u8, ((x + y) * 5) as u8]));
        let v = ToyEmbedder.embed(&img);
        let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fsae_round_trip_and_rejects_garbage() {
        let m = EmbeddingMatrix::from_rows(
            vec!["a".into(), "bé".into()],
            vec![vec![1.0f32, -2.5, 3.25], vec![0.0, 1e-30, -7.0]],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_fsae(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FSAE");
        assert_eq!(read_fsae(&buf[..]).unwrap(), m);
        assert!(read_fsae(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_fsae(&bad[..]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = EmbeddingMatrix::from_rows(
            vec!["x".into(), "y".into()],
            vec![vec![0.1f32, 0.2], vec![-0.3, 1.0 / 3.0]],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_embedding_csv(&m, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("id,v0,v1\n"));
        assert_eq!(read_embedding_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn file_provider_reads_dim_and_reports_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fsae");
        let ids: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
        let rows = (0..10).map(|i| vec![i as f32; 128]).collect();
        let m = EmbeddingMatrix::from_rows(ids, rows).unwrap();
        write_fsae(&m, fs::File::create(&path).unwrap()).unwrap();

        let pool = ProviderPool::open(&ProviderConfig::file(&path), 3).unwrap();
        assert_eq!(pool.dim(), 128);
        let keys = vec!["img3".to_string(), "img1".to_string()];
        let got = pool.embed_indexed(&keys, |_| unreachable!("file provider needs no pixels")).unwrap();
        assert_eq!(got.row(0), m.row(3));
        assert_eq!(got.row(1), m.row(1));

        let err = pool
            .embed_indexed(&["img1".into(), "nope".into(), "gone".into()], |_| unreachable!())
            .unwrap_err();
        match err {
            Error::MissingEmbeddings(ids) => assert_eq!(ids, vec!["nope", "gone"]),
            other => panic!("{other}"),
        }

        let mut cfg = ProviderConfig::file(&path);
        cfg.expected_dim = Some(64);
        assert!(open_provider(&cfg).is_err());
    }

    #[test]
    fn builtin_toy_provider_has_dim_256() {
        assert_eq!(open_provider(&ProviderConfig::builtin_toy()).unwrap().dim(), 256);
    }

    #[test]
    fn config_requires_matching_parameters() {
        let mut c = ProviderConfig::builtin_toy();
        c.path = Some("x".into());
        assert!(c.validate().is_err());
        assert!(ProviderConfig::process(vec![]).validate().is_err());
        let c: std::result::Result<ProviderConfig, _> =
            serde_json::from_str(r#"{"variant":"builtin-toy","bogus":1}"#);
        assert!(c.is_err());
    }

    #[test]
    fn process_handshake_failures_are_fatal() {
        let dim0 = sh(r#"read l; echo '{"op":"hello","version":1,"dim":0}'; read l"#);
        match open_provider(&dim0) {
            Err(Error::Provider { msg, transcript }) => {
                assert!(msg.contains("dimension"), "{msg}");
                assert_eq!(transcript.len(), 2);
            }
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("dim 0 accepted"),
        }
        let v2 = sh(r#"read l; echo '{"op":"hello","version":2,"dim":8}'; read l"#);
        assert!(matches!(open_provider(&v2), Err(Error::Provider { .. })));
        let silent = sh("exit 0");
        assert!(matches!(open_provider(&silent), Err(Error::Provider { .. })));
        let mut expect = sh(r#"read l; echo '{"op":"hello","version":1,"dim":8}'; read l"#);
        expect.expected_dim = Some(4);
        assert!(matches!(open_provider(&expect), Err(Error::Provider { .. })));
    }

    #[test]
    fn process_error_reply_and_crash_are_fatal() {
        let img = RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]));
        let replies_error = sh(concat!(
            r#"read l; echo '{"op":"hello","version":1,"dim":2}'; "#,
            r#"read l; echo '{"op":"error","id":"k1","msg":"boom"}'; read l"#
        ));
        let mut p = open_provider(&replies_error).unwrap();
        let err = p.embed("k1", &mut || Ok(img.clone())).unwrap_err();
        assert!(err.to_string().contains("boom"), "{err}");

        let crashes = sh(r#"read l; echo '{"op":"hello","version":1,"dim":2}'; read l; exit 3"#);
        let mut p = open_provider(&crashes).unwrap();
        let err = p.embed("k9", &mut || Ok(img.clone())).unwrap_err();
        assert!(err.to_string().contains("k9"), "{err}");
    }

    #[test]
    fn serve_toy_answers_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("a.png");
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 0]));
        img.save(&png).unwrap();
        let input = format!(
            "{}\n{}\nnot json\n{}\n{}\n",
            r#"{"op":"hello","version":1}"#,
            json!({"op":"embed","id":"a","path":png.to_string_lossy()}),
            r#"{"op":"embed","id":"b","path":"/definitely/missing.png"}"#,
            r#"{"op":"shutdown"}"#
        );
        let mut out = Vec::new();
        serve_toy(input.as_bytes(), &mut out).unwrap();
        let replies: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(replies.len(), 4);
        assert_eq!(replies[0]["dim"], 256);
        let vec: Vec<f32> = serde_json::from_value(replies[1]["vec"].clone()).unwrap();
        assert_eq!(vec, ToyEmbedder.embed(&img));
        assert_eq!(replies[2]["op"], "error");
        assert_eq!(replies[3]["op"], "error");
        assert_eq!(replies[3]["id"], "b");
    }
}
