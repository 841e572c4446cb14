//! Event-stream ingestion, covariate tables, versioned parameter
//! checkpoints, and the run manifest.
//!
//! Node ids in the wild are strings; a `Vocabulary` maps them to the
//! dense integers the models use and is persisted next to every output
//! so ids survive the round trip. Checkpoints are JSON with shortest
//! round-trip float encoding, so parameters reload bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence, LatentAssignment};
use crate::hgap::CommunityParams;
use crate::params::{CovariateMatrix, HawkesParams};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const COMMUNITY_KIND: &str = "community";
pub const DYNAMICS_KIND: &str = "dynamics";

/// Bijection between string node ids and `[0, V)`, in first-appearance
/// order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    names: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Vocabulary { names, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.names
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    /// Numeric ids `"0"` through `"v-1"`, for data that was born dense.
    pub fn identity(v: u32) -> Self {
        Vocabulary::from((0..v).map(|i| i.to_string()).collect::<Vec<_>>())
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.names)
            .map_err(|e| Error::data(format!("could not encode vocabulary: {e}")))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let names: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("unreadable vocabulary {}: {e}", path.display())))?;
        let vocab = Vocabulary::from(names);
        if vocab.index.len() != vocab.names.len() {
            return Err(Error::data(format!(
                "vocabulary {} repeats a node id",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// An ingested event stream plus its id mapping and a count of dropped
/// self-edge rows.
#[derive(Clone, Debug)]
pub struct LoadedEvents {
    pub data: EventSequence,
    pub vocab: Vocabulary,
    pub skipped_self_edges: usize,
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_error(line, e.to_string())
}

/// Reads a `t,src,dst` CSV. Rows may arrive out of order (they are
/// stable-sorted by time); self-edges are dropped and counted, not
/// fatal. The horizon defaults to the last event time; passing one that
/// cuts events off is rejected downstream.
pub fn load_events(path: &Path, horizon: Option<f64>) -> Result<LoadedEvents> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?;
    if headers.iter().collect::<Vec<_>>() != ["t", "src", "dst"] {
        return Err(parse_error(
            1,
            format!(
                "expected header 't,src,dst', found '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<(f64, String, String)> = Vec::new();
    let mut skipped_self_edges = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(parse_error(
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let t: f64 = record[0]
            .parse()
            .map_err(|e| parse_error(line, format!("bad timestamp '{}': {e}", &record[0])))?;
        if !t.is_finite() {
            return Err(parse_error(line, format!("timestamp '{}' is not finite", &record[0])));
        }
        let (src, dst) = (&record[1], &record[2]);
        if src.is_empty() || dst.is_empty() {
            return Err(parse_error(line, "empty node id"));
        }
        if src == dst {
            skipped_self_edges += 1;
            continue;
        }
        rows.push((t, src.to_string(), dst.to_string()));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut events = Vec::with_capacity(rows.len());
    for (t, src, dst) in rows {
        let src = vocab.intern(&src);
        let dst = vocab.intern(&dst);
        events.push(Event { t, src, dst });
    }
    let horizon = horizon.unwrap_or_else(|| events.last().map(|e| e.t).unwrap_or(0.0));
    let data = EventSequence::new(events, horizon, vocab.len() as u32)?;
    Ok(LoadedEvents {
        data,
        vocab,
        skipped_self_edges,
    })
}

/// Writes a `t,src,dst` CSV using the vocabulary's string ids.
pub fn write_events(path: &Path, data: &EventSequence, vocab: &Vocabulary) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record(["t", "src", "dst"])
        .map_err(csv_error)?;
    for e in data.events() {
        let src = vocab.name(e.src).ok_or_else(|| {
            Error::domain(format!("node {} is missing from the vocabulary", e.src))
        })?;
        let dst = vocab.name(e.dst).ok_or_else(|| {
            Error::domain(format!("node {} is missing from the vocabulary", e.dst))
        })?;
        writer
            .write_record([&e.t.to_string(), src, dst])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a `src,dst,x1..xD` CSV against an existing vocabulary. `D` is
/// taken from the header; `expected_d`, when given, must match. Pairs
/// not listed keep zero covariates. Duplicate pairs and ids the event
/// data never mentioned are rejected.
pub fn load_covariates(
    path: &Path,
    vocab: &Vocabulary,
    expected_d: Option<usize>,
) -> Result<CovariateMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?;
    let cols: Vec<String> = headers.iter().map(str::to_string).collect();
    if cols.len() < 3 || cols[0] != "src" || cols[1] != "dst" {
        return Err(parse_error(
            1,
            format!(
                "expected header 'src,dst,x1..' with at least one value column, found '{}'",
                cols.join(",")
            ),
        ));
    }
    let d = cols.len() - 2;
    if let Some(expected) = expected_d {
        if d != expected {
            return Err(Error::data(format!(
                "covariate table has {d} value columns but the model expects {expected}"
            )));
        }
    }
    let mut rows: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != d + 2 {
            return Err(parse_error(
                line,
                format!("expected {} fields, found {}", d + 2, record.len()),
            ));
        }
        let src_name = &record[0];
        let dst_name = &record[1];
        let src = vocab
            .id(src_name)
            .ok_or_else(|| parse_error(line, format!("unknown node '{src_name}'")))?;
        let dst = vocab
            .id(dst_name)
            .ok_or_else(|| parse_error(line, format!("unknown node '{dst_name}'")))?;
        if src == dst {
            return Err(parse_error(
                line,
                format!("covariates for the self pair '{src_name}' are meaningless"),
            ));
        }
        let mut x = Vec::with_capacity(d);
        for i in 0..d {
            let field = &record[i + 2];
            let value: f64 = field
                .parse()
                .map_err(|e| parse_error(line, format!("bad value '{field}': {e}")))?;
            if !value.is_finite() {
                return Err(parse_error(line, format!("value '{field}' is not finite")));
            }
            x.push(value);
        }
        if rows.insert((src, dst), x).is_some() {
            return Err(Error::data(format!(
                "duplicate covariate row for pair ({src_name}, {dst_name})"
            )));
        }
    }
    CovariateMatrix::new(d, rows)
}

/// The static-stage fit: full community parameters plus which
/// communities stayed active, so downstream stages can restrict.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommunityCheckpoint {
    pub params: CommunityParams,
    pub active: Vec<usize>,
    pub log_joint: f64,
    pub seed: u64,
}

/// A fitted dynamics model plus the event tags or responsibilities it
/// settled on, which prediction needs to replay the training history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsCheckpoint {
    pub params: HawkesParams,
    pub assignment: LatentAssignment,
    /// Objective (or log-posterior) after each iteration.
    pub trace: Vec<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        version: CHECKPOINT_VERSION,
        payload,
    };
    let mut text = serde_json::to_string_pretty(&env)
        .map_err(|e| Error::data(format!("could not encode checkpoint: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("unreadable checkpoint {}: {e}", path.display())))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: env.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if env.kind != kind {
        return Err(Error::data(format!(
            "checkpoint {} holds '{}' parameters, expected '{kind}'",
            path.display(),
            env.kind
        )));
    }
    serde_json::from_value(env.payload)
        .map_err(|e| Error::data(format!("corrupt '{kind}' checkpoint {}: {e}", path.display())))
}

/// Hex SHA-256 of the resolved configuration text.
pub fn config_digest(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let mut out = String::with_capacity(hash.len() * 2);
    for b in hash {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Records an emitted file in the run manifest: name, config digest,
/// seed. One line per file, appended.
pub fn append_manifest(manifest: &Path, file: &Path, digest: &str, seed: u64) -> Result<()> {
    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
    let line = format!("{name}\t{digest}\t{seed}\n");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(manifest)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}
