//! Navigation-log ingestion: raw server records to padded token sequences.
//!
//! The pipeline is
//! 1. [`parse_records`] reads CSV or JSONL rows, keeping the action,
//!    timestamp, username and course path of each row;
//! 2. [`filter_nav_actions`] keeps `seq_next`, `seq_prev` and `seq_goto`;
//! 3. [`build_vocab`] names each course node by joining its path with `/`
//!    and numbers nodes from 1 in order of first occurrence;
//! 4. [`assemble_sequences`] groups by user, orders by time, prepends the
//!    homepage token where missing, then truncates and pads with 0.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Actions that move a student between course nodes.
pub const NAV_ACTIONS: [&str; 3] = ["seq_next", "seq_prev", "seq_goto"];
pub const PADDING_ID: usize = 0;
pub const NODE_SEPARATOR: &str = "/";
pub const HOMEPAGE_KEY: &str = "__homepage__";
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawLogRecord {
    pub basic_action: String,
    /// Microseconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub username: String,
    pub path_components: Vec<String>,
}

impl RawLogRecord {
    pub fn node_name(&self) -> String {
        self.path_components.join(NODE_SEPARATOR)
    }

    pub fn is_navigation(&self) -> bool {
        NAV_ACTIONS.contains(&self.basic_action.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(Error::config(format!("unknown input format `{other}` (expected csv or jsonl)"))),
        }
    }
}

/// CSV header names for each record field. The path may span several
/// columns; each column value is itself split on `/`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub basic_action: String,
    pub timestamp: String,
    pub username: String,
    pub path: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            basic_action: "basic_action".into(),
            timestamp: "timestamp".into(),
            username: "username".into(),
            path: vec!["path".into()],
        }
    }
}

impl FromStr for ColumnMap {
    type Err = Error;

    /// Parses `field=column` pairs separated by commas, e.g.
    /// `username=user_id,path=chapter+sequential`. Unlisted fields keep
    /// their default column names.
    fn from_str(s: &str) -> Result<Self> {
        let mut map = ColumnMap::default();
        for pair in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (field, column) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("column mapping `{pair}` is not field=column")))?;
            let column = column.trim().to_string();
            match field.trim() {
                "basic_action" => map.basic_action = column,
                "timestamp" => map.timestamp = column,
                "username" => map.username = column,
                "path" => map.path = column.split('+').map(str::to_string).collect(),
                other => return Err(Error::config(format!("unknown record field `{other}`"))),
            }
        }
        Ok(map)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedLog {
    pub records: Vec<RawLogRecord>,
    pub malformed: usize,
}

/// Accepts RFC 3339 instants and zone-less `YYYY-MM-DD[T ]HH:MM:SS[.f]`
/// (taken as UTC).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_micros());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .map(|dt| dt.and_utc().timestamp_micros())
}

fn split_path<'a>(parts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    parts
        .into_iter()
        .flat_map(|p| p.split(NODE_SEPARATOR))
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect()
}

fn make_record(action: &str, ts: &str, user: &str, path: Vec<String>) -> Option<RawLogRecord> {
    let timestamp = parse_timestamp(ts)?;
    let user = user.trim();
    if user.is_empty() {
        return None;
    }
    let record = RawLogRecord {
        basic_action: action.trim().to_string(),
        timestamp,
        username: user.to_string(),
        path_components: path,
    };
    if record.is_navigation() && record.path_components.is_empty() {
        return None;
    }
    Some(record)
}

/// Reads log records in file order. Rows that cannot be turned into a
/// record are skipped and counted in [`ParsedLog::malformed`].
pub fn parse_records<R: Read>(source: R, format: InputFormat, columns: &ColumnMap) -> Result<ParsedLog> {
    match format {
        InputFormat::Csv => parse_csv(source, columns),
        InputFormat::Jsonl => parse_jsonl(source),
    }
}

fn parse_csv<R: Read>(source: R, columns: &ColumnMap) -> Result<ParsedLog> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::config(format!("input has no column named `{name}`")))
    };
    let action = index(&columns.basic_action)?;
    let ts = index(&columns.timestamp)?;
    let user = index(&columns.username)?;
    let path: Vec<usize> = columns.path.iter().map(|c| index(c)).collect::<Result<_>>()?;

    let mut log = ParsedLog::default();
    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(csv_error(e)),
            Err(_) => {
                log.malformed += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(i);
        let record = match (field(action), field(ts), field(user)) {
            (Some(a), Some(t), Some(u)) => path
                .iter()
                .map(|&i| field(i))
                .collect::<Option<Vec<_>>>()
                .and_then(|p| make_record(a, t, u, split_path(p))),
            _ => None,
        };
        match record {
            Some(r) => log.records.push(r),
            None => log.malformed += 1,
        }
    }
    Ok(log)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::config(format!("unreadable CSV header: {other:?}")),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonPath {
    Parts(Vec<String>),
    Joined(String),
}

#[derive(Deserialize)]
struct JsonRecord {
    basic_action: String,
    timestamp: String,
    username: String,
    path_components: JsonPath,
}

fn parse_jsonl<R: Read>(source: R) -> Result<ParsedLog> {
    let mut log = ParsedLog::default();
    for line in BufReader::new(source).lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                log.malformed += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str::<JsonRecord>(&line).ok().and_then(|r| {
            let path = match &r.path_components {
                JsonPath::Parts(p) => split_path(p.iter().map(String::as_str)),
                JsonPath::Joined(s) => split_path([s.as_str()]),
            };
            make_record(&r.basic_action, &r.timestamp, &r.username, path)
        });
        match record {
            Some(r) => log.records.push(r),
            None => log.malformed += 1,
        }
    }
    Ok(log)
}

pub fn filter_nav_actions<I>(records: I) -> impl Iterator<Item = RawLogRecord>
where
    I: IntoIterator<Item = RawLogRecord>,
{
    records.into_iter().filter(RawLogRecord::is_navigation)
}

/// Token vocabulary. IDs run `1..=len()`; 0 is reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
    homepage_id: usize,
}

impl Vocab {
    /// Builds a vocabulary from names listed in ID order (first name is ID 1).
    pub fn from_names(names: Vec<String>, homepage_id: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name == HOMEPAGE_KEY {
                return Err(Error::Vocab(format!("node name `{HOMEPAGE_KEY}` is reserved")));
            }
            if ids.insert(name.clone(), i + 1).is_some() {
                return Err(Error::Vocab(format!("duplicate node name `{name}`")));
            }
        }
        if homepage_id == 0 || homepage_id > names.len() {
            return Err(Error::Vocab(format!(
                "homepage id {homepage_id} outside 1..={}",
                names.len()
            )));
        }
        Ok(Vocab {
            names,
            ids,
            homepage_id,
        })
    }

    /// Number of real tokens, |T|.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn homepage_id(&self) -> usize {
        self.homepage_id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.names.get(i)).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// JSON object of `name: id` in ID order, then the homepage entry.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        for (i, name) in self.names.iter().enumerate() {
            let key = serde_json::to_string(name).expect("string serializes");
            let _ = writeln!(out, "  {key}: {},", i + 1);
        }
        let _ = writeln!(out, "  \"{HOMEPAGE_KEY}\": {}", self.homepage_id);
        out.push_str("}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::Vocab(format!("invalid vocab JSON: {e}")))?;
        let mut homepage = None;
        let mut entries = Vec::with_capacity(map.len());
        for (key, value) in map {
            let id = value
                .as_u64()
                .ok_or_else(|| Error::Vocab(format!("id of `{key}` is not a non-negative integer")))?
                as usize;
            if key == HOMEPAGE_KEY {
                homepage = Some(id);
            } else {
                entries.push((id, key));
            }
        }
        entries.sort();
        for (i, (id, name)) in entries.iter().enumerate() {
            if *id != i + 1 {
                return Err(Error::Vocab(format!("ids are not consecutive from 1 (`{name}` has {id})")));
            }
        }
        let homepage = homepage.ok_or_else(|| Error::Vocab(format!("missing `{HOMEPAGE_KEY}` entry")))?;
        Vocab::from_names(entries.into_iter().map(|(_, n)| n).collect(), homepage)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Vocab::from_json(&fs::read_to_string(path)?)
    }
}

/// Numbers node names in first-occurrence order. The homepage takes ID 1
/// when it never occurs in `records`.
pub fn build_vocab<'a, I>(records: I, homepage_name: &str) -> Vocab
where
    I: IntoIterator<Item = &'a RawLogRecord>,
{
    let mut names: Vec<String> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for record in records {
        let name = record.node_name();
        if !seen.contains_key(&name) {
            seen.insert(name.clone(), names.len() + 1);
            names.push(name);
        }
    }
    let homepage_id = match seen.get(homepage_name) {
        Some(&id) => id,
        None => {
            names.insert(0, homepage_name.to_string());
            1
        }
    };
    Vocab::from_names(names, homepage_id).expect("names are unique and homepage registered")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySequence {
    pub user: String,
    pub tokens: Vec<usize>,
}

impl TrajectorySequence {
    /// Number of non-padding tokens.
    pub fn len(&self) -> usize {
        self.tokens.iter().position(|&t| t == PADDING_ID).unwrap_or(self.tokens.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the padded-trajectory invariants against a vocabulary.
    pub fn validate(&self, vocab: &Vocab, max_seq_len: usize) -> Result<()> {
        if self.tokens.len() != max_seq_len {
            return Err(Error::Vocab(format!(
                "sequence for `{}` has {} tokens, expected {max_seq_len}",
                self.user,
                self.tokens.len()
            )));
        }
        if self.tokens.first() != Some(&vocab.homepage_id()) {
            return Err(Error::Vocab(format!("sequence for `{}` does not start at the homepage", self.user)));
        }
        let n = self.len();
        if self.tokens[n..].iter().any(|&t| t != PADDING_ID) {
            return Err(Error::Vocab(format!("sequence for `{}` has tokens after padding", self.user)));
        }
        if let Some(&bad) = self.tokens[..n].iter().find(|&&t| t > vocab.len()) {
            return Err(Error::Vocab(format!("token {bad} outside vocabulary of {}", vocab.len())));
        }
        Ok(())
    }
}

/// Groups records by user (in order of each user's first record), sorts
/// each group by timestamp with file order breaking ties, prepends the
/// homepage unless already first, keeps the earliest `max_seq_len` tokens
/// and right-pads with 0.
pub fn assemble_sequences(
    records: &[RawLogRecord],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<TrajectorySequence>> {
    if max_seq_len == 0 {
        return Err(Error::config("max sequence length must be positive"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&RawLogRecord>> = HashMap::new();
    for record in records {
        groups
            .entry(&record.username)
            .or_insert_with(|| {
                order.push(&record.username);
                Vec::new()
            })
            .push(record);
    }
    let mut out = Vec::with_capacity(order.len());
    for user in order {
        let mut events = groups.remove(user).expect("grouped");
        events.sort_by_key(|r| r.timestamp);
        let mut tokens = Vec::with_capacity(events.len() + 1);
        for r in events {
            let name = r.node_name();
            let id = vocab
                .id(&name)
                .ok_or_else(|| Error::Vocab(format!("unknown course node `{name}`")))?;
            tokens.push(id);
        }
        if tokens.first() != Some(&vocab.homepage_id()) {
            tokens.insert(0, vocab.homepage_id());
        }
        tokens.truncate(max_seq_len);
        tokens.resize(max_seq_len, PADDING_ID);
        out.push(TrajectorySequence {
            user: user.to_string(),
            tokens,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SequenceHeader {
    format: String,
    version: u32,
    max_seq_len: usize,
}

const SEQUENCE_FORMAT: &str = "trajnet-sequences";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceSet {
    pub max_seq_len: usize,
    pub sequences: Vec<TrajectorySequence>,
}

impl SequenceSet {
    /// Largest token ID present.
    pub fn max_token(&self) -> usize {
        self.sequences
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// JSONL: a header line, then one `{"user":…,"tokens":[…]}` per sequence.
pub fn write_sequences<W: Write>(mut out: W, max_seq_len: usize, sequences: &[TrajectorySequence]) -> Result<()> {
    let header = SequenceHeader {
        format: SEQUENCE_FORMAT.into(),
        version: 1,
        max_seq_len,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for s in sequences {
        if s.tokens.len() != max_seq_len {
            return Err(Error::config(format!(
                "sequence for `{}` has {} tokens, expected {max_seq_len}",
                s.user,
                s.tokens.len()
            )));
        }
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sequences_file(path: &Path, max_seq_len: usize, sequences: &[TrajectorySequence]) -> Result<()> {
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    write_sequences(file, max_seq_len, sequences)
}

pub fn read_sequences<R: Read>(source: R, path: &Path) -> Result<SequenceSet> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(source).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))??;
    let header: SequenceHeader =
        serde_json::from_str(&header).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != SEQUENCE_FORMAT || header.version != 1 {
        return Err(parse_err(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut sequences = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: TrajectorySequence =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if seq.tokens.len() != header.max_seq_len {
            return Err(parse_err(
                line_no,
                format!("{} tokens, expected {}", seq.tokens.len(), header.max_seq_len),
            ));
        }
        sequences.push(seq);
    }
    Ok(SequenceSet {
        max_seq_len: header.max_seq_len,
        sequences,
    })
}

pub fn read_sequences_file(path: &Path) -> Result<SequenceSet> {
    read_sequences(fs::File::open(path)?, path)
}

/// Record counts reported by [`run_pipeline`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestSummary {
    pub total: usize,
    pub malformed: usize,
    pub navigation: usize,
    pub vocab_size: usize,
    pub sequences: usize,
}

/// Parse, filter, number and assemble in one pass.
pub fn run_pipeline<R: Read>(
    source: R,
    format: InputFormat,
    columns: &ColumnMap,
    homepage_name: &str,
    max_seq_len: usize,
) -> Result<(Vocab, Vec<TrajectorySequence>, IngestSummary)> {
    let parsed = parse_records(source, format, columns)?;
    let total = parsed.records.len() + parsed.malformed;
    let nav: Vec<RawLogRecord> = filter_nav_actions(parsed.records).collect();
    let vocab = build_vocab(&nav, homepage_name);
    let sequences = assemble_sequences(&nav, &vocab, max_seq_len)?;
    let summary = IngestSummary {
        total,
        malformed: parsed.malformed,
        navigation: nav.len(),
        vocab_size: vocab.len(),
        sequences: sequences.len(),
    };
    Ok((vocab, sequences, summary))
}
