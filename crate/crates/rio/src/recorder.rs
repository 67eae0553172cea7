//! Episode recording into the chunked RIOE container, reload, flat export
//! and cross-embodiment mixing.
//!
//! Layout of a container (all integers little endian):
//!
//! ```text
//! "RIOE" | u16 version | u32 header_len | header JSON
//! chunk* (deflate streams)
//! footer JSON | u64 footer_offset | u32 footer_len | "RIOF"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::{Compression, Crc};
use rio_core::codec::{decode_payload, encode_payload, CodecError};
use rio_core::morphology::ActionLayout;
use rio_core::step::{StepRecord, UnitRules, UnitViolation};
use rio_core::{DType, Field, Payload, SchemaDescriptor, SchemaError, Value};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"RIOE";
pub const FOOTER_MAGIC: &[u8; 4] = b"RIOF";
pub const VERSION: u16 = 1;
pub const FORMAT: &str = "rio-episode";
pub const COMPRESSOR: &str = "deflate";
pub const CHUNK_BUDGET: usize = 4 << 20;
/// Bytes after the footer JSON.
pub const TRAILER_BYTES: usize = 16;
pub const PREAMBLE_BYTES: usize = 10;
pub const STEPS_STREAM: &str = "steps";
pub const OBSERVATION_STREAM: &str = "observation";
pub const ACTION_STREAM: &str = "action";
pub const EPISODE_EXT: &str = "rioe";

pub const FLAT_FORMAT: &str = "rio-flat";
pub const FLAT_VERSION: u32 = 1;
pub const FLAT_ROWS: &str = "steps.csv";
pub const FLAT_META: &str = "dataset.json";

#[derive(Debug, thiserror::Error)]
pub enum RecorderError {
    #[error("step does not match the episode schema: {0}")]
    SchemaMismatch(String),
    #[error("timestep {got} does not follow {last}")]
    NonMonotoneTimestep { last: u64, got: u64 },
    #[error(transparent)]
    UnitViolation(#[from] UnitViolation),
    #[error("cannot finalize an episode with no steps")]
    Empty,
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("container version {found}, this build reads {expected}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("datasets have incompatible versions: {0}")]
    IncompatibleVersions(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn corrupt(msg: impl Into<String>) -> RecorderError {
    RecorderError::CorruptContainer(msg.into())
}

impl From<SchemaError> for RecorderError {
    fn from(e: SchemaError) -> Self {
        RecorderError::SchemaMismatch(e.to_string())
    }
}

impl From<CodecError> for RecorderError {
    fn from(e: CodecError) -> Self {
        RecorderError::SchemaMismatch(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub name: String,
    /// Fields packed in each fixed-size row. Empty for the steps stream,
    /// which holds one JSON line per step.
    pub fields: Vec<String>,
    pub row_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format: String,
    pub version: u16,
    pub embodiment: String,
    pub instruction: String,
    pub compressor: String,
    pub chunk_budget: usize,
    pub observation: Vec<Field>,
    pub action: Vec<Field>,
    pub streams: Vec<StreamInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub stream: String,
    pub first_step: u64,
    pub steps: u64,
    pub offset: u64,
    pub length: u64,
    pub raw_length: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerFooter {
    pub steps: u64,
    pub duration_ns: u64,
    pub chunks: Vec<ChunkEntry>,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    timestep: u64,
    instruction: String,
    metadata: BTreeMap<String, String>,
}

/// What an episode holds, fixed when the writer opens.
#[derive(Clone, Debug)]
pub struct EpisodeMeta {
    pub embodiment: String,
    pub instruction: String,
    pub observation: SchemaDescriptor,
    pub action: SchemaDescriptor,
}

impl EpisodeMeta {
    pub fn for_env(env: &crate::station::Env, instruction: &str) -> Self {
        EpisodeMeta {
            embodiment: env.kind().name().to_string(),
            instruction: instruction.to_string(),
            observation: env.observation_schema().clone(),
            action: action_schema(env.action_layout()),
        }
    }
}

/// One `f64[arity]` field per action segment.
pub fn action_schema(layout: &ActionLayout) -> SchemaDescriptor {
    let fields = layout.segments().iter().map(|(role, n)| Field::new(role.clone(), DType::F64, &[*n])).collect();
    SchemaDescriptor::new(fields).expect("action roles are unique")
}

fn is_image(f: &Field) -> bool {
    f.name.starts_with("image_") && f.dtype == DType::U8
}

struct RowStream {
    name: String,
    schema: SchemaDescriptor,
    buf: Vec<u8>,
    first_step: u64,
    rows: u64,
}

impl RowStream {
    fn new(name: &str, schema: SchemaDescriptor) -> Self {
        RowStream { name: name.to_string(), schema, buf: Vec::new(), first_step: 0, rows: 0 }
    }

    fn info(&self) -> StreamInfo {
        let row_bytes = if self.name == STEPS_STREAM { 0 } else { self.schema.payload_size() };
        StreamInfo { name: self.name.clone(), fields: self.schema.fields().iter().map(|f| f.name.clone()).collect(), row_bytes }
    }
}

/// Streams an episode to disk. Chunks are written as soon as a stream's
/// buffer reaches the chunk budget; [`EpisodeWriter::finalize`] flushes
/// the rest and writes the footer.
pub struct EpisodeWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
    offset: u64,
    header: ContainerHeader,
    observation: SchemaDescriptor,
    action: SchemaDescriptor,
    streams: Vec<RowStream>,
    chunks: Vec<ChunkEntry>,
    rules: UnitRules,
    budget: usize,
    steps: u64,
    last_timestep: Option<u64>,
    first_ts: Option<i64>,
    last_ts: i64,
}

impl EpisodeWriter {
    pub fn create(path: impl AsRef<Path>, meta: EpisodeMeta) -> Result<Self, RecorderError> {
        Self::with_budget(path, meta, CHUNK_BUDGET)
    }

    pub fn with_budget(path: impl AsRef<Path>, meta: EpisodeMeta, budget: usize) -> Result<Self, RecorderError> {
        let path = path.as_ref().to_path_buf();
        let mut streams = vec![RowStream::new(STEPS_STREAM, SchemaDescriptor::empty())];
        streams.push(RowStream::new(OBSERVATION_STREAM, meta.observation.filter(|f| !is_image(f))));
        streams.push(RowStream::new(ACTION_STREAM, meta.action.clone()));
        for f in meta.observation.fields().iter().filter(|f| is_image(f)) {
            streams.push(RowStream::new(&f.name, SchemaDescriptor::new(vec![f.clone()])?));
        }
        let header = ContainerHeader {
            format: FORMAT.into(),
            version: VERSION,
            embodiment: meta.embodiment,
            instruction: meta.instruction,
            compressor: COMPRESSOR.into(),
            chunk_budget: budget,
            observation: meta.observation.fields().to_vec(),
            action: meta.action.fields().to_vec(),
            streams: streams.iter().map(RowStream::info).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        let mut out = BufWriter::new(fs::File::create(&path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        Ok(EpisodeWriter {
            path,
            out,
            offset: (PREAMBLE_BYTES + json.len()) as u64,
            header,
            observation: meta.observation,
            action: meta.action,
            streams,
            chunks: Vec::new(),
            rules: UnitRules::default(),
            budget: budget.max(1),
            steps: 0,
            last_timestep: None,
            first_ts: None,
            last_ts: 0,
        })
    }

    pub fn with_rules(mut self, rules: UnitRules) -> Self {
        self.rules = rules;
        self
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn record_step(&mut self, s: &StepRecord) -> Result<(), RecorderError> {
        if let Some(last) = self.last_timestep {
            if s.timestep <= last {
                return Err(RecorderError::NonMonotoneTimestep { last, got: s.timestep });
            }
        }
        self.observation.check(&s.observation)?;
        self.action.check(&s.action)?;
        self.rules.check(s)?;

        for i in 0..self.streams.len() {
            let st = &mut self.streams[i];
            if st.rows == 0 {
                st.first_step = self.steps;
            }
            if st.name == STEPS_STREAM {
                let line = StepLine { timestep: s.timestep, instruction: s.instruction.clone(), metadata: s.metadata.clone() };
                serde_json::to_writer(&mut st.buf, &line).map_err(std::io::Error::other)?;
                st.buf.push(b'\n');
            } else {
                let src = if st.name == ACTION_STREAM { &s.action } else { &s.observation };
                let part: Payload =
                    st.schema.fields().iter().map(|f| (f.name.clone(), src[&f.name].clone())).collect();
                st.buf.extend_from_slice(&encode_payload(&st.schema, &part)?);
            }
            st.rows += 1;
            if st.buf.len() >= self.budget {
                self.flush_stream(i)?;
            }
        }
        let ts = s.observation.get("timestamp_ns").and_then(Value::as_i64).unwrap_or(0);
        self.first_ts.get_or_insert(ts);
        self.last_ts = ts;
        self.last_timestep = Some(s.timestep);
        self.steps += 1;
        Ok(())
    }

    fn flush_stream(&mut self, i: usize) -> Result<(), RecorderError> {
        let st = &mut self.streams[i];
        if st.rows == 0 {
            return Ok(());
        }
        let raw = std::mem::take(&mut st.buf);
        let mut crc = Crc::new();
        crc.update(&raw);
        let mut enc = DeflateEncoder::new(Vec::with_capacity(raw.len() / 4), Compression::default());
        enc.write_all(&raw)?;
        let packed = enc.finish()?;
        self.out.write_all(&packed)?;
        self.chunks.push(ChunkEntry {
            stream: st.name.clone(),
            first_step: st.first_step,
            steps: st.rows,
            offset: self.offset,
            length: packed.len() as u64,
            raw_length: raw.len() as u64,
            crc32: crc.sum(),
        });
        self.offset += packed.len() as u64;
        st.rows = 0;
        st.buf = raw;
        st.buf.clear();
        Ok(())
    }

    /// Flushes all streams, writes the footer and closes the file.
    pub fn finalize(mut self) -> Result<EpisodeSummary, RecorderError> {
        if self.steps == 0 {
            drop(self.out);
            let _ = fs::remove_file(&self.path);
            return Err(RecorderError::Empty);
        }
        for i in 0..self.streams.len() {
            self.flush_stream(i)?;
        }
        let footer = ContainerFooter {
            steps: self.steps,
            duration_ns: (self.last_ts - self.first_ts.unwrap_or(self.last_ts)).max(0) as u64,
            chunks: std::mem::take(&mut self.chunks),
        };
        let json = serde_json::to_vec(&footer).map_err(std::io::Error::other)?;
        self.out.write_all(&json)?;
        self.out.write_all(&self.offset.to_le_bytes())?;
        self.out.write_all(&(json.len() as u32).to_le_bytes())?;
        self.out.write_all(FOOTER_MAGIC)?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        let bytes = self.offset + json.len() as u64 + TRAILER_BYTES as u64;
        Ok(EpisodeSummary { path: self.path, steps: footer.steps, duration_ns: footer.duration_ns, bytes, chunks: footer.chunks.len() })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeSummary {
    pub path: PathBuf,
    pub steps: u64,
    pub duration_ns: u64,
    pub bytes: u64,
    pub chunks: usize,
}

/// A container read back from disk.
#[derive(Clone, Debug)]
pub struct Episode {
    pub header: ContainerHeader,
    pub footer: ContainerFooter,
    pub steps: Vec<StepRecord>,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses header and footer without touching the chunks.
pub fn read_index(bytes: &[u8]) -> Result<(ContainerHeader, ContainerFooter, usize), RecorderError> {
    if bytes.len() < PREAMBLE_BYTES + TRAILER_BYTES || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(RecorderError::VersionMismatch { expected: VERSION, found: version });
    }
    let header_end = PREAMBLE_BYTES + u32_at(bytes, 6) as usize;
    if header_end > bytes.len() - TRAILER_BYTES {
        return Err(corrupt("header runs past the end of file"));
    }
    let header: ContainerHeader =
        serde_json::from_slice(&bytes[PREAMBLE_BYTES..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    let t = bytes.len() - TRAILER_BYTES;
    if &bytes[t + 12..] != FOOTER_MAGIC {
        return Err(corrupt("missing footer (truncated file?)"));
    }
    let footer_offset = u64::from_le_bytes(bytes[t..t + 8].try_into().unwrap()) as usize;
    let footer_len = u32_at(bytes, t + 8) as usize;
    if footer_offset < header_end || footer_offset.checked_add(footer_len) != Some(t) {
        return Err(corrupt("footer offset out of range"));
    }
    let footer: ContainerFooter =
        serde_json::from_slice(&bytes[footer_offset..t]).map_err(|e| corrupt(format!("footer: {e}")))?;
    for c in &footer.chunks {
        let end = c.offset.checked_add(c.length);
        if (c.offset as usize) < header_end || end.is_none_or(|e| e as usize > footer_offset) {
            return Err(corrupt(format!("chunk of `{}` at {} outside the chunk area", c.stream, c.offset)));
        }
    }
    Ok((header, footer, footer_offset))
}

fn inflate(bytes: &[u8], c: &ChunkEntry) -> Result<Vec<u8>, RecorderError> {
    let src = &bytes[c.offset as usize..(c.offset + c.length) as usize];
    let mut raw = Vec::with_capacity(c.raw_length as usize);
    DeflateDecoder::new(src).read_to_end(&mut raw).map_err(|e| corrupt(format!("chunk of `{}`: {e}", c.stream)))?;
    let mut crc = Crc::new();
    crc.update(&raw);
    if raw.len() as u64 != c.raw_length || crc.sum() != c.crc32 {
        return Err(corrupt(format!("chunk of `{}` at {} fails its checksum", c.stream, c.offset)));
    }
    Ok(raw)
}

/// Decoded rows of one stream, in step order.
fn stream_rows(bytes: &[u8], footer: &ContainerFooter, info: &StreamInfo) -> Result<Vec<Vec<u8>>, RecorderError> {
    let mut rows = Vec::with_capacity(footer.steps as usize);
    for c in footer.chunks.iter().filter(|c| c.stream == info.name) {
        if c.first_step != rows.len() as u64 {
            return Err(corrupt(format!("stream `{}` chunk starts at step {}, expected {}", info.name, c.first_step, rows.len())));
        }
        let raw = inflate(bytes, c)?;
        let before = rows.len();
        if info.row_bytes == 0 {
            rows.extend(raw.split(|b| *b == b'\n').filter(|l| !l.is_empty()).map(<[u8]>::to_vec));
        } else {
            if raw.len() % info.row_bytes != 0 {
                return Err(corrupt(format!("stream `{}` chunk is not whole rows", info.name)));
            }
            rows.extend(raw.chunks_exact(info.row_bytes).map(<[u8]>::to_vec));
        }
        if (rows.len() - before) as u64 != c.steps {
            return Err(corrupt(format!("stream `{}` chunk holds {} rows, index says {}", info.name, rows.len() - before, c.steps)));
        }
    }
    if rows.len() as u64 != footer.steps {
        return Err(corrupt(format!("stream `{}` has {} rows for {} steps", info.name, rows.len(), footer.steps)));
    }
    Ok(rows)
}

pub fn load(path: impl AsRef<Path>) -> Result<Episode, RecorderError> {
    load_bytes(&fs::read(path)?)
}

pub fn load_bytes(bytes: &[u8]) -> Result<Episode, RecorderError> {
    let (header, footer, _) = read_index(bytes)?;
    if header.compressor != COMPRESSOR {
        return Err(corrupt(format!("unknown compressor `{}`", header.compressor)));
    }
    let obs_schema = SchemaDescriptor::new(header.observation.clone()).map_err(|e| corrupt(e.to_string()))?;
    let act_schema = SchemaDescriptor::new(header.action.clone()).map_err(|e| corrupt(e.to_string()))?;
    let n = footer.steps as usize;
    let mut steps: Vec<StepRecord> = (0..n)
        .map(|_| StepRecord {
            timestep: 0,
            instruction: String::new(),
            observation: Payload::new(),
            action: Payload::new(),
            metadata: BTreeMap::new(),
        })
        .collect();
    for info in &header.streams {
        let rows = stream_rows(bytes, &footer, info)?;
        if info.name == STEPS_STREAM {
            for (s, row) in steps.iter_mut().zip(rows) {
                let line: StepLine = serde_json::from_slice(&row).map_err(|e| corrupt(format!("step line: {e}")))?;
                s.timestep = line.timestep;
                s.instruction = line.instruction;
                s.metadata = line.metadata;
            }
            continue;
        }
        let (source, is_action) =
            if info.name == ACTION_STREAM { (&act_schema, true) } else { (&obs_schema, false) };
        let schema = source.filter(|f| info.fields.contains(&f.name));
        if schema.fields().len() != info.fields.len() || schema.payload_size() != info.row_bytes {
            return Err(corrupt(format!("stream `{}` disagrees with the header schema", info.name)));
        }
        for (s, row) in steps.iter_mut().zip(rows) {
            let part = decode_payload(&schema, &row).map_err(|e| corrupt(e.to_string()))?;
            if is_action { &mut s.action } else { &mut s.observation }.extend(part);
        }
    }
    Ok(Episode { header, footer, steps })
}

/// Container files in `dir`, sorted by name.
pub fn episode_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, RecorderError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EPISODE_EXT))
        .collect();
    paths.sort();
    Ok(paths)
}

/// First unused `episode_NNNN.rioe` path in `dir`.
pub fn next_episode_path(dir: impl AsRef<Path>) -> Result<PathBuf, RecorderError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut i = 0;
    loop {
        let p = dir.join(format!("episode_{i:04}.{EPISODE_EXT}"));
        if !p.exists() {
            return Ok(p);
        }
        i += 1;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecordReport {
    pub episode: EpisodeSummary,
    pub teleop: crate::teleop::TeleopReport,
}

/// Runs the teleop loop and records every step into a new episode in
/// `out_dir`.
pub fn record(
    station: &mut crate::station::RunningStation,
    opts: &crate::teleop::TeleopOptions,
    source: crate::teleop::TeleopSource,
    out_dir: impl AsRef<Path>,
) -> Result<RecordReport, Box<dyn std::error::Error + Send + Sync>> {
    let path = next_episode_path(out_dir)?;
    let mut writer = EpisodeWriter::create(&path, EpisodeMeta::for_env(station.env_ref(), &opts.instruction))?;
    let teleop = crate::teleop::run_teleop(station, opts, source, |s| writer.record_step(s).map_err(|e| e.to_string()))?;
    let episode = writer.finalize()?;
    Ok(RecordReport { episode, teleop })
}

/// Column names of one flattened field.
pub fn flat_columns(prefix: &str, f: &Field) -> Vec<String> {
    let n = f.element_count();
    if f.shape.is_empty() {
        vec![format!("{prefix}{}", f.name)]
    } else {
        (0..n).map(|i| format!("{prefix}{}_{i}", f.name)).collect()
    }
}

fn flat_cells(v: &Value) -> Vec<String> {
    match v {
        Value::F64 { data, .. } => data.iter().map(|x| x.to_string()).collect(),
        Value::I64 { data, .. } => data.iter().map(|x| x.to_string()).collect(),
        Value::U8 { data, .. } => data.iter().map(|x| x.to_string()).collect(),
        Value::Text(s) => vec![s.clone()],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatDataset {
    pub format: String,
    pub version: u32,
    /// Embodiment of every row; `mixed` after [`mix`].
    pub embodiment: String,
    pub columns: Vec<String>,
    pub rows: u64,
    pub episodes: Vec<String>,
    /// Observation fields left out of the table (camera frames).
    #[serde(default)]
    pub omitted: Vec<String>,
    /// Empty cells stand for missing values.
    #[serde(default)]
    pub null: String,
}

/// Flattens every episode in `episodes` into one CSV row per step.
/// Numeric arrays become one column per element (`joint_pos_0`, ...);
/// actions are prefixed with `action_`. Camera frames are not exported.
pub fn export(episodes: &[PathBuf], out_dir: impl AsRef<Path>) -> Result<FlatDataset, RecorderError> {
    let out_dir = out_dir.as_ref();
    let mut loaded = Vec::new();
    for p in episodes {
        loaded.push((p, load(p)?));
    }
    let first = loaded.first().map(|(_, e)| e.header.clone()).ok_or_else(|| corrupt("no episodes to export"))?;
    for (p, e) in &loaded {
        if e.header.observation != first.observation || e.header.action != first.action {
            return Err(RecorderError::SchemaMismatch(format!("{} has a different schema", p.display())));
        }
    }
    let obs: Vec<&Field> = first.observation.iter().filter(|f| !is_image(f)).collect();
    let mut columns: Vec<String> = ["episode", "timestep", "instruction"].map(String::from).to_vec();
    for f in &obs {
        columns.extend(flat_columns("", f));
    }
    for f in &first.action {
        columns.extend(flat_columns("action_", f));
    }

    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(FLAT_ROWS))?;
    w.write_record(&columns)?;
    let mut rows = 0;
    let mut names = Vec::new();
    for (p, e) in &loaded {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for s in &e.steps {
            let mut row = vec![name.clone(), s.timestep.to_string(), s.instruction.clone()];
            for f in &obs {
                row.extend(flat_cells(&s.observation[&f.name]));
            }
            for f in &first.action {
                row.extend(flat_cells(&s.action[&f.name]));
            }
            w.write_record(&row)?;
            rows += 1;
        }
        names.push(name);
    }
    w.flush()?;
    let ds = FlatDataset {
        format: FLAT_FORMAT.into(),
        version: FLAT_VERSION,
        embodiment: first.embodiment.clone(),
        columns,
        rows,
        episodes: names,
        omitted: first.observation.iter().filter(|f| is_image(f)).map(|f| f.name.clone()).collect(),
        null: String::new(),
    };
    write_meta(out_dir, &ds)?;
    Ok(ds)
}

fn write_meta(dir: &Path, ds: &FlatDataset) -> Result<(), RecorderError> {
    let json = serde_json::to_vec_pretty(ds).map_err(std::io::Error::other)?;
    fs::write(dir.join(FLAT_META), json)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<FlatDataset, RecorderError> {
    let dir = dir.as_ref();
    let ds: FlatDataset = serde_json::from_slice(&fs::read(dir.join(FLAT_META))?)
        .map_err(|e| RecorderError::IncompatibleVersions(format!("{}: {e}", dir.display())))?;
    if ds.format != FLAT_FORMAT || ds.version != FLAT_VERSION {
        return Err(RecorderError::IncompatibleVersions(format!(
            "{} is {} v{}, expected {FLAT_FORMAT} v{FLAT_VERSION}",
            dir.display(),
            ds.format,
            ds.version
        )));
    }
    Ok(ds)
}

pub const EMBODIMENT_COLUMN: &str = "embodiment";
pub const SOURCE_COLUMN: &str = "source";

/// Concatenates flat datasets. The result has the union of their columns
/// (first appearance order) plus `embodiment` and `source`; cells a source
/// lacks are left empty.
pub fn mix(datasets: &[PathBuf], out_dir: impl AsRef<Path>) -> Result<FlatDataset, RecorderError> {
    let out_dir = out_dir.as_ref();
    let mut metas = Vec::new();
    for d in datasets {
        metas.push(read_dataset(d)?);
    }
    let mut columns = vec![EMBODIMENT_COLUMN.to_string(), SOURCE_COLUMN.to_string()];
    for m in &metas {
        for c in &m.columns {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let index: BTreeMap<&str, usize> = columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(FLAT_ROWS))?;
    w.write_record(&columns)?;
    let mut rows = 0;
    let mut episodes = Vec::new();
    let mut omitted = Vec::new();
    for (d, m) in datasets.iter().zip(&metas) {
        let source = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut r = csv::Reader::from_path(d.join(FLAT_ROWS))?;
        let slots: Vec<usize> = r.headers()?.iter().map(|h| index.get(h).copied().unwrap_or(usize::MAX)).collect();
        for rec in r.records() {
            let rec = rec?;
            let mut row = vec![String::new(); columns.len()];
            row[0] = m.embodiment.clone();
            row[1] = source.clone();
            for (cell, &slot) in rec.iter().zip(&slots) {
                if slot != usize::MAX {
                    row[slot] = cell.to_string();
                }
            }
            w.write_record(&row)?;
            rows += 1;
        }
        episodes.extend(m.episodes.iter().map(|e| format!("{source}/{e}")));
        omitted.extend(m.omitted.iter().filter(|o| !omitted.contains(*o)).cloned().collect::<Vec<_>>());
    }
    w.flush()?;
    let embodiments: Vec<&str> = metas.iter().map(|m| m.embodiment.as_str()).collect();
    let ds = FlatDataset {
        format: FLAT_FORMAT.into(),
        version: FLAT_VERSION,
        embodiment: if embodiments.windows(2).all(|p| p[0] == p[1]) {
            embodiments.first().copied().unwrap_or_default().to_string()
        } else {
            "mixed".into()
        },
        columns,
        rows,
        episodes,
        omitted,
        null: String::new(),
    };
    write_meta(out_dir, &ds)?;
    Ok(ds)
}

/// Reads a flat dataset's rows as maps from column name to cell.
pub fn read_rows(dir: impl AsRef<Path>) -> Result<Vec<BTreeMap<String, String>>, RecorderError> {
    let mut r = csv::Reader::from_path(dir.as_ref().join(FLAT_ROWS))?;
    let headers = r.headers()?.clone();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(headers.iter().zip(rec.iter()).map(|(h, c)| (h.to_string(), c.to_string())).collect());
    }
    Ok(out)
}
