//! On-disk formats: tokenizer specs, modality registries, JSONL corpora,
//! digest-checked checkpoints, pathway registries and two-column tracks.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use splittrack_core::model::{Checkpoint, ModelConfig, CHECKPOINT_FORMAT_VERSION};
use splittrack_core::pathways::Pathway;
use splittrack_core::sample::{Entity, ModalityDescriptor, ModalityRegistry, MultimodalSample, Region, Split, TrackGroup};
use splittrack_core::tokenization::TokenizerSpec;

pub const TOKENIZER_FORMAT_VERSION: u32 = 1;
pub const REGISTRY_FORMAT_VERSION: u32 = 1;
pub const PATHWAY_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &str = "splittrack-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}:{line}: field `{field}`: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        msg: String,
    },
    #[error("{path}: checkpoint digest mismatch (header {expected}, payload {actual})")]
    Digest { path: PathBuf, expected: String, actual: String },
    #[error("{path}: checkpoint config differs from the requested config in `{field}`")]
    ConfigMismatch { path: PathBuf, field: String },
    #[error("{0}")]
    Core(#[from] splittrack_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, msg: impl ToString) -> FormatError {
    FormatError::Malformed {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    hex::encode(&out[..])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| malformed(path, e))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e))
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    #[serde(flatten)]
    spec: TokenizerSpec,
}

pub fn save_tokenizer(path: &Path, spec: &TokenizerSpec) -> Result<()> {
    write_json(
        path,
        &TokenizerFile {
            version: TOKENIZER_FORMAT_VERSION,
            spec: spec.clone(),
        },
    )
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerSpec> {
    let raw: Value = read_json(path)?;
    let found = raw.get("version").and_then(Value::as_u64).ok_or_else(|| malformed(path, "missing version"))?;
    if found != TOKENIZER_FORMAT_VERSION as u64 {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            found: found as u32,
            expected: TOKENIZER_FORMAT_VERSION,
        });
    }
    let file: TokenizerFile = serde_json::from_value(raw).map_err(|e| malformed(path, e))?;
    file.spec.validate()?;
    Ok(file.spec)
}

#[derive(Serialize, Deserialize)]
struct RegistryEntry {
    name: String,
    track_group: TrackGroup,
    aligned: bool,
    anchor: bool,
    /// Relative to the registry file.
    tokenizer: String,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    version: u32,
    modalities: Vec<RegistryEntry>,
}

/// Writes `path` plus one tokenizer file per modality in `tokenizers/`
/// beside it.
pub fn save_registry(path: &Path, registry: &ModalityRegistry) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut modalities = Vec::new();
    for d in &registry.modalities {
        let rel = format!("tokenizers/{}.json", d.name);
        save_tokenizer(&dir.join(&rel), &d.tokenizer)?;
        modalities.push(RegistryEntry {
            name: d.name.clone(),
            track_group: d.track_group,
            aligned: d.aligned,
            anchor: d.anchor,
            tokenizer: rel,
        });
    }
    write_json(
        path,
        &RegistryFile {
            version: REGISTRY_FORMAT_VERSION,
            modalities,
        },
    )
}

pub fn load_registry(path: &Path) -> Result<ModalityRegistry> {
    let file: RegistryFile = read_json(path)?;
    if file.version != REGISTRY_FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            found: file.version,
            expected: REGISTRY_FORMAT_VERSION,
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let modalities = file
        .modalities
        .into_iter()
        .map(|e| {
            Ok(ModalityDescriptor {
                tokenizer: load_tokenizer(&dir.join(&e.tokenizer))?,
                name: e.name,
                track_group: e.track_group,
                aligned: e.aligned,
                anchor: e.anchor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalityRegistry::new(modalities)?)
}

/// One sample per line, keys in a fixed order.
pub fn save_corpus(path: &Path, samples: &[MultimodalSample]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| malformed(path, e))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

const CORPUS_FIELDS: [&str; 6] = ["id", "entity", "cluster_id", "split", "tracks", "region_labels"];

fn field<T: for<'de> Deserialize<'de>>(obj: &serde_json::Map<String, Value>, name: &str, rec: &dyn Fn(&str, String) -> FormatError) -> std::result::Result<T, FormatError> {
    let v = obj.get(name).cloned().ok_or_else(|| rec(name, "missing".into()))?;
    serde_json::from_value(v).map_err(|e| rec(name, e.to_string()))
}

/// Parses one corpus line; errors carry the line number and offending field.
pub fn parse_corpus_line(path: &Path, line_no: usize, line: &str, registry: Option<&ModalityRegistry>) -> Result<MultimodalSample> {
    let rec = |field: &str, msg: String| FormatError::Record {
        path: path.to_path_buf(),
        line: line_no,
        field: field.to_string(),
        msg,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| rec("<record>", format!("column {}: {e}", e.column())))?;
    let obj = value.as_object().ok_or_else(|| rec("<record>", "expected an object".into()))?;
    if let Some(k) = obj.keys().find(|k| !CORPUS_FIELDS.contains(&k.as_str())) {
        return Err(rec(k, "unknown field".into()));
    }
    let tracks: BTreeMap<String, Vec<u32>> = field(obj, "tracks", &rec)?;
    let region_labels: Option<Vec<Region>> = match obj.get("region_labels") {
        None | Some(Value::Null) => None,
        Some(_) => Some(field(obj, "region_labels", &rec)?),
    };
    let sample = MultimodalSample {
        id: field(obj, "id", &rec)?,
        entity: field::<Entity>(obj, "entity", &rec)?,
        cluster_id: field(obj, "cluster_id", &rec)?,
        split: field::<Split>(obj, "split", &rec)?,
        tracks,
        region_labels,
    };
    if let Some(reg) = registry {
        if let Some(name) = sample.tracks.keys().find(|n| !reg.contains(n)) {
            return Err(rec(&format!("tracks.{name}"), "modality not in registry".into()));
        }
        sample.validate(reg).map_err(|e| rec("tracks", e.to_string()))?;
    }
    Ok(sample)
}

pub fn load_corpus(path: &Path, registry: Option<&ModalityRegistry>) -> Result<Vec<MultimodalSample>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_corpus_line(path, i + 1, &line, registry)?);
    }
    Ok(out)
}

/// Digest of a corpus as saved, independent of file location.
pub fn corpus_digest(samples: &[MultimodalSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(serde_json::to_vec(s).expect("samples serialize"));
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..])
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    sha256: String,
}

/// A one-line JSON header `{format, version, sha256}` followed by the JSON
/// payload whose digest the header records.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let payload = serde_json::to_vec(ckpt).map_err(|e| malformed(path, e))?;
    let header = CheckpointHeader {
        format: CHECKPOINT_MAGIC.into(),
        version: ckpt.format_version,
        sha256: sha256_hex(&payload),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| malformed(path, e))?;
    bytes.push(b'\n');
    bytes.extend(payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (oa, ob) = (va.as_object()?, vb.as_object()?);
    oa.iter().find(|(k, v)| ob.get(*k) != Some(v)).map(|(k, _)| k.clone())
}

/// Loads and verifies a checkpoint. With `expected`, the stored config
/// must match it field for field.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| malformed(path, "missing checkpoint header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| malformed(path, format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_MAGIC {
        return Err(malformed(path, format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != CHECKPOINT_FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            found: header.version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let payload = &bytes[nl + 1..];
    let actual = sha256_hex(payload);
    if actual != header.sha256 {
        return Err(FormatError::Digest {
            path: path.to_path_buf(),
            expected: header.sha256,
            actual,
        });
    }
    let ckpt: Checkpoint = serde_json::from_slice(payload).map_err(|e| malformed(path, e))?;
    if ckpt.format_version != header.version {
        return Err(malformed(path, "payload version differs from header"));
    }
    if let Some(want) = expected {
        if let Some(field) = config_diff(&ckpt.config, want) {
            return Err(FormatError::ConfigMismatch {
                path: path.to_path_buf(),
                field,
            });
        }
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayRecord {
    pub name: String,
    #[serde(rename = "I_req")]
    pub i_req: Vec<String>,
    #[serde(rename = "I_opt", default)]
    pub i_opt: Vec<String>,
    #[serde(rename = "T_req")]
    pub t_req: Vec<String>,
    #[serde(rename = "T_opt", default)]
    pub t_opt: Vec<String>,
    pub w: f64,
    #[serde(default = "default_optional_p")]
    pub optional_input_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub priority: BTreeMap<String, i64>,
}

fn default_optional_p() -> f64 {
    0.5
}

impl PathwayRecord {
    pub fn from_pathway(p: &Pathway) -> Self {
        let v = |s: &std::collections::BTreeSet<String>| s.iter().cloned().collect();
        Self {
            name: p.name.clone(),
            i_req: v(&p.inputs_required),
            i_opt: v(&p.inputs_optional),
            t_req: v(&p.targets_required),
            t_opt: v(&p.targets_optional),
            w: p.weight,
            optional_input_p: p.optional_input_p,
            span_fraction: p.span_fraction,
            priority: p.priority.clone(),
        }
    }

    pub fn to_pathway(&self) -> splittrack_core::Result<Pathway> {
        fn r(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        let mut p = match self.span_fraction {
            Some(f) => Pathway::spanned(&self.name, &r(&self.i_req), &r(&self.i_opt), &r(&self.t_req), &r(&self.t_opt), self.w, f)?,
            None => Pathway::new(&self.name, &r(&self.i_req), &r(&self.i_opt), &r(&self.t_req), &r(&self.t_opt), self.w)?,
        };
        p.optional_input_p = self.optional_input_p;
        p.priority = self.priority.clone();
        p.validate()?;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct PathwayFile {
    version: u32,
    pathways: Vec<PathwayRecord>,
}

pub fn save_pathways(path: &Path, pathways: &[Pathway]) -> Result<()> {
    write_json(
        path,
        &PathwayFile {
            version: PATHWAY_FORMAT_VERSION,
            pathways: pathways.iter().map(PathwayRecord::from_pathway).collect(),
        },
    )
}

pub fn load_pathways(path: &Path, registry: &ModalityRegistry) -> Result<Vec<Pathway>> {
    let file: PathwayFile = read_json(path)?;
    if file.version != PATHWAY_FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            found: file.version,
            expected: PATHWAY_FORMAT_VERSION,
        });
    }
    let pathways = file.pathways.iter().map(PathwayRecord::to_pathway).collect::<splittrack_core::Result<Vec<_>>>()?;
    splittrack_core::pathways::validate_pathways(&pathways, registry)?;
    Ok(pathways)
}

/// Parses `index<TAB>value` lines into a dense profile. Blank lines and
/// `#` comments are skipped; `NA`, `nan` or `-` values are missing, as
/// are indices never mentioned.
pub fn parse_two_column(text: &str) -> std::result::Result<Vec<Option<f64>>, String> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(format!("line {}: expected two columns", i + 1));
        };
        let idx: usize = a.parse().map_err(|_| format!("line {}: bad index {a:?}", i + 1))?;
        let value = match b {
            "NA" | "na" | "NaN" | "nan" | "-" => None,
            _ => {
                let v: f64 = b.parse().map_err(|_| format!("line {}: bad value {b:?}", i + 1))?;
                v.is_finite().then_some(v)
            }
        };
        entries.push((idx, value));
    }
    let len = entries.iter().map(|(i, _)| i + 1).max().unwrap_or(0);
    let mut out = vec![None; len];
    for (i, v) in entries {
        out[i] = v;
    }
    Ok(out)
}

pub fn read_two_column(path: &Path) -> Result<Vec<Option<f64>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_two_column(&text).map_err(|m| malformed(path, m))
}

/// Append-only JSON-lines writer for metrics records.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| malformed(&self.path, e))?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}
