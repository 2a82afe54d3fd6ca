//! Run manifests and model checkpoints.
//!
//! A manifest is pretty-printed JSON. A checkpoint is one JSON header line
//! followed by the parameters as little-endian `f64` bytes in base16, four
//! values per line. The header's `sha256` covers the header (without that
//! field) and the body text, so any edited byte is caught on load.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;
use crate::score::{Mlp, MlpScoreModel, TimeEmbedding};

pub const MANIFEST_VERSION: u64 = 1;
pub const CHECKPOINT_VERSION: u64 = 1;
pub const CHECKPOINT_FORMAT: &str = "diffgap-mlp";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFile {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u64,
    pub tool_version: String,
    pub created_at: String,
    pub command: String,
    pub master_seed: u64,
    pub family_name: String,
    pub family_sha256: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, family_sha256: String) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            command: command.to_string(),
            master_seed: config.seed,
            family_name: config.family.name(),
            family_sha256,
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    /// Hashes `dir/rel` and records it, replacing an earlier entry for the same path.
    pub fn record_output(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let sha256 = file_sha256(dir.join(rel))?;
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(OutputFile {
            path: rel.to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn output_hash(&self, rel: &str) -> Option<&str> {
        self.outputs.iter().find(|o| o.path == rel).map(|o| o.sha256.as_str())
    }
}

/// Rejects manifests written by a newer (or unknown) format version.
pub fn check_manifest_version(value: &Value) -> Result<()> {
    match value.get("format_version").and_then(Value::as_u64) {
        Some(MANIFEST_VERSION) => Ok(()),
        Some(found) => Err(Error::VersionSkew {
            found,
            supported: MANIFEST_VERSION,
        }),
        None => Err(Error::Corrupt {
            path: "<manifest>".into(),
            reason: "missing or non-integer format_version".into(),
        }),
    }
}

pub fn save_manifest(m: &RunManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    write_file(path, text)
}

fn parse_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.display().to_string(),
        reason,
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    check_manifest_version(&value).map_err(|e| match e {
        Error::Corrupt { reason, .. } => corrupt(reason),
        e => e,
    })?;
    serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))
}

/// Loads a manifest and verifies every listed output against its hash.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let m = parse_manifest(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    for o in &m.outputs {
        let actual = file_sha256(dir.join(&o.path))?;
        if actual != o.sha256 {
            return Err(Error::HashMismatch {
                what: o.path.clone(),
                expected: o.sha256.clone(),
                actual,
            });
        }
    }
    Ok(m)
}

/// Loads a manifest without touching its outputs.
pub fn load_manifest_unverified(path: impl AsRef<Path>) -> Result<RunManifest> {
    parse_manifest(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u64,
    widths: Vec<usize>,
    activation: String,
    embedding: TimeEmbedding,
    schedule: ScheduleSpec,
    data_dim: usize,
    n_classes: usize,
    seed: u64,
    p_uncond: f64,
    n_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256: Option<String>,
}

const VALUES_PER_LINE: usize = 4;

fn encode_body(params: &[f64]) -> String {
    let mut body = String::with_capacity(params.len() * 17);
    for chunk in params.chunks(VALUES_PER_LINE) {
        for v in chunk {
            body.push_str(&hex::encode(v.to_le_bytes()));
        }
        body.push('\n');
    }
    body
}

fn checkpoint_digest(header: &CheckpointHeader, body: &str) -> Result<String> {
    let mut unsigned = header.clone();
    unsigned.sha256 = None;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&unsigned)?.as_bytes());
    h.update(b"\n");
    h.update(body.as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Serializes a model trained against `schedule` to the checkpoint text format.
pub fn checkpoint_to_string(model: &MlpScoreModel, schedule: &ScheduleSpec) -> Result<String> {
    let params = model.mlp().params();
    let body = encode_body(&params);
    let mut header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        widths: model.mlp().widths().to_vec(),
        activation: "tanh".into(),
        embedding: model.embedding(),
        schedule: schedule.clone(),
        data_dim: model.data_dim(),
        n_classes: model.n_classes(),
        seed: model.seed(),
        p_uncond: model.p_uncond(),
        n_params: params.len(),
        sha256: None,
    };
    header.sha256 = Some(checkpoint_digest(&header, &body)?);
    let mut out = serde_json::to_string(&header)?;
    let _ = writeln!(out);
    out.push_str(&body);
    Ok(out)
}

pub fn save_checkpoint(model: &MlpScoreModel, schedule: &ScheduleSpec, path: impl AsRef<Path>) -> Result<()> {
    write_file(path, checkpoint_to_string(model, schedule)?)
}

/// Parses checkpoint text; `origin` names the source in errors.
pub fn checkpoint_from_str(text: &str, origin: &str) -> Result<(MlpScoreModel, ScheduleSpec)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: origin.to_string(),
        reason,
    };
    let (head, body) = text.split_once('\n').ok_or_else(|| corrupt("missing header line".into()))?;
    let raw: Value = serde_json::from_str(head).map_err(|e| corrupt(format!("header: {e}")))?;
    if raw.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt(format!("not a {CHECKPOINT_FORMAT} checkpoint")));
    }
    match raw.get("version").and_then(Value::as_u64) {
        Some(CHECKPOINT_VERSION) => {}
        Some(found) => {
            return Err(Error::VersionSkew {
                found,
                supported: CHECKPOINT_VERSION,
            })
        }
        None => return Err(corrupt("missing version".into())),
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| corrupt(format!("header: {e}")))?;
    let expected = header.sha256.clone().ok_or_else(|| corrupt("missing sha256".into()))?;
    let actual = checkpoint_digest(&header, body)?;
    if actual != expected {
        return Err(Error::HashMismatch {
            what: origin.to_string(),
            expected,
            actual,
        });
    }
    if header.activation != "tanh" {
        return Err(corrupt(format!("unsupported activation '{}'", header.activation)));
    }
    let mut params = Vec::with_capacity(header.n_params);
    for (i, line) in body.lines().enumerate() {
        if line.len() % 16 != 0 {
            return Err(corrupt(format!("body line {} has a partial value", i + 1)));
        }
        for k in 0..line.len() / 16 {
            let bytes = hex::decode(&line[16 * k..16 * (k + 1)]).map_err(|e| corrupt(format!("body line {}: {e}", i + 1)))?;
            let arr: [u8; 8] = bytes.try_into().expect("16 hex digits decode to 8 bytes");
            params.push(f64::from_le_bytes(arr));
        }
    }
    if params.len() != header.n_params {
        return Err(corrupt(format!("expected {} parameters, found {}", header.n_params, params.len())));
    }
    let mlp = Mlp::from_params(&header.widths, &params)?;
    let model = MlpScoreModel::from_parts(mlp, header.data_dim, header.n_classes, header.embedding, header.seed, header.p_uncond)?;
    Ok((model, header.schedule))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlpScoreModel, ScheduleSpec)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MlpScoreModel {
        let mut m = MlpScoreModel::new(2, 2, &[8, 8], 50, 3, 0.1).unwrap();
        // non-trivial parameters in every layer
        let params: Vec<f64> = (0..m.mlp().n_params()).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        let mlp = Mlp::from_params(m.mlp().widths(), &params).unwrap();
        m = MlpScoreModel::from_parts(mlp, 2, 2, m.embedding(), 3, 0.1).unwrap();
        m
    }

    fn spec() -> ScheduleSpec {
        ScheduleSpec::Linear {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_byte_stable() {
        let m = model();
        let text = checkpoint_to_string(&m, &spec()).unwrap();
        let (back, s) = checkpoint_from_str(&text, "mem").unwrap();
        assert_eq!(s, spec());
        assert_eq!(back.mlp().params(), m.mlp().params());
        assert_eq!(back.embedding(), m.embedding());
        assert_eq!(checkpoint_to_string(&back, &s).unwrap(), text);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &spec(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().0.mlp().params(), m.mlp().params());
    }

    #[test]
    fn flipped_body_byte_is_a_hash_mismatch() {
        let text = checkpoint_to_string(&model(), &spec()).unwrap();
        let head_len = text.find('\n').unwrap() + 1;
        let mut bytes = text.into_bytes();
        let i = head_len + 5;
        bytes[i] = if bytes[i] == b'0' { b'1' } else { b'0' };
        let tampered = String::from_utf8(bytes).unwrap();
        assert!(matches!(checkpoint_from_str(&tampered, "mem"), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn edited_header_is_caught() {
        let text = checkpoint_to_string(&model(), &spec()).unwrap();
        let tampered = text.replacen("\"p_uncond\":0.1", "\"p_uncond\":0.2", 1);
        assert_ne!(tampered, text);
        assert!(matches!(checkpoint_from_str(&tampered, "mem"), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn checkpoint_version_skew_and_garbage() {
        let text = checkpoint_to_string(&model(), &spec()).unwrap();
        let future = text.replacen("\"version\":1", "\"version\":7", 1);
        match checkpoint_from_str(&future, "mem") {
            Err(Error::VersionSkew { found: 7, supported: 1 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(checkpoint_from_str("not json\nabc", "mem"), Err(Error::Corrupt { .. })));
        assert!(matches!(checkpoint_from_str("", "mem"), Err(Error::Corrupt { .. })));
        let truncated = &text[..text.len() - 20];
        assert!(matches!(checkpoint_from_str(truncated, "mem"), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn manifest_roundtrip_and_hash_verification() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path().join("out/a.csv"), "x\n1\n").unwrap();
        let mut m = RunManifest::new("sample", &ExperimentConfig::default(), "abc".into());
        m.record_output(dir.path(), "out/a.csv").unwrap();
        m.record_output(dir.path(), "out/a.csv").unwrap();
        assert_eq!(m.outputs.len(), 1);
        let path = dir.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        let text = std::fs::read_to_string(&path).unwrap();
        save_manifest(&back, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);

        write_file(dir.path().join("out/a.csv"), "x\n2\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::HashMismatch { .. })));
        assert!(load_manifest_unverified(&path).is_ok());
    }

    #[test]
    fn manifest_from_the_future_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("sample", &ExperimentConfig::default(), "abc".into());
        let mut v = serde_json::to_value(&m).unwrap();
        v["format_version"] = 2.into();
        v["new_field"] = "x".into();
        let path = dir.path().join("manifest.json");
        write_file(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let e = load_manifest(&path).unwrap_err();
        assert!(matches!(e, Error::VersionSkew { found: 2, supported: 1 }));
        let msg = e.to_string();
        assert!(msg.contains('2') && msg.contains('1'));
        write_file(&path, "{").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Corrupt { .. })));
    }
}
