//! Versioned on-disk artifacts.
//!
//! Every artifact is a JSON envelope `{format, version, hash, body}` where
//! `hash` is the SHA-256 of the body's canonical JSON bytes (sorted keys,
//! compact). Numeric arrays inside bodies are base64 blocks of little-endian
//! `f64`, so round-trips are bit exact. Files are written to a temporary
//! sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use hjcp_core::conformal::{CalibratedModel, CalibrationPoint};
use hjcp_core::filter::{Controller, FilterTrace};
use hjcp_core::mlp::Mlp;
use hjcp_core::State;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path} has format version {found}, this build reads up to {supported}")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("integrity check failed for {path}: stored hash {stored}, content hashes to {actual}")]
    Integrity { path: PathBuf, stored: String, actual: String },
    #[error("{path} holds a `{found}` artifact, expected `{expected}`")]
    WrongKind { path: PathBuf, expected: String, found: String },
    #[error("cannot resolve {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] hjcp_core::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> StoreError {
    StoreError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Little-endian `f64` array, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F64Block {
    pub len: usize,
    pub f64le: String,
}

impl F64Block {
    pub fn encode(values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            len: values.len(),
            f64le: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> std::result::Result<Vec<f64>, String> {
        let bytes = B64.decode(&self.f64le).map_err(|e| e.to_string())?;
        if bytes.len() != self.len * 8 {
            return Err(format!("block declares {} values but holds {} bytes", self.len, bytes.len()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Canonical bytes and hex SHA-256 of a JSON value.
pub fn canonical_hash(value: &Value) -> (Vec<u8>, String) {
    let bytes = serde_json::to_vec(value).expect("json values always serialize");
    let digest = Sha256::digest(&bytes);
    (bytes, format!("{digest:x}"))
}

/// Write `bytes` to `path` via a temporary file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path
        .file_name()
        .ok_or_else(|| format_err(path, "path has no file name"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    hash: String,
    body: Value,
}

/// Wrap `body` in an envelope of kind `format`, write it, return its hash.
pub fn write_envelope<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<String> {
    let body = serde_json::to_value(body).map_err(|e| format_err(path, e))?;
    let (_, hash) = canonical_hash(&body);
    let env = Envelope {
        format: format.to_string(),
        version: FORMAT_VERSION,
        hash: hash.clone(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&env).map_err(|e| format_err(path, e))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(hash)
}

/// Read an envelope, checking version, kind and content hash.
pub fn read_envelope<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(T, String)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let env: Envelope = serde_json::from_slice(&bytes).map_err(|e| format_err(path, e))?;
    if env.version > FORMAT_VERSION || env.version == 0 {
        return Err(StoreError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: env.version,
            supported: FORMAT_VERSION,
        });
    }
    if env.format != format {
        return Err(StoreError::WrongKind {
            path: path.to_path_buf(),
            expected: format.to_string(),
            found: env.format,
        });
    }
    let (_, actual) = canonical_hash(&env.body);
    if actual != env.hash {
        return Err(StoreError::Integrity {
            path: path.to_path_buf(),
            stored: env.hash,
            actual,
        });
    }
    let body = serde_json::from_value(env.body).map_err(|e| format_err(path, e))?;
    Ok((body, actual))
}

pub const MODEL_FORMAT: &str = "hjcp.model";
pub const CALIBRATION_FORMAT: &str = "hjcp.calibration";
pub const REPORT_FORMAT: &str = "hjcp.report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub system: String,
    pub member: usize,
    pub seed: u64,
    pub gamma: f64,
    pub sizes: Vec<usize>,
    pub center: F64Block,
    pub scale: F64Block,
    pub params: F64Block,
    /// Training settings used, as written in the run config.
    pub train_config: Value,
    pub loss_steps: Vec<usize>,
    pub losses: F64Block,
}

impl ModelArtifact {
    pub fn new(
        system: &str,
        member: usize,
        seed: u64,
        gamma: f64,
        net: &Mlp,
        losses: &[(usize, f64)],
        train_config: Value,
    ) -> Self {
        Self {
            system: system.to_string(),
            member,
            seed,
            gamma,
            sizes: net.sizes().to_vec(),
            center: F64Block::encode(net.input_center()),
            scale: F64Block::encode(net.input_scale()),
            params: F64Block::encode(net.params()),
            train_config,
            loss_steps: losses.iter().map(|l| l.0).collect(),
            losses: F64Block::encode(&losses.iter().map(|l| l.1).collect::<Vec<_>>()),
        }
    }

    pub fn network(&self) -> std::result::Result<Mlp, String> {
        Mlp::from_parts(
            self.sizes.clone(),
            self.center.decode()?,
            self.scale.decode()?,
            self.params.decode()?,
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub system: String,
    pub member: usize,
    pub model_hash: String,
    pub gamma: f64,
    pub horizon: usize,
    pub seed: u64,
    pub n: usize,
    pub state_dim: usize,
    /// Calibration states, row-major `n x state_dim`.
    pub states: F64Block,
    pub v_theta: F64Block,
    pub v_star: F64Block,
    pub alphas: Vec<f64>,
    pub quantiles: F64Block,
}

impl CalibrationArtifact {
    pub fn points(&self) -> std::result::Result<Vec<CalibrationPoint>, String> {
        let states = self.states.decode()?;
        let vt = self.v_theta.decode()?;
        let vs = self.v_star.decode()?;
        if states.len() != self.n * self.state_dim || vt.len() != self.n || vs.len() != self.n {
            return Err("calibration arrays disagree with n".into());
        }
        Ok((0..self.n)
            .map(|i| {
                let x = State::from(&states[i * self.state_dim..(i + 1) * self.state_dim]);
                CalibrationPoint::new(x, vt[i], vs[i])
            })
            .collect())
    }

    /// Rebuild the calibrated model around `value`.
    pub fn calibrated<V: hjcp_core::ValueFunction>(&self, value: V) -> std::result::Result<CalibratedModel<V>, String> {
        let points = self.points()?;
        CalibratedModel::from_points(value, &points, &self.alphas).map_err(|e| e.to_string())
    }
}

/// Artifact tree rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model_path(&self, hash: &str) -> PathBuf {
        self.root.join("models").join(format!("{hash}.model.json"))
    }

    pub fn calibration_path(&self, hash: &str) -> PathBuf {
        self.root.join("calib").join(format!("{hash}.calib.json"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn table_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.csv"))
    }

    pub fn trace_path(&self, episode: &str) -> PathBuf {
        self.root.join("traces").join(format!("{episode}.jsonl"))
    }

    pub fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id).join("manifest.json")
    }

    /// Save under the content hash; returns the hash.
    pub fn save_model(&self, model: &ModelArtifact) -> Result<String> {
        self.save_hashed(model, MODEL_FORMAT, |s, h| s.model_path(h))
    }

    pub fn load_model(&self, hash: &str) -> Result<ModelArtifact> {
        let path = self.model_path(hash);
        let (m, actual) = read_envelope::<ModelArtifact>(&path, MODEL_FORMAT)?;
        check_name(&path, hash, &actual)?;
        Ok(m)
    }

    pub fn save_calibration(&self, calib: &CalibrationArtifact) -> Result<String> {
        self.save_hashed(calib, CALIBRATION_FORMAT, |s, h| s.calibration_path(h))
    }

    pub fn load_calibration(&self, hash: &str) -> Result<CalibrationArtifact> {
        let path = self.calibration_path(hash);
        let (c, actual) = read_envelope::<CalibrationArtifact>(&path, CALIBRATION_FORMAT)?;
        check_name(&path, hash, &actual)?;
        Ok(c)
    }

    fn save_hashed<T: Serialize>(
        &self,
        body: &T,
        format: &str,
        path_of: impl Fn(&Self, &str) -> PathBuf,
    ) -> Result<String> {
        let value = serde_json::to_value(body).map_err(|e| format_err(&self.root, e))?;
        let (_, hash) = canonical_hash(&value);
        write_envelope(&path_of(self, &hash), format, &value)
    }

    pub fn write_report<T: Serialize>(&self, name: &str, body: &T) -> Result<String> {
        write_envelope(&self.report_path(name), REPORT_FORMAT, body)
    }

    pub fn read_report<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.report_path(name);
        if !path.exists() {
            return Err(StoreError::Missing(format!("report `{name}` ({})", path.display())));
        }
        Ok(read_envelope(&path, REPORT_FORMAT)?.0)
    }

    /// Write serializable rows as CSV; returns the SHA-256 of the file.
    pub fn write_table<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<String> {
        let path = self.table_path(name);
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| format_err(&path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| format_err(&path, e))?;
        atomic_write(&path, &bytes)?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }

    /// Write one episode's trace as JSON lines, one record per step.
    pub fn write_trace(&self, episode: &str, trace: &FilterTrace) -> Result<String> {
        let path = self.trace_path(episode);
        let mut bytes = Vec::new();
        for (t, s) in trace.steps.iter().enumerate() {
            let rec = TraceRecord {
                t,
                state: &s.state,
                nominal_next: &s.nominal_next,
                lower_bounds: s.lower_bounds.iter().map(|&b| finite_or_null(b)).collect(),
                controller: match s.controller {
                    Controller::Nominal => "nominal",
                    Controller::Safe => "safe",
                },
                active: s.active,
                control: &s.control,
            };
            serde_json::to_writer(&mut bytes, &rec).map_err(|e| format_err(&path, e))?;
            bytes.push(b'\n');
        }
        atomic_write(&path, &bytes)?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        let path = self.manifest_path(&manifest.run_id);
        let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| format_err(&path, e))?;
        bytes.push(b'\n');
        atomic_write(&path, &bytes)?;
        Ok(path)
    }
}

fn check_name(path: &Path, expected: &str, actual: &str) -> Result<()> {
    if expected != actual {
        return Err(StoreError::Integrity {
            path: path.to_path_buf(),
            stored: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

/// JSON has no infinities; unbounded lower bounds are written as null.
fn finite_or_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    t: usize,
    state: &'a [f64],
    nominal_next: &'a [f64],
    lower_bounds: Vec<Option<f64>>,
    controller: &'static str,
    active: Option<usize>,
    control: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: String,
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub consumed: Vec<ArtifactRef>,
    pub produced: Vec<ArtifactRef>,
    /// How trial initial states were derived, when the run rolled episodes.
    pub pairing: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
