use std::path::{Path, PathBuf};
use std::time::Instant;

use featalign::io::{self, MapManifest, QueryManifest, SceneManifest};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one invocation; written on every run, including failures.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<Timing>,
    pub warnings: Vec<String>,
    pub exit_status: i32,
    pub error: Option<String>,
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-run bookkeeping handed to every command.
pub struct Ctx {
    pub out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Ctx {
    pub fn new(command: &str, config: serde_json::Value, out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: Vec::new(),
                warnings: Vec::new(),
                exit_status: 0,
                error: None,
            },
            started: Instant::now(),
        }
    }

    /// Digests a file if it can be read; unreadable inputs are reported by
    /// the loader that needs them.
    pub fn input(&mut self, path: &Path) {
        if self.manifest.inputs.iter().any(|i| i.path == path) {
            return;
        }
        if let Ok(bytes) = std::fs::read(path) {
            self.manifest.inputs.push(InputDigest {
                path: path.to_path_buf(),
                sha256: sha256_hex(&bytes),
            });
        }
    }

    fn sibling(path: &Path, rel: &str) -> PathBuf {
        path.parent().unwrap_or(Path::new(".")).join(rel)
    }

    /// Digests a map manifest and every file it references.
    pub fn map_inputs(&mut self, path: &Path) {
        self.input(path);
        if let Ok(m) = io::read_json::<MapManifest>(path) {
            self.input(&Self::sibling(path, &m.points));
            for r in &m.references {
                for f in &r.features {
                    self.input(&Self::sibling(path, f));
                }
            }
        }
    }

    pub fn query_inputs(&mut self, path: &Path) {
        self.input(path);
        if let Ok(m) = io::read_json::<QueryManifest>(path) {
            for f in &m.features {
                self.input(&Self::sibling(path, f));
            }
        }
    }

    pub fn scene_inputs(&mut self, path: &Path) {
        self.input(path);
        if let Ok(m) = io::read_json::<SceneManifest>(path) {
            self.map_inputs(&Self::sibling(path, &m.map));
            self.query_inputs(&Self::sibling(path, &m.query));
        }
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.manifest.warnings.push(msg);
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.manifest.timings.push(Timing {
            stage: stage.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn wrote(&mut self, path: PathBuf) {
        self.manifest.outputs.push(path);
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), io::IoError> {
        let p = self.path(name);
        io::write_text(&p, text)?;
        self.wrote(p);
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), io::IoError> {
        self.write_text(name, &io::to_json(value))
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), io::IoError> {
        let p = self.path(name);
        io::write_binary(&p, bytes)?;
        self.wrote(p);
        Ok(())
    }

    /// Writes the run manifest; returns it for callers that want it.
    pub fn finish(mut self, exit_status: i32, error: Option<String>) -> RunManifest {
        self.manifest.exit_status = exit_status;
        self.manifest.error = error;
        self.manifest.timings.push(Timing {
            stage: "total".into(),
            seconds: self.started.elapsed().as_secs_f64(),
        });
        let p = self.out.join(MANIFEST_NAME);
        if let Err(e) = io::write_json(&p, &self.manifest) {
            eprintln!("error: could not write run manifest: {e}");
        }
        self.manifest
    }
}
