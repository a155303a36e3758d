//! On-disk layout of a run directory and the manifest every command writes.
//!
//! ```text
//! <out>/config.json
//! <out>/data/route_<id>_{train,test}.jsonl, pool.jsonl
//! <out>/models/base.gag, encoder.gag, expert_<id>.gag, projector_<id>.gag
//! <out>/banks/bank_<id>.pprb
//! <out>/reports/...
//! <out>/manifests/<command>.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{read_jsonl, QaRecord};
use crate::error::{GagError, Result};
use crate::pipeline::{assemble, load_base, load_encoder, load_expert, load_projector};
use crate::router::PrototypeBank;
use crate::synth::{route_names, RouteCorpus, SyntheticCorpus};
use crate::system::{GagSystem, RouteModule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn banks(&self) -> PathBuf {
        self.root.join("banks")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn base(&self) -> PathBuf {
        self.models().join("base.gag")
    }

    pub fn encoder(&self) -> PathBuf {
        self.models().join("encoder.gag")
    }

    pub fn expert(&self, route: u32) -> PathBuf {
        self.models().join(format!("expert_{route}.gag"))
    }

    pub fn projector(&self, route: u32) -> PathBuf {
        self.models().join(format!("projector_{route}.gag"))
    }

    pub fn bank(&self, route: u32) -> PathBuf {
        self.banks().join(format!("bank_{route}.pprb"))
    }

    pub fn split(&self, route: u32, split: &str) -> PathBuf {
        self.data().join(format!("route_{route}_{split}.jsonl"))
    }

    pub fn pool(&self) -> PathBuf {
        self.data().join("pool.jsonl")
    }

    pub fn ensure(&self) -> Result<()> {
        for d in [
            self.data(),
            self.models(),
            self.banks(),
            self.reports(),
            self.manifests(),
        ] {
            std::fs::create_dir_all(&d).map_err(|e| GagError::io(&d, e))?;
        }
        Ok(())
    }

    /// Reads back the corpus written by `SyntheticCorpus::write`.
    pub fn load_corpus(&self, cfg: &RunConfig) -> Result<SyntheticCorpus> {
        let names = route_names(&cfg.data.specs()?);
        let read = |p: PathBuf| -> Result<Vec<QaRecord>> {
            if !p.exists() {
                return Err(GagError::MissingArtifact(p));
            }
            read_jsonl(&p)
        };
        let mut routes = Vec::new();
        for (route, name) in names {
            routes.push(RouteCorpus {
                route,
                name,
                train: read(self.split(route, "train"))?,
                test: read(self.split(route, "test"))?,
            });
        }
        Ok(SyntheticCorpus {
            routes,
            pool: read(self.pool())?,
        })
    }

    /// Private route ids that have both an expert and a projector on disk.
    pub fn trained_routes(&self, cfg: &RunConfig) -> Result<Vec<u32>> {
        Ok(route_names(&cfg.data.specs()?)
            .into_keys()
            .filter(|&r| r != 0 && self.expert(r).exists() && self.projector(r).exists())
            .collect())
    }

    /// Assembles the serving system from saved models and every bank file
    /// present. Each projector must have been aligned against this base.
    pub fn load_system(&self, cfg: &RunConfig) -> Result<GagSystem> {
        let base = load_base(&need(self.base())?)?;
        let encoder = load_encoder(&need(self.encoder())?)?;
        let names = route_names(&cfg.data.specs()?);
        let mut modules = BTreeMap::new();
        for route in self.trained_routes(cfg)? {
            let expert = load_expert(&self.expert(route))?;
            let (projector, base_hash) = load_projector(&self.projector(route))?;
            if base_hash != base.content_hash() {
                return Err(GagError::BaseMismatch {
                    expected: base_hash,
                    found: base.content_hash(),
                });
            }
            modules.insert(
                route,
                RouteModule {
                    name: names.get(&route).cloned().unwrap_or_default(),
                    expert,
                    projector,
                },
            );
        }
        let mut banks = Vec::new();
        for route in names.keys() {
            let p = self.bank(*route);
            if p.exists() {
                banks.push(PrototypeBank::load(&p)?);
            }
        }
        assemble(cfg, base, encoder, modules, names, banks)
    }
}

/// Errors with `MissingArtifact` unless `p` exists.
pub fn need(p: PathBuf) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(GagError::MissingArtifact(p))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| GagError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub summary: serde_json::Value,
    pub wall_time_secs: f64,
}

/// Collects a command's inputs and outputs while it runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    command: String,
    config_sha256: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    summary: serde_json::Value,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: hex::encode(Sha256::digest(cfg.to_json().as_bytes())),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            summary: serde_json::Value::Null,
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(p.into());
        self
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(p.into());
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn summary(&mut self, v: serde_json::Value) -> &mut Self {
        self.summary = v;
        self
    }

    /// Hashes every listed file and writes `manifests/<command>.json`.
    pub fn finish(&self, dir: &RunDir) -> Result<(PathBuf, Manifest)> {
        let entries = |ps: &[PathBuf]| -> Result<Vec<FileEntry>> {
            ps.iter()
                .map(|p| {
                    Ok(FileEntry {
                        path: p.strip_prefix(dir.root()).unwrap_or(p).display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let m = Manifest {
            command: self.command.clone(),
            config_sha256: self.config_sha256.clone(),
            inputs: entries(&self.inputs)?,
            outputs: entries(&self.outputs)?,
            seeds: self.seeds.clone(),
            summary: self.summary.clone(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        let d = dir.manifests();
        std::fs::create_dir_all(&d).map_err(|e| GagError::io(&d, e))?;
        let path = d.join(format!("{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| GagError::io(&path, e))?;
        Ok((path, m))
    }
}
