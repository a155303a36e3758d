use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::lm::tokenizer::{tokenize, BOS, PAD};
use crate::lm::{LmInput, ToyLm};
use crate::numerics::Scalar;

use super::kmeans::{kmeans, KMeansConfig};

const BANK_MAGIC: &[u8; 4] = b"PPRB";

/// L2-normalized pooled query representation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    vector: Vec<f32>,
}

impl QueryEmbedding {
    /// Normalizes `raw`; a zero vector is rejected.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GagError::Numeric("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self {
            vector: raw.iter().map(|v| (v / n) as f32).collect(),
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

/// Attention-masked mean of the encoder's last-layer states over non-PAD
/// positions, then L2-normalized.
pub fn embed_query_ids<F: Scalar>(encoder: &ToyLm<F>, ids: &[u32]) -> Result<QueryEmbedding> {
    if !encoder.is_frozen() {
        return Err(GagError::Frozen("the routing encoder must be frozen".into()));
    }
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
    if keep.is_empty() {
        return Err(GagError::Input("empty query".into()));
    }
    let last = encoder.n_layers();
    let trace = encoder.forward(LmInput::Tokens(ids), &[last])?;
    let states = trace.layer(last).expect("captured last layer");
    let mut mean = vec![0.0f64; states.cols()];
    for &i in &keep {
        for (m, v) in mean.iter_mut().zip(states.row(i)) {
            *m += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    for m in &mut mean {
        *m /= keep.len() as f64;
    }
    QueryEmbedding::from_raw(&mean)
}

/// Embeds a query string as `BOS + bytes`.
pub fn embed_query<F: Scalar>(encoder: &ToyLm<F>, query: &str) -> Result<QueryEmbedding> {
    if query.is_empty() {
        return Err(GagError::Input("empty query".into()));
    }
    let mut ids = vec![BOS];
    ids.extend(tokenize(query));
    let max = encoder.config().max_seq_len;
    ids.truncate(max);
    embed_query_ids(encoder, &ids)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub prototypes: usize,
    pub subsample: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            prototypes: 32,
            subsample: 10_000,
            n_init: 10,
            max_iter: 100,
            seed: 42,
        }
    }
}

/// Where a bank came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub query_count: usize,
    pub build_seed: u64,
    pub encoder_fingerprint: String,
}

/// Unit-norm prototypes summarizing one route's query distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub route_id: u32,
    pub route_name: String,
    pub dim: usize,
    pub prototypes: Vec<Vec<f32>>,
    pub provenance: BankProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    route_id: u32,
    route_name: String,
    prototypes: usize,
    dim: usize,
    seed: u64,
    encoder_fingerprint: String,
    query_count: usize,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Maximum cosine similarity between `e` and any prototype.
    pub fn similarity(&self, e: &QueryEmbedding) -> f32 {
        self.prototypes
            .iter()
            .map(|p| {
                p.iter()
                    .zip(e.vector())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>() as f32
            })
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&BankHeader {
            route_id: self.route_id,
            route_name: self.route_name.clone(),
            prototypes: self.prototypes.len(),
            dim: self.dim,
            seed: self.provenance.build_seed,
            encoder_fingerprint: self.provenance.encoder_fingerprint.clone(),
            query_count: self.provenance.query_count,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + self.prototypes.len() * self.dim * 4);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.prototypes {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| GagError::Corruption {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != BANK_MAGIC {
            return Err(corrupt("missing PPRB magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_end = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: BankHeader = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| corrupt(&e.to_string()))?;
        let payload = &bytes[header_end..];
        if payload.len() != header.prototypes * header.dim * 4 {
            return Err(corrupt("payload size does not match header"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let prototypes = if header.dim == 0 {
            vec![Vec::new(); header.prototypes]
        } else {
            values.chunks(header.dim).map(<[f32]>::to_vec).collect()
        };
        Ok(Self {
            route_id: header.route_id,
            route_name: header.route_name,
            dim: header.dim,
            prototypes,
            provenance: BankProvenance {
                query_count: header.query_count,
                build_seed: header.seed,
                encoder_fingerprint: header.encoder_fingerprint,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| GagError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| GagError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GagError::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| GagError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Embeds (a seeded subsample of) `queries` and clusters them into a bank.
/// The prototype count is clipped to the number of queries.
pub fn build_bank<F: Scalar>(
    route_id: u32,
    route_name: &str,
    queries: &[String],
    encoder: &ToyLm<F>,
    cfg: &BankConfig,
) -> Result<PrototypeBank> {
    if queries.is_empty() {
        return Err(GagError::Input(format!("no queries for route {route_id}")));
    }
    let mut idx: Vec<usize> = (0..queries.len()).collect();
    if idx.len() > cfg.subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        idx.shuffle(&mut rng);
        idx.truncate(cfg.subsample);
        idx.sort_unstable();
    }
    let points = idx
        .iter()
        .map(|&i| embed_query(encoder, &queries[i]).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    let clusters = cfg.prototypes.min(points.len());
    if clusters < cfg.prototypes {
        tracing::warn!(
            route_id,
            requested = cfg.prototypes,
            clusters,
            "fewer queries than prototypes; clipping"
        );
    }
    let result = kmeans(
        &points,
        &KMeansConfig {
            clusters,
            n_init: cfg.n_init,
            max_iter: cfg.max_iter,
            seed: cfg.seed,
        },
    )?;
    Ok(PrototypeBank {
        route_id,
        route_name: route_name.to_string(),
        dim: points[0].len(),
        prototypes: result.centroids,
        provenance: BankProvenance {
            query_count: points.len(),
            build_seed: cfg.seed,
            encoder_fingerprint: encoder.content_hash(),
        },
    })
}

/// Outcome of routing one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub route: u32,
    /// Max prototype similarity for every loaded route.
    pub similarities: BTreeMap<u32, f32>,
    /// Winner similarity minus runner-up (0 with a single route).
    pub margin: f32,
}

impl RouteDecision {
    pub fn similarity(&self) -> f32 {
        self.similarities[&self.route]
    }
}

/// Immutable set of attached banks. Attach and detach return a new registry,
/// leaving existing banks untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct BankRegistry {
    encoder_fingerprint: String,
    banks: BTreeMap<u32, Arc<PrototypeBank>>,
}

impl BankRegistry {
    pub fn new(encoder_fingerprint: impl Into<String>) -> Self {
        Self {
            encoder_fingerprint: encoder_fingerprint.into(),
            banks: BTreeMap::new(),
        }
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    pub fn banks(&self) -> impl Iterator<Item = &PrototypeBank> {
        self.banks.values().map(|b| b.as_ref())
    }

    pub fn get(&self, route_id: u32) -> Option<&PrototypeBank> {
        self.banks.get(&route_id).map(|b| b.as_ref())
    }

    pub fn route_ids(&self) -> Vec<u32> {
        self.banks.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn attach(&self, bank: PrototypeBank) -> Result<Self> {
        if bank.provenance.encoder_fingerprint != self.encoder_fingerprint {
            return Err(GagError::Compatibility {
                bank: bank.provenance.encoder_fingerprint.clone(),
                registry: self.encoder_fingerprint.clone(),
            });
        }
        if self.banks.contains_key(&bank.route_id) {
            return Err(GagError::Conflict(bank.route_id));
        }
        if let Some(existing) = self.banks.values().next() {
            if existing.dim != bank.dim {
                return Err(GagError::Dimension(format!(
                    "bank dimension {} differs from registry dimension {}",
                    bank.dim, existing.dim
                )));
            }
        }
        let mut next = self.clone();
        next.banks.insert(bank.route_id, Arc::new(bank));
        Ok(next)
    }

    pub fn detach(&self, route_id: u32) -> Result<Self> {
        if !self.banks.contains_key(&route_id) {
            return Err(GagError::UnknownRoute(route_id));
        }
        let mut next = self.clone();
        next.banks.remove(&route_id);
        Ok(next)
    }

    /// Nearest-prototype routing; exact ties go to the lowest route id.
    pub fn route(&self, e: &QueryEmbedding) -> Result<RouteDecision> {
        if self.banks.is_empty() {
            return Err(GagError::Config("routing registry is empty".into()));
        }
        if !self.banks.contains_key(&0) {
            return Err(GagError::RoutingIntegrity("registry has no general route 0".into()));
        }
        let similarities: BTreeMap<u32, f32> = self.banks.iter().map(|(&id, b)| (id, b.similarity(e))).collect();
        let mut best: Option<(u32, f32)> = None;
        for (&id, &s) in &similarities {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((id, s));
            }
        }
        let (route, top) = best.expect("non-empty");
        let runner = similarities
            .iter()
            .filter(|(&id, _)| id != route)
            .map(|(_, &s)| s)
            .fold(f32::NEG_INFINITY, f32::max);
        let margin = if runner.is_finite() { top - runner } else { 0.0 };
        Ok(RouteDecision {
            route,
            similarities,
            margin,
        })
    }
}
