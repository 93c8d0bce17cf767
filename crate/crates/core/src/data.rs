//! Datasets: JSON-Lines files, a synthetic generator with a relevance
//! oracle, seeded splits and PRP teacher rankings.
//!
//! File layout: the first line is a header `{"v_max": V, "k0": k0}`, then one
//! object per query with `query_id`, `labels`, `point_preds` and
//! `pair_preds` (the `k0 x k0` matrix flattened row-major, diagonal 0.5).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{prp_rerank, PrpReading};
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::system::QueryInstance;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub queries: Vec<QueryInstance>,
    pub v_max: u32,
    pub provenance: Provenance,
}

impl Dataset {
    /// Checks that every query is well formed, shares one `k0` and has
    /// labels within `0..=v_max`.
    pub fn new(queries: Vec<QueryInstance>, v_max: u32, provenance: Provenance) -> Result<Self> {
        let ds = Dataset {
            queries,
            v_max,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Candidate count shared by all queries, 0 when empty.
    pub fn k0(&self) -> usize {
        self.queries.first().map_or(0, QueryInstance::k0)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_max == 0 {
            return Err(Error::invalid("v_max must be at least 1"));
        }
        let k0 = self.k0();
        for q in &self.queries {
            check_query(q, k0, self.v_max)?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let header = Header {
            v_max: self.v_max,
            k0: self.k0(),
        };
        let mut write_line = |value: String| -> Result<()> {
            writeln!(out, "{value}").map_err(|e| Error::io(path, e))
        };
        write_line(serde_json::to_string(&header)?)?;
        for q in &self.queries {
            write_line(serde_json::to_string(&QueryRecord::from(q))?)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
            }
            None => return Err(parse_err(1, "missing header line".into())),
        };
        if header.v_max == 0 {
            return Err(parse_err(1, "v_max must be at least 1".into()));
        }
        let mut queries = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: QueryRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            queries.push(record.into_query(header.k0, header.v_max)?);
        }
        Ok(Dataset {
            queries,
            v_max: header.v_max,
            provenance: Provenance::File(path.display().to_string()),
        })
    }

    /// Subset by query indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            queries: indices.iter().map(|&i| self.queries[i].clone()).collect(),
            v_max: self.v_max,
            provenance: self.provenance.clone(),
        }
    }
}

fn schema(q: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        query_id: q.to_string(),
        message: message.into(),
    }
}

fn check_query(q: &QueryInstance, k0: usize, v_max: u32) -> Result<()> {
    if q.k0() != k0 {
        return Err(schema(
            &q.query_id,
            format!("{} documents, dataset has {k0}", q.k0()),
        ));
    }
    q.validate()
        .map_err(|e| schema(&q.query_id, e.to_string()))?;
    if let Some(&l) = q.labels.iter().find(|&&l| l > v_max) {
        return Err(schema(&q.query_id, format!("label {l} exceeds v_max {v_max}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    v_max: u32,
    k0: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    query_id: String,
    labels: Vec<u32>,
    point_preds: Vec<f64>,
    pair_preds: Vec<f64>,
}

impl From<&QueryInstance> for QueryRecord {
    fn from(q: &QueryInstance) -> Self {
        QueryRecord {
            query_id: q.query_id.clone(),
            labels: q.labels.clone(),
            point_preds: q.point_preds.to_vec(),
            pair_preds: q.pair_preds.iter().copied().collect(),
        }
    }
}

impl QueryRecord {
    fn into_query(self, k0: usize, v_max: u32) -> Result<QueryInstance> {
        let id = self.query_id;
        if self.labels.len() != k0 {
            return Err(schema(&id, format!("{} labels, header says k0={k0}", self.labels.len())));
        }
        if self.pair_preds.len() != k0 * k0 {
            return Err(schema(
                &id,
                format!("pair matrix has {} entries, expected {}", self.pair_preds.len(), k0 * k0),
            ));
        }
        let pair = Array2::from_shape_vec((k0, k0), self.pair_preds)
            .map_err(|e| schema(&id, e.to_string()))?;
        let q = QueryInstance {
            query_id: id,
            labels: self.labels,
            point_preds: Array1::from(self.point_preds),
            pair_preds: pair,
        };
        check_query(&q, k0, v_max)?;
        Ok(q)
    }
}

/// Knobs of the synthetic generator.
///
/// Every document gets a grade in `0..=v_max`. The first stage sorts by
/// `first_stage_quality * label / v_max + N(0, 1)`. Pointwise predictions
/// are `sigmoid(pointwise_sharpness * (label / v_max - 0.5) + point_noise * N(0, 1))`
/// and pairwise ones
/// `sigmoid(pair_sharpness * (label_i - label_j) / v_max + order_bias + pair_noise * N(0, 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub k0: usize,
    pub v_max: u32,
    pub n_queries: usize,
    pub seed: u64,
    pub pointwise_sharpness: f64,
    pub point_noise: f64,
    pub pair_sharpness: f64,
    pub pair_noise: f64,
    /// Added to every pairwise logit, so `M(d, d')` and `1 - M(d', d)` disagree.
    pub order_bias: f64,
    pub first_stage_quality: f64,
    /// Probability ratio between consecutive grades; below 1 makes high
    /// grades rare.
    pub label_decay: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k0: 50,
            v_max: 3,
            n_queries: 150,
            seed: 7,
            pointwise_sharpness: 6.0,
            point_noise: 1.5,
            pair_sharpness: 2.0,
            pair_noise: 3.0,
            order_bias: 0.3,
            first_stage_quality: 1.5,
            label_decay: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k0 == 0 {
            return Err(Error::invalid("k0 must be at least 1"));
        }
        if self.v_max == 0 {
            return Err(Error::invalid("v_max must be at least 1"));
        }
        let reals = [
            ("pointwise_sharpness", self.pointwise_sharpness),
            ("point_noise", self.point_noise),
            ("pair_sharpness", self.pair_sharpness),
            ("pair_noise", self.pair_noise),
            ("first_stage_quality", self.first_stage_quality),
            ("label_decay", self.label_decay),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.order_bias.is_finite() {
            return Err(Error::invalid("order_bias must be finite"));
        }
        if self.label_decay == 0.0 {
            return Err(Error::invalid("label_decay must be positive"));
        }
        Ok(())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One synthetic query, fully determined by `cfg` and `seed`.
pub fn synthesize_query(cfg: &SynthConfig, seed: u64, query_id: &str) -> Result<QueryInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k0 = cfg.k0;
    let v = f64::from(cfg.v_max);

    let weights: Vec<f64> = (0..=cfg.v_max).map(|g| cfg.label_decay.powi(g as i32)).collect();
    let total: f64 = weights.iter().sum();
    let draw_label = |rng: &mut ChaCha8Rng| {
        let mut x = rng.random::<f64>() * total;
        for (g, w) in weights.iter().enumerate() {
            if x < *w {
                return g as u32;
            }
            x -= w;
        }
        cfg.v_max
    };
    let raw: Vec<u32> = (0..k0).map(|_| draw_label(&mut rng)).collect();
    let keys: Vec<f64> = raw
        .iter()
        .map(|&l| cfg.first_stage_quality * f64::from(l) / v + normal(&mut rng))
        .collect();
    let mut order: Vec<usize> = (0..k0).collect();
    order.sort_by(|&i, &j| keys[j].total_cmp(&keys[i]));
    let labels: Vec<u32> = order.iter().map(|&d| raw[d]).collect();

    let clamp = |x: f64| x.clamp(0.0, 1.0);
    let point = Array1::from_shape_fn(k0, |d| {
        let l = f64::from(labels[d]);
        clamp(sigmoid(
            cfg.pointwise_sharpness * (l / v - 0.5) + cfg.point_noise * normal(&mut rng),
        ))
    });
    let pair = Array2::from_shape_fn((k0, k0), |(i, j)| {
        if i == j {
            return 0.5;
        }
        let diff = f64::from(labels[i]) - f64::from(labels[j]);
        clamp(sigmoid(
            cfg.pair_sharpness * diff / v + cfg.order_bias + cfg.pair_noise * normal(&mut rng),
        ))
    });
    QueryInstance::new(query_id, labels, point, pair)
}

/// `n_queries` queries; query `i` uses seed `cfg.seed * 1_000_003 + i`.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let queries = (0..cfg.n_queries)
        .map(|i| {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            synthesize_query(cfg, seed, &format!("q{i:04}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(queries, cfg.v_max, Provenance::Synthetic)
}

/// Train, validation and test parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle, then the first `n_val` queries go to validation, the
/// next `n_test` to test and the rest to training.
pub fn split_dataset(ds: &Dataset, seed: u64, n_val: usize, n_test: usize) -> Result<Split> {
    if n_val + n_test >= ds.len() {
        return Err(Error::invalid(format!(
            "cannot take {n_val} validation and {n_test} test queries from {} and keep a training set",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Split {
        validation: ds.subset(&idx[..n_val]),
        test: ds.subset(&idx[n_val..n_val + n_test]),
        train: ds.subset(&idx[n_val + n_test..]),
    })
}

/// Full-length PRP win-rate ranking of every query, keyed by query id.
pub fn teacher_rankings(ds: &Dataset) -> Result<BTreeMap<String, Vec<usize>>> {
    ds.queries
        .iter()
        .map(|q| {
            let (ranking, _) = prp_rerank(q, q.k0(), false, PrpReading::WinRate)?;
            Ok((q.query_id.clone(), ranking))
        })
        .collect()
}
