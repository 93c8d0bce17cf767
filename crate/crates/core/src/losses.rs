//! Ranking utilities, their differentiable approximations, the distillation
//! loss and the cost side of the trade-off.
//!
//! Rankings are slices of document ids (first-stage positions), best first.
//! Labels are indexed by document id. Ranks handed to weight functions are
//! 1-based.

use crate::error::{Error, Result};
use crate::policy::SelectionPolicyProbabilities;

/// Which metric a ranking is judged by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dcg,
    Ndcg,
    DistilDcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub cutoff_k: usize,
    pub max_label: u32,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, cutoff_k: usize, max_label: u32) -> Result<Self> {
        if cutoff_k == 0 {
            return Err(Error::invalid("cutoff must be at least 1"));
        }
        if max_label == 0 {
            return Err(Error::invalid("max label must be at least 1"));
        }
        Ok(MetricSpec {
            kind,
            cutoff_k,
            max_label,
        })
    }

    /// Evaluate `ranking`. `teacher` is required for [`MetricKind::DistilDcg`].
    pub fn evaluate(&self, ranking: &[usize], labels: &[u32], teacher: Option<&[usize]>) -> f64 {
        match self.kind {
            MetricKind::Dcg => utility(ranking, labels, self.cutoff_k),
            MetricKind::Ndcg => ndcg_at_k(ranking, labels, self.cutoff_k),
            MetricKind::DistilDcg => {
                distillation_loss(teacher.expect("distil-DCG needs a teacher"), ranking, self.cutoff_k)
            }
        }
    }
}

/// Sharpness of the sigmoid rank approximation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SoftRankConfig {
    pub temperature: f64,
    /// Standardize scores to zero mean and unit variance before soft-ranking.
    pub standardize: bool,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        SoftRankConfig {
            temperature: 1.0,
            standardize: false,
        }
    }
}

impl SoftRankConfig {
    pub fn raw(temperature: f64) -> Self {
        SoftRankConfig {
            temperature,
            standardize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::invalid("soft-rank temperature must be positive"));
        }
        Ok(())
    }
}

/// DCG@K weight of 1-based rank `i`.
#[inline]
pub fn dcg_weight(i: usize, k: usize) -> f64 {
    if i == 0 || i > k {
        0.0
    } else {
        1.0 / ((i + 1) as f64).log2()
    }
}

/// DCG@K: the label of each ranked document times its rank weight.
pub fn utility(ranking: &[usize], labels: &[u32], k: usize) -> f64 {
    ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &d)| dcg_weight(i + 1, k) * f64::from(labels[d]))
        .sum()
}

/// DCG@K of the label-sorted ordering.
pub fn ideal_utility(labels: &[u32], k: usize) -> f64 {
    let mut sorted: Vec<u32> = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| dcg_weight(i + 1, k) * f64::from(l))
        .sum()
}

/// nDCG@K; zero for a query without relevant documents.
pub fn ndcg_at_k(ranking: &[usize], labels: &[u32], k: usize) -> f64 {
    let ideal = ideal_utility(labels, k);
    if ideal <= 0.0 {
        0.0
    } else {
        utility(ranking, labels, k) / ideal
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Differentiable ranks: `1 + Σ_{d' != d} sigmoid((s_d' - s_d) / τ)`.
pub fn soft_rank(scores: &[f64], temperature: f64) -> Vec<f64> {
    let n = scores.len();
    let mut ranks = vec![1.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p = sigmoid((scores[j] - scores[i]) / temperature);
            ranks[i] += p;
            ranks[j] += 1.0 - p;
        }
    }
    ranks
}

/// Backward pass of [`soft_rank`]: maps `dL/d rank` to `dL/d score`.
fn soft_rank_backward(scores: &[f64], temperature: f64, rank_grad: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p = sigmoid((scores[j] - scores[i]) / temperature);
            let dp = p * (1.0 - p) / temperature;
            // rank_i grows with s_j, rank_j grows with s_i.
            let gi = dp * (rank_grad[j] - rank_grad[i]);
            grad[i] += gi;
            grad[j] -= gi;
        }
    }
    grad
}

const STANDARDIZE_EPS: f64 = 1e-6;

fn standardize(scores: &[f64]) -> (Vec<f64>, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + STANDARDIZE_EPS).sqrt();
    (scores.iter().map(|s| (s - mean) / sd).collect(), sd)
}

fn standardize_backward(z: &[f64], sd: f64, grad_z: &[f64]) -> Vec<f64> {
    let n = z.len() as f64;
    let mean_g = grad_z.iter().sum::<f64>() / n;
    let mean_gz = grad_z.iter().zip(z).map(|(g, z)| g * z).sum::<f64>() / n;
    grad_z
        .iter()
        .zip(z)
        .map(|(g, z)| (g - mean_g - z * mean_gz) / sd)
        .collect()
}

/// Soft ranks under `cfg` together with the data needed for the backward pass.
struct SoftRanks {
    inputs: Vec<f64>,
    sd: Option<f64>,
    ranks: Vec<f64>,
}

impl SoftRanks {
    fn new(scores: &[f64], cfg: &SoftRankConfig) -> Self {
        let (inputs, sd) = if cfg.standardize && scores.len() > 1 {
            let (z, sd) = standardize(scores);
            (z, Some(sd))
        } else {
            (scores.to_vec(), None)
        };
        let ranks = soft_rank(&inputs, cfg.temperature);
        SoftRanks { inputs, sd, ranks }
    }

    fn backward(&self, cfg: &SoftRankConfig, rank_grad: &[f64]) -> Vec<f64> {
        let g = soft_rank_backward(&self.inputs, cfg.temperature, rank_grad);
        match self.sd {
            Some(sd) => standardize_backward(&self.inputs, sd, &g),
            None => g,
        }
    }
}

/// Smooth DCG@K weight of a (soft) rank: the cutoff indicator is replaced by
/// `1 / max(r - K + 1, 1)` and the discount saturates at `K`.
#[inline]
pub fn approx_dcg_weight(r: f64, k: usize) -> f64 {
    let k = k as f64;
    let cutoff = 1.0 / (r - k + 1.0).max(1.0);
    cutoff / (r.min(k) + 1.0).log2()
}

/// Derivative of [`approx_dcg_weight`] in `r`. At `r == K` the left
/// derivative is used.
#[inline]
pub fn approx_dcg_weight_grad(r: f64, k: usize) -> f64 {
    let kf = k as f64;
    if r <= kf {
        let l = (r + 1.0).log2();
        -1.0 / (l * l * (r + 1.0) * std::f64::consts::LN_2)
    } else {
        let over = r - kf + 1.0;
        -1.0 / (over * over * (kf + 1.0).log2())
    }
}

/// `-Σ_d w̃(rank_d) · label_d` with soft ranks; returns the loss and its
/// gradient with respect to `scores`.
pub fn soft_dcg_loss_grad(
    scores: &[f64],
    labels: &[u32],
    k: usize,
    cfg: &SoftRankConfig,
) -> (f64, Vec<f64>) {
    let soft = SoftRanks::new(scores, cfg);
    let mut loss = 0.0;
    let mut rank_grad = vec![0.0; scores.len()];
    for (d, &r) in soft.ranks.iter().enumerate() {
        let label = f64::from(labels[d]);
        if label == 0.0 {
            continue;
        }
        loss -= approx_dcg_weight(r, k) * label;
        rank_grad[d] = -approx_dcg_weight_grad(r, k) * label;
    }
    (loss, soft.backward(cfg, &rank_grad))
}

pub fn soft_dcg_loss(scores: &[f64], labels: &[u32], k: usize, cfg: &SoftRankConfig) -> f64 {
    soft_dcg_loss_grad(scores, labels, k, cfg).0
}

/// Position (1-based) of every document in `ranking`, 0 when absent.
fn positions(ranking: &[usize], n: usize) -> Vec<usize> {
    let mut pos = vec![0; n];
    for (i, &d) in ranking.iter().enumerate() {
        pos[d] = i + 1;
    }
    pos
}

/// Distillation loss of `student` against `teacher` with DCG@K weights:
/// `Σ_{d in teacher} max(0, w(d, teacher) - w(d, student))`.
///
/// Documents missing from `student` have weight zero. Multiplied by the
/// maximum label this upper-bounds the DCG@K the student can lose.
pub fn distillation_loss(teacher: &[usize], student: &[usize], k: usize) -> f64 {
    let n = teacher
        .iter()
        .chain(student)
        .copied()
        .max()
        .map_or(0, |m| m + 1);
    let student_pos = positions(student, n);
    teacher
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let w_teacher = dcg_weight(i + 1, k);
            let w_student = dcg_weight(student_pos[d], k);
            (w_teacher - w_student).max(0.0)
        })
        .sum()
}

/// Differentiable distillation loss: student weights come from
/// [`approx_dcg_weight`] of soft ranks, teacher weights stay exact.
pub fn soft_distillation_loss_grad(
    scores: &[f64],
    teacher: &[usize],
    k: usize,
    cfg: &SoftRankConfig,
) -> (f64, Vec<f64>) {
    let soft = SoftRanks::new(scores, cfg);
    let mut loss = 0.0;
    let mut rank_grad = vec![0.0; scores.len()];
    for (i, &d) in teacher.iter().take(k).enumerate() {
        let gap = dcg_weight(i + 1, k) - approx_dcg_weight(soft.ranks[d], k);
        if gap > 0.0 {
            loss += gap;
            rank_grad[d] = -approx_dcg_weight_grad(soft.ranks[d], k);
        }
    }
    (loss, soft.backward(cfg, &rank_grad))
}

pub fn soft_distillation_loss(
    scores: &[f64],
    teacher: &[usize],
    k: usize,
    cfg: &SoftRankConfig,
) -> f64 {
    soft_distillation_loss_grad(scores, teacher, k, cfg).0
}

/// Expected number of LLM calls under a selection policy.
pub fn cost_loss(probs: &SelectionPolicyProbabilities) -> f64 {
    let point: f64 = probs.p_point.iter().sum();
    let pair: f64 = probs
        .p_pair
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, p)| p)
        .sum();
    point + pair
}

/// `α · ranking_loss + (1 - α) · cost`.
pub fn tradeoff_loss(alpha: f64, ranking_loss: f64, cost: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * ranking_loss + (1.0 - alpha) * cost)
}
