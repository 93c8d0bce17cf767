//! Cascade-style reference systems and their embeddings into the compound
//! system.
//!
//! Every baseline re-ranks a top-K prefix of the first-stage ranking and
//! leaves the tail in place. [`embed`] builds the fixed selection and
//! aggregation parameters under which the compound system reproduces the
//! same ranking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::{CurvePoint, TradeoffCurve, METRIC_COLUMNS};
use crate::system::{AggregationParams, QueryInstance, SelectionSample};
use crate::train::{evaluate_rankings, PreparedQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    FirstStage,
    Pointwise,
    PrpFull,
    PrpHalf,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::FirstStage,
        BaselineKind::Pointwise,
        BaselineKind::PrpFull,
        BaselineKind::PrpHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FirstStage => "first_stage",
            BaselineKind::Pointwise => "pointwise",
            BaselineKind::PrpFull => "prp_full",
            BaselineKind::PrpHalf => "prp_half",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub top_k: usize,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind, top_k: usize) -> Self {
        BaselineSpec { kind, top_k }
    }

    pub fn validate(&self, k0: usize) -> Result<()> {
        if self.top_k > k0 {
            return Err(Error::invalid(format!(
                "top_k {} exceeds candidate count {k0}",
                self.top_k
            )));
        }
        Ok(())
    }

    /// LLM calls the baseline makes per query.
    pub fn cost(&self) -> usize {
        let k = self.top_k;
        match self.kind {
            BaselineKind::FirstStage => 0,
            BaselineKind::Pointwise => k,
            BaselineKind::PrpFull => k * k - k,
            BaselineKind::PrpHalf => (k * k - k) / 2,
        }
    }
}

/// How pairwise predictions are summed into PRP scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrpReading {
    /// `½ Σ [M(d, d') + 1 - M(d', d)]`: wins of `d` from both presentation orders.
    #[default]
    WinRate,
    /// `½ Σ [M(d', d) + 1 - M(d, d')]`: the complementary sum.
    Printed,
}

/// Stable descending sort of `prefix` ids by `score(id)`.
fn sort_prefix(order: &mut [usize], score: impl Fn(usize) -> f64) {
    order.sort_by(|&i, &j| score(j).partial_cmp(&score(i)).expect("finite scores"));
}

/// Top-K re-ranking by pointwise predictions. Returns the ranking and its
/// call count.
pub fn pointwise_rerank(q: &QueryInstance, top_k: usize) -> Result<(Vec<usize>, usize)> {
    BaselineSpec::new(BaselineKind::Pointwise, top_k).validate(q.k0())?;
    let mut order: Vec<usize> = (0..q.k0()).collect();
    sort_prefix(&mut order[..top_k], |d| q.point_preds[d]);
    Ok((order, top_k))
}

/// PRP scores of the top-K prefix and the number of pairwise calls.
///
/// With `half`, only pairs `(i, j)` with `i < j` in first-stage order are
/// queried: `d_i` collects `M(d_i, d_j)` and `d_j` collects
/// `1 - M(d_i, d_j)`.
pub fn prp_win_rate(
    q: &QueryInstance,
    top_k: usize,
    half: bool,
    reading: PrpReading,
) -> Result<(Vec<f64>, usize)> {
    if top_k > q.k0() {
        return Err(Error::invalid(format!(
            "top_k {top_k} exceeds candidate count {}",
            q.k0()
        )));
    }
    let m = &q.pair_preds;
    let mut scores = vec![0.0; top_k];
    if half {
        for i in 0..top_k {
            for j in (i + 1)..top_k {
                let (wi, wj) = match reading {
                    PrpReading::WinRate => (m[[i, j]], 1.0 - m[[i, j]]),
                    PrpReading::Printed => (1.0 - m[[i, j]], m[[i, j]]),
                };
                scores[i] += wi;
                scores[j] += wj;
            }
        }
        return Ok((scores, (top_k * top_k - top_k) / 2));
    }
    for (d, score) in scores.iter_mut().enumerate() {
        let mut acc = 0.0;
        for d2 in (0..top_k).filter(|&d2| d2 != d) {
            acc += match reading {
                PrpReading::WinRate => m[[d, d2]] + 1.0 - m[[d2, d]],
                PrpReading::Printed => m[[d2, d]] + 1.0 - m[[d, d2]],
            };
        }
        *score = 0.5 * acc;
    }
    Ok((scores, top_k * top_k - top_k))
}

/// Top-K PRP re-ranking.
pub fn prp_rerank(
    q: &QueryInstance,
    top_k: usize,
    half: bool,
    reading: PrpReading,
) -> Result<(Vec<usize>, usize)> {
    let (scores, cost) = prp_win_rate(q, top_k, half, reading)?;
    let mut order: Vec<usize> = (0..q.k0()).collect();
    sort_prefix(&mut order[..top_k], |d| scores[d]);
    Ok((order, cost))
}

/// Ranking and call count of any baseline.
pub fn baseline_ranking(q: &QueryInstance, spec: BaselineSpec) -> Result<(Vec<usize>, usize)> {
    spec.validate(q.k0())?;
    match spec.kind {
        BaselineKind::FirstStage => Ok(((0..q.k0()).collect(), 0)),
        BaselineKind::Pointwise => pointwise_rerank(q, spec.top_k),
        BaselineKind::PrpFull => prp_rerank(q, spec.top_k, false, PrpReading::WinRate),
        BaselineKind::PrpHalf => prp_rerank(q, spec.top_k, true, PrpReading::WinRate),
    }
}

/// Fixed selection and aggregation parameters under which the compound
/// system ranks exactly like the baseline.
///
/// Prefix documents get default score 0 and tail documents `-(1 + r)`, which
/// is below any prefix score and keeps the tail in first-stage order.
pub fn embed(
    spec: BaselineSpec,
    k0: usize,
    reading: PrpReading,
) -> Result<(SelectionSample, AggregationParams)> {
    spec.validate(k0)?;
    let top_k = match spec.kind {
        BaselineKind::FirstStage => 0,
        _ => spec.top_k,
    };
    let mut params = AggregationParams::zeros(k0);
    params.a = Array1::from_shape_fn(k0, |r| if r < top_k { 0.0 } else { -1.0 - r as f64 });
    let in_prefix = |r: usize| r < top_k;
    let mut sel = SelectionSample::empty(k0);
    match spec.kind {
        BaselineKind::FirstStage => {}
        BaselineKind::Pointwise => {
            sel.s_point = Array1::from_shape_fn(k0, in_prefix);
            params.c_point[0].fill(1.0);
        }
        BaselineKind::PrpFull => {
            sel.s_pair = Array2::from_shape_fn((k0, k0), |(r, r2)| {
                r != r2 && in_prefix(r) && in_prefix(r2)
            });
            let (b, c) = match reading {
                PrpReading::WinRate => (0.0, 0.5),
                PrpReading::Printed => (0.5, -0.5),
            };
            for ch in [0, 2] {
                params.b_pair[ch].fill(b);
                params.c_pair[ch].fill(c);
            }
        }
        BaselineKind::PrpHalf => {
            sel.s_pair = Array2::from_shape_fn((k0, k0), |(r, r2)| r < r2 && in_prefix(r2));
            let (b, c) = match reading {
                PrpReading::WinRate => (0.0, 1.0),
                PrpReading::Printed => (1.0, -1.0),
            };
            for ch in [0, 2] {
                params.b_pair[ch].fill(b);
                params.c_pair[ch].fill(c);
            }
        }
    }
    Ok((sel, params))
}

/// Mean metrics of one baseline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub kind: BaselineKind,
    pub top_k: usize,
    pub calls: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Evaluate a baseline family over `top_ks` (ignored for the first stage,
/// which has a single row).
pub fn baseline_rows(
    queries: &[QueryInstance],
    prepared: &[PreparedQuery],
    kind: BaselineKind,
    top_ks: &[usize],
) -> Result<Vec<BaselineRow>> {
    let ks: &[usize] = match kind {
        BaselineKind::FirstStage => &[0],
        _ => top_ks,
    };
    ks.iter()
        .map(|&top_k| {
            let spec = BaselineSpec::new(kind, top_k);
            let rankings = queries
                .iter()
                .map(|q| baseline_ranking(q, spec).map(|(r, _)| r))
                .collect::<Result<Vec<_>>>()?;
            Ok(BaselineRow {
                kind,
                top_k,
                calls: spec.cost(),
                metrics: evaluate_rankings(prepared, &rankings),
            })
        })
        .collect()
}

/// Curve through baseline rows; repeated call counts keep the first row.
pub fn baseline_curve(rows: &[BaselineRow]) -> Result<TradeoffCurve> {
    TradeoffCurve::from_knots(
        rows.iter()
            .map(|r| CurvePoint {
                calls: r.calls as f64,
                metrics: r.metrics.clone(),
            })
            .collect(),
    )
}

/// TSV with columns `baseline top_k calls` followed by the metric columns.
pub fn baseline_tsv(rows: &[BaselineRow]) -> String {
    let mut out = String::from("baseline\ttop_k\tcalls");
    for m in METRIC_COLUMNS {
        out.push('\t');
        out.push_str(m);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.kind.name(), r.top_k, r.calls);
        for m in METRIC_COLUMNS {
            let _ = write!(out, "\t{}", r.metrics.get(m).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}
