//! Trade-off sweeps over the interpolation weight, Pareto filtering and
//! piecewise-linear curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::train::{train_system, TrainConfig};

/// Metric columns written for every point, in TSV order.
pub const METRIC_COLUMNS: [&str; 4] = ["ndcg@10", "ndcg@25", "distil@10", "distil@25"];

/// Outcome of one trained system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub seed: u64,
    /// Expected calls per query under the stochastic policy.
    pub expected_calls: f64,
    /// Calls of the determinized selection; the `N` of every curve.
    pub deterministic_calls: usize,
    /// Mean exact validation ranking loss under the determinized selection.
    pub validation_loss: f64,
    /// Validation trade-off loss of the determinized selection.
    pub validation_tradeoff: f64,
    pub test_metrics: BTreeMap<String, f64>,
}

/// A sweep point that may have failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub alpha: f64,
    pub seed: u64,
    pub point: Option<TradeoffPoint>,
    pub failure: Option<String>,
}

/// `n` weights spaced geometrically from 1 down to `1e-5`.
pub fn alpha_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("a sweep needs at least two points"));
    }
    Ok((0..n)
        .map(|i| 10f64.powf(-5.0 * i as f64 / (n - 1) as f64))
        .collect())
}

/// Train one system per weight of [`alpha_grid`]. Run `i` uses seed
/// `base.seed + i`. With `threads > 1` runs execute on a dedicated pool;
/// results are identical to a sequential sweep.
pub fn sweep_alphas(
    split: &Split,
    base: &TrainConfig,
    n_points: usize,
    threads: usize,
) -> Result<Vec<SweepRun>> {
    let alphas = alpha_grid(n_points)?;
    let configs: Vec<TrainConfig> = alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| TrainConfig {
            alpha,
            seed: base.seed.wrapping_add(i as u64),
            ..*base
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let run = |cfg: &TrainConfig| {
        log::info!("training alpha={:e} seed={}", cfg.alpha, cfg.seed);
        match train_system(split, cfg) {
            Ok(out) => SweepRun {
                alpha: cfg.alpha,
                seed: cfg.seed,
                point: Some(out.point),
                failure: None,
            },
            Err(e) => {
                log::warn!("alpha={:e} failed: {e}", cfg.alpha);
                SweepRun {
                    alpha: cfg.alpha,
                    seed: cfg.seed,
                    point: None,
                    failure: Some(e.to_string()),
                }
            }
        }
    };
    if threads <= 1 {
        return Ok(configs.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| configs.par_iter().map(run).collect()))
}

/// Keep the points no other point dominates in (calls, validation loss).
/// Among exact duplicates the lowest seed survives. Output is sorted by
/// calls.
pub fn pareto_filter(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    let dominates = |q: &TradeoffPoint, p: &TradeoffPoint| {
        q.deterministic_calls <= p.deterministic_calls
            && q.validation_loss <= p.validation_loss
            && (q.deterministic_calls < p.deterministic_calls || q.validation_loss < p.validation_loss)
    };
    let same = |q: &TradeoffPoint, p: &TradeoffPoint| {
        q.deterministic_calls == p.deterministic_calls && q.validation_loss == p.validation_loss
    };
    let mut kept: Vec<TradeoffPoint> = points
        .iter()
        .enumerate()
        .filter(|&(i, p)| {
            !points.iter().enumerate().any(|(j, q)| {
                dominates(q, p) || (j != i && same(q, p) && (q.seed, j) < (p.seed, i))
            })
        })
        .map(|(_, p)| p.clone())
        .collect();
    kept.sort_by_key(|p| p.deterministic_calls);
    kept
}

/// One knot of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub calls: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Piecewise-linear curve over calls per query, knots strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<CurvePoint>,
}

/// Interpolated metric value; `clamped` is set when the query fell outside
/// the curve's range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub clamped: bool,
}

impl TradeoffCurve {
    /// Curve through Pareto-filtered points, keyed by deterministic calls.
    pub fn from_points(points: &[TradeoffPoint]) -> Self {
        TradeoffCurve {
            points: pareto_filter(points)
                .into_iter()
                .map(|p| CurvePoint {
                    calls: p.deterministic_calls as f64,
                    metrics: p.test_metrics,
                })
                .collect(),
        }
    }

    /// Curve through arbitrary knots. Knots are sorted by calls and repeated
    /// call counts keep their first occurrence.
    pub fn from_knots(mut knots: Vec<CurvePoint>) -> Result<Self> {
        if knots.iter().any(|k| !k.calls.is_finite()) {
            return Err(Error::invalid("curve knots need finite call counts"));
        }
        knots.sort_by(|a, b| a.calls.total_cmp(&b.calls));
        knots.dedup_by(|later, earlier| later.calls == earlier.calls);
        Ok(TradeoffCurve { points: knots })
    }

    /// Linear interpolation of `metric` at `n` calls.
    pub fn metric_at(&self, metric: &str, n: f64) -> Result<Interpolated> {
        let value = |p: &CurvePoint| {
            p.metrics
                .get(metric)
                .copied()
                .ok_or_else(|| Error::invalid(format!("curve has no metric {metric:?}")))
        };
        let (first, last) = match (self.points.first(), self.points.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::invalid("empty curve")),
        };
        if n <= first.calls {
            return Ok(Interpolated {
                value: value(first)?,
                clamped: n < first.calls,
            });
        }
        if n >= last.calls {
            return Ok(Interpolated {
                value: value(last)?,
                clamped: n > last.calls,
            });
        }
        let hi = self.points.iter().position(|p| p.calls >= n).expect("inside range");
        let (a, b) = (&self.points[hi - 1], &self.points[hi]);
        let t = (n - a.calls) / (b.calls - a.calls);
        let (va, vb) = (value(a)?, value(b)?);
        Ok(Interpolated {
            value: va + t * (vb - va),
            clamped: false,
        })
    }
}

/// `curve_metric_at` with a warning when the query is clamped.
pub fn curve_metric_at(curve: &TradeoffCurve, metric: &str, n: f64) -> Result<Interpolated> {
    let v = curve.metric_at(metric, n)?;
    if v.clamped {
        log::warn!("{metric} requested at N={n} outside the curve range; clamped");
    }
    Ok(v)
}

/// TSV with one row per point:
/// `alpha seed expected_calls deterministic_calls validation_loss` followed
/// by [`METRIC_COLUMNS`].
pub fn points_tsv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("alpha\tseed\texpected_calls\tdeterministic_calls\tvalidation_loss");
    for m in METRIC_COLUMNS {
        out.push('\t');
        out.push_str(m);
    }
    out.push('\n');
    for p in points {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.alpha, p.seed, p.expected_calls, p.deterministic_calls, p.validation_loss
        );
        for m in METRIC_COLUMNS {
            let _ = write!(out, "\t{}", p.test_metrics.get(m).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// Parse a file written by [`points_tsv`].
pub fn parse_points_tsv(text: &str) -> Result<Vec<TradeoffPoint>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::invalid("empty TSV"))?
        .split('\t')
        .collect();
    if header.len() != 5 + METRIC_COLUMNS.len() {
        return Err(Error::invalid("unexpected TSV header"));
    }
    let bad = |line: usize, what: &str| Error::invalid(format!("TSV line {line}: bad {what}"));
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != header.len() {
                return Err(bad(i + 2, "column count"));
            }
            let real = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i + 2, header[j]));
            Ok(TradeoffPoint {
                alpha: real(0)?,
                seed: f[1].parse().map_err(|_| bad(i + 2, "seed"))?,
                expected_calls: real(2)?,
                deterministic_calls: f[3].parse().map_err(|_| bad(i + 2, "calls"))?,
                validation_loss: real(4)?,
                validation_tradeoff: f64::NAN,
                test_metrics: METRIC_COLUMNS
                    .iter()
                    .enumerate()
                    .map(|(m, name)| Ok((name.to_string(), real(5 + m)?)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}
