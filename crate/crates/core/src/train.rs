//! Full-batch training of one compound system.
//!
//! Each step materializes both networks over all ranks, draws one selection
//! per training query, scores every query with the sampled selection and
//! backpropagates the soft ranking loss and the expected cost into the
//! networks. Selections pass gradients to their logits through the
//! straight-through factor.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::losses::{
    cost_loss, distillation_loss, ndcg_at_k, soft_distillation_loss_grad, soft_dcg_loss_grad,
    utility, SoftRankConfig,
};
use crate::nn::{AdamaxConfig, AdamaxState, Gradients, StraightThrough};
use crate::policy::{
    determinize, materialize, materialize_tables, sample_with, PolicyNetworks, RankFeatures,
    SelectionPolicyProbabilities, Tables, PAIR_OUTPUTS, POINT_OUTPUTS,
};
use crate::baselines::{prp_rerank, PrpReading};
use crate::sweep::TradeoffPoint;
use crate::system::{
    derive_channels, selection_masks, AggregationParams, PredictionChannels, QueryInstance,
    ScoringPlan, SelectionSample, PAIR_CHANNELS, POINT_CHANNELS, SIGN_CHANNEL,
};

/// Which ranking loss the system is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Negative DCG@K against relevance labels.
    #[default]
    Supervised,
    /// Distillation loss against the full PRP ranking.
    Distil,
}

/// Validation loss that picks the determinized selection among samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DeterminizeBy {
    /// Ranking loss plus weighted call cost at the run's alpha.
    #[default]
    Tradeoff,
    /// Ranking loss alone.
    Ranking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub loss_kind: LossKind,
    pub cutoff_k: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamaxConfig,
    pub determinize_samples: usize,
    pub determinize_by: DeterminizeBy,
    pub eval_every: usize,
    pub soft_rank: SoftRankConfig,
    pub straight_through: StraightThrough,
    /// Weight of one full selection (every pointwise and pairwise call) in
    /// the cost term; a single call costs `cost_scale / k0²`.
    pub cost_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            loss_kind: LossKind::Supervised,
            cutoff_k: 10,
            steps: 15_000,
            seed: 0,
            optimizer: AdamaxConfig::default(),
            determinize_samples: 250,
            determinize_by: DeterminizeBy::Tradeoff,
            eval_every: 100,
            soft_rank: SoftRankConfig::default(),
            straight_through: StraightThrough::Probability,
            cost_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.cutoff_k == 0 {
            return Err(Error::invalid("cutoff must be at least 1"));
        }
        if self.determinize_samples == 0 {
            return Err(Error::invalid("determinization needs at least one sample"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.cost_scale < 0.0 || !self.cost_scale.is_finite() {
            return Err(Error::invalid("cost_scale must be finite and non-negative"));
        }
        let opt = &self.optimizer;
        if opt.lr <= 0.0 || !opt.lr.is_finite() || !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
            return Err(Error::invalid("invalid optimizer hyperparameters"));
        }
        self.soft_rank.validate()
    }

    /// Cost-term weight of a single call for candidate lists of length `k0`.
    pub fn call_weight(&self, k0: usize) -> f64 {
        self.cost_scale / (k0 * k0).max(1) as f64
    }
}

/// A query with its derived channels and PRP teacher ranking.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub query_id: String,
    pub labels: Vec<u32>,
    pub channels: PredictionChannels,
    pub teacher: Vec<usize>,
}

impl PreparedQuery {
    pub fn new(q: &QueryInstance) -> Result<Self> {
        Ok(PreparedQuery {
            query_id: q.query_id.clone(),
            labels: q.labels.clone(),
            channels: derive_channels(q)?,
            teacher: prp_rerank(q, q.k0(), false, PrpReading::WinRate)?.0,
        })
    }

    pub fn k0(&self) -> usize {
        self.labels.len()
    }
}

pub fn prepare(queries: &[QueryInstance]) -> Result<Vec<PreparedQuery>> {
    queries.iter().map(PreparedQuery::new).collect()
}

/// Exact ranking loss of `ranking` for one query.
pub fn exact_ranking_loss(kind: LossKind, q: &PreparedQuery, ranking: &[usize], k: usize) -> f64 {
    match kind {
        LossKind::Supervised => -utility(ranking, &q.labels, k),
        LossKind::Distil => distillation_loss(&q.teacher, ranking, k),
    }
}

/// Soft ranking loss and its gradient with respect to the scores.
pub fn soft_ranking_loss_grad(
    kind: LossKind,
    q: &PreparedQuery,
    scores: &[f64],
    k: usize,
    cfg: &SoftRankConfig,
) -> (f64, Vec<f64>) {
    match kind {
        LossKind::Supervised => soft_dcg_loss_grad(scores, &q.labels, k, cfg),
        LossKind::Distil => soft_distillation_loss_grad(scores, &q.teacher, k, cfg),
    }
}

/// Standard evaluation metrics, averaged over queries.
pub fn evaluate_rankings(queries: &[PreparedQuery], rankings: &[Vec<usize>]) -> BTreeMap<String, f64> {
    let n = queries.len().max(1) as f64;
    let mut out = BTreeMap::new();
    for k in [10, 25] {
        let ndcg: f64 = queries
            .iter()
            .zip(rankings)
            .map(|(q, r)| ndcg_at_k(r, &q.labels, k))
            .sum();
        let distil: f64 = queries
            .iter()
            .zip(rankings)
            .map(|(q, r)| distillation_loss(&q.teacher, r, k))
            .sum();
        out.insert(format!("ndcg@{k}"), ndcg / n);
        out.insert(format!("distil@{k}"), distil / n);
    }
    out
}

/// Rankings of every query under fixed parameters and selection.
pub fn rank_all(
    params: &AggregationParams,
    sel: &SelectionSample,
    queries: &[PreparedQuery],
) -> Result<Vec<Vec<usize>>> {
    let plan = ScoringPlan::new(params, sel)?;
    queries.iter().map(|q| plan.ranking(&q.channels)).collect()
}

/// Mean exact ranking loss under a fixed selection.
pub fn mean_exact_loss(
    kind: LossKind,
    k: usize,
    params: &AggregationParams,
    sel: &SelectionSample,
    queries: &[PreparedQuery],
) -> Result<f64> {
    let plan = ScoringPlan::new(params, sel)?;
    let mut total = 0.0;
    for q in queries {
        total += exact_ranking_loss(kind, q, &plan.ranking(&q.channels)?, k);
    }
    Ok(total / queries.len().max(1) as f64)
}

/// Validation trade-off loss of a fixed selection:
/// `α · mean exact ranking loss + (1 - α) · call_weight · calls`.
pub fn selection_tradeoff(
    cfg: &TrainConfig,
    params: &AggregationParams,
    sel: &SelectionSample,
    queries: &[PreparedQuery],
) -> Result<f64> {
    let ranking = mean_exact_loss(cfg.loss_kind, cfg.cutoff_k, params, sel, queries)?;
    let cost = cfg.call_weight(sel.k0()) * sel.calls() as f64;
    Ok(cfg.alpha * ranking + (1.0 - cfg.alpha) * cost)
}

/// Objective value and network gradients for fixed selections.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// `α · ranking_loss + (1 - α) · call_weight · expected calls`.
    pub loss: f64,
    /// Mean soft ranking loss over the batch.
    pub ranking_loss: f64,
    /// Expected calls per query.
    pub expected_calls: f64,
    pub point_grads: Gradients,
    pub pair_grads: Gradients,
}

/// Objective and gradients with `samples[i]` fixed as the selection of
/// `queries[i]`.
pub fn loss_and_gradients(
    nets: &PolicyNetworks,
    features: &RankFeatures,
    queries: &[PreparedQuery],
    samples: &[SelectionSample],
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let tables = materialize_tables(nets, features);
    gradients_from_tables(nets, features, &tables, queries, samples, cfg)
}

fn gradients_from_tables(
    nets: &PolicyNetworks,
    features: &RankFeatures,
    tables: &Tables,
    queries: &[PreparedQuery],
    samples: &[SelectionSample],
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let k0 = features.k0;
    if queries.len() != samples.len() {
        return Err(Error::invalid("one selection per query is required"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let params = &tables.params;
    let probs = &tables.probs;
    let weight = cfg.alpha / queries.len() as f64;

    // Gradients with respect to aggregation parameters and relaxed selections.
    let mut g = AggregationParams::zeros(k0);
    let mut g_sp = Array1::<f64>::zeros(k0);
    let mut g_spair = Array2::<f64>::zeros((k0, k0));
    let mut ranking_loss = 0.0;

    for (q, sel) in queries.iter().zip(samples) {
        if q.k0() != k0 || sel.k0() != k0 {
            return Err(Error::invalid("query and selection sizes disagree"));
        }
        let ch = &q.channels;
        let scores = ScoringPlan::new(params, sel)?.scores(ch)?;
        let (loss, ds) =
            soft_ranking_loss_grad(cfg.loss_kind, q, &scores, cfg.cutoff_k, &cfg.soft_rank);
        ranking_loss += loss;
        if weight == 0.0 {
            continue;
        }
        let ds = Array1::from(ds) * weight;
        // Column view: ds[r] broadcast along row r.
        let d_rows = ds.view().insert_axis(Axis(1));
        let sp = sel.s_point.mapv(|s| f64::from(u8::from(s)));
        let masks = selection_masks(sel);

        g.a += &ds;
        let mut point_value = Array1::<f64>::zeros(k0);
        for c in 0..POINT_CHANNELS {
            let dsp = &ds * &sp;
            g.b_point[c] += &dsp;
            g.c_point[c] += &(&dsp * &ch.point[c]);
            point_value += &(&params.b_point[c] + &(&params.c_point[c] * &ch.point[c]));
        }
        g_sp += &(&ds * &point_value);

        let mut values: Vec<Array2<f64>> = Vec::with_capacity(PAIR_CHANNELS);
        for c in 0..PAIR_CHANNELS {
            let dm = &masks[c] * &d_rows;
            g.c_pair[c] += &(&dm * &ch.pair[c]);
            g.b_pair[c] += &dm;
            // Row r of `values[c]` holds ds[r] · (b + c · m) of channel c.
            values.push((&params.b_pair[c] + &(&params.c_pair[c] * &ch.pair[c])) * d_rows);
        }
        // s_pair(r, r2) feeds M3/M4 of row r and M5/M6 of row r2.
        g_spair += &values[0];
        g_spair += &values[1];
        g_spair += &values[2].t();
        g_spair += &values[3].t();
        // M7 of row r carries s_point(r) · s_point(r2) for r2 != r.
        let mut sign = std::mem::take(&mut values[SIGN_CHANNEL]);
        sign.diag_mut().fill(0.0);
        g_sp += &sign.dot(&sp);
        g_sp += &sign.t().dot(&sp);
    }
    ranking_loss /= queries.len() as f64;
    let expected_calls = cost_loss(probs);
    let call_weight = (1.0 - cfg.alpha) * cfg.call_weight(k0);
    let loss = cfg.alpha * ranking_loss + call_weight * expected_calls;

    let point_out = tables.point_cache.output();
    let pair_out = tables.pair_cache.output();
    let logit_grad = |logit: f64, p: f64, g_sel: f64| {
        let s = crate::nn::sigmoid(logit);
        (g_sel * cfg.straight_through.factor(p) + call_weight) * s * (1.0 - s)
    };

    let mut g_point = Array2::<f64>::zeros((k0, POINT_OUTPUTS));
    for r in 0..k0 {
        g_point[[r, 0]] = g.a[r];
        for c in 0..POINT_CHANNELS {
            g_point[[r, 1 + 2 * c]] = g.b_point[c][r];
            g_point[[r, 2 + 2 * c]] = g.c_point[c][r];
        }
        let last = POINT_OUTPUTS - 1;
        g_point[[r, last]] = logit_grad(point_out[[r, last]], probs.p_point[r], g_sp[r]);
    }
    let mut g_pair = Array2::<f64>::zeros((features.pairs.len(), PAIR_OUTPUTS));
    for (row, &(r, r2)) in features.pairs.iter().enumerate() {
        for c in 0..PAIR_CHANNELS {
            g_pair[[row, 2 * c]] = g.b_pair[c][[r, r2]];
            g_pair[[row, 2 * c + 1]] = g.c_pair[c][[r, r2]];
        }
        let last = PAIR_OUTPUTS - 1;
        g_pair[[row, last]] = logit_grad(pair_out[[row, last]], probs.p_pair[[r, r2]], g_spair[[r, r2]]);
    }

    Ok(StepResult {
        loss,
        ranking_loss,
        expected_calls,
        point_grads: nets.point_net.backward_batch(&tables.point_cache, &g_point),
        pair_grads: nets.pair_net.backward_batch(&tables.pair_cache, &g_pair),
    })
}

/// Select every entry whose probability exceeds one half.
pub fn mode_selection(probs: &SelectionPolicyProbabilities) -> SelectionSample {
    let k0 = probs.k0();
    SelectionSample {
        s_point: probs.p_point.mapv(|p| p > 0.5),
        s_pair: Array2::from_shape_fn((k0, k0), |(r, r2)| r != r2 && probs.p_pair[[r, r2]] > 0.5),
    }
}

/// One validation evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub validation_tradeoff: f64,
    pub expected_calls: f64,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Networks of the best validation checkpoint.
    pub nets: PolicyNetworks,
    /// Determinized selection.
    pub selection: SelectionSample,
    pub point: TradeoffPoint,
    pub history: Vec<EvalRecord>,
    /// Trade-off loss of every determinization sample, in draw order.
    pub determinize_losses: Vec<f64>,
    pub best_step: usize,
}

const SAMPLING_STREAM: u64 = 0x5eed_0001;
const DETERMINIZE_STREAM: u64 = 0x5eed_0002;

fn check_split(split: &Split) -> Result<usize> {
    let k0 = split.train.k0();
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("train, validation and test parts must be non-empty"));
    }
    if split.validation.k0() != k0 || split.test.k0() != k0 {
        return Err(Error::invalid("all parts must share one candidate count"));
    }
    Ok(k0)
}

/// Train one compound system on `split.train`, keep the checkpoint with the
/// lowest validation trade-off loss, determinize its policy on the
/// validation set and evaluate on the test set.
///
/// Checkpoints are scored deterministically: the ranking loss of the mode
/// selection (every entry with probability above one half) plus the
/// expected cost of the stochastic policy.
pub fn train_system(split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k0 = check_split(split)?;
    let train = prepare(&split.train.queries)?;
    let val = prepare(&split.validation.queries)?;
    let test = prepare(&split.test.queries)?;
    let features = RankFeatures::new(k0);

    let mut nets = PolicyNetworks::for_training(cfg.seed);
    let mut opt_point = AdamaxState::new(&nets.point_net, cfg.optimizer);
    let mut opt_pair = AdamaxState::new(&nets.pair_net, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLING_STREAM);

    let validate_nets = |nets: &PolicyNetworks| -> Result<f64> {
        let (probs, params) = materialize(nets, k0);
        let ranking =
            mean_exact_loss(cfg.loss_kind, cfg.cutoff_k, &params, &mode_selection(&probs), &val)?;
        Ok(cfg.alpha * ranking + (1.0 - cfg.alpha) * cfg.call_weight(k0) * cost_loss(&probs))
    };
    let mut best = (validate_nets(&nets)?, 0, nets.clone());
    let mut history = Vec::new();

    for step in 1..=cfg.steps {
        let tables = materialize_tables(&nets, &features);
        let samples: Vec<SelectionSample> =
            train.iter().map(|_| sample_with(&tables.probs, &mut rng)).collect();
        let res = gradients_from_tables(&nets, &features, &tables, &train, &samples, cfg)?;
        let finite = res.loss.is_finite()
            && res.point_grads.flatten().iter().all(|g| g.is_finite())
            && res.pair_grads.flatten().iter().all(|g| g.is_finite());
        if !finite {
            return Err(Error::Diverged { step });
        }
        opt_point.step(&mut nets.point_net, &res.point_grads);
        opt_pair.step(&mut nets.pair_net, &res.pair_grads);
        if !nets.is_finite() {
            return Err(Error::Diverged { step });
        }

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = validate_nets(&nets)?;
            history.push(EvalRecord {
                step,
                train_loss: res.loss,
                validation_tradeoff: v,
                expected_calls: res.expected_calls,
            });
            log::debug!(
                "alpha={} step={step} train={:.5} val={v:.5} calls={:.1}",
                cfg.alpha,
                res.loss,
                res.expected_calls
            );
            if v < best.0 {
                best = (v, step, nets.clone());
            }
        }
    }

    let (_, best_step, nets) = best;
    let (probs, params) = materialize(&nets, k0);
    let det = determinize(
        &probs,
        cfg.determinize_samples,
        cfg.seed ^ DETERMINIZE_STREAM,
        |s| match cfg.determinize_by {
            DeterminizeBy::Tradeoff => selection_tradeoff(cfg, &params, s, &val),
            DeterminizeBy::Ranking => mean_exact_loss(cfg.loss_kind, cfg.cutoff_k, &params, s, &val),
        },
    )?;
    let selection = det.sample;
    let validation_loss = mean_exact_loss(cfg.loss_kind, cfg.cutoff_k, &params, &selection, &val)?;
    let test_rankings = rank_all(&params, &selection, &test)?;
    let point = TradeoffPoint {
        alpha: cfg.alpha,
        seed: cfg.seed,
        expected_calls: cost_loss(&probs),
        deterministic_calls: selection.calls(),
        validation_loss,
        validation_tradeoff: selection_tradeoff(cfg, &params, &selection, &val)?,
        test_metrics: evaluate_rankings(&test, &test_rankings),
    };
    Ok(TrainOutcome {
        nets,
        selection,
        point,
        history,
        determinize_losses: det.sample_losses,
        best_step,
    })
}
