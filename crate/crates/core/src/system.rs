//! Domain types and the compound scoring function.
//!
//! Documents are addressed by their 0-based position in the first-stage
//! ranking. A [`QueryInstance`] carries the raw pointwise and pairwise
//! predictions; [`derive_channels`] expands them into the seven prediction
//! channels the aggregation function consumes:
//!
//! | channel | kind      | value                                   |
//! |---------|-----------|-----------------------------------------|
//! | M1      | pointwise | `point(i)`                              |
//! | M2      | pointwise | `round(point(i))`                       |
//! | M3      | pairwise  | `pair(i, j)`                            |
//! | M4      | pairwise  | `round(pair(i, j))`                     |
//! | M5      | pairwise  | `1 - pair(j, i)`                        |
//! | M6      | pairwise  | `round(1 - pair(j, i))`                 |
//! | M7      | pairwise  | `sign(point(i) - point(j))`             |
//!
//! The first-stage rank itself acts as the eighth component through the
//! default score `a`.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Number of pointwise channels (M1, M2).
pub const POINT_CHANNELS: usize = 2;
/// Number of pairwise channels (M3..M7).
pub const PAIR_CHANNELS: usize = 5;

/// Index of M7 inside the pairwise channel arrays.
pub const SIGN_CHANNEL: usize = 4;

/// One query: first-stage candidates with labels and raw predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInstance {
    pub query_id: String,
    /// Relevance grade per first-stage position.
    pub labels: Vec<u32>,
    /// Pointwise relevance probability per first-stage position.
    pub point_preds: Array1<f64>,
    /// `pair_preds[[i, j]]`: probability that document `i` beats document
    /// `j` when `i` is presented first. The diagonal is stored but unused.
    pub pair_preds: Array2<f64>,
}

impl QueryInstance {
    pub fn new(
        query_id: impl Into<String>,
        labels: Vec<u32>,
        point_preds: Array1<f64>,
        pair_preds: Array2<f64>,
    ) -> Result<Self> {
        let q = QueryInstance {
            query_id: query_id.into(),
            labels,
            point_preds,
            pair_preds,
        };
        q.validate()?;
        Ok(q)
    }

    /// Number of first-stage candidates.
    pub fn k0(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k0 = self.k0();
        if k0 == 0 {
            return Err(Error::invalid(format!(
                "query {}: no documents",
                self.query_id
            )));
        }
        if self.point_preds.len() != k0 {
            return Err(Error::invalid(format!(
                "query {}: {} pointwise predictions for {} documents",
                self.query_id,
                self.point_preds.len(),
                k0
            )));
        }
        if self.pair_preds.dim() != (k0, k0) {
            return Err(Error::invalid(format!(
                "query {}: pairwise matrix is {:?}, expected ({k0}, {k0})",
                self.query_id,
                self.pair_preds.dim()
            )));
        }
        let in_range = |x: &f64| x.is_finite() && (0.0..=1.0).contains(x);
        if !self.point_preds.iter().all(in_range) || !self.pair_preds.iter().all(in_range) {
            return Err(Error::invalid(format!(
                "query {}: predictions must lie in [0, 1]",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// The derived prediction channels of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionChannels {
    /// M1, M2.
    pub point: [Array1<f64>; POINT_CHANNELS],
    /// M3..M7, each `k0 x k0` with `[[i, j]]` the value for pair (i, j).
    pub pair: [Array2<f64>; PAIR_CHANNELS],
}

impl PredictionChannels {
    pub fn k0(&self) -> usize {
        self.point[0].len()
    }
}

/// Half-up rounding of a probability.
#[inline]
pub fn round_half_up(x: f64) -> f64 {
    if x >= 0.5 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Expand raw predictions into the seven prediction channels.
pub fn derive_channels(q: &QueryInstance) -> Result<PredictionChannels> {
    q.validate()?;
    let k0 = q.k0();
    let p = &q.point_preds;
    let m = &q.pair_preds;

    let m1 = p.clone();
    let m2 = p.mapv(round_half_up);
    let m3 = m.clone();
    let m4 = m.mapv(round_half_up);
    let m5 = Array2::from_shape_fn((k0, k0), |(i, j)| 1.0 - m[[j, i]]);
    let m6 = m5.mapv(round_half_up);
    let m7 = Array2::from_shape_fn((k0, k0), |(i, j)| sign(p[i] - p[j]));

    Ok(PredictionChannels {
        point: [m1, m2],
        pair: [m3, m4, m5, m6, m7],
    })
}

/// A binary selection of which predictions are gathered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSample {
    pub s_point: Array1<bool>,
    /// Ordered pair selections; the diagonal is always `false`.
    pub s_pair: Array2<bool>,
}

impl SelectionSample {
    pub fn empty(k0: usize) -> Self {
        SelectionSample {
            s_point: Array1::from_elem(k0, false),
            s_pair: Array2::from_elem((k0, k0), false),
        }
    }

    /// Every pointwise prediction and every off-diagonal pair.
    pub fn full(k0: usize) -> Self {
        SelectionSample {
            s_point: Array1::from_elem(k0, true),
            s_pair: Array2::from_shape_fn((k0, k0), |(i, j)| i != j),
        }
    }

    pub fn from_parts(s_point: Array1<bool>, mut s_pair: Array2<bool>) -> Result<Self> {
        let k0 = s_point.len();
        if s_pair.dim() != (k0, k0) {
            return Err(Error::invalid(format!(
                "pair selection is {:?}, expected ({k0}, {k0})",
                s_pair.dim()
            )));
        }
        s_pair.diag_mut().fill(false);
        Ok(SelectionSample { s_point, s_pair })
    }

    pub fn k0(&self) -> usize {
        self.s_point.len()
    }

    pub fn point_calls(&self) -> usize {
        self.s_point.iter().filter(|&&s| s).count()
    }

    pub fn pair_calls(&self) -> usize {
        self.s_pair.iter().filter(|&&s| s).count()
    }

    /// Number of LLM calls this selection makes.
    pub fn calls(&self) -> usize {
        self.point_calls() + self.pair_calls()
    }

    /// Selection indicator of pairwise channel `c` (0 = M3 .. 4 = M7) for the
    /// term that document `r` receives from pair `(r, r2)`.
    #[inline]
    pub fn pair_channel(&self, c: usize, r: usize, r2: usize) -> bool {
        if r == r2 {
            return false;
        }
        match c {
            0 | 1 => self.s_pair[[r, r2]],
            2 | 3 => self.s_pair[[r2, r]],
            _ => self.s_point[r] && self.s_point[r2],
        }
    }

    /// The stacked `(k0 + 1) x k0` selection matrix: column `r` holds
    /// `s_point(r)` on top followed by row `r` of `s_pair`.
    pub fn stacked(&self) -> Array2<f64> {
        let k0 = self.k0();
        Array2::from_shape_fn((k0 + 1, k0), |(row, r)| match row {
            0 => f64::from(u8::from(self.s_point[r])),
            _ => f64::from(u8::from(self.s_pair[[r, row - 1]])),
        })
    }
}

/// Parameters of the linear score aggregation function.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationParams {
    /// Default score per first-stage rank.
    pub a: Array1<f64>,
    pub b_point: [Array1<f64>; POINT_CHANNELS],
    pub c_point: [Array1<f64>; POINT_CHANNELS],
    pub b_pair: [Array2<f64>; PAIR_CHANNELS],
    pub c_pair: [Array2<f64>; PAIR_CHANNELS],
}

impl AggregationParams {
    pub fn zeros(k0: usize) -> Self {
        let v = || Array1::zeros(k0);
        let m = || Array2::zeros((k0, k0));
        AggregationParams {
            a: v(),
            b_point: [v(), v()],
            c_point: [v(), v()],
            b_pair: [m(), m(), m(), m(), m()],
            c_pair: [m(), m(), m(), m(), m()],
        }
    }

    pub fn k0(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k0 = self.k0();
        let vecs_ok = self
            .b_point
            .iter()
            .chain(&self.c_point)
            .all(|v| v.len() == k0);
        let mats_ok = self
            .b_pair
            .iter()
            .chain(&self.c_pair)
            .all(|m| m.dim() == (k0, k0));
        if !vecs_ok || !mats_ok {
            return Err(Error::invalid("aggregation parameter shapes disagree"));
        }
        let finite = self.a.iter().all(|x| x.is_finite())
            && self
                .b_point
                .iter()
                .chain(&self.c_point)
                .all(|v| v.iter().all(|x| x.is_finite()))
            && self
                .b_pair
                .iter()
                .chain(&self.c_pair)
                .all(|m| m.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::invalid("aggregation parameters must be finite"));
        }
        Ok(())
    }
}

fn check_shapes(
    params: &AggregationParams,
    sel: &SelectionSample,
    ch: &PredictionChannels,
) -> Result<usize> {
    let k0 = params.k0();
    params.validate()?;
    if sel.k0() != k0 || sel.s_pair.dim() != (k0, k0) || ch.k0() != k0 {
        return Err(Error::invalid(format!(
            "shape mismatch: params k0={k0}, selection k0={}, channels k0={}",
            sel.k0(),
            ch.k0()
        )));
    }
    if ch.pair.iter().any(|m| m.dim() != (k0, k0)) || ch.point.iter().any(|v| v.len() != k0) {
        return Err(Error::invalid("channel shapes disagree"));
    }
    Ok(k0)
}

/// Per-document compound scores as a direct sum over gathered predictions.
pub fn score_documents(
    params: &AggregationParams,
    sel: &SelectionSample,
    ch: &PredictionChannels,
) -> Result<Vec<f64>> {
    let k0 = check_shapes(params, sel, ch)?;
    let mut scores = params.a.to_vec();
    for (r, score) in scores.iter_mut().enumerate() {
        if sel.s_point[r] {
            for c in 0..POINT_CHANNELS {
                *score += params.b_point[c][r] + params.c_point[c][r] * ch.point[c][r];
            }
        }
        for c in 0..PAIR_CHANNELS {
            let (b, w, m) = (&params.b_pair[c], &params.c_pair[c], &ch.pair[c]);
            for r2 in 0..k0 {
                if sel.pair_channel(c, r, r2) {
                    *score += b[[r, r2]] + w[[r, r2]] * m[[r, r2]];
                }
            }
        }
    }
    Ok(scores)
}

/// Row-wise reduction of `B ⊙ Sᵀ + C ⊙ (S ⊙ X)ᵀ` for one stacked channel
/// group, added into `out`.
fn stacked_pass(
    out: &mut Array1<f64>,
    b: &Array2<f64>,
    c: &Array2<f64>,
    s: &Array2<f64>,
    x: &Array2<f64>,
) {
    let masked = s * x;
    let terms = b * &s.t() + &(c * &masked.t());
    *out += &terms.sum_axis(Axis(1));
}

/// Pack a pointwise vector and a pairwise matrix into a `k0 x (k0 + 1)`
/// parameter block: column 0 is the pointwise entry, columns `1..` row `r` of
/// the pairwise matrix.
fn pack_params(point: Option<&Array1<f64>>, pair: &Array2<f64>) -> Array2<f64> {
    let k0 = pair.nrows();
    Array2::from_shape_fn((k0, k0 + 1), |(r, col)| match col {
        0 => point.map_or(0.0, |v| v[r]),
        _ => pair[[r, col - 1]],
    })
}

/// Pack into the `(k0 + 1) x k0` layout of selections and predictions:
/// column `r` holds the pointwise entry followed by row `r` of `pair`.
fn pack_columns(point: Option<&Array1<f64>>, pair: &Array2<f64>) -> Array2<f64> {
    let k0 = pair.nrows();
    Array2::from_shape_fn((k0 + 1, k0), |(row, r)| match row {
        0 => point.map_or(0.0, |v| v[r]),
        _ => pair[[r, row - 1]],
    })
}

/// Per-document compound scores through stacked matrices, one pass per
/// channel group. Agrees with [`score_documents`] up to floating-point
/// reassociation.
pub fn score_documents_matrix(
    params: &AggregationParams,
    sel: &SelectionSample,
    ch: &PredictionChannels,
) -> Result<Vec<f64>> {
    let k0 = check_shapes(params, sel, ch)?;
    let sp = sel.s_point.mapv(|s| f64::from(u8::from(s)));
    let [forward, _, reverse, _, both] = selection_masks(sel);
    let zero_point = Array1::zeros(k0);

    let mut out = params.a.clone();
    for c in 0..PAIR_CHANNELS {
        let (point_sel, point_b, point_c, point_x) = if c < POINT_CHANNELS {
            (
                Some(&sp),
                Some(&params.b_point[c]),
                Some(&params.c_point[c]),
                Some(&ch.point[c]),
            )
        } else {
            (Some(&zero_point), None, None, None)
        };
        let pair_sel = match c {
            0 | 1 => &forward,
            2 | 3 => &reverse,
            _ => &both,
        };
        let s = pack_columns(point_sel, pair_sel);
        let x = pack_columns(point_x, &ch.pair[c]);
        let b = pack_params(point_b, &params.b_pair[c]);
        let w = pack_params(point_c, &params.c_pair[c]);
        stacked_pass(&mut out, &b, &w, &s, &x);
    }
    Ok(out.to_vec())
}

/// Effective selection of every pairwise channel as 0/1 matrices indexed
/// `[[r, r2]]`: the value [`SelectionSample::pair_channel`] returns.
pub fn selection_masks(sel: &SelectionSample) -> [Array2<f64>; PAIR_CHANNELS] {
    let k0 = sel.k0();
    let forward = sel.s_pair.mapv(|s| f64::from(u8::from(s)));
    let reverse = forward.t().to_owned();
    let both = Array2::from_shape_fn((k0, k0), |(r, r2)| {
        f64::from(u8::from(r != r2 && sel.s_point[r] && sel.s_point[r2]))
    });
    [forward.clone(), forward, reverse.clone(), reverse, both]
}

/// Scoring with fixed parameters and selection, for evaluating many
/// queries. Scores are linear in the predictions, so the
/// prediction-independent part is folded into `base` once and each query
/// costs one weighted sum per channel.
#[derive(Debug, Clone)]
pub struct ScoringPlan {
    base: Array1<f64>,
    point_weights: [Array1<f64>; POINT_CHANNELS],
    pair_weights: [Array2<f64>; PAIR_CHANNELS],
}

impl ScoringPlan {
    pub fn new(params: &AggregationParams, sel: &SelectionSample) -> Result<Self> {
        params.validate()?;
        let k0 = params.k0();
        if sel.k0() != k0 || sel.s_pair.dim() != (k0, k0) {
            return Err(Error::invalid(format!(
                "shape mismatch: params k0={k0}, selection k0={}",
                sel.k0()
            )));
        }
        let sp = sel.s_point.mapv(|s| f64::from(u8::from(s)));
        let masks = selection_masks(sel);
        let mut base = params.a.clone();
        let point_weights = std::array::from_fn(|c| {
            base += &(&params.b_point[c] * &sp);
            &params.c_point[c] * &sp
        });
        let pair_weights = std::array::from_fn(|c| {
            base += &(&params.b_pair[c] * &masks[c]).sum_axis(Axis(1));
            &params.c_pair[c] * &masks[c]
        });
        Ok(ScoringPlan {
            base,
            point_weights,
            pair_weights,
        })
    }

    pub fn k0(&self) -> usize {
        self.base.len()
    }

    pub fn scores(&self, ch: &PredictionChannels) -> Result<Vec<f64>> {
        if ch.k0() != self.k0() {
            return Err(Error::invalid(format!(
                "channels have k0={}, plan has {}",
                ch.k0(),
                self.k0()
            )));
        }
        let mut out = self.base.clone();
        for (w, m) in self.point_weights.iter().zip(&ch.point) {
            out += &(w * m);
        }
        for (w, m) in self.pair_weights.iter().zip(&ch.pair) {
            out += &(w * m).sum_axis(Axis(1));
        }
        Ok(out.to_vec())
    }

    pub fn ranking(&self, ch: &PredictionChannels) -> Result<Vec<usize>> {
        rank_by_scores(&self.scores(ch)?)
    }
}

/// Re-rank the first-stage candidates by descending score. Ties keep
/// first-stage order. Returns first-stage indices, best first.
pub fn rank_by_scores(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score at position {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep ascending first-stage rank.
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite"));
    Ok(order)
}

/// Scores and ranking in one call.
pub fn compound_ranking(
    params: &AggregationParams,
    sel: &SelectionSample,
    ch: &PredictionChannels,
) -> Result<Vec<usize>> {
    rank_by_scores(&score_documents(params, sel, ch)?)
}
