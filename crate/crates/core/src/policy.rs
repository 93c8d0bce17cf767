//! The selection policy: two MLPs map first-stage ranks (and rank pairs) to
//! aggregation parameters and selection probabilities.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, ForwardCache, Mlp};
use crate::system::{AggregationParams, SelectionSample, PAIR_CHANNELS, POINT_CHANNELS};

/// Features per encoded rank.
pub const RANK_FEATURES: usize = 3;
/// Features per encoded rank pair: both ranks plus an order indicator.
pub const PAIR_FEATURES: usize = 2 * RANK_FEATURES + 1;
/// Point net outputs: `A`, `(B, C)` per pointwise channel, policy logit.
pub const POINT_OUTPUTS: usize = 1 + 2 * POINT_CHANNELS + 1;
/// Pair net outputs: `(B, C)` per pairwise channel, policy logit.
pub const PAIR_OUTPUTS: usize = 2 * PAIR_CHANNELS + 1;

/// Probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-6;

/// Per-rank and per-rank-pair selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPolicyProbabilities {
    pub p_point: Array1<f64>,
    /// Zero diagonal.
    pub p_pair: Array2<f64>,
}

impl SelectionPolicyProbabilities {
    pub fn k0(&self) -> usize {
        self.p_point.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k0 = self.k0();
        if self.p_pair.dim() != (k0, k0) {
            return Err(Error::invalid("probability table shapes disagree"));
        }
        let ok = |p: &f64| (0.0..=1.0).contains(p);
        if !self.p_point.iter().all(ok) || !self.p_pair.iter().all(ok) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        if self.p_pair.diag().iter().any(|&p| p != 0.0) {
            return Err(Error::invalid("pair probabilities need a zero diagonal"));
        }
        Ok(())
    }
}

/// Rank encoding `[r/k0, ln r / ln k0, 1]` for a 1-based rank.
pub fn encode_rank(r: usize, k0: usize) -> Result<[f64; RANK_FEATURES]> {
    if r == 0 || r > k0 {
        return Err(Error::invalid(format!("rank {r} outside 1..={k0}")));
    }
    let log_ratio = if k0 == 1 {
        0.0
    } else {
        (r as f64).ln() / (k0 as f64).ln()
    };
    Ok([r as f64 / k0 as f64, log_ratio, 1.0])
}

/// Pair encoding: both rank encodings and `1[r < r2]`.
pub fn encode_pair(r: usize, r2: usize, k0: usize) -> Result<[f64; PAIR_FEATURES]> {
    let a = encode_rank(r, k0)?;
    let b = encode_rank(r2, k0)?;
    let mut out = [0.0; PAIR_FEATURES];
    out[..RANK_FEATURES].copy_from_slice(&a);
    out[RANK_FEATURES..2 * RANK_FEATURES].copy_from_slice(&b);
    out[2 * RANK_FEATURES] = f64::from(u8::from(r < r2));
    Ok(out)
}

/// Encoded inputs for every rank and every off-diagonal ordered pair.
#[derive(Debug, Clone)]
pub struct RankFeatures {
    pub k0: usize,
    /// `k0 x RANK_FEATURES`.
    pub point: Array2<f64>,
    /// `(k0² - k0) x PAIR_FEATURES`, rows in [`RankFeatures::pairs`] order.
    pub pair: Array2<f64>,
    /// 0-based `(r, r2)` of each pair row, row-major without the diagonal.
    pub pairs: Vec<(usize, usize)>,
}

impl RankFeatures {
    pub fn new(k0: usize) -> Self {
        let pairs: Vec<(usize, usize)> = (0..k0)
            .flat_map(|r| (0..k0).filter(move |&r2| r2 != r).map(move |r2| (r, r2)))
            .collect();
        let point = Array2::from_shape_fn((k0, RANK_FEATURES), |(r, f)| {
            encode_rank(r + 1, k0).expect("in range")[f]
        });
        let pair = Array2::from_shape_fn((pairs.len(), PAIR_FEATURES), |(row, f)| {
            let (r, r2) = pairs[row];
            encode_pair(r + 1, r2 + 1, k0).expect("in range")[f]
        });
        RankFeatures {
            k0,
            point,
            pair,
            pairs,
        }
    }
}

/// The two networks generating every variable of the compound system.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetworks {
    pub point_net: Mlp,
    pub pair_net: Mlp,
}

impl PolicyNetworks {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        PolicyNetworks {
            point_net: Mlp::new(&Mlp::default_sizes(RANK_FEATURES, POINT_OUTPUTS), rng),
            pair_net: Mlp::new(&Mlp::default_sizes(PAIR_FEATURES, PAIR_OUTPUTS), rng),
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Seeded networks whose aggregation outputs start at exactly zero while
    /// the policy logits keep their random initialization. All scores are
    /// then tied, so the untrained system returns the first-stage ranking.
    pub fn for_training(seed: u64) -> Self {
        let mut nets = Self::seeded(seed);
        for net in [&mut nets.point_net, &mut nets.pair_net] {
            let last = net.layers.last_mut().expect("non-empty network");
            let logit = last.weights.nrows() - 1;
            last.weights
                .slice_mut(ndarray::s![..logit, ..])
                .fill(0.0);
            last.bias.slice_mut(ndarray::s![..logit]).fill(0.0);
        }
        nets
    }

    pub fn zeros() -> Self {
        PolicyNetworks {
            point_net: Mlp::zeros(&Mlp::default_sizes(RANK_FEATURES, POINT_OUTPUTS)),
            pair_net: Mlp::zeros(&Mlp::default_sizes(PAIR_FEATURES, PAIR_OUTPUTS)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.point_net.is_finite() && self.pair_net.is_finite()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = PolicyNetworksFile {
            point_net: (&self.point_net).into(),
            pair_net: (&self.pair_net).into(),
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PolicyNetworksFile = serde_json::from_str(&text)?;
        let nets = PolicyNetworks {
            point_net: file.point_net.try_into()?,
            pair_net: file.pair_net.try_into()?,
        };
        if nets.point_net.input_dim() != RANK_FEATURES
            || nets.point_net.output_dim() != POINT_OUTPUTS
            || nets.pair_net.input_dim() != PAIR_FEATURES
            || nets.pair_net.output_dim() != PAIR_OUTPUTS
        {
            return Err(Error::invalid("checkpoint networks have the wrong shape"));
        }
        Ok(nets)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyNetworksFile {
    point_net: crate::nn::MlpFile,
    pair_net: crate::nn::MlpFile,
}

#[inline]
pub(crate) fn clipped_probability(logit: f64) -> f64 {
    sigmoid(logit).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Network outputs for every rank and pair, with the forward caches needed
/// to backpropagate into the networks.
#[derive(Debug, Clone)]
pub struct Tables {
    pub probs: SelectionPolicyProbabilities,
    pub params: AggregationParams,
    pub point_cache: ForwardCache,
    pub pair_cache: ForwardCache,
}

/// Evaluate both networks on precomputed features.
pub fn materialize_tables(nets: &PolicyNetworks, features: &RankFeatures) -> Tables {
    let k0 = features.k0;
    let point_cache = nets.point_net.forward_cached(&features.point);
    let pair_cache = nets.pair_net.forward_cached(&features.pair);
    let po = point_cache.output();
    let qo = pair_cache.output();

    let mut params = AggregationParams::zeros(k0);
    let mut p_point = Array1::zeros(k0);
    for r in 0..k0 {
        params.a[r] = po[[r, 0]];
        for c in 0..POINT_CHANNELS {
            params.b_point[c][r] = po[[r, 1 + 2 * c]];
            params.c_point[c][r] = po[[r, 2 + 2 * c]];
        }
        p_point[r] = clipped_probability(po[[r, POINT_OUTPUTS - 1]]);
    }
    let mut p_pair = Array2::zeros((k0, k0));
    for (row, &(r, r2)) in features.pairs.iter().enumerate() {
        for c in 0..PAIR_CHANNELS {
            params.b_pair[c][[r, r2]] = qo[[row, 2 * c]];
            params.c_pair[c][[r, r2]] = qo[[row, 2 * c + 1]];
        }
        p_pair[[r, r2]] = clipped_probability(qo[[row, PAIR_OUTPUTS - 1]]);
    }
    Tables {
        probs: SelectionPolicyProbabilities { p_point, p_pair },
        params,
        point_cache,
        pair_cache,
    }
}

/// Selection probabilities and aggregation parameters for a candidate list
/// of length `k0`. The result depends only on the networks and `k0`, so it
/// can be computed once and reused for every query.
pub fn materialize(
    nets: &PolicyNetworks,
    k0: usize,
) -> (SelectionPolicyProbabilities, AggregationParams) {
    let tables = materialize_tables(nets, &RankFeatures::new(k0));
    (tables.probs, tables.params)
}

/// Draw independent Bernoulli selections from `rng`. Entries are consumed in
/// a fixed order: pointwise first, then pairs row-major without the diagonal.
pub fn sample_with<R: Rng + ?Sized>(probs: &SelectionPolicyProbabilities, rng: &mut R) -> SelectionSample {
    let k0 = probs.k0();
    let s_point = probs.p_point.mapv(|p| rng.random::<f64>() < p);
    let mut s_pair = Array2::from_elem((k0, k0), false);
    for r in 0..k0 {
        for r2 in 0..k0 {
            if r != r2 {
                s_pair[[r, r2]] = rng.random::<f64>() < probs.p_pair[[r, r2]];
            }
        }
    }
    SelectionSample { s_point, s_pair }
}

/// Reproducible sample for a seed.
pub fn sample_selection(probs: &SelectionPolicyProbabilities, seed: u64) -> SelectionSample {
    sample_with(probs, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Outcome of [`determinize`].
#[derive(Debug, Clone)]
pub struct Determinized {
    pub sample: SelectionSample,
    pub loss: f64,
    /// Loss of every drawn sample, in draw order.
    pub sample_losses: Vec<f64>,
    pub index: usize,
}

/// Draw `n_samples` selections and keep the one with the lowest `loss`.
/// Ties go to the earliest draw.
pub fn determinize(
    probs: &SelectionPolicyProbabilities,
    n_samples: usize,
    seed: u64,
    mut loss: impl FnMut(&SelectionSample) -> Result<f64>,
) -> Result<Determinized> {
    if n_samples == 0 {
        return Err(Error::invalid("determinization needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, SelectionSample, f64)> = None;
    let mut sample_losses = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample = sample_with(probs, &mut rng);
        let l = loss(&sample)?;
        sample_losses.push(l);
        let better = match &best {
            None => true,
            Some((_, _, b)) => l < *b,
        };
        if better {
            best = Some((i, sample, l));
        }
    }
    let (index, sample, loss) = best.expect("at least one sample");
    Ok(Determinized {
        sample,
        loss,
        sample_losses,
        index,
    })
}

/// A fixed selection, as written to disk after training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub k0: usize,
    pub seed: u64,
    pub point_calls: usize,
    pub pair_calls: usize,
    pub calls: usize,
    pub s_point: Vec<u8>,
    /// Row-major `k0 x k0`.
    pub s_pair: Vec<Vec<u8>>,
}

impl DeterministicPolicy {
    pub fn new(sample: &SelectionSample, seed: u64) -> Self {
        let bit = |b: &bool| u8::from(*b);
        DeterministicPolicy {
            k0: sample.k0(),
            seed,
            point_calls: sample.point_calls(),
            pair_calls: sample.pair_calls(),
            calls: sample.calls(),
            s_point: sample.s_point.iter().map(bit).collect(),
            s_pair: sample
                .s_pair
                .rows()
                .into_iter()
                .map(|row| row.iter().map(bit).collect())
                .collect(),
        }
    }

    pub fn sample(&self) -> Result<SelectionSample> {
        let k0 = self.k0;
        if self.s_point.len() != k0 || self.s_pair.len() != k0 || self.s_pair.iter().any(|r| r.len() != k0) {
            return Err(Error::invalid("policy file: selection shape does not match k0"));
        }
        let s_point = Array1::from_iter(self.s_point.iter().map(|&b| b != 0));
        let s_pair = Array2::from_shape_fn((k0, k0), |(i, j)| self.s_pair[i][j] != 0);
        SelectionSample::from_parts(s_point, s_pair)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Gray level of the separator row in policy bitmaps.
pub const SEPARATOR_GRAY: u8 = 128;

/// Binary PGM of a selection: `k0` wide, `k0 + 2` tall. Row 0 holds the
/// pointwise selections, row 1 is a gray separator, rows `2..` the pair
/// matrix. Selected pixels are black (0), unselected white (255).
pub fn selection_pgm(sample: &SelectionSample) -> Vec<u8> {
    let k0 = sample.k0();
    let px = |b: bool| if b { 0u8 } else { 255u8 };
    let mut out = format!("P5\n{} {}\n255\n", k0, k0 + 2).into_bytes();
    out.extend(sample.s_point.iter().map(|&b| px(b)));
    out.extend(std::iter::repeat_n(SEPARATOR_GRAY, k0));
    out.extend(sample.s_pair.iter().map(|&b| px(b)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_encoding_examples() {
        assert_eq!(encode_rank(50, 50).unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(encode_rank(1, 50).unwrap(), [0.02, 0.0, 1.0]);
        let e = encode_rank(25, 50).unwrap();
        assert_eq!(e[0], 0.5);
        assert!((e[1] - 0.8228).abs() < 1e-4);
        assert!(encode_rank(0, 5).is_err());
        assert!(encode_rank(6, 5).is_err());
        assert_eq!(encode_rank(1, 1).unwrap(), [1.0, 0.0, 1.0]);
        let p = encode_pair(2, 5, 5).unwrap();
        assert_eq!(p[6], 1.0);
        assert_eq!(encode_pair(5, 2, 5).unwrap()[6], 0.0);
    }

    #[test]
    fn zero_networks_give_half_probabilities() {
        let (probs, params) = materialize(&PolicyNetworks::zeros(), 4);
        assert!(probs.p_point.iter().all(|&p| p == 0.5));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(probs.p_pair[[i, j]], if i == j { 0.0 } else { 0.5 });
            }
        }
        assert_eq!(params, AggregationParams::zeros(4));
        probs.validate().unwrap();
    }

    #[test]
    fn materialize_is_pure_and_shaped() {
        let nets = PolicyNetworks::seeded(3);
        let a = materialize(&nets, 3);
        let b = materialize(&nets, 3);
        assert_eq!(a, b);
        let free = a.0.p_pair.iter().filter(|&&p| p > 0.0).count();
        assert_eq!(free, 6);
        assert_eq!(RankFeatures::new(3).pairs.len(), 6);
    }

    fn table(k0: usize, p: f64) -> SelectionPolicyProbabilities {
        SelectionPolicyProbabilities {
            p_point: Array1::from_elem(k0, p),
            p_pair: Array2::from_shape_fn((k0, k0), |(i, j)| if i == j { 0.0 } else { p }),
        }
    }

    #[test]
    fn sampling_extremes() {
        assert_eq!(sample_selection(&table(5, 0.0), 1), SelectionSample::empty(5));
        assert_eq!(sample_selection(&table(5, 1.0), 1), SelectionSample::full(5));
        assert_eq!(sample_selection(&table(5, 0.3), 9), sample_selection(&table(5, 0.3), 9));
    }

    #[test]
    fn sampling_frequencies() {
        let probs = table(10, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut point = vec![0usize; 10];
        let mut pair = Array2::<usize>::zeros((10, 10));
        for _ in 0..n {
            let s = sample_with(&probs, &mut rng);
            for r in 0..10 {
                point[r] += usize::from(s.s_point[r]);
            }
            pair.zip_mut_with(&s.s_pair, |c, &b| *c += usize::from(b));
        }
        for &c in &point {
            let mean = c as f64 / n as f64;
            assert!((0.45..=0.55).contains(&mean));
        }
        for ((i, j), &c) in pair.indexed_iter() {
            let mean = c as f64 / n as f64;
            if i == j {
                assert_eq!(c, 0);
            } else {
                assert!((0.45..=0.55).contains(&mean), "{i},{j}: {mean}");
            }
        }
    }

    #[test]
    fn determinize_examples() {
        let probs = table(4, 0.5);
        let one = determinize(&probs, 1, 5, |s| Ok(s.calls() as f64)).unwrap();
        assert_eq!(one.index, 0);
        assert_eq!(one.sample, sample_selection(&probs, 5));

        let fixed = determinize(&table(4, 1.0), 10, 5, |s| Ok(s.calls() as f64)).unwrap();
        assert_eq!(fixed.sample, SelectionSample::full(4));

        let many = determinize(&probs, 250, 8, |s| Ok((s.calls() as f64 - 6.0).abs())).unwrap();
        assert!(many.sample_losses.iter().all(|&l| many.loss <= l));
        assert_eq!(many.sample_losses.len(), 250);
        assert!(many.sample.s_pair.diag().iter().all(|&b| !b));

        assert!(determinize(&probs, 0, 1, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn policy_file_and_bitmap() {
        let sample = sample_selection(&table(6, 0.4), 2);
        let policy = DeterministicPolicy::new(&sample, 2);
        assert_eq!(policy.calls, sample.calls());
        assert_eq!(policy.sample().unwrap(), sample);

        let pgm = selection_pgm(&SelectionSample::full(3));
        let header = b"P5\n3 5\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let body = &pgm[header.len()..];
        assert_eq!(body.len(), 15);
        assert_eq!(&body[..3], &[0, 0, 0]);
        assert_eq!(&body[3..6], &[SEPARATOR_GRAY; 3]);
        // diagonal stays white
        assert_eq!(&body[6..9], &[255, 0, 0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let nets = PolicyNetworks::seeded(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        nets.save_json(&path).unwrap();
        assert_eq!(PolicyNetworks::load_json(&path).unwrap(), nets);
    }
}
