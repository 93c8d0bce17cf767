//! Small sigmoid MLPs with hand-written reverse mode, the Adamax optimizer
//! and straight-through factors for sampled binary selections.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of every hidden layer.
pub const HIDDEN_UNITS: usize = 64;
/// Number of hidden layers.
pub const HIDDEN_LAYERS: usize = 3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Fully connected network: sigmoid hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, the last entry the output.
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

/// Parameter gradients, shaped like the owning [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&x| x == 0.0))
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

impl Mlp {
    /// Layer sizes for the default architecture.
    pub fn default_sizes(input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat_n(HIDDEN_UNITS, HIDDEN_LAYERS));
        sizes.push(output_dim);
        sizes
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes
                .windows(2)
                .map(|w| Layer {
                    weights: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.bias.len()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").bias.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Overwrite every parameter from a flat vector in [`Mlp::flatten`] order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("flat vector too short");
            }
        }
    }

    /// Forward pass of a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let batch = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("shape");
        Ok(self.forward_batch(&batch).row(0).to_vec())
    }

    /// Forward pass over the rows of `inputs`.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(inputs)
            .activations
            .pop()
            .expect("output layer")
    }

    pub fn forward_cached(&self, inputs: &Array2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().expect("input");
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(sigmoid);
            }
            activations.push(z);
        }
        ForwardCache { activations }
    }

    /// Reverse pass for a batch: `output_grad` holds `dL/d output` per row.
    pub fn backward_batch(&self, cache: &ForwardCache, output_grad: &Array2<f64>) -> Gradients {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            layers.push(Layer {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&layer.weights);
                back.zip_mut_with(input, |g, &a| *g *= a * (1.0 - a));
                delta = back;
            }
        }
        layers.reverse();
        Gradients { layers }
    }

    /// Gradients of `output_grad · net(input)` for a single input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<Gradients> {
        if input.len() != self.input_dim() || output_grad.len() != self.output_dim() {
            return Err(Error::invalid("backward: dimension mismatch"));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("shape");
        let g = Array2::from_shape_vec((1, output_grad.len()), output_grad.to_vec()).expect("shape");
        let cache = self.forward_cached(&x);
        Ok(self.backward_batch(&cache, &g))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = MlpFile::from(self);
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MlpFile = serde_json::from_str(&text)?;
        file.try_into()
    }
}

/// Serialized form of an [`Mlp`]: the layer sizes as a shape header, then
/// per layer a row-major `out x in` weight array and a bias array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Mlp> for MlpFile {
    fn from(net: &Mlp) -> Self {
        MlpFile {
            layer_sizes: net.layer_sizes(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = Error;

    fn try_from(file: MlpFile) -> Result<Self> {
        if file.layer_sizes.len() != file.layers.len() + 1 || file.layers.is_empty() {
            return Err(Error::invalid("checkpoint: layer count does not match header"));
        }
        let layers = file
            .layers
            .into_iter()
            .zip(file.layer_sizes.windows(2))
            .map(|(l, w)| {
                let weights = Array2::from_shape_vec((w[1], w[0]), l.weights)
                    .map_err(|e| Error::invalid(format!("checkpoint weights: {e}")))?;
                if l.bias.len() != w[1] {
                    return Err(Error::invalid("checkpoint: bias length mismatch"));
                }
                Ok(Layer {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }
}

/// Adamax hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adamax update on flat slices. `t` is the 1-based step index.
pub fn adamax_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    u: &mut [f64],
    t: u64,
    cfg: &AdamaxConfig,
) {
    let step = cfg.lr / (1.0 - cfg.beta1.powf(t as f64));
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        u[i] = (cfg.beta2 * u[i]).max(g.abs());
        theta[i] -= step * m[i] / (u[i] + cfg.eps);
    }
}

/// Adamax moments for one network.
#[derive(Debug, Clone)]
pub struct AdamaxState {
    pub config: AdamaxConfig,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new(net: &Mlp, config: AdamaxConfig) -> Self {
        let n = net.num_params();
        AdamaxState {
            config,
            m: vec![0.0; n],
            u: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let mut theta = net.flatten();
        let g = grads.flatten();
        adamax_update(&mut theta, &g, &mut self.m, &mut self.u, self.t, &self.config);
        net.set_flat(&theta);
    }
}

/// How the gradient of a sampled binary selection reaches its probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StraightThrough {
    /// `ds/dπ = π`.
    #[default]
    Probability,
    /// `ds/dπ = 1`, the textbook estimator.
    Identity,
}

impl StraightThrough {
    #[inline]
    pub fn factor(self, probability: f64) -> f64 {
        match self {
            StraightThrough::Probability => probability,
            StraightThrough::Identity => 1.0,
        }
    }
}

/// Forward value and backward factor of a sampled selection.
#[inline]
pub fn straight_through(sample: bool, probability: f64, mode: StraightThrough) -> (f64, f64) {
    (f64::from(u8::from(sample)), mode.factor(probability))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&Mlp::default_sizes(3, 6), &mut rng);
        assert_eq!(net.layer_sizes(), vec![3, 64, 64, 64, 6]);
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bound = 1.0 / 3f64.sqrt();
        assert!(net.layers[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&Mlp::default_sizes(3, 4));
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 4]);
        assert!(net.forward(&[0.3]).is_err());
    }

    #[test]
    fn hand_computed_two_layer_net() {
        // 2 -> 1 (sigmoid) -> 1 (linear)
        let net = Mlp {
            layers: vec![
                Layer {
                    weights: Array2::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap(),
                    bias: Array1::from(vec![0.25]),
                },
                Layer {
                    weights: Array2::from_shape_vec((1, 1), vec![2.0]).unwrap(),
                    bias: Array1::from(vec![-0.5]),
                },
            ],
        };
        let x = [1.0, 0.5];
        let h = 1.0 / (1.0 + (-(0.5 - 0.5 + 0.25f64)).exp());
        let want = 2.0 * h - 0.5;
        assert!((net.forward(&x).unwrap()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn hidden_activations_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&Mlp::default_sizes(3, 2), &mut rng);
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64 - 12.0);
        let cache = net.forward_cached(&x);
        for a in &cache.activations[1..cache.activations.len() - 1] {
            assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    fn loss(net: &Mlp, x: &[f64], g: &[f64]) -> f64 {
        net.forward(x).unwrap().iter().zip(g).map(|(o, g)| o * g).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[3, 3, 3, 2], &mut rng);
        let x = [0.2, -0.4, 0.9];
        let g = [0.7, -1.3];
        let analytic = net.backward(&x, &g).unwrap().flatten();
        let theta = net.flatten();
        let eps = 1e-6;
        let mut fd = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut hi = net.clone();
            let mut lo = net.clone();
            let mut t = theta.clone();
            t[i] += eps;
            hi.set_flat(&t);
            t[i] -= 2.0 * eps;
            lo.set_flat(&t);
            fd.push((loss(&hi, &x, &g) - loss(&lo, &x, &g)) / (2.0 * eps));
        }
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-5 * a.abs().max(f.abs()).max(1e-3), "{a} vs {f}");
        }
    }

    #[test]
    fn backward_zero_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&Mlp::default_sizes(3, 2), &mut rng);
        let x = [0.1, 0.2, 0.3];
        assert!(net.backward(&x, &[0.0, 0.0]).unwrap().is_zero());
        let a = net.backward(&x, &[1.0, 0.5]).unwrap();
        let b = net.backward(&x, &[-0.3, 2.0]).unwrap();
        let ab = net.backward(&x, &[0.7, 2.5]).unwrap();
        let mut sum = a.clone();
        sum.add_assign(&b);
        for (p, q) in sum.flatten().iter().zip(ab.flatten()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_factors() {
        assert_eq!(straight_through(true, 0.3, StraightThrough::Probability), (1.0, 0.3));
        assert_eq!(straight_through(false, 0.0, StraightThrough::Probability).1, 0.0);
        assert_eq!(straight_through(true, 1.0, StraightThrough::Probability).1, 1.0);
        assert_eq!(straight_through(false, 0.3, StraightThrough::Identity), (0.0, 1.0));
    }

    #[test]
    fn adamax_examples() {
        let cfg = AdamaxConfig {
            lr: 0.001,
            ..AdamaxConfig::default()
        };
        let (mut theta, mut m, mut u) = ([0.5], [0.0], [0.0]);
        adamax_update(&mut theta, &[0.0], &mut m, &mut u, 1, &cfg);
        assert_eq!(theta[0], 0.5);

        let (mut theta, mut m, mut u) = ([0.5], [0.0], [0.0]);
        adamax_update(&mut theta, &[1.0], &mut m, &mut u, 1, &cfg);
        assert!((theta[0] - (0.5 - 0.001)).abs() < 1e-10);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert_eq!(u[0], 1.0);

        for t in 2..20 {
            adamax_update(&mut theta, &[1.0], &mut m, &mut u, t, &cfg);
            assert_eq!(u[0], 1.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net = Mlp::new(&Mlp::default_sizes(7, 11), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save_json(&path).unwrap();
        assert_eq!(Mlp::load_json(&path).unwrap(), net);
    }
}
