//! Feed-forward intent classifier on fixed sentence embeddings.
//!
//! The network has `H` ReLU hidden layers of width `h` (H may be zero, which
//! reduces it to softmax regression) followed by a softmax output layer over
//! the intent classes. Dropout is applied to the input of the output layer
//! (the last hidden representation, or the raw features when `H = 0`) and is
//! the inverted variant, so evaluation uses the weights unchanged.
//!
//! Weights are stored `(in, out)` so a batch `X` of shape `(n, in)` maps to
//! `X·W + b`. The numeric type is generic: training uses `f32`, gradient
//! checking promotes a model to `f64`.

mod checkpoint;
mod gradcheck;
mod train;

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{analytic_gradients, gradient_check, numeric_gradients};
pub use train::{lr_schedule, train, Gradients, TrainHistory, TrainStep};

pub const SGD_DEFAULT_LR: f64 = 0.7;
pub const ADAM_DEFAULT_LR: f64 = 4e-4;
pub const DEFAULT_ITERATIONS: usize = 500;
pub const DEFAULT_DROPOUT: f64 = 0.75;
pub const DEFAULT_HIDDEN_DIM: usize = 512;
pub const DEFAULT_HIDDEN_LAYERS: usize = 1;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn default_lr(self) -> f64 {
        match self {
            Optimizer::Sgd => SGD_DEFAULT_LR,
            Optimizer::Adam => ADAM_DEFAULT_LR,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Usage(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Architecture and training regime. `Default` is the pivot setting:
/// one 512-unit hidden layer, dropout 0.75, SGD at 0.7 with linear decay,
/// 500 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub optimizer: Optimizer,
    pub initial_lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_layers: DEFAULT_HIDDEN_LAYERS,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            dropout: DEFAULT_DROPOUT,
            optimizer: Optimizer::Sgd,
            initial_lr: SGD_DEFAULT_LR,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn pivot() -> Self {
        Self::default()
    }

    /// Same architecture with the given optimizer at its default rate.
    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self.initial_lr = optimizer.default_lr();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers > 2 {
            return Err(Error::Config(format!(
                "hidden_layers must be 0, 1 or 2, got {}",
                self.hidden_layers
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        Ok(())
    }

    /// Compact one-line description, e.g. `H=1 h=512 r=0.75 sgd lr=0.7 T=500`.
    pub fn label(&self) -> String {
        format!(
            "H={} h={} r={} {} lr={} T={}",
            self.hidden_layers,
            self.hidden_dim,
            self.dropout,
            self.optimizer,
            self.initial_lr,
            self.iterations
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    /// `(in, out)`.
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: NdFloat> Layer<F> {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn cast<G: NdFloat>(&self) -> Layer<G> {
        Layer {
            weights: self.weights.mapv(cast),
            bias: self.bias.mapv(cast),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    config: MlpConfig,
    layers: Vec<Layer<F>>,
}

/// The trained classifier; parameters are `f32`.
pub type MlpModel = Mlp<f32>;

#[inline]
pub(crate) fn cast<A: NdFloat, B: NdFloat>(v: A) -> B {
    B::from(v).expect("float conversion")
}

/// He-uniform weights for the ReLU hidden layers, drawn layer by layer in
/// row-major order from a stream seeded with `config.seed`. The softmax
/// layer's weights and all biases start at zero.
pub fn init_model<F: NdFloat>(input_dim: usize, num_classes: usize, config: &MlpConfig) -> Result<Mlp<F>> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::Config("input_dim must be at least 1".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat_n(config.hidden_dim, config.hidden_layers));
    dims.push(num_classes);

    let mut rng = SeededRng::new(config.seed);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = if i < config.hidden_layers {
                let limit = (6.0 / fan_in as f64).sqrt();
                Array2::from_shape_simple_fn((fan_in, fan_out), || cast(rng.symmetric(limit)))
            } else {
                Array2::zeros((fan_in, fan_out))
            };
            Layer {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(Mlp {
        config: config.clone(),
        layers,
    })
}

/// A model with every parameter, biases included, drawn uniformly from
/// `[-sqrt(6/fan_in), sqrt(6/fan_in))`. Used to exercise the forward and
/// backward passes away from the all-zero output layer of [`init_model`].
pub fn random_model<F: NdFloat>(input_dim: usize, num_classes: usize, config: &MlpConfig) -> Result<Mlp<F>> {
    let mut model: Mlp<F> = init_model(input_dim, num_classes, config)?;
    let mut rng = SeededRng::new(config.seed ^ 0x005E_ED0F_AB1E);
    for layer in model.layers_mut() {
        let limit = (6.0 / layer.in_dim() as f64).sqrt();
        layer.weights.mapv_inplace(|_| cast(rng.symmetric(limit)));
        layer.bias.mapv_inplace(|_| cast(rng.symmetric(limit)));
    }
    Ok(model)
}

/// Activations retained by a forward pass for backpropagation.
pub(crate) struct Trace<F> {
    /// Post-ReLU output of each hidden layer, before dropout.
    pub hidden: Vec<Array2<F>>,
    /// Dropout multipliers (`0` or `1/(1-r)`) for the output layer's input,
    /// present only in train mode with `r > 0`.
    pub mask: Option<Array2<F>>,
    /// Input actually fed to the output layer.
    pub output_input: Option<Array2<F>>,
    pub probs: Array2<F>,
}

impl<F: NdFloat> Mlp<F> {
    /// Assembles a model from explicit layers, checking the shape chain.
    pub fn from_layers(config: MlpConfig, layers: Vec<Layer<F>>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.hidden_layers + 1 {
            return Err(Error::Config(format!(
                "{} layers for H={}",
                layers.len(),
                config.hidden_layers
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Dimension {
                    expected: l.out_dim(),
                    got: l.bias.len(),
                });
            }
            if i < config.hidden_layers && l.out_dim() != config.hidden_dim {
                return Err(Error::Dimension {
                    expected: config.hidden_dim,
                    got: l.out_dim(),
                });
            }
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Dimension {
                    expected: w[0].out_dim(),
                    got: w[1].in_dim(),
                });
            }
        }
        if layers.last().map(|l| l.out_dim()).unwrap_or(0) < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn cast<G: NdFloat>(&self) -> Mlp<G> {
        Mlp {
            config: self.config.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, x: ArrayView2<F>, mode: Mode, rng: &mut SeededRng) -> Trace<F> {
        let n_hidden = self.layers.len() - 1;
        let mut hidden: Vec<Array2<F>> = Vec::with_capacity(n_hidden);
        for layer in &self.layers[..n_hidden] {
            let mut z = match hidden.last() {
                Some(prev) => prev.dot(&layer.weights),
                None => x.dot(&layer.weights),
            };
            z += &layer.bias;
            z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            hidden.push(z);
        }

        let rate = self.config.dropout;
        let (mask, output_input) = if mode == Mode::Train && rate > 0.0 {
            let src = match hidden.last() {
                Some(h) => h.view(),
                None => x,
            };
            let scale: F = cast(1.0 / (1.0 - rate));
            let mask = Array2::from_shape_simple_fn(src.raw_dim(), || {
                if rng.next_f64() >= rate {
                    scale
                } else {
                    F::zero()
                }
            });
            let dropped = &src * &mask;
            (Some(mask), Some(dropped))
        } else {
            (None, None)
        };

        let out = &self.layers[n_hidden];
        let mut logits = match (&output_input, hidden.last()) {
            (Some(d), _) => d.dot(&out.weights),
            (None, Some(h)) => h.dot(&out.weights),
            (None, None) => x.dot(&out.weights),
        };
        logits += &out.bias;
        softmax_rows(&mut logits);
        Trace {
            hidden,
            mask,
            output_input,
            probs: logits,
        }
    }

    /// Class probabilities for each row of `x`.
    pub fn forward(&self, x: ArrayView2<F>, mode: Mode, rng: &mut SeededRng) -> Result<Array2<F>> {
        self.check_input(&x)?;
        Ok(self.forward_trace(x, mode, rng).probs)
    }

    /// Eval-mode probabilities.
    pub fn predict_proba(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        // Eval mode never draws from the stream.
        let mut rng = SeededRng::new(0);
        self.forward(x, Mode::Eval, &mut rng)
    }

    pub fn predict(&self, x: ArrayView2<F>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?))
    }

    /// Exact-match accuracy of eval-mode predictions.
    pub fn evaluate(&self, x: ArrayView2<F>, y: &[usize]) -> Result<f64> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let preds = self.predict(x)?;
        Ok(accuracy(&preds, y))
    }
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows<F: NdFloat>(logits: &mut Array2<F>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Mean negative log-probability of the true classes.
pub fn cross_entropy<F: NdFloat>(probs: &Array2<F>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| -cast::<F, f64>(row[y]).max(PROB_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<F: NdFloat>(probs: &Array2<F>) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
        let mut rng = SeededRng::new(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.normal() as f32)
    }

    #[test]
    fn pivot_defaults() {
        let c = MlpConfig::default();
        assert_eq!(c.hidden_layers, 1);
        assert_eq!(c.hidden_dim, 512);
        assert_eq!(c.dropout, 0.75);
        assert_eq!(c.optimizer, Optimizer::Sgd);
        assert_eq!(c.initial_lr, 0.7);
        assert_eq!(c.iterations, 500);
        assert_eq!(c.clone().with_optimizer(Optimizer::Adam).initial_lr, 4e-4);
    }

    #[test]
    fn pivot_shapes() {
        let m: MlpModel = init_model(1024, 77, &MlpConfig::pivot()).unwrap();
        assert_eq!(m.layers()[0].weights.dim(), (1024, 512));
        assert_eq!(m.layers()[1].weights.dim(), (512, 77));
        assert!(m.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(m.layers()[1].weights.iter().all(|&w| w == 0.0));
        assert!(m.layers()[0].weights.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn softmax_regression_shape() {
        let cfg = MlpConfig {
            hidden_layers: 0,
            ..MlpConfig::pivot()
        };
        let m: MlpModel = init_model(512, 150, &cfg).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!(m.layers()[0].weights.dim(), (512, 150));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = MlpConfig::pivot().with_seed(11);
        let a: MlpModel = init_model(64, 5, &cfg).unwrap();
        let b: MlpModel = init_model(64, 5, &cfg).unwrap();
        assert_eq!(a, b);
        let c: MlpModel = init_model(64, 5, &cfg.clone().with_seed(12)).unwrap();
        assert_ne!(a, c);
        let limit = (6.0f32 / 64.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(init_model::<f32>(0, 3, &MlpConfig::pivot()).is_err());
        assert!(init_model::<f32>(4, 1, &MlpConfig::pivot()).is_err());
        let cfg = MlpConfig {
            hidden_layers: 3,
            ..MlpConfig::pivot()
        };
        assert!(init_model::<f32>(4, 3, &cfg).is_err());
        let cfg = MlpConfig {
            dropout: 1.0,
            ..MlpConfig::pivot()
        };
        assert!(init_model::<f32>(4, 3, &cfg).is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let mut logits = arr2(&[[2.5f64, 2.5, 2.5]]);
        softmax_rows(&mut logits);
        for &p in &logits {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut logits = arr2(&[[1000.0f32, 0.0, -1000.0]]);
        softmax_rows(&mut logits);
        assert!(logits.iter().all(|p| p.is_finite()));
        assert!((logits.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rows_sum_to_one() {
        let m: MlpModel = random_model(20, 7, &MlpConfig::pivot().with_seed(3)).unwrap();
        let x = random_input(9, 20, 4);
        let mut rng = SeededRng::new(5);
        for mode in [Mode::Train, Mode::Eval] {
            let p = m.forward(x.view(), mode, &mut rng).unwrap();
            for row in p.rows() {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let cfg = MlpConfig {
            dropout: 0.0,
            ..MlpConfig::pivot().with_seed(8)
        };
        let m: MlpModel = random_model(16, 4, &cfg).unwrap();
        let x = random_input(6, 16, 1);
        let mut rng = SeededRng::new(2);
        let a = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
        let b = m.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_ignores_rng() {
        let m: MlpModel = random_model(16, 4, &MlpConfig::pivot().with_seed(8)).unwrap();
        let x = random_input(6, 16, 1);
        let a = m.forward(x.view(), Mode::Eval, &mut SeededRng::new(1)).unwrap();
        let b = m.forward(x.view(), Mode::Eval, &mut SeededRng::new(999)).unwrap();
        assert_eq!(a, b);
        let t1 = m.forward(x.view(), Mode::Train, &mut SeededRng::new(1)).unwrap();
        assert_ne!(a, t1);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m: MlpModel = init_model(16, 4, &MlpConfig::pivot()).unwrap();
        let x = random_input(2, 15, 0);
        assert!(matches!(
            m.predict(x.view()),
            Err(Error::Dimension { expected: 16, got: 15 })
        ));
    }

    #[test]
    fn loss_values() {
        let uniform = Array2::from_elem((3, 77), 1.0f64 / 77.0);
        let l = cross_entropy(&uniform, &[0, 5, 76]);
        assert!((l - 77f64.ln()).abs() < 1e-12);
        assert!((l - 4.343805).abs() < 1e-5);

        let certain = arr2(&[[0.0f64, 1.0]]);
        assert_eq!(cross_entropy(&certain, &[1]), 0.0);

        let two = arr2(&[[0.5f64, 0.5], [0.25, 0.75]]);
        let l = cross_entropy(&two, &[0, 0]);
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 1.039721).abs() < 1e-6);

        // Zero probability is clamped, not infinite.
        let l = cross_entropy(&certain, &[0]);
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn argmax_tie_rule() {
        let tied = Array2::from_elem((2, 5), 0.2f32);
        assert_eq!(argmax_rows(&tied), vec![0, 0]);
        let mut p = arr2(&[[0.1f64, 0.9]]);
        softmax_rows(&mut p);
        assert_eq!(argmax_rows(&p), vec![1]);
        let ties = arr2(&[[0.1f32, 0.45, 0.45]]);
        assert_eq!(argmax_rows(&ties), vec![1]);
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]), 0.5);
    }

    #[test]
    fn from_layers_checks_chain() {
        let m: MlpModel = init_model(8, 3, &MlpConfig { hidden_dim: 4, ..MlpConfig::pivot() }).unwrap();
        let ok = Mlp::from_layers(m.config().clone(), m.layers().to_vec()).unwrap();
        assert_eq!(ok, m);
        let mut bad = m.layers().to_vec();
        bad[1].weights = Array2::zeros((5, 3));
        assert!(Mlp::from_layers(m.config().clone(), bad).is_err());
    }
}
