use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use super::{cast, cross_entropy, Mlp, MlpConfig, Mode, Optimizer, Trace};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Offset separating the dropout stream from the initialisation stream.
const DROPOUT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Linear decay `lr0 * (1 - t/T)`.
pub fn lr_schedule(config: &MlpConfig, t: usize) -> f64 {
    let total = config.iterations.max(1) as f64;
    config.initial_lr * (1.0 - t as f64 / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<TrainStep>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Per-layer parameter gradients, same shapes as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<(Array2<F>, Array1<F>)>,
}

impl<F: NdFloat> Mlp<F> {
    /// Cross-entropy gradients for a trace produced from the same `x`.
    pub(crate) fn backward(&self, x: ArrayView2<F>, labels: &[usize], trace: &Trace<F>) -> Gradients<F> {
        let n = x.nrows();
        let inv_n: F = cast(1.0 / n as f64);
        let mut delta = trace.probs.clone();
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            row[y] -= F::one();
        }
        delta.mapv_inplace(|v| v * inv_n);

        let n_layers = self.layers.len();
        let mut grads = Vec::with_capacity(n_layers);

        let out = &self.layers[n_layers - 1];
        let out_input = match (&trace.output_input, trace.hidden.last()) {
            (Some(d), _) => d.view(),
            (None, Some(h)) => h.view(),
            (None, None) => x,
        };
        grads.push((out_input.t().dot(&delta), delta.sum_axis(Axis(0))));

        if n_layers > 1 {
            let mut d_act = delta.dot(&out.weights.t());
            if let Some(mask) = &trace.mask {
                d_act *= mask;
            }
            for i in (0..n_layers - 1).rev() {
                // ReLU derivative taken as 0 at the kink.
                ndarray::Zip::from(&mut d_act)
                    .and(&trace.hidden[i])
                    .for_each(|d, &a| {
                        if a <= F::zero() {
                            *d = F::zero();
                        }
                    });
                let layer_input = if i == 0 { x } else { trace.hidden[i - 1].view() };
                let gw = layer_input.t().dot(&d_act);
                let gb = d_act.sum_axis(Axis(0));
                if i > 0 {
                    d_act = d_act.dot(&self.layers[i].weights.t());
                }
                grads.push((gw, gb));
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }
}

enum OptimizerState<F> {
    Sgd,
    Adam {
        step: i32,
        first: Vec<(Array2<F>, Array1<F>)>,
        second: Vec<(Array2<F>, Array1<F>)>,
    },
}

impl<F: NdFloat> OptimizerState<F> {
    fn new(model: &Mlp<F>) -> Self {
        match model.config.optimizer {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => {
                let zeros: Vec<_> = model
                    .layers
                    .iter()
                    .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                    .collect();
                OptimizerState::Adam {
                    step: 0,
                    first: zeros.clone(),
                    second: zeros,
                }
            }
        }
    }

    fn apply(&mut self, model: &mut Mlp<F>, grads: &Gradients<F>, lr: f64) {
        match self {
            OptimizerState::Sgd => {
                let lr: F = cast(lr);
                for (layer, (gw, gb)) in model.layers_mut().iter_mut().zip(&grads.layers) {
                    layer.weights.scaled_add(-lr, gw);
                    layer.bias.scaled_add(-lr, gb);
                }
            }
            OptimizerState::Adam { step, first, second } => {
                *step += 1;
                let b1: F = cast(ADAM_BETA1);
                let b2: F = cast(ADAM_BETA2);
                let eps: F = cast(ADAM_EPS);
                // Bias corrections folded into the step size.
                let c1 = 1.0 - ADAM_BETA1.powi(*step);
                let c2 = 1.0 - ADAM_BETA2.powi(*step);
                let step_size: F = cast(lr * c2.sqrt() / c1);
                let eps_hat: F = eps * cast(c2.sqrt());
                let one = F::one();
                for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in model
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(first.iter_mut())
                    .zip(second.iter_mut())
                {
                    ndarray::Zip::from(&mut layer.weights)
                        .and(gw)
                        .and(mw)
                        .and(vw)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            *p -= step_size * *m / (v.sqrt() + eps_hat);
                        });
                    ndarray::Zip::from(&mut layer.bias)
                        .and(gb)
                        .and(mb)
                        .and(vb)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            *p -= step_size * *m / (v.sqrt() + eps_hat);
                        });
                }
            }
        }
    }
}

/// Runs `config.iterations` full-batch steps on `(x, labels)` using the
/// model's own configuration.
///
/// Each step is a train-mode forward pass, cross-entropy backpropagation and
/// an update at [`lr_schedule`]`(t)`. Dropout draws come from a stream
/// derived from the config seed, so two calls with equal inputs produce
/// bit-identical models. A non-finite loss or parameter aborts with
/// [`Error::Divergence`].
pub fn train<F: NdFloat>(
    mut model: Mlp<F>,
    x: ArrayView2<F>,
    labels: &[usize],
) -> Result<(Mlp<F>, TrainHistory)> {
    model.check_input(&x)?;
    if x.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::Incompatible("no training rows".into()));
    }
    let classes = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange {
            index: bad,
            len: classes,
        });
    }

    let config = model.config.clone();
    let mut rng = SeededRng::new(config.seed.wrapping_add(DROPOUT_STREAM));
    let mut optimizer = OptimizerState::new(&model);
    let mut history = TrainHistory {
        steps: Vec::with_capacity(config.iterations),
    };
    for t in 0..config.iterations {
        let lr = lr_schedule(&config, t);
        let trace = model.forward_trace(x, Mode::Train, &mut rng);
        let loss = cross_entropy(&trace.probs, labels);
        if !loss.is_finite() || trace.probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                what: format!("non-finite loss {loss}"),
            });
        }
        let grads = model.backward(x, labels, &trace);
        optimizer.apply(&mut model, &grads, lr);
        if !model.all_finite() {
            return Err(Error::Divergence {
                iteration: t,
                what: "non-finite parameter after update".into(),
            });
        }
        history.steps.push(TrainStep { loss, lr });
    }
    Ok((model, history))
}
