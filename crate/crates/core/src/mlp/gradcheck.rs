//! Finite-difference verification of the backpropagation code.
//!
//! Both sides run in `f64` with dropout disabled. The numeric side only ever
//! calls the eval-mode forward pass and the loss, so it shares no code with
//! [`Mlp::backward`].

use ndarray::{Array2, ArrayView2, NdFloat};

use super::train::Gradients;
use super::{cross_entropy, Mlp, Mode};
use crate::rng::SeededRng;

fn eval_loss(model: &Mlp<f64>, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Vec<Array2<bool>>) {
    let mut rng = SeededRng::new(0);
    let trace = model.forward_trace(x, Mode::Eval, &mut rng);
    let active = trace.hidden.iter().map(|h| h.mapv(|v| v > 0.0)).collect();
    (cross_entropy(&trace.probs, labels), active)
}

/// Central difference for one parameter. If either probe flips a ReLU, the
/// loss has a kink inside the interval and the step is shrunk tenfold, up to
/// `KINK_RETRIES` times.
fn central_difference(
    model: &mut Mlp<f64>,
    x: ArrayView2<f64>,
    labels: &[usize],
    epsilon: f64,
    base: &[Array2<bool>],
    param: impl Fn(&mut Mlp<f64>) -> &mut f64,
) -> f64 {
    let orig = *param(model);
    let mut eps = epsilon;
    let mut estimate = 0.0;
    for _ in 0..=KINK_RETRIES {
        *param(model) = orig + eps;
        let (up, up_active) = eval_loss(model, x, labels);
        *param(model) = orig - eps;
        let (down, down_active) = eval_loss(model, x, labels);
        *param(model) = orig;
        estimate = (up - down) / (2.0 * eps);
        if up_active == base && down_active == base {
            break;
        }
        eps /= 10.0;
    }
    estimate
}

const KINK_RETRIES: usize = 4;

/// Backpropagated gradients of the eval-mode loss.
pub fn analytic_gradients<F: NdFloat>(
    model: &Mlp<F>,
    x: ArrayView2<F>,
    labels: &[usize],
) -> Gradients<f64> {
    let model = model.cast::<f64>();
    let x = x.mapv(|v| super::cast::<F, f64>(v));
    let mut rng = SeededRng::new(0);
    let trace = model.forward_trace(x.view(), Mode::Eval, &mut rng);
    model.backward(x.view(), labels, &trace)
}

/// Central differences `(L(p+e) - L(p-e)) / 2e` for every parameter,
/// with a smaller step where `e` would straddle a ReLU kink.
pub fn numeric_gradients<F: NdFloat>(
    model: &Mlp<F>,
    x: ArrayView2<F>,
    labels: &[usize],
    epsilon: f64,
) -> Gradients<f64> {
    let mut model = model.cast::<f64>();
    let x = x.mapv(|v| super::cast::<F, f64>(v));
    let (_, base) = eval_loss(&model, x.view(), labels);
    let mut out = Vec::with_capacity(model.layers.len());
    for li in 0..model.layers.len() {
        let (rows, cols) = model.layers[li].weights.dim();
        let mut gw = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                gw[[r, c]] = central_difference(&mut model, x.view(), labels, epsilon, &base, |m| {
                    &mut m.layers[li].weights[[r, c]]
                });
            }
        }
        let mut gb = ndarray::Array1::zeros(cols);
        for c in 0..cols {
            gb[c] = central_difference(&mut model, x.view(), labels, epsilon, &base, |m| {
                &mut m.layers[li].bias[c]
            });
        }
        out.push((gw, gb));
    }
    Gradients { layers: out }
}

/// Largest `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over all parameters.
pub fn gradient_check<F: NdFloat>(
    model: &Mlp<F>,
    x: ArrayView2<F>,
    labels: &[usize],
    epsilon: f64,
) -> f64 {
    let analytic = analytic_gradients(model, x, labels);
    let numeric = numeric_gradients(model, x, labels, epsilon);
    analytic
        .layers
        .iter()
        .zip(&numeric.layers)
        .flat_map(|((aw, ab), (nw, nb))| aw.iter().zip(nw).chain(ab.iter().zip(nb)))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{random_model, MlpConfig, MlpModel};

    fn instance(h_layers: usize, hidden: usize, seed: u64) -> (MlpModel, Array2<f32>, Vec<usize>) {
        let cfg = MlpConfig {
            hidden_layers: h_layers,
            hidden_dim: hidden,
            dropout: 0.0,
            ..MlpConfig::pivot().with_seed(seed)
        };
        let model = random_model(8, 4, &cfg).unwrap();
        let mut rng = SeededRng::new(seed ^ 0xABCD);
        let x = Array2::from_shape_simple_fn((5, 8), || rng.normal() as f32);
        let y = (0..5).map(|_| rng.below(4) as usize).collect();
        (model, x, y)
    }

    #[test]
    fn small_model_passes() {
        let (m, x, y) = instance(1, 16, 1);
        let err = gradient_check(&m, x.view(), &y, 1e-4);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn doubled_epsilon_still_passes() {
        let (m, x, y) = instance(1, 16, 2);
        let err = gradient_check(&m, x.view(), &y, 2e-4);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn zero_input_zero_weights_bias_gradients() {
        let (m, _, y) = instance(1, 16, 3);
        let layers = m
            .layers()
            .iter()
            .map(|l| crate::mlp::Layer {
                weights: Array2::zeros(l.weights.raw_dim()),
                bias: ndarray::Array1::zeros(l.bias.len()),
            })
            .collect();
        let zero = Mlp::from_layers(m.config().clone(), layers).unwrap();
        let x = Array2::<f32>::zeros((5, 8));
        let a = analytic_gradients(&zero, x.view(), &y);
        let n = numeric_gradients(&zero, x.view(), &y, 1e-4);
        for ((_, ab), (_, nb)) in a.layers.iter().zip(&n.layers) {
            for (p, q) in ab.iter().zip(nb) {
                assert!((p - q).abs() < 1e-6, "{p} vs {q}");
            }
        }
        // Uniform outputs: output-bias gradient is (1/C - freq(c)).
        let out_bias = &a.layers[1].1;
        for c in 0..4 {
            let freq = y.iter().filter(|&&v| v == c).count() as f64 / 5.0;
            assert!((out_bias[c] - (0.25 - freq)).abs() < 1e-12);
        }
    }

    #[test]
    fn step_shrinks_across_relu_kink() {
        let cfg = MlpConfig {
            hidden_layers: 1,
            hidden_dim: 1,
            dropout: 0.0,
            ..MlpConfig::pivot()
        };
        let layers = vec![
            crate::mlp::Layer {
                weights: Array2::from_elem((1, 1), 1.0f64),
                bias: ndarray::Array1::from_elem(1, -1.0 + 5e-5),
            },
            crate::mlp::Layer {
                weights: ndarray::array![[1.0, -1.0]],
                bias: ndarray::Array1::zeros(2),
            },
        ];
        let m = Mlp::from_layers(cfg, layers).unwrap();
        let x = Array2::from_elem((1, 1), 1.0f64);
        let err = gradient_check(&m, x.view(), &[0], 1e-4);
        assert!(err < 1e-6, "max relative error {err}");
    }
}
