//! Finite-difference gradient oracle.
//!
//! The oracle runs a direct (non-im2col) double-precision evaluation of the
//! network so that it shares no arithmetic with the `f32` training path.

use super::{LayerKind, Network, NnError, Tensor};

/// Central-difference step. Small enough that few perturbations carry a
/// ReLU pre-activation across zero, large enough for f64 round-off.
pub const FD_STEP: f64 = 1e-5;

/// Evaluate `net`'s architecture with the given `f64` parameters.
pub fn reference_forward(net: &Network, params: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
    if params.len() != net.param_count() {
        return Err(NnError::GradShape {
            expected: net.param_count(),
            found: params.len(),
        });
    }
    let shape = net.input_shape();
    if input.len() != shape.len() {
        return Err(NnError::Shape {
            layer: 0,
            expected: shape.len(),
            shape: shape.to_string(),
            found: input.len(),
        });
    }
    let mut x = input.to_vec();
    for (i, layer) in net.layers().iter().enumerate() {
        let (nw, _) = layer.param_counts();
        let start = net.layer_offset(i);
        let w = &params[start..start + nw];
        let b = &params[start + nw..net.layer_offset(i + 1)];
        let in_shape = net.shapes[i];
        let out_shape = net.shapes[i + 1];
        let mut y = vec![0.0f64; out_shape.len()];
        match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                for o in 0..out_channels {
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let mut s = b[o];
                            for c in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let wi = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                                        let xi = (c * in_shape.height + oy * stride + ky) * in_shape.width
                                            + ox * stride
                                            + kx;
                                        s += w[wi] * x[xi];
                                    }
                                }
                            }
                            y[(o * out_shape.height + oy) * out_shape.width + ox] = s;
                        }
                    }
                }
            }
            LayerKind::Dense { in_dim, out_dim } => {
                for o in 0..out_dim {
                    y[o] = b[o] + (0..in_dim).map(|j| w[o * in_dim + j] * x[j]).sum::<f64>();
                }
            }
        }
        for v in &mut y {
            *v = layer.activation.apply_f64(*v);
        }
        x = y;
    }
    Ok(x)
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of `theta`.
pub fn finite_diff_grad<F>(theta: &[f64], mut loss: F) -> Result<Vec<f64>, NnError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + FD_STEP;
        let up = loss(&point);
        point[i] = orig - FD_STEP;
        let down = loss(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NnError::NonFinite("finite-difference loss"));
        }
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// Finite-difference gradient of `loss(net(input))` with respect to the
/// network parameters.
pub fn finite_diff_grad_net<F>(net: &Network, input: &Tensor, loss: F) -> Result<Vec<f64>, NnError>
where
    F: Fn(&[f64]) -> f64,
{
    let theta: Vec<f64> = net.params().values.iter().map(|&v| v as f64).collect();
    let x: Vec<f64> = input.data.iter().map(|&v| v as f64).collect();
    let mut failure = None;
    let grad = finite_diff_grad(&theta, |p| match reference_forward(net, p, &x) {
        Ok(out) => loss(&out),
        Err(e) => {
            failure = Some(e);
            f64::NAN
        }
    });
    match failure {
        Some(e) => Err(e),
        None => grad,
    }
}

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() / 1e-7
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Activation, LayerSpec, Shape};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_has_analytic_derivative() {
        let g = finite_diff_grad(&[3.0], |t| t[0] * t[0]).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g = finite_diff_grad(&[1.0, -2.0, 0.5], |_| 4.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = finite_diff_grad(&[0.0], |t| 1.0 / t[0].abs().min(0.0));
        assert!(matches!(r, Err(NnError::NonFinite(_))));
    }

    #[test]
    fn reference_forward_agrees_with_f32_path() {
        let mut net = Network::new(
            Shape::new(2, 9, 9),
            vec![
                LayerSpec::conv(2, 3, 3, 2, Activation::Relu),
                LayerSpec::conv(3, 4, 2, 1, Activation::Relu),
                LayerSpec::dense(36, 5, Activation::Sigmoid),
            ],
        )
        .unwrap();
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(5));
        let x: Vec<f32> = (0..162).map(|i| ((i as f32) * 0.13).cos()).collect();
        let fast = net.predict(&x).unwrap();
        let p: Vec<f64> = net.params().values.iter().map(|&v| v as f64).collect();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let slow = reference_forward(&net, &p, &x64).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn five_parameter_net_matches_backward() {
        let mut net = Network::new(Shape::vector(4), vec![LayerSpec::dense(4, 1, Activation::Sigmoid)]).unwrap();
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(net.param_count(), 5);
        let x = Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]);
        let target = 0.9;
        let (out, tape) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&tape, &[out.data[0] - target as f32]).unwrap();
        let fd = finite_diff_grad_net(&net, &x, |y| 0.5 * (y[0] - target).powi(2)).unwrap();
        for (a, b) in grads.values.iter().zip(&fd) {
            assert!(relative_error(*a as f64, *b) < 1e-4, "{a} vs {b}");
        }
    }
}
