//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::loss::siamese_loss;
use crate::model::{init_params, BackboneConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::{prepare_pair, TrainConfig};

/// Largest relative disagreement between `analytic` and the central difference
/// `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps` over all coordinates `i`.
///
/// The relative error of one coordinate is `|g - d| / max(|g|, |d|, 1e-8)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> f64,
    params: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(params.shape(), analytic.shape(), "gradient shape mismatch");
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.numel() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let g = analytic.data()[i];
        let err = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Checks a graph-building closure against finite differences with respect to
/// every one of `inputs` (each registered as a trainable leaf).
pub fn check_graph<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (g, ids, out) = eval(inputs)?;
    if g.value(out).numel() != 1 {
        return Err(StcrError::Argument("check_graph needs a scalar output".into()));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf gradient").clone();
        let mut err = None;
        let e = finite_diff_check(
            |p| {
                let mut values = inputs.to_vec();
                values[k] = p.clone();
                match eval(&values) {
                    Ok((g, _, out)) => g.value(out).data()[0],
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &inputs[k],
            &analytic,
            eps,
        );
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Checks the full siamese loss with respect to every model parameter on a
/// random clip. Initialization, crop, transform and mixup all come from `seed`.
///
/// Biases are redrawn from U(-0.1, 0.1): with zero biases a dead channel puts
/// a head's pre-activation exactly on the relu kink, where finite differences
/// and any subgradient legitimately disagree.
pub fn full_loss_gradient_check(config: &BackboneConfig, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(config, &mut rng)?;
    let biases: Vec<usize> = params
        .named_tensors()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name.ends_with("bias"))
        .map(|(i, _)| i)
        .collect();
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        if biases.contains(&i) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    if config.tie_heads {
        params.tie_heads();
    }
    let [c, t, h, w] = config.input_shape;
    let video = VideoClip::from_fn([c, t, h, w], |_| rng.random::<f64>());
    let train = TrainConfig {
        crop: [t, h, w],
        ..TrainConfig::default()
    };
    let pair = prepare_pair(&video, &video, &train, &mut rng)?;

    let loss_of = |p: &ModelParams| -> Result<(Graph, crate::model::ParamNodes, NodeId)> {
        let mut g = Graph::new();
        let nodes = p.register(&mut g, true);
        let out = siamese_loss(&mut g, &nodes, config, &pair.clean, &pair.noise, pair.transform, train.gamma)?;
        Ok((g, nodes, out.total))
    };
    let (g, nodes, total) = loss_of(&params)?;
    let grads = g.backward(total)?;
    let analytic: Vec<f64> = nodes
        .collect(&grads, &params)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let analytic = Tensor::new(vec![analytic.len()], analytic)?;

    let flat = params.flatten();
    let mut probe = params.clone();
    let mut err = None;
    let worst = finite_diff_check(
        |p| {
            let r = probe.load_flat(p).and_then(|_| loss_of(&probe));
            match r {
                Ok((g, _, total)) => g.value(total).data()[0],
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        &analytic,
        eps,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_second_order() {
        let p = Tensor::scalar(3.0);
        let g = Tensor::scalar(6.0);
        let err = finite_diff_check(|t| t.data()[0] * t.data()[0], &p, &g, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::from_fn(&[4], |i| i as f64);
        let g = Tensor::zeros(&[4]);
        assert_eq!(finite_diff_check(|_| 1.25, &p, &g, 1e-5), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let p = Tensor::scalar(3.0);
        let g = Tensor::scalar(5.0);
        let err = finite_diff_check(|t| t.data()[0] * t.data()[0], &p, &g, 1e-5);
        assert!(err > 0.1);
    }
}
