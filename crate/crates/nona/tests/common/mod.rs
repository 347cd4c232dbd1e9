//! Shared helpers for integration tests: a finite-difference gradient
//! oracle over full models and random instance builders.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nona::similarity::SimilarityKind;
use nona::softstep::{ParamMode, SoftStepConfig, SoftStepFamily};
use nona::tape::Tape;
use nona::tensor::Tensor;
use nona::train::{build_model, mse_loss, HeadKind, HeadState, HeadVars, Model, ModelConfig};

/// Training-path MSE loss of a model on one batch.
pub fn training_loss(model: &Model, x: &Tensor, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (mlp_vars, head_vars) = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = model.mlp.forward(&mut tape, &mlp_vars, xv).unwrap();
    let pred = match (&model.head, &head_vars) {
        (HeadState::Dense(d), HeadVars::Dense(dv)) => d.forward(&mut tape, *dv, z).unwrap(),
        (HeadState::Nona(n), HeadVars::Nona(ss)) => {
            n.forward_train(&mut tape, ss, z, yv).unwrap().prediction
        }
        _ => unreachable!(),
    };
    let loss = mse_loss(&mut tape, pred, yv).unwrap();
    tape.value(loss).item()
}

/// Tape gradients of the training loss, one tensor per parameter in
/// canonical order.
pub fn tape_gradients(model: &Model, x: &Tensor, y: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let (mlp_vars, head_vars) = model.bind(&mut tape, true);
    let vars = Model::flat_vars(&mlp_vars, &head_vars);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = model.mlp.forward(&mut tape, &mlp_vars, xv).unwrap();
    let pred = match (&model.head, &head_vars) {
        (HeadState::Dense(d), HeadVars::Dense(dv)) => d.forward(&mut tape, *dv, z).unwrap(),
        (HeadState::Nona(n), HeadVars::Nona(ss)) => {
            n.forward_train(&mut tape, ss, z, yv).unwrap().prediction
        }
        _ => unreachable!(),
    };
    let loss = mse_loss(&mut tape, pred, yv).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|&v| grads.wrt(v).expect("param gradient").clone()).collect()
}

/// Central finite differences of the training loss with step `h`.
pub fn fd_gradients(model: &mut Model, x: &Tensor, y: &Tensor, h: f64) -> Vec<Tensor> {
    let n_params = model.param_tensors_mut().len();
    let mut out = Vec::with_capacity(n_params);
    for p in 0..n_params {
        let (shape, numel) = {
            let t = &model.param_tensors_mut()[p];
            (t.shape().to_vec(), t.numel())
        };
        let mut grad = vec![0.0; numel];
        for i in 0..numel {
            let orig = model.param_tensors_mut()[p].data()[i];
            model.param_tensors_mut()[p].data_mut()[i] = orig + h;
            let up = training_loss(model, x, y);
            model.param_tensors_mut()[p].data_mut()[i] = orig - h;
            let down = training_loss(model, x, y);
            model.param_tensors_mut()[p].data_mut()[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(shape, grad).unwrap());
    }
    out
}

/// Worst relative error between analytic and finite-difference gradients,
/// with a floor on the denominator so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[Tensor], fd: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        for (&av, &fv) in a.data().iter().zip(f.data()) {
            let denom = av.abs().max(fv.abs()).max(1e-4);
            worst = worst.max((av - fv).abs() / denom);
        }
    }
    worst
}

/// The 20 gradcheck configurations: every similarity kind crossed with
/// S1/S2 x global/pointwise, plus every similarity kind without SoftStep.
pub fn gradcheck_configs() -> Vec<(SimilarityKind, SoftStepConfig)> {
    let mut configs = Vec::with_capacity(20);
    for kind in SimilarityKind::ALL {
        for family in [SoftStepFamily::S1, SoftStepFamily::S2] {
            for mode in [ParamMode::Global, ParamMode::Pointwise] {
                configs.push((kind, SoftStepConfig { family, param_mode: mode, ..Default::default() }));
            }
        }
        configs.push((kind, SoftStepConfig::none()));
    }
    configs
}

/// Margin every piecewise boundary must clear for finite differences to
/// be trustworthy at step 1e-5.
const KINK_MARGIN: f64 = 1e-3;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Rejects instances where the loss sits within [`KINK_MARGIN`] of a
/// non-differentiable boundary (ReLU kinks, min/max argument switches,
/// SoftStep region edges), which would corrupt the FD oracle without
/// indicating a gradient bug.
fn well_conditioned(model: &Model, x: &Tensor) -> bool {
    use nona::softstep::{SoftStepFamily, SoftStepParams};

    // Manual MLP forward tracking pre-activation margins.
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    for layer in &model.mlp.layers {
        let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
        let mut next = Vec::with_capacity(h.len());
        for row in &h {
            let mut pre = vec![0.0; out_dim];
            for (o, p) in pre.iter_mut().enumerate() {
                *p = layer.bias.data()[o];
                for i in 0..in_dim {
                    *p += layer.weight.at(o, i) * row[i];
                }
            }
            if layer.relu {
                if pre.iter().any(|v| v.abs() < KINK_MARGIN) {
                    return false;
                }
                for v in pre.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            next.push(pre);
        }
        h = next;
    }
    let z = h;
    let head = match &model.head {
        HeadState::Nona(n) => n,
        HeadState::Dense(_) => return true,
    };

    let b = z.len();
    for i in 0..b {
        let mut off: Vec<f64> = (0..b)
            .filter(|&j| j != i)
            .map(|j| head.similarity.scalar(&z[i], &z[j]))
            .collect();
        off.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let range = off[off.len() - 1] - off[0];
        if range < KINK_MARGIN {
            return false;
        }
        // Min/max argument switches under perturbation.
        if off[1] - off[0] < KINK_MARGIN * range
            || off[off.len() - 1] - off[off.len() - 2] < KINK_MARGIN * range
        {
            return false;
        }
        if head.softstep.family == SoftStepFamily::None {
            continue;
        }
        // SoftStep parameters at this row (pointwise weights start at
        // zero, so the bias alone determines them up to FD-sized shifts).
        let (a0, b0) = match &head.params {
            SoftStepParams::Global { raw } => {
                (sigmoid(raw.data()[0]), sigmoid(raw.data()[1]))
            }
            SoftStepParams::Pointwise { weight, bias } => {
                let mut pre = [bias.data()[0], bias.data()[1]];
                for (k, p) in pre.iter_mut().enumerate() {
                    for (d, &zv) in z[i].iter().enumerate() {
                        *p += weight.at(k, d) * zv;
                    }
                }
                (sigmoid(pre[0]), sigmoid(pre[1]))
            }
            SoftStepParams::None => unreachable!(),
        };
        let norm: Vec<f64> = off.iter().map(|v| (v - off[0]) / range).collect();
        match head.softstep.family {
            SoftStepFamily::S1 => {
                let a = a0.min(1.0) - head.softstep.epsilon;
                let edge_b = a + b0 * (1.0 - a);
                for &v in &norm {
                    if (v - a).abs() < KINK_MARGIN || (v - edge_b).abs() < KINK_MARGIN {
                        return false;
                    }
                }
            }
            SoftStepFamily::S2 => {
                for &v in &norm {
                    if (v - b0).abs() < KINK_MARGIN {
                        return false;
                    }
                    // ln(x) is steep near 0; the exact zero (row minimum)
                    // is hard-rejected and carries no gradient, so only
                    // small nonzero values are a problem.
                    if v != 0.0 && v < KINK_MARGIN {
                        return false;
                    }
                }
            }
            SoftStepFamily::None => {}
        }
    }
    true
}

/// A small random model plus batch for gradient checking, resampled until
/// the instance is safely differentiable at the FD step size.
pub fn random_instance(
    similarity: SimilarityKind,
    softstep: SoftStepConfig,
    seed: u64,
    batch: usize,
) -> (Model, Tensor, Tensor) {
    let dims = ModelConfig { input_dim: 2, hidden_dim: 6, embedding_dim: 4, depth: 1 };
    for attempt in 0..1000u64 {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9e37));
        let model = build_model(HeadKind::Nona, &dims, similarity, softstep, s);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xabcd);
        let x = Tensor::new(
            vec![batch, 2],
            (0..batch * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::column(&(0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        if well_conditioned(&model, &x) {
            return (model, x, y);
        }
    }
    panic!("no well-conditioned gradcheck instance found for {similarity:?}");
}
