//! Fixed-seed gradient-check suites for every differentiable op and for a
//! small end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Mode, PriorForm};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::memory::MemoryConfig;
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::{doubled_backward, grad_check, grad_check_sampled, Activation, GradCheckReport, Tensor};
use crate::params::Bound;

/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const MODEL_TOL: f64 = 1e-3;

/// Each op at three small random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let tol = OP_TOL;
    let mut out = Vec::new();
    for (case, &(a, b, c)) in [(2usize, 3usize, 3usize), (3, 4, 5), (1, 5, 4)].iter().enumerate() {
    let u = |s: &[usize], r: &mut ChaCha8Rng| Tensor::<f64>::uniform(s, 1.0, r);
    let mut checks: Vec<GradCheckReport> = Vec::new();
    let pos = |s: &[usize], r: &mut ChaCha8Rng| {
        Tensor::<f64>::from_fn(s, |_| r.gen_range(0.2..1.0))
    };
    checks.push(grad_check("linear", |t, v| t.linear(v[0], v[1], Some(v[2])), &[u(&[a, b], &mut r), u(&[c, b], &mut r), u(&[c], &mut r)], tol)?);
    checks.push(grad_check("conv2d", |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[u(&[a, c, c], &mut r), u(&[b, a, 3, 3], &mut r), u(&[b], &mut r)], tol)?);
    checks.push(grad_check("conv2d_strided", |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1), &[u(&[a, 4, 4], &mut r), u(&[b, a, 3, 3], &mut r), u(&[b], &mut r)], tol)?);
    checks.push(grad_check("depthwise", |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1), &[u(&[a, c, c], &mut r), u(&[a, 1, 3, 3], &mut r), u(&[a], &mut r)], tol)?);
    checks.push(grad_check("softmax", |t, v| Ok(t.softmax(v[0])), &[u(&[a, c], &mut r)], tol)?);
    for f in [Activation::Sigmoid, Activation::Tanh, Activation::Softplus] {
        checks.push(grad_check(&format!("{f:?}"), |t, v| Ok(t.unary(v[0], f)), &[u(&[a, b], &mut r)], tol)?);
    }
    // keep relu6 inputs away from its kinks
    let relu_in = Tensor::<f64>::from_fn(&[a, b], |i| if i % 2 == 0 { 0.5 + i as f64 * 0.3 } else { -0.7 - i as f64 * 0.1 });
    checks.push(grad_check("relu6", |t, v| Ok(t.relu6(v[0])), &[relu_in], tol)?);
    checks.push(grad_check("layer_norm", |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[u(&[a, c], &mut r), u(&[c], &mut r), u(&[c], &mut r)], tol)?);
    checks.push(grad_check("batch_norm_train", |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0), &[u(&[a + 1, b, 2, 2], &mut r), u(&[b], &mut r), u(&[b], &mut r)], tol)?);
    let (mean, var) = (vec![0.1; b], vec![0.8; b]);
    checks.push(grad_check("batch_norm_fixed", |t, v| t.batch_norm_fixed(v[0], v[1], v[2], &mean, &var, 1e-5), &[u(&[a, b, 2, 2], &mut r), u(&[b], &mut r), u(&[b], &mut r)], tol)?);
    checks.push(grad_check("upsample", |t, v| t.upsample_nearest(v[0], 2), &[u(&[a, 2, 3], &mut r)], tol)?);
    checks.push(grad_check("matmul", |t, v| t.matmul(v[0], v[1]), &[u(&[a, b], &mut r), u(&[b, c], &mut r)], tol)?);
    checks.push(grad_check("matmul_nt", |t, v| t.matmul_nt(v[0], v[1]), &[u(&[a, b], &mut r), u(&[c, b], &mut r)], tol)?);
    checks.push(grad_check("transpose", |t, v| t.transpose(v[0]), &[u(&[a, b], &mut r)], tol)?);
    checks.push(grad_check("mul", |t, v| t.mul(v[0], v[1]), &[u(&[a, b], &mut r), u(&[a, b], &mut r)], tol)?);
    checks.push(grad_check("sub", |t, v| t.sub(v[0], v[1]), &[u(&[a, b], &mut r), u(&[a, b], &mut r)], tol)?);
    checks.push(grad_check("concat", |t, v| t.concat(&[v[0], v[1]], 1), &[u(&[a, b], &mut r), u(&[a, c], &mut r)], tol)?);
    checks.push(grad_check("slice", |t, v| t.slice(v[0], 1, 1, b - 1), &[u(&[a, b + 1, 2], &mut r)], tol)?);
    checks.push(grad_check("reshape", |t, v| t.reshape(v[0], &[a * b]), &[u(&[a, b], &mut r)], tol)?);
    checks.push(grad_check("normalize_sum", |t, v| t.normalize_sum(v[0]), &[pos(&[a, b], &mut r)], tol)?);
    let target = {
        let p = pos(&[b, c], &mut r);
        let s = p.sum();
        p.map(|v| v / s)
    };
    checks.push(grad_check("kld", |t, v| t.kld(&target, v[0], 1e-7), &[pos(&[b, c], &mut r)], tol)?);
    let mut priors = Tensor::<f64>::zeros(&[a, 5]);
    for k in 0..a {
        let row = [r.gen_range(0.2..0.8), r.gen_range(0.2..0.8), r.gen_range(-1.5..-0.5), r.gen_range(-1.5..-0.5), r.gen_range(-0.5..0.5)];
        priors.data_mut()[k * 5..k * 5 + 5].copy_from_slice(&row);
    }
    checks.push(grad_check("gaussian_priors", |t, v| t.gaussian_priors(v[0], 4, 5), &[priors], tol)?);
    // σ chosen so that ±3σ is not at an integer (kernel length is piecewise constant)
    let ls = Tensor::new(&[1], vec![[0.9f64, 1.3, 0.45][case].ln()])?;
    checks.push(grad_check("gaussian_blur", |t, v| t.gaussian_blur(v[0], v[1]), &[pos(&[b + 2, c + 2], &mut r), ls], tol)?);
    for mut rep in checks {
        rep.op_name = format!("{}[{case}]", rep.op_name);
        out.push(rep);
    }
}

    Ok(out)
}

/// An identity whose backward pass doubles the gradient. Must fail.
pub fn injected_fault(seed: u64) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r);
    grad_check("injected_fault", |t, v| doubled_backward(t, v[0]), &[x], OP_TOL)
}

/// T=2, C=2, 4x4 maps, 2 heads.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            frame_h: 8,
            frame_w: 8,
            stub_channels: vec![1, 1],
            key_channels: 2,
            gru_hidden: 2,
            priors: 1,
            ..EncoderConfig::default()
        },
        memory: MemoryConfig { channels: 2, heads: 2, bank_slots: 2, ..MemoryConfig::default() },
        ablation: Ablation::Full,
        prior_form: PriorForm::Gaussian,
        domains: vec!["a".into(), "b".into()],
    }
}

/// Loss of the toy model with respect to every parameter, probing up to
/// 600 sampled entries.
pub fn model_suite(seed: u64) -> Result<GradCheckReport> {
    model_suite_cfg(toy_model_config(), seed, 600)
}

/// Same check for any model configuration, probing up to `n` entries per
/// parameter.
pub fn model_suite_cfg(cfg: ModelConfig, seed: u64, n: usize) -> Result<GradCheckReport> {
    let mut m = Model::<f64>::new(cfg, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    // Zero-initialized biases put relu6 inputs exactly on the kink wherever a
    // feature map is dead; probe a generic point near the initialization.
    let ids: Vec<_> = m.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.05..0.05));
    }
    let frames = Tensor::<f64>::uniform(&[2, 3, 8, 8], 0.5, &mut r).map(|v| v + 0.5);
    let [h, w] = m.cfg.map_shape();
    let mut gt = Tensor::<f64>::from_fn(&[2, h, w], |_| r.gen_range(0.1..1.0));
    for f in gt.data_mut().chunks_mut(h * w) {
        let s: f64 = f.iter().sum();
        f.iter_mut().for_each(|v| *v /= s);
    }
    let inputs = m.store.values().to_vec();
    grad_check_sampled(
        "model",
        |t, v| {
            let bound = Bound::from_vars(v.to_vec());
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let fwd = m.forward(t, &bound, "a", &[&frames], Mode::Train, &mut rng)?;
            Ok(m.loss_sum(t, &fwd, &[&gt])?.0)
        },
        &inputs,
        MODEL_TOL,
        n,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_ablation_passes_model_check() {
        for ablation in Ablation::ALL {
            let cfg = ModelConfig { ablation, ..toy_model_config() };
            let r = model_suite_cfg(cfg, 4, 120).unwrap();
            assert!(r.passed, "{ablation}: {r}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        assert!(!injected_fault(1).unwrap().passed);
    }
}
