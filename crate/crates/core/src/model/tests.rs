use chrono::NaiveDate;

use super::network::flatten_samples;
use super::*;
use crate::autograd::{grad, Tensor, Var};
use crate::datagen::{generate_mts, SeasonKind, Sampling};
use crate::mcm::{assemble_inputs, build_mcm, input_steps, McmConfig};

fn tiny_config() -> NetworkConfig {
    let layer = |channels, stride| ConvLayerSpec {
        channels,
        kernel: 3,
        stride,
    };
    NetworkConfig {
        conv_layers: vec![layer(3, 1), layer(4, 2), layer(4, 2), layer(5, 2)],
        critic_channels: vec![3, 4, 4],
        batch_size: 8,
        epochs: 1,
        ..NetworkConfig::desk()
    }
}

/// Real MCM inputs from a small synthetic frame.
fn toy_inputs(n: usize, len: usize, seed: u64) -> (Vec<ModelInput>, InputShape) {
    let sampling = Sampling {
        start: NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap(),
        interval_secs: 60,
    };
    let frame = generate_mts(n, len, &[SeasonKind::Random], sampling, 0.3, seed).unwrap();
    let config = McmConfig::default();
    let seq = build_mcm(&frame, &config).unwrap();
    let steps = input_steps(&seq, &config).unwrap();
    let inputs = assemble_inputs(&seq, &config, steps, false).unwrap();
    let shape = InputShape {
        n,
        channels: config.channels(),
        slots: config.slot_count(),
    };
    (inputs, shape)
}

#[test]
fn forward_shapes_and_attention() {
    let (inputs, shape) = toy_inputs(10, 400, 1);
    let model = ReconstructionModel::new(NetworkConfig::desk(), shape).unwrap();
    let refs: Vec<&ModelInput> = inputs.iter().take(3).collect();
    let fwd = model.forward(&refs).unwrap();
    assert_eq!(fwd.reconstruction.shape(), &[3 * 100, 3]);
    assert_eq!(fwd.latent.shape(), &[3, model.config.latent_dim(10)]);
    assert!(fwd.reconstruction.value().all_finite());
    assert_eq!(fwd.attention.len(), 4);
    for layer in &fwd.attention {
        for b in 0..3 {
            let total: f64 = layer.iter().map(|slot| slot[b]).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
    let again = model.forward(&refs).unwrap();
    assert_eq!(fwd.reconstruction.value(), again.reconstruction.value());
}

#[test]
fn construction_is_seeded() {
    let shape = InputShape {
        n: 6,
        channels: 3,
        slots: 5,
    };
    let a = ReconstructionModel::new(tiny_config(), shape).unwrap();
    let b = ReconstructionModel::new(tiny_config(), shape).unwrap();
    assert_eq!(a.generator_params, b.generator_params);
    let c = ReconstructionModel::new(
        NetworkConfig {
            seed: 9,
            ..tiny_config()
        },
        shape,
    )
    .unwrap();
    assert_ne!(a.generator_params, c.generator_params);
}

#[test]
fn rejects_mismatched_inputs() {
    let (inputs, shape) = toy_inputs(5, 300, 2);
    let model = ReconstructionModel::new(
        tiny_config(),
        InputShape {
            n: 6,
            ..shape
        },
    )
    .unwrap();
    assert!(model.forward(&[&inputs[0]]).is_err());
}

#[test]
fn batching_does_not_change_results() {
    let (inputs, shape) = toy_inputs(6, 400, 3);
    let model = ReconstructionModel::new(tiny_config(), shape).unwrap();
    let batched = model.reconstruct(&inputs[..10]).unwrap();
    for (k, r) in batched.iter().enumerate() {
        let single = model.reconstruct(&inputs[k..k + 1]).unwrap();
        for (a, b) in r.output.iter().zip(&single[0].output) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn masked_slot_content_never_reaches_output() {
    let (inputs, shape) = toy_inputs(6, 400, 4);
    let model = ReconstructionModel::new(tiny_config(), shape).unwrap();
    let mut a = inputs[0].clone();
    a.slot_mask[1] = false;
    let mut b = a.clone();
    let len = shape.matrix_len();
    for v in &mut b.slots[len..2 * len] {
        *v = *v * 7.0 - 3.0;
    }
    let ra = model.reconstruct(&[a]).unwrap();
    let rb = model.reconstruct(&[b]).unwrap();
    assert_eq!(ra[0].output, rb[0].output);
}

#[test]
fn loss_decomposition_and_weights() {
    let config = NetworkConfig::desk();
    let x = Var::constant(Tensor::new(vec![8, 2], (0..16).map(|v| v as f64).collect()));
    let xp = Var::constant(Tensor::new(vec![8, 2], (0..16).map(|v| (v as f64).sin()).collect()));
    let z = Var::constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0]));
    let zp = Var::constant(Tensor::new(vec![2, 3], vec![0.0; 6]));
    let real = Var::constant(Tensor::new(vec![2, 1], vec![0.3, -0.1]));
    let fake = Var::constant(Tensor::new(vec![2, 1], vec![1.2, 0.4]));
    let gp = Var::constant(Tensor::scalar(0.25));
    let l = compute_losses(&x, &xp, &z, &zp, &real, &fake, &gp, &config).unwrap().breakdown;
    let w = config.loss_weights;
    let expected = w.contextual * l.contextual + w.latent * l.latent + w.adversarial * l.adversarial;
    assert!((l.generator - expected).abs() < 1e-9);
    assert!((l.adversarial - 0.8).abs() < 1e-12);
    assert!((l.wasserstein - (0.1 - 0.8)).abs() < 1e-12);
    assert!((l.critic - (l.wasserstein + 10.0 * 0.25)).abs() < 1e-12);
    // Independent per-sample norms for the latent term.
    let lat = (1.0f64 + 4.0).sqrt() / 2.0 + (1.0f64 + 0.25).sqrt() / 2.0;
    assert!((l.latent - lat).abs() < 1e-12);

    // Doubling the reconstruction error doubles `contextual`; L_G grows by
    // w1 times that increment.
    let xp2 = Var::constant(x.value().zip_map(xp.value(), |a, b| a - 2.0 * (a - b)));
    let l2 = compute_losses(&x, &xp2, &z, &zp, &real, &fake, &gp, &config).unwrap().breakdown;
    assert!((l2.contextual - 2.0 * l.contextual).abs() < 1e-9);
    assert!(((l2.generator - l.generator) - w.contextual * l.contextual).abs() < 1e-7);
}

#[test]
fn perfect_reconstruction_has_zero_losses() {
    let config = NetworkConfig::desk();
    let x = Var::constant(Tensor::new(vec![4, 3], vec![0.7; 12]));
    let z = Var::constant(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]));
    let zero = Var::constant(Tensor::new(vec![2, 1], vec![0.0; 2]));
    let gp = Var::constant(Tensor::scalar(0.0));
    let l = compute_losses(&x, &x, &z, &z, &zero, &zero, &gp, &config).unwrap().breakdown;
    assert_eq!((l.contextual, l.latent, l.critic), (0.0, 0.0, 0.0));
}

#[test]
fn non_finite_losses_are_reported() {
    let config = NetworkConfig::desk();
    let x = Var::constant(Tensor::new(vec![2, 1], vec![f64::NAN, 0.0]));
    let z = Var::constant(Tensor::new(vec![2, 1], vec![0.0; 2]));
    let gp = Var::constant(Tensor::scalar(0.0));
    let err = compute_losses(&x, &z, &z, &z, &z, &z, &gp, &config).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
}

#[test]
fn penalty_vanishes_for_unit_slope_linear_critic() {
    // f(x) = <w, x> per sample with ‖w‖ = 1 has gradient norm exactly 1.
    let w: Vec<f64> = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0].iter().map(|v| v / 5.0).collect();
    let weight = Var::constant(Tensor::new(vec![6, 1], w));
    let critic = |x: &Var| flatten_samples(x, 3).matmul(&weight);
    let real = Tensor::new(vec![9, 2], (0..18).map(|v| v as f64).collect());
    let fake = Tensor::new(vec![9, 2], (0..18).map(|v| -(v as f64)).collect());
    let gp = gradient_penalty(critic, &real, &fake, &[0.1, 0.5, 0.9]);
    assert!(gp.value().item().abs() < 1e-12);

    let steep = |x: &Var| flatten_samples(x, 3).matmul(&weight).scale(3.0);
    let gp = gradient_penalty(steep, &real, &fake, &[0.1, 0.5, 0.9]);
    assert!((gp.value().item() - 4.0).abs() < 1e-12);
}

#[test]
fn penalty_is_non_negative_on_the_critic() {
    let (inputs, shape) = toy_inputs(6, 400, 5);
    let model = ReconstructionModel::new(tiny_config(), shape).unwrap();
    let refs: Vec<&ModelInput> = inputs.iter().take(4).collect();
    let batch = Batch::from_inputs(&refs, shape).unwrap();
    let fake = model.forward(&refs).unwrap().reconstruction;
    let p = model.critic_params.leaves();
    for seed in 0..5u64 {
        let eps: Vec<f64> = (0..4).map(|k| ((seed * 4 + k) as f64 * 0.61).fract()).collect();
        let gp = gradient_penalty(
            |v| model.critic.forward(&p, v, 4, &model.config),
            batch.target(),
            fake.value(),
            &eps,
        );
        assert!(gp.value().item() >= 0.0);
        // The penalty is differentiable with respect to the critic weights.
        let g = grad(&gp, &p.0, false);
        assert!(g.iter().any(|t| t.value().data().iter().any(|v| *v != 0.0)));
    }
}

/// Central differences for `contextual + latent` on a few generator weights.
#[test]
fn generator_gradients_match_finite_differences() {
    let (inputs, shape) = toy_inputs(5, 300, 6);
    let shape = InputShape { ..shape };
    let model = ReconstructionModel::new(tiny_config(), shape).unwrap();
    let refs: Vec<&ModelInput> = inputs.iter().take(2).collect();
    let batch = Batch::from_inputs(&refs, shape).unwrap();
    let x = Var::constant(batch.target().clone());

    let loss_of = |store: &crate::nn::ParamStore, leaves: bool| {
        let p = if leaves {
            store.leaves()
        } else {
            store.constants()
        };
        let fwd = model.generator.forward(&p, &batch, &model.config);
        let zp = model
            .generator
            .second_latent(&p, &batch, &fwd.reconstruction, &model.config);
        let loss = mean_l2(&x, &fwd.reconstruction, 2).add(&mean_l2(&fwd.latent, &zp, 2));
        (loss, p)
    };
    let (loss, p) = loss_of(&model.generator_params, true);
    let grads = grad(&loss, &p.0, false);

    let names = model.generator_params.names().to_vec();
    let mut checked = 0;
    for (k, name) in names.iter().enumerate() {
        if !(name.contains("conv0") || name.contains("deconv3") || name.contains("latent_encoder.lstm3"))
        {
            continue;
        }
        for idx in [0usize, 3] {
            let len = model.generator_params.values()[k].len();
            if idx >= len {
                continue;
            }
            let h = 1e-5;
            let mut plus = model.generator_params.clone();
            plus.values_mut()[k].data_mut()[idx] += h;
            let mut minus = model.generator_params.clone();
            minus.values_mut()[k].data_mut()[idx] -= h;
            let fp = loss_of(&plus, false).0.value().item();
            let fm = loss_of(&minus, false).0.value().item();
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[k].value().data()[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic}, numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked >= 8);
}

#[test]
fn one_epoch_updates_parameters() {
    let (inputs, shape) = toy_inputs(6, 300, 7);
    let model = ReconstructionModel::new(tiny_config(), shape).unwrap();
    let before = (model.generator_params.clone(), model.critic_params.clone());
    let mut trainer = Trainer::new(model);
    let stats = trainer.epoch(&inputs[..8]).unwrap();
    assert_eq!(stats.epoch, 1);
    assert_ne!(trainer.model.generator_params, before.0);
    assert_ne!(trainer.model.critic_params, before.1);
    assert!(stats.losses.penalty >= 0.0);
}

#[test]
fn training_is_deterministic_and_reduces_contextual_loss() {
    let (inputs, shape) = toy_inputs(6, 1200, 8);
    let inputs = &inputs[..200];
    let config = NetworkConfig {
        epochs: 5,
        batch_size: 16,
        ..tiny_config()
    };
    let a = train(inputs, config.clone(), shape).unwrap();
    let first = a.history[0].losses.contextual;
    let last = a.history[4].losses.contextual;
    assert!(last < first, "contextual loss {first} -> {last}");

    let b = train(inputs, config, shape).unwrap();
    assert_eq!(a.generator_params, b.generator_params);
    assert_eq!(a.history, b.history);
}

#[test]
fn checkpoint_roundtrip() {
    let (inputs, shape) = toy_inputs(6, 300, 9);
    let model = train(&inputs[..8], tiny_config(), shape).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = ReconstructionModel::load(dir.path()).unwrap();
    assert_eq!(back.generator_params, model.generator_params);
    assert_eq!(back.critic_params, model.critic_params);
    assert_eq!(back.history, model.history);
    assert_eq!(back.config, model.config);

    let header = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        header.replace("\"format_version\": 1", "\"format_version\": 99"),
    )
    .unwrap();
    assert!(matches!(
        ReconstructionModel::load(dir.path()),
        Err(Error::Format(_))
    ));
}

#[test]
fn config_validation() {
    assert!(NetworkConfig::default().validate().is_ok());
    let bad = NetworkConfig {
        attention_rescale: 0.0,
        ..NetworkConfig::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(NetworkConfig::default().latent_dim(10), 2 * 2 * 256);
}
