//! Losses and the alternating critic/generator optimization.
//!
//! Sign convention: the critic is trained to score reconstructions *high*
//! and real inputs *low*, i.e. it minimizes
//! `mean f(x) − mean f(x') + λ·GP`, and the generator's adversarial term is
//! `+mean f(x')`. Both players therefore minimize their objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{flatten_samples, Batch};
use super::{NetworkConfig, ReconstructionModel};
use crate::autograd::{grad, no_grad, Tensor, Var};
use crate::datagen::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::mcm::ModelInput;
use crate::nn::{Adam, ParamStore};

/// Scalar loss values of one batch or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contextual: f64,
    pub latent: f64,
    pub adversarial: f64,
    /// `L_G = w1·contextual + w2·latent + w3·adversarial`.
    pub generator: f64,
    /// Wasserstein estimate `mean f(x) − mean f(x')`.
    pub wasserstein: f64,
    /// `E[(‖∇f(x̂)‖ − 1)²]`, before multiplying by λ.
    pub penalty: f64,
    /// `L_D = wasserstein + λ·penalty`.
    pub critic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

/// Graph-level losses of one batch.
#[derive(Clone, Debug)]
pub struct Losses {
    pub generator: Var,
    pub critic: Var,
    pub breakdown: LossBreakdown,
}

/// Mean over samples of the per-sample ℓ2 distance (`[batch, d]` inputs, or
/// anything whose rows can be regrouped into `batch` samples).
pub fn mean_l2(a: &Var, b: &Var, batch: usize) -> Var {
    flatten_samples(&a.sub(b), batch).row_norm().mean_all()
}

/// Assembles both objectives from their parts.
///
/// `x`, `x_prime` are `[batch·n·n, C]`, `z`, `z_prime` are `[batch, d]`,
/// `critic_real`/`critic_fake` are `[batch, 1]` and `penalty` a scalar.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    x: &Var,
    x_prime: &Var,
    z: &Var,
    z_prime: &Var,
    critic_real: &Var,
    critic_fake: &Var,
    penalty: &Var,
    config: &NetworkConfig,
) -> Result<Losses> {
    let batch = z.shape()[0];
    if x.shape() != x_prime.shape() || z.shape() != z_prime.shape() {
        return Err(Error::Shape("loss inputs disagree in shape".into()));
    }
    let w = config.loss_weights;
    let contextual = mean_l2(x, x_prime, batch);
    let latent = mean_l2(z, z_prime, batch);
    let adversarial = critic_fake.mean_all();
    let generator = contextual
        .scale(w.contextual)
        .add(&latent.scale(w.latent))
        .add(&adversarial.scale(w.adversarial));
    let wasserstein = critic_real.mean_all().sub(&critic_fake.mean_all());
    let critic = wasserstein.add(&penalty.scale(config.gp_coefficient));
    let breakdown = LossBreakdown {
        contextual: contextual.value().item(),
        latent: latent.value().item(),
        adversarial: adversarial.value().item(),
        generator: generator.value().item(),
        wasserstein: wasserstein.value().item(),
        penalty: penalty.value().item(),
        critic: critic.value().item(),
    };
    check_finite(&breakdown)?;
    Ok(Losses {
        generator,
        critic,
        breakdown,
    })
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    let all = [
        b.contextual,
        b.latent,
        b.adversarial,
        b.generator,
        b.wasserstein,
        b.penalty,
        b.critic,
    ];
    if all.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch: 0,
            detail: format!("non-finite loss: {b:?}"),
        })
    }
}

/// `E[(‖∇_x̂ f(x̂)‖₂ − 1)²]` on per-sample interpolates
/// `x̂ = ε·real + (1 − ε)·fake`.
///
/// `critic` maps `[batch·rows, cols]` to `[batch, 1]`. The result is
/// differentiable with respect to whatever the critic closes over.
pub fn gradient_penalty(
    critic: impl Fn(&Var) -> Var,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Var {
    let batch = eps.len();
    assert_eq!(real.shape(), fake.shape());
    let per_sample = real.len() / batch;
    let mixed: Vec<f64> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(k, (r, f))| {
            let e = eps[k / per_sample];
            e * r + (1.0 - e) * f
        })
        .collect();
    let x_hat = Var::leaf(Tensor::new(real.shape().to_vec(), mixed));
    let out = critic(&x_hat).sum_all();
    let g = grad(&out, std::slice::from_ref(&x_hat), true).remove(0);
    flatten_samples(&g, batch)
        .row_norm()
        .add_scalar(-1.0)
        .square()
        .mean_all()
}

/// Optimizer state for training one [`ReconstructionModel`].
pub struct Trainer {
    pub model: ReconstructionModel,
    generator_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ReconstructionModel) -> Self {
        let generator_opt = Adam::new(&model.generator_params, model.config.optimizer);
        let critic_opt = Adam::new(&model.critic_params, model.config.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, 0x7A, 0));
        Self {
            model,
            generator_opt,
            critic_opt,
            rng,
        }
    }

    /// One pass over `inputs` in shuffled mini-batches.
    pub fn epoch(&mut self, inputs: &[ModelInput]) -> Result<EpochStats> {
        if inputs.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        for i in inputs {
            self.model.check_input(i)?;
        }
        let epoch = self.model.history.len() + 1;
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(self.model.config.batch_size) {
            let refs: Vec<&ModelInput> = chunk.iter().map(|&k| &inputs[k]).collect();
            let batch = Batch::from_inputs(&refs, self.model.shape)?;
            let b = self.step(&batch).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
                other => other,
            })?;
            sum.contextual += b.contextual;
            sum.latent += b.latent;
            sum.adversarial += b.adversarial;
            sum.generator += b.generator;
            sum.wasserstein += b.wasserstein;
            sum.penalty += b.penalty;
            sum.critic += b.critic;
            batches += 1;
        }
        let k = batches as f64;
        let stats = EpochStats {
            epoch,
            losses: LossBreakdown {
                contextual: sum.contextual / k,
                latent: sum.latent / k,
                adversarial: sum.adversarial / k,
                generator: sum.generator / k,
                wasserstein: sum.wasserstein / k,
                penalty: sum.penalty / k,
                critic: sum.critic / k,
            },
        };
        log::info!(
            "epoch {epoch}: L_G {:.5} (ctx {:.5}, lat {:.5}, adv {:.5}), L_D {:.5}",
            stats.losses.generator,
            stats.losses.contextual,
            stats.losses.latent,
            stats.losses.adversarial,
            stats.losses.critic
        );
        self.model.history.push(stats);
        Ok(stats)
    }

    /// Critic update(s) followed by one generator update on `batch`.
    fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let model = &mut self.model;
        let config = model.config.clone();
        let x = Var::constant(batch.target().clone());

        let mut critic_part = LossBreakdown::default();
        for _ in 0..config.critic_updates_per_gen {
            let fake = no_grad(|| {
                let gp = model.generator_params.constants();
                model.generator.forward(&gp, batch, &config).reconstruction
            });
            let cp = model.critic_params.leaves();
            let critic = &model.critic;
            let real_v = critic.forward(&cp, &x, batch.size, &config);
            let fake_v = critic.forward(&cp, &fake, batch.size, &config);
            let eps: Vec<f64> = (0..batch.size).map(|_| self.rng.gen::<f64>()).collect();
            let penalty = gradient_penalty(
                |v| critic.forward(&cp, v, batch.size, &config),
                batch.target(),
                fake.value(),
                &eps,
            );
            let wasserstein = real_v.mean_all().sub(&fake_v.mean_all());
            let loss = wasserstein.add(&penalty.scale(config.gp_coefficient));
            critic_part.wasserstein = wasserstein.value().item();
            critic_part.penalty = penalty.value().item();
            critic_part.critic = loss.value().item();
            check_finite(&critic_part)?;
            let grads = grad(&loss, &cp.0, false);
            self.critic_opt.step(&mut model.critic_params, &grads);
        }

        let gp = model.generator_params.leaves();
        let cc = model.critic_params.constants();
        let fwd = model.generator.forward(&gp, batch, &config);
        let z_prime = model
            .generator
            .second_latent(&gp, batch, &fwd.reconstruction, &config);
        let w = config.loss_weights;
        let contextual = mean_l2(&x, &fwd.reconstruction, batch.size);
        let latent = mean_l2(&fwd.latent, &z_prime, batch.size);
        let adversarial = model
            .critic
            .forward(&cc, &fwd.reconstruction, batch.size, &config)
            .mean_all();
        let loss = contextual
            .scale(w.contextual)
            .add(&latent.scale(w.latent))
            .add(&adversarial.scale(w.adversarial));
        let out = LossBreakdown {
            contextual: contextual.value().item(),
            latent: latent.value().item(),
            adversarial: adversarial.value().item(),
            generator: loss.value().item(),
            ..critic_part
        };
        check_finite(&out)?;
        let grads = grad(&loss, &gp.0, false);
        self.generator_opt.step(&mut model.generator_params, &grads);
        Ok(out)
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    inputs: &[ModelInput],
    config: NetworkConfig,
    shape: super::InputShape,
) -> Result<ReconstructionModel> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(ReconstructionModel::new(config, shape)?);
    for _ in 0..epochs {
        trainer.epoch(inputs)?;
    }
    Ok(trainer.model)
}

impl ReconstructionModel {
    /// Every loss term on `inputs` at the current parameters; `eps` holds
    /// one gradient-penalty interpolation weight per input.
    pub fn batch_losses(&self, inputs: &[&ModelInput], eps: &[f64]) -> Result<LossBreakdown> {
        if eps.len() != inputs.len() {
            return Err(invalid!("need one interpolation weight per input"));
        }
        let batch = Batch::from_inputs(inputs, self.shape)?;
        let gp = self.generator_params.constants();
        let cp = self.critic_params.constants();
        let x = Var::constant(batch.target().clone());
        let fwd = self.generator.forward(&gp, &batch, &self.config);
        let z_prime = self
            .generator
            .second_latent(&gp, &batch, &fwd.reconstruction, &self.config);
        let real = self.critic.forward(&cp, &x, batch.size, &self.config);
        let fake = self
            .critic
            .forward(&cp, &fwd.reconstruction, batch.size, &self.config);
        let penalty = gradient_penalty(
            |v| self.critic.forward(&cp, v, batch.size, &self.config),
            batch.target(),
            fwd.reconstruction.value(),
            eps,
        );
        let losses = compute_losses(
            &x,
            &fwd.reconstruction,
            &fwd.latent,
            &z_prime,
            &real,
            &fake,
            &penalty,
            &self.config,
        )?;
        Ok(losses.breakdown)
    }

    /// `contextual + latent` on `inputs` with generator parameters
    /// `params`, and its gradient when `with_grad` is set.
    pub fn reconstruction_objective(
        &self,
        params: &ParamStore,
        inputs: &[&ModelInput],
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<Tensor>>)> {
        let batch = Batch::from_inputs(inputs, self.shape)?;
        let p = if with_grad {
            params.leaves()
        } else {
            params.constants()
        };
        let x = Var::constant(batch.target().clone());
        let fwd = self.generator.forward(&p, &batch, &self.config);
        let z_prime = self
            .generator
            .second_latent(&p, &batch, &fwd.reconstruction, &self.config);
        let loss = mean_l2(&x, &fwd.reconstruction, batch.size)
            .add(&mean_l2(&fwd.latent, &z_prime, batch.size));
        let grads = with_grad.then(|| {
            grad(&loss, &p.0, false)
                .into_iter()
                .map(|g| g.value().clone())
                .collect()
        });
        Ok((loss.value().item(), grads))
    }
}
