//! Adversarial optimization: the loss pair, the alternating D/G update, the
//! epoch loop with checkpoints, and the resumable training state.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorCache, GeneratorConfig, Variant};
use crate::io;
use crate::nn::{sigmoid, Adam, AdamState, Mode, ParamStore, Real, StatUpdates, Tensor};
use crate::types::{PairedSample, Seed};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the logs.
pub const PROB_EPS: f64 = 1e-7;
pub const ADAM_EPS: f64 = 1e-8;

const GEN_STREAM: u64 = 1;
const DISC_STREAM: u64 = 2;
const SCHEDULE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenLossForm {
    /// `-mean log D(G(x))`.
    #[default]
    NonSaturating,
    /// `mean log(1 - D(G(x)))`, minimized.
    Minimax,
}

impl fmt::Display for GenLossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenLossForm::NonSaturating => "non_saturating",
            GenLossForm::Minimax => "minimax",
        })
    }
}

impl FromStr for GenLossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(GenLossForm::NonSaturating),
            "minimax" => Ok(GenLossForm::Minimax),
            other => Err(Error::Config(format!(
                "unknown gen_loss_form `{other}` (expected non_saturating or minimax)"
            ))),
        }
    }
}

/// Model size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Tiny,
    PaperScale,
}

impl Profile {
    pub fn generator(self, variant: Variant) -> GeneratorConfig {
        match self {
            Profile::Tiny => GeneratorConfig::tiny(variant),
            Profile::PaperScale => GeneratorConfig::paper_scale(variant),
        }
    }

    pub fn discriminator(self) -> DiscriminatorConfig {
        match self {
            Profile::Tiny => DiscriminatorConfig::tiny(),
            Profile::PaperScale => DiscriminatorConfig::paper_scale(),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Tiny => "tiny",
            Profile::PaperScale => "paper_scale",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "paper_scale" => Ok(Profile::PaperScale),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected tiny or paper_scale)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub gen_loss_form: GenLossForm,
    pub seed: Seed,
    pub profile: Profile,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs: 400,
            batch_size: 128,
            gen_loss_form: GenLossForm::NonSaturating,
            seed: Seed(0),
            profile: Profile::Tiny,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: ADAM_EPS,
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn unclamped(p: f64) -> bool {
    p > PROB_EPS && p < 1.0 - PROB_EPS
}

fn mean_of<T: Real>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    xs.iter()
        .map(|x| f(x.to_f64().unwrap_or(f64::NAN)))
        .sum::<f64>()
        / xs.len() as f64
}

/// `-mean log d_real - mean log(1 - d_fake)` on clamped probabilities.
pub fn disc_loss<T: Real>(d_real: &[T], d_fake: &[T]) -> Result<T> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let real = mean_of(d_real, |p| -clamp_prob(p).ln());
    let fake = mean_of(d_fake, |p| -(1.0 - clamp_prob(p)).ln());
    Ok(T::lit(real + fake))
}

pub fn gen_loss<T: Real>(d_fake: &[T], form: GenLossForm) -> Result<T> {
    if d_fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v = match form {
        GenLossForm::NonSaturating => mean_of(d_fake, |p| -clamp_prob(p).ln()),
        GenLossForm::Minimax => mean_of(d_fake, |p| (1.0 - clamp_prob(p)).ln()),
    };
    Ok(T::lit(v))
}

fn probabilities<T: Real>(logits: &[T]) -> Vec<T> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}

/// Discriminator loss on logits, with its gradient with respect to each
/// real and fake logit. Clamped entries contribute zero gradient.
pub fn disc_loss_from_logits<T: Real>(z_real: &[T], z_fake: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let (p_real, p_fake) = (probabilities(z_real), probabilities(z_fake));
    let loss = disc_loss(&p_real, &p_fake)?;
    let (nr, nf) = (p_real.len() as f64, p_fake.len() as f64);
    let g_real = p_real
        .iter()
        .map(|p| {
            let p = p.to_f64().unwrap_or(f64::NAN);
            T::lit(if unclamped(p) { -(1.0 - p) / nr } else { 0.0 })
        })
        .collect();
    let g_fake = p_fake
        .iter()
        .map(|p| {
            let p = p.to_f64().unwrap_or(f64::NAN);
            T::lit(if unclamped(p) { p / nf } else { 0.0 })
        })
        .collect();
    Ok((loss, g_real, g_fake))
}

/// Generator loss on fake logits, with its gradient per logit.
pub fn gen_loss_from_logits<T: Real>(z_fake: &[T], form: GenLossForm) -> Result<(T, Vec<T>)> {
    let p_fake = probabilities(z_fake);
    let loss = gen_loss(&p_fake, form)?;
    let n = p_fake.len() as f64;
    let grad = p_fake
        .iter()
        .map(|p| {
            let p = p.to_f64().unwrap_or(f64::NAN);
            T::lit(match (unclamped(p), form) {
                (false, _) => 0.0,
                (true, GenLossForm::NonSaturating) => -(1.0 - p) / n,
                (true, GenLossForm::Minimax) => -p / n,
            })
        })
        .collect();
    Ok((loss, grad))
}

/// Overhead and real ground tensors for one minibatch.
pub struct Batch<T> {
    pub overhead: Tensor<T>,
    pub ground: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let overheads: Vec<_> = samples.iter().map(|s| &s.overhead).collect();
        let grounds: Vec<_> = samples.iter().map(|s| &s.ground).collect();
        Ok(Self {
            overhead: Tensor::from_images(&overheads),
            ground: Tensor::from_images(&grounds),
        })
    }

    pub fn len(&self) -> usize {
        self.overhead.n
    }

    pub fn is_empty(&self) -> bool {
        self.overhead.n == 0
    }
}

/// A loss value, its parameter gradients, and the running-statistic updates
/// the forward passes produced.
pub struct Objective<T> {
    pub loss: T,
    pub grads: ParamStore<T>,
    pub updates: StatUpdates<T>,
}

fn logit_tensor<T: Real>(g: Vec<T>) -> Tensor<T> {
    let n = g.len();
    Tensor::from_vec(1, n, 1, 1, g)
}

/// Discriminator loss on real pairs against `fake` grounds conditioned on
/// the same overheads. Real and fake batches get separate batch statistics.
pub fn discriminator_objective<T: Real>(
    disc: &Discriminator<T>,
    overhead: &Tensor<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<Objective<T>> {
    let (z_real, cache_real, mut updates) = disc.forward(real, overhead, Mode::Train)?;
    let (z_fake, cache_fake, fake_updates) = disc.forward(fake, overhead, Mode::Train)?;
    updates.extend(fake_updates);
    let (loss, g_real, g_fake) = disc_loss_from_logits(&z_real.data, &z_fake.data)?;
    let mut grads = disc.params.zeros_like();
    disc.backward(&cache_real, logit_tensor(g_real), Some(&mut grads), false);
    disc.backward(&cache_fake, logit_tensor(g_fake), Some(&mut grads), false);
    Ok(Objective {
        loss,
        grads,
        updates,
    })
}

pub fn discriminator_loss_value<T: Real>(
    disc: &Discriminator<T>,
    overhead: &Tensor<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<T> {
    let (z_real, _, _) = disc.forward(real, overhead, Mode::Train)?;
    let (z_fake, _, _) = disc.forward(fake, overhead, Mode::Train)?;
    Ok(disc_loss_from_logits(&z_real.data, &z_fake.data)?.0)
}

/// Generator loss and gradients through a frozen discriminator, reusing a
/// generator forward pass already made.
fn generator_backprop<T: Real>(
    gen: &Generator<T>,
    cache: &GeneratorCache<T>,
    fake: &Tensor<T>,
    disc: &Discriminator<T>,
    overhead: &Tensor<T>,
    form: GenLossForm,
) -> Result<(T, ParamStore<T>)> {
    // The discriminator sees the fakes in train mode, matching its own
    // update, but its running statistics are left alone.
    let (z_fake, cache_fake, _) = disc.forward(fake, overhead, Mode::Train)?;
    let (loss, g) = gen_loss_from_logits(&z_fake.data, form)?;
    let d_fake = disc
        .backward(&cache_fake, logit_tensor(g), None, true)
        .expect("ground gradient requested");
    let mut grads = gen.params.zeros_like();
    gen.backward(cache, d_fake, &mut grads);
    Ok((loss, grads))
}

pub fn generator_objective<T: Real>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    overhead: &Tensor<T>,
    noise: Option<&Tensor<T>>,
    form: GenLossForm,
) -> Result<Objective<T>> {
    let (fake, cache, updates) = gen.forward(overhead, noise, Mode::Train)?;
    let (loss, grads) = generator_backprop(gen, &cache, &fake, disc, overhead, form)?;
    Ok(Objective {
        loss,
        grads,
        updates,
    })
}

pub fn generator_loss_value<T: Real>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    overhead: &Tensor<T>,
    noise: Option<&Tensor<T>>,
    form: GenLossForm,
) -> Result<T> {
    let (fake, _, _) = gen.forward(overhead, noise, Mode::Train)?;
    let (z_fake, _, _) = disc.forward(&fake, overhead, Mode::Train)?;
    Ok(gen_loss_from_logits(&z_fake.data, form)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub d_loss: f32,
    pub g_loss: f32,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_adam: AdamState<f32>,
    pub disc_adam: AdamState<f32>,
    pub step: u64,
    pub epoch: u64,
    /// Drives the per-epoch shuffle and any generator noise.
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh models and optimizer state derived from `config.seed`.
    pub fn new(
        config: TrainConfig,
        gen_config: GeneratorConfig,
        disc_config: DiscriminatorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(gen_config, config.seed.derive(GEN_STREAM))?;
        let discriminator = Discriminator::new(disc_config, config.seed.derive(DISC_STREAM))?;
        Ok(Self {
            gen_adam: AdamState::new(&generator.params),
            disc_adam: AdamState::new(&discriminator.params),
            generator,
            discriminator,
            step: 0,
            epoch: 0,
            rng: config.seed.derive(SCHEDULE_STREAM).rng(),
            history: Vec::new(),
            config,
        })
    }

    /// Models sized by `config.profile`.
    pub fn for_variant(config: TrainConfig, variant: Variant) -> Result<Self> {
        Self::new(
            config,
            config.profile.generator(variant),
            config.profile.discriminator(),
        )
    }

    fn check_batch(&self, batch: &[&PairedSample]) -> Result<Batch<f32>> {
        if batch.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "batch of {} samples; batch norm needs at least 2",
                batch.len()
            )));
        }
        Batch::from_samples(batch)
    }

    fn finite(&self, loss: f32) -> Result<f32> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFiniteLoss {
                step: self.step + 1,
                snapshot: PathBuf::new(),
            })
        }
    }

    fn update_discriminator(&mut self, b: &Batch<f32>, fake: &Tensor<f32>) -> Result<f32> {
        let obj = discriminator_objective(&self.discriminator, &b.overhead, &b.ground, fake)?;
        let loss = self.finite(obj.loss)?;
        self.config.adam().step(
            &mut self.discriminator.params,
            &obj.grads,
            &mut self.disc_adam,
        );
        self.discriminator.apply_stat_updates(obj.updates);
        Ok(loss)
    }

    /// Generator update; the discriminator is only borrowed immutably.
    fn update_generator(
        &mut self,
        b: &Batch<f32>,
        fake: &Tensor<f32>,
        cache: &GeneratorCache<f32>,
        updates: StatUpdates<f32>,
    ) -> Result<f32> {
        let (loss, grads) = generator_backprop(
            &self.generator,
            cache,
            fake,
            &self.discriminator,
            &b.overhead,
            self.config.gen_loss_form,
        )?;
        let loss = self.finite(loss)?;
        self.config
            .adam()
            .step(&mut self.generator.params, &grads, &mut self.gen_adam);
        self.generator.apply_stat_updates(updates);
        Ok(loss)
    }

    fn generate_fakes(
        &mut self,
        b: &Batch<f32>,
    ) -> Result<(Tensor<f32>, GeneratorCache<f32>, StatUpdates<f32>)> {
        let noise = self.generator.sample_noise(b.len(), &mut self.rng);
        self.generator
            .forward(&b.overhead, noise.as_ref(), Mode::Train)
    }

    /// One discriminator update, then one generator update against the
    /// updated discriminator. Appends both losses to the history.
    pub fn train_step(&mut self, batch: &[&PairedSample]) -> Result<LossRecord> {
        let b = self.check_batch(batch)?;
        let (fake, cache, g_updates) = self.generate_fakes(&b)?;
        let d_loss = self.update_discriminator(&b, &fake)?;
        let g_loss = self.update_generator(&b, &fake, &cache, g_updates)?;
        self.step += 1;
        let record = LossRecord {
            step: self.step,
            d_loss,
            g_loss,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Discriminator update alone; the generator (including its running
    /// statistics) is left untouched. Counters and history are not advanced.
    pub fn discriminator_step(&mut self, batch: &[&PairedSample]) -> Result<f32> {
        let b = self.check_batch(batch)?;
        let (fake, _, _) = self.generate_fakes(&b)?;
        self.update_discriminator(&b, &fake)
    }

    /// Generator update alone. Counters and history are not advanced.
    pub fn generator_step(&mut self, batch: &[&PairedSample]) -> Result<f32> {
        let b = self.check_batch(batch)?;
        let (fake, cache, updates) = self.generate_fakes(&b)?;
        self.update_generator(&b, &fake, &cache, updates)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.config.batch_size
    }
}

pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn persist(state: &TrainState, dir: &Path, done: bool) -> Result<()> {
    let mut result = io::save_checkpoint(state, &dir.join(epoch_checkpoint_name(state.epoch)));
    if result.is_ok() && done {
        result = io::save_checkpoint(state, &dir.join(FINAL_CHECKPOINT));
    }
    // The trace is written even when a checkpoint failed so the losses so
    // far survive the abort.
    let trace = io::write_loss_trace(&state.history, &dir.join(LOSS_TRACE_FILE));
    result.and(trace)
}

fn halt(state: &TrainState, dir: &Path, cause: &Error, progress: &mut dyn Write) -> Error {
    let step = state.step + 1;
    let snapshot = dir.join(format!("diagnostic_step{step:06}.ckpt"));
    let _ = writeln!(progress, "halting at step {step}: {cause}");
    if let Err(e) = io::save_checkpoint(state, &snapshot) {
        let _ = writeln!(progress, "diagnostic snapshot failed: {e}");
    }
    let _ = io::write_loss_trace(&state.history, &dir.join(LOSS_TRACE_FILE));
    Error::NonFiniteLoss { step, snapshot }
}

/// Runs epochs until `state.config.epochs` is reached. Each epoch reshuffles
/// the dataset with the state's RNG and takes `⌊n / batch_size⌋` steps. A
/// checkpoint and the loss trace are written every `checkpoint_every`
/// epochs and at completion; one progress line is printed per epoch.
pub fn train(
    mut state: TrainState,
    dataset: &[PairedSample],
    checkpoint_dir: &Path,
    progress: &mut dyn Write,
) -> Result<TrainState> {
    state.config.validate()?;
    let bs = state.config.batch_size;
    if dataset.len() < bs {
        return Err(Error::InvalidInput(format!(
            "dataset has {} samples, fewer than batch_size {bs}",
            dataset.len()
        )));
    }
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
    while state.epoch < state.config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut d_sum, mut g_sum, mut count) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks_exact(bs) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            match state.train_step(&batch) {
                Ok(r) => {
                    d_sum += r.d_loss as f64;
                    g_sum += r.g_loss as f64;
                    count += 1;
                }
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteActivation { .. })) => {
                    return Err(halt(&state, checkpoint_dir, &e, progress));
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch += 1;
        let _ = writeln!(
            progress,
            "epoch {} d_loss {:.6} g_loss {:.6}",
            state.epoch,
            d_sum / count as f64,
            g_sum / count as f64
        );
        let done = state.epoch == state.config.epochs;
        if done || state.epoch.is_multiple_of(state.config.checkpoint_every) {
            persist(&state, checkpoint_dir, done)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::make_dataset;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn disc_loss_at_one_half_is_two_ln_two() {
        let half = [0.5f64; 7];
        let v: f64 = disc_loss(&half, &half[..3]).unwrap();
        assert!(close(v, 2.0 * LN2, 1e-12));
        assert!(close(v, 1.386294, 1e-6));
    }

    #[test]
    fn disc_loss_perfect_discriminator_limit() {
        let v: f64 = disc_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((0.0..1e-6).contains(&v));
    }

    #[test]
    fn disc_loss_matches_scalar_oracle() {
        let v: f64 = disc_loss(&[0.8, 0.6], &[0.3, 0.1]).unwrap();
        let oracle = -0.5 * (0.8f64.ln() + 0.6f64.ln()) - 0.5 * (0.7f64.ln() + 0.9f64.ln());
        assert!(close(v, oracle, 1e-12));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn gen_loss_examples() {
        let half = [0.5f64; 4];
        let ns: f64 = gen_loss(&half, GenLossForm::NonSaturating).unwrap();
        let mm: f64 = gen_loss(&half, GenLossForm::Minimax).unwrap();
        assert!(close(ns, 0.693147, 1e-6));
        assert!(close(mm, -0.693147, 1e-6));
        let v: f64 = gen_loss(&[0.2, 0.9], GenLossForm::NonSaturating).unwrap();
        assert!(close(v, -0.5 * (0.2f64.ln() + 0.9f64.ln()), 1e-12));
        let sat: f64 = gen_loss(&[1.0], GenLossForm::NonSaturating).unwrap();
        assert!(sat < 1e-6);
    }

    #[test]
    fn empty_batches_are_rejected() {
        assert!(matches!(
            disc_loss::<f64>(&[], &[0.5]),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            disc_loss::<f64>(&[0.5], &[]),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            gen_loss::<f64>(&[], GenLossForm::Minimax),
            Err(Error::EmptyBatch)
        ));
    }

    proptest! {
        #[test]
        fn losses_are_finite_for_any_probability(
            real in proptest::collection::vec(0.0f64..=1.0, 1..8),
            fake in proptest::collection::vec(0.0f64..=1.0, 1..8),
        ) {
            prop_assert!(disc_loss(&real, &fake).unwrap().is_finite());
            prop_assert!(disc_loss::<f64>(&real, &fake).unwrap() >= 0.0);
            for form in [GenLossForm::NonSaturating, GenLossForm::Minimax] {
                prop_assert!(gen_loss(&fake, form).unwrap().is_finite());
            }
        }

        #[test]
        fn both_generator_forms_descend_the_same_way(p in 0.01f64..0.99) {
            let h = 1e-6;
            let slope = |form| {
                let up: f64 = gen_loss(&[p + h], form).unwrap();
                let down: f64 = gen_loss(&[p - h], form).unwrap();
                (up - down) / (2.0 * h)
            };
            let (ns, mm) = (slope(GenLossForm::NonSaturating), slope(GenLossForm::Minimax));
            prop_assert!(ns < 0.0 && mm < 0.0);
        }

        #[test]
        fn logit_gradients_match_finite_differences(
            zr in proptest::collection::vec(-6.0f64..6.0, 1..5),
            zf in proptest::collection::vec(-6.0f64..6.0, 1..5),
        ) {
            let h = 1e-6;
            let (_, gr, gf) = disc_loss_from_logits(&zr, &zf).unwrap();
            for i in 0..zr.len() {
                let (mut up, mut down) = (zr.clone(), zr.clone());
                up[i] += h;
                down[i] -= h;
                let fd = (disc_loss_from_logits(&up, &zf).unwrap().0
                    - disc_loss_from_logits(&down, &zf).unwrap().0) / (2.0 * h);
                prop_assert!((fd - gr[i]).abs() < 1e-6);
            }
            for i in 0..zf.len() {
                let (mut up, mut down) = (zf.clone(), zf.clone());
                up[i] += h;
                down[i] -= h;
                let fd = (disc_loss_from_logits(&zr, &up).unwrap().0
                    - disc_loss_from_logits(&zr, &down).unwrap().0) / (2.0 * h);
                prop_assert!((fd - gf[i]).abs() < 1e-6);
            }
            for form in [GenLossForm::NonSaturating, GenLossForm::Minimax] {
                let (_, g) = gen_loss_from_logits(&zf, form).unwrap();
                for i in 0..zf.len() {
                    let (mut up, mut down) = (zf.clone(), zf.clone());
                    up[i] += h;
                    down[i] -= h;
                    let fd = (gen_loss_from_logits(&up, form).unwrap().0
                        - gen_loss_from_logits(&down, form).unwrap().0) / (2.0 * h);
                    prop_assert!((fd - g[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn clamped_logits_get_zero_gradient() {
        let (_, gr, gf) = disc_loss_from_logits(&[40.0f64], &[-40.0]).unwrap();
        assert_eq!(gr, vec![0.0]);
        assert_eq!(gf, vec![0.0]);
    }

    /// Small models so unit tests stay fast.
    fn small_state(config: TrainConfig) -> TrainState {
        let gen = GeneratorConfig {
            base_width: 2,
            ..GeneratorConfig::tiny(Variant::Concat)
        };
        let disc = DiscriminatorConfig {
            base_width: 2,
            feature_dim: 32,
            ..DiscriminatorConfig::tiny()
        };
        TrainState::new(config, gen, disc).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: Seed(5),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_beta1: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "profile": "tiny"}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.batch_size, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn train_step_is_deterministic() {
        let data = make_dataset(Seed(1), 4, 0.5).unwrap();
        let batch: Vec<&PairedSample> = data.iter().collect();
        let mut a = small_state(small_config());
        let mut b = a.clone();
        let ra = a.train_step(&batch).unwrap();
        let rb = b.train_step(&batch).unwrap();
        assert_eq!(ra, rb);
        assert!(a == b);
        assert_eq!(a.step, 1);
        assert_eq!(a.history.len(), 1);
    }

    #[test]
    fn train_step_rejects_single_sample_batch() {
        let data = make_dataset(Seed(1), 2, 0.5).unwrap();
        let mut s = small_state(small_config());
        assert!(s.train_step(&[&data[0]]).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn generator_update_leaves_discriminator_frozen() {
        let data = make_dataset(Seed(2), 4, 0.5).unwrap();
        let batch: Vec<&PairedSample> = data.iter().collect();
        let mut s = small_state(small_config());
        let before = s.discriminator.clone();
        let gen_before = s.generator.params.clone();
        s.generator_step(&batch).unwrap();
        assert!(s.discriminator == before);
        assert!(s.generator.params != gen_before);
    }

    #[test]
    fn discriminator_learns_against_frozen_generator() {
        let data = make_dataset(Seed(3), 8, 0.5).unwrap();
        let batch: Vec<&PairedSample> = data.iter().collect();
        let mut s = small_state(TrainConfig {
            batch_size: 8,
            ..small_config()
        });
        let gen_before = s.generator.clone();
        let first = s.discriminator_step(&batch).unwrap();
        let mut best = first;
        for _ in 0..49 {
            best = best.min(s.discriminator_step(&batch).unwrap());
        }
        assert!(best < first, "initial {first}, best {best}");
        assert!(s.generator == gen_before);
    }

    #[test]
    fn one_epoch_takes_floor_n_over_batch_steps() {
        let data = make_dataset(Seed(4), 10, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut out = Vec::new();
        let s = train(small_state(small_config()), &data, dir.path(), &mut out).unwrap();
        assert_eq!(s.step, 2);
        assert_eq!(s.epoch, 1);
        let text = String::from_utf8(out).unwrap();
        let line = text.lines().next().unwrap();
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields[0], "epoch");
        assert_eq!(fields[1], "1");
        assert_eq!(fields[2], "d_loss");
        assert_eq!(fields[3].split('.').nth(1).unwrap().len(), 6);
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
        assert!(dir.path().join(LOSS_TRACE_FILE).exists());
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let data = make_dataset(Seed(4), 3, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = train(
            small_state(small_config()),
            &data,
            dir.path(),
            &mut Vec::new(),
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
