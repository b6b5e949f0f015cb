//! Zero-shot training loop.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::enhance::{enhance_on, EnhanceSpec};
use crate::error::{Error, Result};
use crate::imaging::{load_image, resize, to_unit};
use crate::losses::{composite_loss, ExposureTarget, LossBreakdown, LossPlugins, LossWeights};
use crate::network::forward;
use crate::optim::{adam_step, clip_global_norm, AdamConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub grad_clip_norm: Scalar,
    pub epochs: usize,
    /// When set, training runs exactly this many steps, cycling through
    /// epochs as needed, and `epochs` is ignored.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Side length every training image is resized to.
    pub image_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub exposure: ExposureTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            grad_clip_norm: 0.1,
            epochs: 1,
            max_steps: None,
            batch_size: 1,
            image_size: 512,
            seed: 0,
            weights: LossWeights::default(),
            exposure: ExposureTarget::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.weights.validate()?;
        self.exposure.validate()?;
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "grad clip norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.image_size < self.exposure.patch.max(12) {
            return Err(Error::InvalidArgument(format!(
                "image size {} is below the exposure patch or spatial-consistency minimum",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Telemetry for one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Global step number, starting at 1.
    pub step: u64,
    pub epoch: u64,
    /// Batch-averaged loss terms before the update.
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: Scalar,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,total,tv,spa,color,exposure,seg,nr,grad_norm";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, l.total, l.tv, l.spa, l.color, l.exposure, l.seg, l.nr, self.grad_norm
        )
    }
}

/// Decodes and resizes every path, skipping files that fail with a warning.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P], image_size: usize) -> Result<Vec<Tensor>> {
    if paths.is_empty() {
        return Err(Error::EmptyCorpus("no images found".into()));
    }
    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        match load_image(path).and_then(|img| resize(&to_unit(&img), image_size, image_size)) {
            Ok(t) => images.push(t),
            Err(e) => warn!("skipping {}: {e}", path.as_ref().display()),
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyCorpus(format!("none of {} images could be decoded", paths.len())));
    }
    Ok(images)
}

/// Batch order for one epoch; depends only on the seed, the epoch and the corpus size.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch));
    order.shuffle(&mut rng);
    order
}

/// One forward/backward/update step on a batch. Returns the telemetry.
pub fn train_step(
    state: &mut Checkpoint,
    batch: &[&Tensor],
    config: &TrainConfig,
    plugins: LossPlugins<'_>,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus("empty batch".into()));
    }
    let spec = EnhanceSpec::new(state.net.config().iterations);
    let mut tape = Tape::new();
    let bound = state.net.bind(&mut tape);
    let mut totals = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    for image in batch {
        let x = tape.constant((*image).clone());
        let a = forward(&mut tape, &bound, &x)?;
        let enhanced = enhance_on(&mut tape, x, a, &spec)?;
        let loss = composite_loss(&mut tape, x, enhanced, a, &config.weights, &config.exposure, plugins)?;
        totals.push(loss.total);
        parts.push(loss.breakdown);
    }
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / batch.len() as Scalar)?;
    tape.backward(total)?;

    let names = bound.named();
    let mut grads: Vec<Tensor> = names
        .iter()
        .map(|(_, v)| tape.grad(**v).unwrap_or_else(|| Tensor::zeros(tape.shape(**v))))
        .collect();
    for ((name, _), g) in names.iter().zip(&grads) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip_norm)?;
    let mut params = state.net.params_mut().named_mut();
    adam_step(&mut params, &grads, &mut state.optimizer, &config.adam)?;

    let mut loss = LossBreakdown::average(&parts);
    loss.total = tape.value(total).item()?;
    Ok(StepRecord {
        step: state.optimizer.step,
        epoch: state.epoch,
        loss,
        grad_norm,
    })
}

/// Trains `state` on an in-memory corpus of `3×S×S` unit tensors.
///
/// Resuming from a checkpoint continues its step and epoch counters. The
/// optional `on_step` callback sees every record as it is produced.
pub fn train(
    state: &mut Checkpoint,
    corpus: &[Tensor],
    config: &TrainConfig,
    plugins: LossPlugins<'_>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("training corpus is empty".into()));
    }
    let mut history = Vec::new();
    let mut epochs_done = 0;
    loop {
        let steps_left = config.max_steps.map(|m| m - history.len());
        if steps_left == Some(0) || (config.max_steps.is_none() && epochs_done == config.epochs) {
            break;
        }
        let order = epoch_order(config.seed, state.epoch, corpus.len());
        let mut completed = true;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| history.len() == m) {
                completed = false;
                break;
            }
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &corpus[i]).collect();
            let record = train_step(state, &batch, config, plugins)?;
            debug!("step {} {}", record.step, record.loss);
            on_step(&record);
            history.push(record);
        }
        if completed {
            state.epoch += 1;
            epochs_done += 1;
        }
    }
    Ok(history)
}

/// Trailing moving average of the total loss with window `w` ending at `step`
/// (1-based index into `history`).
pub fn moving_average(history: &[StepRecord], step: usize, w: usize) -> Option<Scalar> {
    if step == 0 || step > history.len() || w == 0 || w > step {
        return None;
    }
    let window = &history[step - w..step];
    Some(window.iter().map(|r| r.loss.total).sum::<Scalar>() / w as Scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{CurveNet, CurveNetConfig};

    fn small_state(seed: u64) -> Checkpoint {
        let net = CurveNet::build(CurveNetConfig {
            seed,
            ..CurveNetConfig::with_width(4)
        })
        .unwrap();
        Checkpoint::fresh(net, seed)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            max_steps: Some(3),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let a = epoch_order(3, 1, 10);
        assert_eq!(a, epoch_order(3, 1, 10));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut state = small_state(0);
        let err = train(&mut state, &[], &small_config(), LossPlugins::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus(_)));
        assert!(matches!(load_corpus::<&str>(&[], 16), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn same_seed_same_history() {
        let corpus = vec![Tensor::full(&[3, 16, 16], 0.2), Tensor::full(&[3, 16, 16], 0.4)];
        let run = || {
            let mut state = small_state(1);
            let cfg = TrainConfig {
                batch_size: 1,
                ..small_config()
            };
            train(&mut state, &corpus, &cfg, LossPlugins::default(), |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(a[2].epoch, 1);
    }

    #[test]
    fn epochs_without_step_cap() {
        let corpus = vec![Tensor::full(&[3, 16, 16], 0.3); 3];
        let mut state = small_state(2);
        let cfg = TrainConfig {
            max_steps: None,
            epochs: 2,
            batch_size: 2,
            ..small_config()
        };
        let history = train(&mut state, &corpus, &cfg, LossPlugins::default(), |_| {}).unwrap();
        assert_eq!(history.len(), 4);
        assert_eq!(state.epoch, 2);
    }

    #[test]
    fn clipping_is_reported_pre_clip() {
        let corpus = vec![Tensor::full(&[3, 16, 16], 0.05)];
        let mut state = small_state(3);
        let history = train(&mut state, &corpus, &small_config(), LossPlugins::default(), |_| {}).unwrap();
        assert!(history.iter().all(|r| r.grad_norm.is_finite() && r.loss.total.is_finite()));
    }

    #[test]
    fn moving_average_window() {
        let mut rec = StepRecord {
            step: 0,
            epoch: 0,
            loss: LossBreakdown::default(),
            grad_norm: 0.0,
        };
        let history: Vec<StepRecord> = (1..=4)
            .map(|i| {
                rec.step = i;
                rec.loss.total = i as Scalar;
                rec
            })
            .collect();
        assert_eq!(moving_average(&history, 4, 2), Some(3.5));
        assert_eq!(moving_average(&history, 1, 2), None);
    }
}
