//! End-to-end training of the sensing network with SGD and momentum.

pub mod checkpoint;
mod dataset;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

pub use checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint};
pub use dataset::{data_rng, load_dataset, CropStream, Dataset, DATA_STREAM};

use crate::csmodel::{build_model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{ExtractorSource, Loss, LossSpec};
use crate::tensorcore::{Graph, Tensor};

pub const LOSS_LOG: &str = "loss.log";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub loss: LossSpec,
    pub model: ModelConfig,
    pub dataset_dir: PathBuf,
    pub crop_size: usize,
    pub checkpoint_every: u64,
}

/// Named hyperparameter sets. The `paper-*` presets carry the
/// full-scale schedule (learning rate 1e-8 for the conv2_2 block tap and
/// 1e-9 for conv3_4, batch 5, 10^6 iterations, 256px crops).
pub const PRESETS: [&str; 4] = ["paper-mr1-vgg22", "paper-mr1-vgg34", "paper-mr4-vgg22", "paper-mr4-vgg34"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (rate, tap, lr) = match name {
            "paper-mr1-vgg22" => (0.01, "pool2", 1e-8),
            "paper-mr1-vgg34" => (0.01, "pool3", 1e-9),
            "paper-mr4-vgg22" => (0.04, "pool2", 1e-8),
            "paper-mr4-vgg34" => (0.04, "pool3", 1e-9),
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(TrainConfig {
            learning_rate: lr,
            momentum: 0.9,
            batch_size: 5,
            iterations: 1_000_000,
            seed: 0,
            loss: LossSpec::Perceptual {
                tap: tap.into(),
                extractor: ExtractorSource::File("vgg19.pcsw".into()),
            },
            model: ModelConfig::for_rate(rate, 16),
            dataset_dir: "data/train".into(),
            crop_size: 256,
            checkpoint_every: 10_000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint interval must be >= 1"));
        }
        let s = self.model.measurement_stride;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(s) {
            return Err(Error::config(format!(
                "crop size {} is not a multiple of the measurement stride {s}",
                self.crop_size
            )));
        }
        Ok(())
    }

    fn check_pool_factor(&self, factor: usize) -> Result<()> {
        if !self.crop_size.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "crop size {} is not a multiple of the feature tap's pooling factor {factor}",
                self.crop_size
            )));
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    /// Momentum buffers, parallel to `params.tensors()`.
    pub velocity: Vec<Tensor<f32>>,
    pub iteration: u64,
    /// Word position of the crop sampler's ChaCha stream.
    pub rng_position: u128,
    /// Exponential moving average of the loss (factor 0.99).
    pub running_loss: f64,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>) -> Self {
        let velocity = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()).expect("valid shape"))
            .collect();
        TrainState {
            params,
            velocity,
            iteration: 0,
            rng_position: 0,
            running_loss: 0.0,
        }
    }
}

/// Step hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
}

/// One forward/backward pass over `batch` followed by
/// `v <- momentum * v - lr * grad; w <- w + v`. Returns the loss before the
/// update. A non-finite loss or gradient aborts with
/// [`Error::Divergence`] and leaves `state` untouched.
pub fn train_step(state: &mut TrainState, batch: &Tensor<f32>, loss: &Loss<f32>, sgd: Sgd) -> Result<f64> {
    let mut g = Graph::new();
    let model = state.params.bind(&mut g, true);
    let x = g.input(batch.clone());
    let y = model.measure(&mut g, x)?;
    let r = model.recover(&mut g, y)?;
    let l = loss.apply(&mut g, r, batch)?;
    let value = g.value(l).data()[0] as f64;
    let diverged = || Error::Divergence {
        iteration: state.iteration,
        loss: value,
    };
    if !value.is_finite() {
        return Err(diverged());
    }
    g.backward(l)?;
    let grads: Vec<&[f32]> = model
        .vars()
        .iter()
        .map(|&v| g.grad(v).expect("every parameter reaches the loss"))
        .collect();
    if grads.iter().any(|gr| gr.iter().any(|v| !v.is_finite())) {
        return Err(diverged());
    }
    let lr = sgd.learning_rate as f32;
    let mu = sgd.momentum as f32;
    for ((w, v), gr) in state
        .params
        .tensors_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grads)
    {
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(gr) {
            *vi = mu * *vi - lr * gi;
            if *vi != 0.0 {
                *wi += *vi;
            }
        }
    }
    state.running_loss = if state.iteration == 0 {
        value
    } else {
        0.99 * state.running_loss + 0.01 * value
    };
    state.iteration += 1;
    Ok(value)
}

/// Progress callback payload, emitted at every checkpoint interval.
#[derive(Clone, Debug)]
pub struct Progress {
    pub iteration: u64,
    pub mean_loss: f64,
    pub wallclock_ms: u128,
}

/// Training job: configuration, data, loss and mutable state.
pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    loss: Loss<f32>,
    state: TrainState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh job with parameters initialised from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::load(&config.dataset_dir, config.crop_size)?;
        let params = build_model(&config.model, config.seed)?;
        Self::with_parts(config, dataset, TrainState::new(params))
    }

    /// Job that continues from a checkpoint.
    pub fn resume(config: TrainConfig, checkpoint: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::load(&config.dataset_dir, config.crop_size)?;
        let state = load_checkpoint(checkpoint, &config.model)?;
        Self::with_parts(config, dataset, state)
    }

    /// Job over an in-memory dataset (`config.dataset_dir` is ignored).
    pub fn with_parts(config: TrainConfig, dataset: Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        if dataset.crop_size() != config.crop_size {
            return Err(Error::config("dataset crop size differs from the configuration"));
        }
        let loss = Loss::from_spec(&config.loss)?;
        config.check_pool_factor(loss.pool_factor()?)?;
        let mut rng = data_rng(config.seed);
        rng.set_word_pos(state.rng_position);
        Ok(Trainer {
            config,
            dataset,
            loss,
            state,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn loss(&self) -> &Loss<f32> {
        &self.loss
    }

    fn sgd(&self) -> Sgd {
        Sgd {
            learning_rate: self.config.learning_rate,
            momentum: self.config.momentum,
        }
    }

    /// Samples a batch and takes one step.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.dataset.sample_batch(self.config.batch_size, &mut self.rng);
        let sgd = self.sgd();
        let value = train_step(&mut self.state, &batch, &self.loss, sgd)?;
        self.state.rng_position = self.rng.get_word_pos();
        Ok(value)
    }

    /// Runs until `config.iterations`. With `out_dir`, a checkpoint and a
    /// loss-log line are written every `checkpoint_every` iterations and
    /// after the last one.
    pub fn run(&mut self, out_dir: Option<&Path>, mut progress: impl FnMut(&Progress)) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::Io(e).in_file(dir))?;
        }
        let start = Instant::now();
        let mut interval_sum = 0.0;
        let mut interval_count = 0u64;
        let mut saved_at = None;
        while self.state.iteration < self.config.iterations {
            interval_sum += self.step()?;
            interval_count += 1;
            if self.state.iteration.is_multiple_of(self.config.checkpoint_every) {
                self.emit(out_dir, interval_sum / interval_count as f64, start, &mut progress)?;
                saved_at = Some(self.state.iteration);
                interval_sum = 0.0;
                interval_count = 0;
            }
        }
        if saved_at != Some(self.state.iteration) {
            if interval_count > 0 {
                self.emit(out_dir, interval_sum / interval_count as f64, start, &mut progress)?;
            } else if let Some(dir) = out_dir {
                save_checkpoint(&self.state, dir.join(checkpoint::checkpoint_name(self.state.iteration)))?;
            }
        }
        Ok(())
    }

    fn emit(
        &self,
        out_dir: Option<&Path>,
        mean_loss: f64,
        start: Instant,
        progress: &mut impl FnMut(&Progress),
    ) -> Result<()> {
        let p = Progress {
            iteration: self.state.iteration,
            mean_loss,
            wallclock_ms: start.elapsed().as_millis(),
        };
        if let Some(dir) = out_dir {
            save_checkpoint(&self.state, dir.join(checkpoint::checkpoint_name(p.iteration)))?;
            let log_path = dir.join(LOSS_LOG);
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::Io(e).in_file(&log_path))?;
            writeln!(log, "{}\t{}\t{}", p.iteration, p.mean_loss, p.wallclock_ms)
                .map_err(|e| Error::Io(e).in_file(&log_path))?;
        }
        progress(&p);
        Ok(())
    }
}

/// Trains from scratch according to `config`, writing checkpoints and the
/// loss log into `out_dir`.
pub fn train(config: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainState> {
    let mut t = Trainer::new(config.clone())?;
    t.run(Some(out_dir.as_ref()), |_| {})?;
    Ok(t.into_state())
}
