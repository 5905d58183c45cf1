//! SGD with poly learning-rate decay over random crops.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{image_to_tensor, Sample};
use crate::error::{Error, Result};
use crate::head::{self, reflect_index};
use crate::metrics::{ConfusionMatrix, LabelMap};
use crate::model::{InferOptions, Model};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random crops drawn from each image per epoch; by default as many as
    /// crop-sized tiles are needed to cover the image.
    pub crops_per_image: Option<usize>,
    /// Side of the square training crop; must equal the model input size.
    pub crop_size: usize,
    /// Random horizontal flips.
    pub flip: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            power: 0.9,
            weight_decay: 0.0,
            momentum: 0.0,
            epochs: 100,
            batch_size: 8,
            crops_per_image: None,
            crop_size: 32,
            flip: true,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base learning rate {} must be positive", self.base_lr));
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return fail(format!("poly power {} must be non-negative", self.power));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 {
            return fail("at least one epoch is required".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.crops_per_image == Some(0) {
            return fail("crops per image must be positive".into());
        }
        if self.crop_size == 0 {
            return fail("crop size must be positive".into());
        }
        Ok(())
    }
}

/// `base_lr · (1 − epoch/total)^power`, with `epoch` counted from 0.
pub fn poly_lr(epoch: usize, total: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::config(format!("epoch {epoch} outside 0..={total}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / total as f64).powf(power))
}

fn check_grads<T: Scalar>(params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    Ok(())
}

/// `p ← p − lr·(g + weight_decay·p)`
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, weight_decay: f64) -> Result<()> {
    check_grads(params, grads)?;
    let (lr, wd) = (T::lit(lr), T::lit(weight_decay));
    for (p, g) in params.tensors_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * (gv + wd * *pv);
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Empty without momentum.
    pub velocity: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = if momentum > 0.0 {
            params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
        } else {
            Vec::new()
        };
        Self { momentum, weight_decay, velocity, steps: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            sgd_step(params, grads, lr, self.weight_decay)?;
        } else {
            check_grads(params, grads)?;
            let (lr, wd, mu) = (T::lit(lr), T::lit(self.weight_decay), T::lit(self.momentum));
            for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = mu * *vv + gv + wd * *pv;
                    *pv -= lr * *vv;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over every crop of the epoch.
    pub loss: f64,
}

/// A sample converted to the training precision.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub image: Tensor<T>,
    pub labels: LabelMap,
}

pub fn prepare<T: Scalar>(samples: &[Sample]) -> Vec<Prepared<T>> {
    samples
        .iter()
        .map(|s| Prepared { image: image_to_tensor(&s.image), labels: s.labels.clone() })
        .collect()
}

/// Reflection-pads to at least `size` and cuts the `size×size` window at
/// `(y0, x0)`, optionally mirrored.
pub fn crop_sample<T: Scalar>(s: &Prepared<T>, size: usize, y0: usize, x0: usize, flip: bool) -> Result<(Tensor<T>, LabelMap)> {
    let (h, w) = (s.labels.height.max(size), s.labels.width.max(size));
    let image = head::pad_reflect(&s.image, h, w)?;
    let image = head::crop(&image, y0, x0, size, size)?;
    let labels = LabelMap {
        height: size,
        width: size,
        data: (y0..y0 + size)
            .flat_map(|y| (x0..x0 + size).map(move |x| (y, x)))
            .map(|(y, x)| s.labels.get(reflect_index(y, s.labels.height), reflect_index(x, s.labels.width)))
            .collect(),
    };
    if flip {
        Ok((head::flip_horizontal(&image)?, labels.flip_horizontal()))
    } else {
        Ok((image, labels))
    }
}

/// Model, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub optimizer: Sgd<T>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.crop_size != model.config.encoder.image_size {
            return Err(Error::config(format!(
                "crop size {} differs from the model input size {}",
                config.crop_size, model.config.encoder.image_size
            )));
        }
        let optimizer = Sgd::new(&model.params, config.momentum, config.weight_decay);
        Ok(Self { model, config, optimizer, epoch: 0 })
    }

    /// Generator for the shuffle and crops of one epoch.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    fn crops_for(&self, s: &Prepared<T>) -> usize {
        let size = self.config.crop_size;
        self.config
            .crops_per_image
            .unwrap_or_else(|| s.labels.height.div_ceil(size) * s.labels.width.div_ceil(size))
    }

    pub fn run_epoch(&mut self, data: &[Prepared<T>]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let epoch = self.epoch;
        let cfg = &self.config;
        let lr = poly_lr(epoch, cfg.epochs, cfg.base_lr, cfg.power)?;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = data.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, self.crops_for(s))).collect();
        order.shuffle(&mut rng);
        let size = cfg.crop_size;
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let crops = batch
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    let y0 = rng.random_range(0..=s.labels.height.max(size) - size);
                    let x0 = rng.random_range(0..=s.labels.width.max(size) - size);
                    let flip = cfg.flip && rng.random_bool(0.5);
                    crop_sample(s, size, y0, x0, flip)
                })
                .collect::<Result<Vec<_>>>()?;
            let results = crops
                .par_iter()
                .map(|(image, labels)| self.model.loss_and_grads(image, labels))
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Option<Vec<Tensor<T>>> = None;
            for (loss, g) in results {
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss is {loss} at epoch {epoch}, batch {b}")));
                }
                total += loss.as_f64();
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = T::one() / T::from_count(batch.len());
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            self.optimizer.step(&mut self.model.params, &grads, lr)?;
        }
        self.epoch += 1;
        Ok(EpochLog { epoch, lr, loss: total / order.len() as f64 })
    }

    /// Trains until `end` epochs are complete (at most the configured total).
    pub fn train_until(&mut self, data: &[Prepared<T>], end: usize) -> Result<Vec<EpochLog>> {
        let end = end.min(self.config.epochs);
        let mut log = Vec::with_capacity(end.saturating_sub(self.epoch));
        while self.epoch < end {
            log.push(self.run_epoch(data)?);
        }
        Ok(log)
    }

    pub fn train(&mut self, data: &[Prepared<T>]) -> Result<Vec<EpochLog>> {
        self.train_until(data, self.config.epochs)
    }
}

/// Confusion matrix of tiled inference over a labeled set.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[Sample], opts: &InferOptions) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.encoder.num_classes);
    for s in data {
        let pred = model.infer(&image_to_tensor(&s.image), opts)?;
        cm.accumulate(&pred.class_map, &s.labels)?;
    }
    Ok(cm)
}
