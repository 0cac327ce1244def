//! SGD with momentum, crop/mirror augmentation and the epoch loop.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::graph::{Gradients, NetworkGraph};
use crate::layers::softmax_xent;
use crate::tensor::{argmax, ShapeDisplay, Tensor};

/// Samples per gradient work item. Fixed so the summation order, and
/// therefore every bit of the result, does not depend on the thread count.
pub const GRAD_CHUNK: usize = 8;

/// Source extent for a crop to `target`, keeping the 256 -> 227 ratio.
pub fn scaled_source(target: usize) -> usize {
    (target as f64 * 256.0 / 227.0).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_root: bool,
    /// Random crop plus mirror during training. Evaluation always uses the
    /// center crop.
    pub augment: bool,
    /// Expected image extent `(h, w)` before cropping. `None` accepts
    /// whatever the data has, as long as it covers the network input.
    pub crop_source: Option<(usize, usize)>,
    /// Multiply the learning rate by 0.1 every this many epochs.
    pub lr_decay_every: Option<usize>,
    /// Stop after the first epoch whose training accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Worker threads for the gradient fan-out; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            freeze_root: false,
            augment: true,
            crop_source: None,
            lr_decay_every: None,
            target_accuracy: None,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed as a no-op run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.lr_decay_every == Some(0) {
            return Err(Error::config("lr decay period must be at least 1 epoch"));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(format!("target accuracy {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            Some(s) => self.lr * 0.1f64.powi((epoch / s) as i32),
            None => self.lr,
        }
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// `v = momentum * v - lr * g; p = p + v` for every trainable parameter.
/// `grads` must name exactly the trainable parameters.
pub fn sgd_step(
    net: &mut NetworkGraph,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = net.param(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })?;
        if p.frozen {
            return Err(Error::Mismatch(format!("gradient given for frozen parameter {name}")));
        }
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "{name} is {} but its gradient is {}",
                ShapeDisplay(p.value.shape()),
                ShapeDisplay(g.shape())
            )));
        }
    }
    if let Some(missing) = net.trainable().find(|p| !grads.contains(&p.name)) {
        return Err(Error::Mismatch(format!("no gradient for {}", missing.name)));
    }
    for (name, g) in grads.iter() {
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = net.param_mut(name).expect("checked above");
        for ((v, &g), p) in v
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(p.value.data_mut())
        {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
    }
    Ok(())
}

/// One augmentation draw: crop offset and whether to mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropDraw {
    pub dy: usize,
    pub dx: usize,
    pub mirror: bool,
}

fn check_crop(source: (usize, usize), target: (usize, usize)) -> Result<()> {
    if target.0 > source.0 || target.1 > source.1 {
        return Err(Error::shape(format!(
            "crop target {}x{} is larger than the {}x{} image",
            target.0, target.1, source.0, source.1
        )));
    }
    Ok(())
}

impl CropDraw {
    /// Uniform offset in both axes, then a fair coin for the mirror.
    pub fn draw(
        source: (usize, usize),
        target: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_crop(source, target)?;
        let dy = rng.random_range(0..=source.0 - target.0);
        let dx = rng.random_range(0..=source.1 - target.1);
        Ok(CropDraw {
            dy,
            dx,
            mirror: rng.random_bool(0.5),
        })
    }

    pub fn center(source: (usize, usize), target: (usize, usize)) -> Result<Self> {
        check_crop(source, target)?;
        Ok(CropDraw {
            dy: (source.0 - target.0) / 2,
            dx: (source.1 - target.1) / 2,
            mirror: false,
        })
    }

    /// Crops an `H x W x C` image to `target`, then mirrors if drawn.
    pub fn apply(&self, image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        let (h, w, c) = image_dims(image)?;
        check_crop((h, w), target)?;
        if self.dy + target.0 > h || self.dx + target.1 > w {
            return Err(Error::shape(format!(
                "crop at ({}, {}) of size {}x{} leaves the {h}x{w} image",
                self.dy, self.dx, target.0, target.1
            )));
        }
        let src = image.data();
        let mut out = Vec::with_capacity(target.0 * target.1 * c);
        for y in 0..target.0 {
            for x in 0..target.1 {
                let sx = if self.mirror { target.1 - 1 - x } else { x };
                let at = ((self.dy + y) * w + self.dx + sx) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
        Tensor::new(&[target.0, target.1, c], out)
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape(format!(
            "expected an HxWxC image, got {}",
            ShapeDisplay(s)
        ))),
    }
}

/// Training-time augmentation: random crop to `target`, mirror with
/// probability 1/2.
pub fn augment(image: &Tensor, target: (usize, usize), rng: &mut impl Rng) -> Result<Tensor> {
    let (h, w, _) = image_dims(image)?;
    CropDraw::draw((h, w), target, rng)?.apply(image, target)
}

/// Evaluation-time view: deterministic center crop, no mirror.
pub fn center_crop(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, _) = image_dims(image)?;
    CropDraw::center((h, w), target)?.apply(image, target)
}

pub fn mirror(image: &Tensor) -> Result<Tensor> {
    let (h, w, _) = image_dims(image)?;
    CropDraw {
        dy: 0,
        dx: 0,
        mirror: true,
    }
    .apply(image, (h, w))
}

/// Center-cropped batch of `samples[idx]` at the network input size.
pub fn eval_batch(net: &NetworkGraph, samples: &[&LabeledSample]) -> Result<Tensor> {
    let cfg = net.config();
    let target = (cfg.input_height, cfg.input_width);
    let views = samples
        .iter()
        .map(|s| center_crop(&s.image, target))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training samples classified correctly during the epoch,
    /// measured on the inputs actually fed to the network.
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_loss,train_acc";

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
        for e in &self.epochs {
            writeln!(f, "{},{},{}", e.epoch, e.mean_loss, e.train_acc)?;
        }
        Ok(())
    }
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// Trailing moving average of the loss over `window` epochs (shorter at
    /// the start).
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.epochs.iter().map(|e| e.mean_loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                let w = &losses[lo..=i];
                w.iter().sum::<f64>() / w.len() as f64
            })
            .collect()
    }
}

/// Sum of per-sample losses, correct count and the gradient of the sum
/// scaled by `1 / total`.
fn chunk_gradients(
    net: &NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
    total: usize,
) -> Result<(f64, usize, Gradients)> {
    let (logits, cache) = net.forward(batch)?;
    let (loss, grad) = softmax_xent(&logits, labels)?;
    let n = labels.len();
    let grads = net.backward(&cache, &grad.scale(n as f64 / total as f64))?;
    let k = logits.shape()[1];
    let mut correct = 0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if argmax(row)? == label {
            correct += 1;
        }
    }
    Ok((loss * n as f64, correct, grads))
}

/// Mean loss, correct count and mean-loss gradients of one batch, computed in
/// fixed chunks of [`GRAD_CHUNK`] samples and reduced in chunk order.
pub fn batch_gradients(
    net: &NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, usize, Gradients)> {
    let n = labels.len();
    if batch.shape().first() != Some(&n) || n == 0 {
        return Err(Error::shape(format!(
            "batch {} does not match {n} labels",
            ShapeDisplay(batch.shape())
        )));
    }
    let per = batch.len() / n;
    let parts = (0..n)
        .step_by(GRAD_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + GRAD_CHUNK).min(n);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, batch.data()[start * per..end * per].to_vec())?;
            chunk_gradients(net, &chunk, &labels[start..end], n)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads = Gradients::default();
    for (l, c, g) in parts {
        loss += l;
        correct += c;
        grads.accumulate(&g)?;
    }
    Ok((loss / n as f64, correct, grads))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker threads: {e}")))
}

/// Trains `net` on `samples` (label = identity) and returns the epoch log.
///
/// One seeded RNG drives the shuffle and every augmentation draw, in that
/// order, before each batch is handed to the workers.
pub fn train(net: &mut NetworkGraph, samples: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(net, samples, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    net: &mut NetworkGraph,
    samples: &[LabeledSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let k = net.classes();
    if let Some(s) = samples.iter().find(|s| s.identity >= k) {
        return Err(Error::Mismatch(format!(
            "label {} out of range for a {k}-class network",
            s.identity
        )));
    }
    let ncfg = net.config();
    let target = (ncfg.input_height, ncfg.input_width);
    let channels = ncfg.input_channels;
    for s in samples {
        let (h, w, c) = image_dims(&s.image)?;
        if c != channels {
            return Err(Error::Mismatch(format!(
                "images have {c} channels, network expects {channels}"
            )));
        }
        if let Some(src) = cfg.crop_source {
            if (h, w) != src {
                return Err(Error::shape(format!(
                    "image is {h}x{w}, crop source is {}x{}",
                    src.0, src.1
                )));
            }
        }
        check_crop((h, w), target)?;
    }
    if cfg.freeze_root {
        net.freeze_root(true);
    }

    let pool = thread_pool(cfg.threads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in order.chunks(cfg.batch_size) {
            let mut views = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &samples[i];
                let draw = if cfg.augment {
                    CropDraw::draw((s.image.shape()[0], s.image.shape()[1]), target, &mut rng)?
                } else {
                    CropDraw::center((s.image.shape()[0], s.image.shape()[1]), target)?
                };
                views.push(draw.apply(&s.image, target)?);
            }
            let batch = Tensor::stack(&views.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].identity).collect();
            let (loss, c, grads) = pool.install(|| batch_gradients(net, &batch, &labels))?;
            loss_sum += loss * idx.len() as f64;
            correct += c;
            sgd_step(net, &grads, &mut state, lr, cfg.momentum)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
        };
        log::debug!(
            "epoch {epoch}: loss {:.6} train acc {:.4}",
            stats.mean_loss,
            stats.train_acc
        );
        on_epoch(&stats);
        let done = cfg.target_accuracy.is_some_and(|t| stats.train_acc >= t);
        log.epochs.push(stats);
        if done {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LfhnConfig;

    #[test]
    fn sgd_single_step() {
        let mut net = NetworkGraph::zeroed(&LfhnConfig::tiny()).unwrap();
        let mut grads = Gradients::default();
        for p in net.params() {
            grads.insert(&p.name, Tensor::zeros(p.value.shape()));
        }
        let b = net.param("fc7.bias").unwrap().value.shape().to_vec();
        grads.insert("fc7.bias", Tensor::filled(&b, 1.0));
        let mut state = SgdState::default();
        sgd_step(&mut net, &grads, &mut state, 0.1, 0.0).unwrap();
        assert!(net.param("fc7.bias").unwrap().value.data().iter().all(|&v| v == -0.1));
        assert!(net.param("conv1.weight").unwrap().value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_rejects_bad_registries() {
        let mut net = NetworkGraph::zeroed(&LfhnConfig::tiny()).unwrap();
        let mut state = SgdState::default();
        let mut grads = Gradients::default();
        grads.insert("conv9.weight", Tensor::zeros(&[1]));
        assert!(matches!(
            sgd_step(&mut net, &grads, &mut state, 0.1, 0.9),
            Err(Error::Unknown { .. })
        ));
        let mut grads = Gradients::default();
        for p in net.params() {
            grads.insert(&p.name, Tensor::zeros(p.value.shape()));
        }
        net.freeze_root(true);
        assert!(matches!(
            sgd_step(&mut net, &grads, &mut state, 0.1, 0.9),
            Err(Error::Mismatch(_))
        ));
        let mut partial = Gradients::default();
        partial.insert("fc7.bias", Tensor::zeros(&[3]));
        assert!(sgd_step(&mut net, &partial, &mut state, 0.1, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr: -1.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_decay_every: Some(0), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let c = TrainConfig { lr_decay_every: Some(10), ..Default::default() };
        assert_eq!(c.lr_at(9), 0.01);
        assert!((c.lr_at(25) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn crop_and_mirror() {
        let img = Tensor::from_fn(&[4, 5, 2], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // same extents: offset forced to zero
        for _ in 0..10 {
            let d = CropDraw::draw((4, 5), (4, 5), &mut rng).unwrap();
            assert_eq!((d.dy, d.dx), (0, 0));
        }
        assert_eq!(center_crop(&img, (4, 5)).unwrap(), img);
        assert_eq!(mirror(&mirror(&img).unwrap()).unwrap(), img);
        let m = mirror(&img).unwrap();
        assert_eq!(m.get(&[1, 0, 1]), img.get(&[1, 4, 1]));
        let c = center_crop(&img, (2, 3)).unwrap();
        assert_eq!(c.get(&[0, 0, 0]), img.get(&[1, 1, 0]));
        assert!(augment(&img, (5, 5), &mut rng).is_err());
    }

    #[test]
    fn scaled_crop_source() {
        assert_eq!(scaled_source(227), 256);
        assert_eq!(scaled_source(67), 76);
    }

    #[test]
    fn smoothing() {
        let log = TrainLog {
            epochs: [4.0, 2.0, 3.0]
                .iter()
                .enumerate()
                .map(|(epoch, &mean_loss)| EpochStats {
                    epoch,
                    mean_loss,
                    train_acc: 0.0,
                })
                .collect(),
        };
        assert_eq!(log.smoothed_loss(2), vec![4.0, 3.0, 2.5]);
        assert_eq!(log.to_string(), "epoch,mean_loss,train_acc\n0,4,0\n1,2,0\n2,3,0\n");
    }
}
