use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GradTape, Seed, Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, build_network, BnMode, Network};
use crate::tensor::{Dims, Element, TensorView};

/// Constant-colour images plus Gaussian noise, `(3, 8, 8)` each.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub const IMAGE: (usize, usize, usize) = (3, 8, 8);

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len() -> usize {
        let (c, h, w) = Self::IMAGE;
        c * h * w
    }

    pub fn batch<T: Element>(&self, idx: &[usize]) -> Result<(TensorView<T>, Vec<usize>)> {
        let (c, h, w) = Self::IMAGE;
        let k = Self::image_len();
        let mut values = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            values.extend(self.images[i * k..(i + 1) * k].iter().map(|&v| T::lit(v)));
        }
        let x = TensorView::from_vec(Dims::new(idx.len(), c, h, w)?, values, 1)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// `per_class` images of each of `classes` classes. Class `k`'s colour lies
/// on a circle so the classes are linearly separable after average pooling.
pub fn synthetic_dataset(classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<ToyDataset> {
    if classes < 2 || per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "toy dataset needs >= 2 classes and >= 1 image per class, got {classes} x {per_class}"
        )));
    }
    let dist = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(format!("noise {noise}: {e}")))?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = ToyDataset::IMAGE;
    let mut images = Vec::with_capacity(classes * per_class * c * h * w);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..per_class * classes {
        let k = i % classes;
        let angle = std::f64::consts::TAU * k as f64 / classes as f64;
        for ch in 0..c {
            let mean = (angle + std::f64::consts::TAU * ch as f64 / c as f64).cos();
            images.extend((0..h * w).map(|_| mean + dist.sample(rng)));
        }
        labels.push(k);
    }
    Ok(ToyDataset {
        classes,
        images,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: String,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: "addressnet-20".into(),
            classes: 3,
            per_class: 64,
            noise: 0.5,
            steps: 200,
            batch_size: 16,
            sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
    /// Inference-mode accuracy on the whole dataset after training.
    pub final_accuracy: f64,
}

impl TrainingCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    /// Mean loss over the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.points.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |s: &[CurvePoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.points[..window]), mean(&self.points[n - window..])))
    }
}

/// Trains `cfg.network` (resized to 8x8 inputs and `cfg.classes` outputs)
/// on the synthetic dataset with minibatch SGD.
pub fn train_toy<T: Element>(cfg: &TrainConfig) -> Result<TrainingCurve> {
    let (_, h, w) = ToyDataset::IMAGE;
    let spec = build_network(&cfg.network)?.with_input(h, w).with_classes(cfg.classes);
    let net = Network::<T>::new(&spec, cfg.seed)?;
    let data = synthetic_dataset(cfg.classes, cfg.per_class, cfg.noise, cfg.seed)?;
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must be in 1..={}",
            cfg.batch_size,
            data.len()
        )));
    }
    let params = net.parameters();
    let mut sgd = Sgd::new(cfg.sgd);
    let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut points = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = index::sample(rng, data.len(), cfg.batch_size).into_vec();
        let (x, labels) = data.batch::<T>(&idx)?;
        let mut tape = GradTape::recording();
        let logits = net.forward(
            &x,
            &mut tape,
            BnMode::Train {
                momentum: cfg.bn_momentum,
            },
        )?;
        let (loss, probs) = tape.softmax_cross_entropy(&logits, &labels)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = tape.backward(Seed::Loss)?;
        sgd.step(&params, &grads);
        let hits = argmax_rows(&probs, cfg.classes)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        points.push(CurvePoint {
            step,
            loss,
            accuracy: hits as f64 / labels.len() as f64,
        });
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch::<T>(&all)?;
    let pred = net.predict(&x, BnMode::Infer)?;
    let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(TrainingCurve {
        points,
        final_accuracy: hits as f64 / labels.len() as f64,
    })
}
