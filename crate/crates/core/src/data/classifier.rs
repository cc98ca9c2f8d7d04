//! Small convolutional shape classifier used to score translations into
//! domain B.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Param, ParamGroup, TensorError};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::trainer::{augment, Adam, AdamConfig, AugmentBounds, Checkpoint, StepParam};

use super::ShapeClass;

/// Held-out accuracy below this means generator and classifier disagree.
pub const MIN_ACCURACY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub width: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub augment: AugmentBounds,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 16,
            steps: 400,
            batch_size: 32,
            learning_rate: 3e-3,
            augment: AugmentBounds {
                max_rotation_degrees: 10.0,
                max_shift_pixels: 2,
            },
        }
    }
}

/// conv 4x4/2 -> relu -> conv 4x4/2 -> relu -> global average pool -> linear.
#[derive(Debug)]
pub struct Classifier {
    group: ParamGroup<f32>,
}

const NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

impl Classifier {
    pub fn new(channels: usize, width: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "classifier/init");
        let mut normal = |shape: &[usize], fan_in: usize| {
            let d = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| d.sample(&mut rng) as f32).collect();
            Param::new(Tensor::from_vec(shape, data).expect("shape"), true)
        };
        let w1 = normal(&[width, channels, 4, 4], channels * 16);
        let w2 = normal(&[2 * width, width, 4, 4], width * 16);
        let w3 = normal(&[ShapeClass::COUNT, 2 * width], 2 * width);
        let mut group = ParamGroup::new();
        for (name, p) in NAMES.iter().zip([
            w1,
            Param::new(Tensor::zeros(&[width]), true),
            w2,
            Param::new(Tensor::zeros(&[2 * width]), true),
            w3,
            Param::new(Tensor::zeros(&[ShapeClass::COUNT]), true),
        ]) {
            group.push(*name, p);
        }
        Self { group }
    }

    fn logits(
        &self,
        g: &mut Graph<f32>,
        images: &Tensor<f32>,
    ) -> Result<crate::autodiff::Var, TensorError> {
        let p: Vec<_> = (0..NAMES.len())
            .map(|i| g.param(self.group.get(i), false))
            .collect();
        let x = g.input(images.clone());
        let h = g.conv2d(x, p[0], Some(p[1]), 2, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p[2], Some(p[3]), 2, 1)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        g.linear(h, p[4], Some(p[5]))
    }

    /// Predicted class for each image of a `[N,C,H,W]` batch.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<ShapeClass>> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, images)?;
        let logits = g.value(l);
        let k = ShapeClass::COUNT;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                ShapeClass::from_index(best).expect("class index")
            })
            .collect())
    }

    pub fn accuracy(&self, samples: &[(Tensor<f32>, ShapeClass)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Config("accuracy of an empty set".into()));
        }
        let mut correct = 0;
        for chunk in samples.chunks(64) {
            let imgs: Vec<_> = chunk.iter().map(|(t, _)| t.clone()).collect();
            let pred = self.predict(&Tensor::stack(&imgs)?)?;
            correct += pred.iter().zip(chunk).filter(|(p, (_, c))| *p == c).count();
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: [0; 32],
            step: 0,
            params: self
                .group
                .iter()
                .map(|(n, p)| (n.to_string(), p.read().value.clone()))
                .collect(),
            moments: Vec::new(),
            rng_key: [0; 32],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut group = ParamGroup::new();
        for name in NAMES {
            let t = ckpt
                .param(name)
                .ok_or_else(|| Error::format("classifier checkpoint", format!("missing {name}")))?;
            group.push(name, Param::new(t.clone(), true));
        }
        Ok(Self { group })
    }
}

/// Train and held-out accuracy of a fitted classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fits a classifier on `train` with cross-entropy and reports accuracies.
pub fn train_classifier(
    train: &[(Tensor<f32>, ShapeClass)],
    test: &[(Tensor<f32>, ShapeClass)],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, ClassifierReport)> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("classifier training set is empty".into()))?;
    let clf = Classifier::new(first.0.shape()[0], config.width, seed);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let key = seed::derive_key(seed, "classifier/train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.steps {
        let mut rng = seed::stream(&key, "step", step);
        let mut imgs = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut seed::stream(&key, "epoch", step));
                cursor = 0;
            }
            let (img, class) = &train[order[cursor]];
            cursor += 1;
            imgs.push(augment(img, config.augment, &mut rng));
            labels.push(class.index());
        }
        let mut g = Graph::new();
        let l = clf.logits(&mut g, &Tensor::stack(&imgs)?)?;
        let loss = g.cross_entropy(l, &labels)?;
        if !g.value(loss).all_finite() {
            return Err(Error::Divergence {
                phase: "classifier",
                step,
                detail: "non-finite cross-entropy".into(),
            });
        }
        g.backward(loss)?;
        let views: Vec<_> = clf
            .group
            .iter()
            .map(|(name, param)| StepParam {
                name,
                param,
                frozen: false,
            })
            .collect();
        adam.step(&views)?;
    }
    let report = ClassifierReport {
        train_accuracy: clf.accuracy(train)?,
        test_accuracy: clf.accuracy(test)?,
    };
    Ok((clf, report))
}

/// [`train_classifier`] that fails when held-out accuracy is below
/// [`MIN_ACCURACY`].
pub fn train_eval_classifier(
    train: &[(Tensor<f32>, ShapeClass)],
    test: &[(Tensor<f32>, ShapeClass)],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, ClassifierReport)> {
    let (clf, report) = train_classifier(train, test, config, seed)?;
    if report.test_accuracy < MIN_ACCURACY {
        return Err(Error::Config(format!(
            "classifier reached only {:.3} held-out accuracy (need {MIN_ACCURACY})",
            report.test_accuracy
        )));
    }
    Ok((clf, report))
}
