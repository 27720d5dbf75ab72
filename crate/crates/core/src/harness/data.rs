//! Synthetic labelled image sets.
//!
//! `FrequencyTone`: class `c` is a plane wave with a fixed frequency vector
//! `f_c` at a uniformly random cyclic shift, plus Gaussian noise. The class
//! is visible in the amplitude spectrum but not in any fixed-position
//! template. `ShiftedPattern`: a fixed random template per class at a random
//! cyclic shift, plus noise.
//!
//! Every sample is drawn from its own stream keyed on `(seed, split, index)`,
//! so train and test never share draws and samples can be generated in any
//! order.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FrequencyTone,
    ShiftedPattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub kind: TaskKind,
    pub resolution: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthTaskSpec {
    /// 10-class frequency-tone task at 64×64.
    pub fn desk(seed: u64) -> Self {
        Self {
            kind: TaskKind::FrequencyTone,
            resolution: 64,
            channels: 3,
            num_classes: 10,
            train_samples: 512,
            test_samples: 200,
            noise: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        if self.kind == TaskKind::FrequencyTone && self.num_classes > TONES.len() {
            return Err(Error::Config(format!("at most {} tone classes", TONES.len())));
        }
        if self.resolution < 2 || self.channels == 0 {
            return Err(Error::Config("resolution must be ≥ 2 and channels ≥ 1".into()));
        }
        Ok(())
    }
}

/// Frequency vectors `(fy, fx)` in cycles per image, indexed by class.
/// Different orientations and magnitudes; none is a multiple of the 16-pixel
/// token stride.
pub const TONES: [(i64, i64); 12] = [
    (0, 3),
    (3, 0),
    (3, 3),
    (3, -3),
    (0, 6),
    (6, 0),
    (6, 6),
    (6, -6),
    (0, 10),
    (10, 0),
    (2, 5),
    (5, -2),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// `cos(2π(fy·y + fx·x)/R)` shifted by `(sy, sx)`, one channel.
pub fn tone(resolution: usize, class: usize, shift: (usize, usize)) -> Vec<f64> {
    let r = resolution as i64;
    let (fy, fx) = TONES[class];
    let mut out = Vec::with_capacity(resolution * resolution);
    for y in 0..r {
        for x in 0..r {
            let (yy, xx) = (y + shift.0 as i64, x + shift.1 as i64);
            let k = (fy * yy + fx * xx).rem_euclid(r);
            out.push((2.0 * PI * k as f64 / r as f64).cos());
        }
    }
    out
}

fn template(spec: &SynthTaskSpec, class: usize) -> Vec<f64> {
    let mut rng = stream_rng(spec.seed, &format!("template/{class}"));
    let r = spec.resolution;
    (0..spec.channels * r * r).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// One sample of `split` at `index`, with or without noise.
pub fn sample(spec: &SynthTaskSpec, split: Split, index: usize, noisy: bool) -> (Tensor, usize) {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut rng = stream_rng(spec.seed, &format!("{tag}/{index}"));
    let r = spec.resolution;
    let label = rng.random_range(0..spec.num_classes);
    let shift = (rng.random_range(0..r), rng.random_range(0..r));
    let plane = r * r;
    let mut data = match spec.kind {
        TaskKind::FrequencyTone => tone(r, label, shift).repeat(spec.channels),
        TaskKind::ShiftedPattern => {
            let t = template(spec, label);
            let mut out = vec![0.0; t.len()];
            for c in 0..spec.channels {
                for y in 0..r {
                    for x in 0..r {
                        out[c * plane + ((y + shift.0) % r) * r + (x + shift.1) % r] = t[c * plane + y * r + x];
                    }
                }
            }
            out
        }
    };
    if noisy && spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("positive std");
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let img = Tensor::new(vec![spec.channels, r, r], data).expect("positive extents");
    (img, label)
}

/// Generates the requested split.
pub fn synth_dataset(spec: &SynthTaskSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.train_samples,
        Split::Test => spec.test_samples,
    };
    let (images, labels) = (0..n).map(|i| sample(spec, split, i, true)).unzip();
    Ok(Dataset {
        images,
        labels,
        num_classes: spec.num_classes,
    })
}
