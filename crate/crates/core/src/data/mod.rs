//! Datasets: the synthetic scale task, the CIFAR-10 binary format and
//! seeded mini-batch streams.

mod cifar;
mod synthetic;

pub use cifar::{encode_cifar10_binary, load_cifar10_binary, parse_cifar10_binary, CIFAR_RECORD};
pub use synthetic::{
    generate_scale_task, separability, validate_scale_task, Separability, SyntheticSpec, MAX_SHAPES, MAX_TEXTURES,
};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::train::augment;
use crate::vision::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// Labelled images over `classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize, split: Split) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::Index {
                what: "dataset label",
                index: bad.label,
                bound: classes,
            });
        }
        Ok(Self {
            samples,
            classes,
            split,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Classes without a single sample.
    pub fn missing_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for s in &self.samples {
            seen[s.label] = true;
        }
        (0..self.classes).filter(|&c| !seen[c]).collect()
    }
}

/// One mini-batch, in delivery order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

/// Seed-ordered batch stream over one epoch.
///
/// The visiting order is shuffled once on construction; augmentation draws
/// from the same generator batch by batch, so the stream is a pure function
/// of the generator state. The final short batch is kept.
pub struct Batches<'a, R: Rng> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: bool,
    rng: &'a mut R,
}

pub fn batches<'a, R: Rng>(
    ds: &'a Dataset,
    batch_size: usize,
    rng: &'a mut R,
    augment: bool,
) -> Result<Batches<'a, R>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    Ok(Batches {
        dataset: ds,
        order,
        batch_size,
        cursor: 0,
        augment,
        rng,
    })
}

impl<R: Rng> Iterator for Batches<'_, R> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            let s = &self.dataset.samples[i];
            images.push(if self.augment {
                augment(&s.image, self.rng)
            } else {
                s.image.clone()
            });
            labels.push(s.label);
        }
        Some(Batch {
            indices,
            images,
            labels,
        })
    }
}
