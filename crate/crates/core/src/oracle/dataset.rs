//! Image collections and single-pass, without-replacement sampling.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

/// An image handed to an attack, tagged with its stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: ImageTensor,
}

/// A view over a shared image archive. Ids are `(source << 32) | index`, so
/// two archives loaded with different source tags never collide.
#[derive(Debug, Clone)]
pub struct Dataset {
    shape: Shape,
    source: u32,
    images: Arc<Vec<ImageTensor>>,
    index: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, source: u32) -> Result<Self> {
        let shape = images
            .first()
            .map(|x| x.shape())
            .ok_or_else(|| Error::Config("dataset is empty".into()))?;
        if let Some((k, x)) = images.iter().enumerate().find(|(_, x)| x.shape() != shape) {
            return Err(Error::Shape {
                expected: shape.to_string(),
                found: format!("{} at image {k}", x.shape()),
            });
        }
        let index = (0..images.len()).collect();
        Ok(Dataset { shape, source, images: Arc::new(images), index })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn id_of(&self, position: usize) -> u64 {
        (u64::from(self.source) << 32) | self.index[position] as u64
    }

    pub fn image(&self, position: usize) -> &ImageTensor {
        &self.images[self.index[position]]
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len()).map(move |p| self.id_of(p))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &ImageTensor)> + '_ {
        (0..self.len()).map(move |p| (self.id_of(p), self.image(p)))
    }

    pub fn images(&self) -> Vec<ImageTensor> {
        (0..self.len()).map(|p| self.image(p).clone()).collect()
    }

    pub fn has_labels(&self) -> bool {
        (0..self.len()).all(|p| self.image(p).label().is_some())
    }

    /// First `n` images of this view.
    pub fn truncated(&self, n: usize) -> Dataset {
        let mut out = self.clone();
        out.index.truncate(n);
        out
    }

    /// Seeded random split into `(attack, holdout)`; the holdout receives
    /// `round(fraction * len)` images.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction must be in [0, 1), got {fraction}")));
        }
        let mut order = self.index.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let holdout_len = (fraction * self.len() as f64).round() as usize;
        let (hold, attack) = order.split_at(holdout_len);
        let mut attack = attack.to_vec();
        let mut hold = hold.to_vec();
        attack.sort_unstable();
        hold.sort_unstable();
        let view = |index: Vec<usize>| Dataset {
            shape: self.shape,
            source: self.source,
            images: Arc::clone(&self.images),
            index,
        };
        Ok((view(attack), view(hold)))
    }

    /// A fresh single-pass stream. `None` keeps archive order.
    pub fn stream(&self, shuffle_seed: Option<u64>) -> DatasetStream {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        DatasetStream { dataset: self.clone(), order, cursor: 0 }
    }
}

/// Hands out each image at most once, in a fixed (optionally shuffled) order.
#[derive(Debug, Clone)]
pub struct DatasetStream {
    dataset: Dataset,
    order: Vec<usize>,
    cursor: usize,
}

impl DatasetStream {
    pub fn shape(&self) -> Shape {
        self.dataset.shape()
    }

    pub fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }

    pub fn total(&self) -> usize {
        self.order.len()
    }

    /// Next `n` images, or `Exhausted` without consuming anything.
    pub fn take(&mut self, n: usize) -> Result<Vec<Sample>> {
        if n > self.remaining() {
            return Err(Error::Exhausted { requested: n, remaining: self.remaining() });
        }
        let out = self.order[self.cursor..self.cursor + n]
            .iter()
            .map(|&p| Sample { id: self.dataset.id_of(p), image: self.dataset.image(p).clone() })
            .collect();
        self.cursor += n;
        Ok(out)
    }
}
