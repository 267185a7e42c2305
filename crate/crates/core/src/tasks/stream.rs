use std::marker::PhantomData;
use std::sync::Arc;

use rand::Rng;

use super::degrade::{degrade, Degradation};
use super::image::Image;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Real, Tensor4};

/// A (degraded, clean) batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub degraded: Tensor4<T>,
    pub clean: Tensor4<T>,
}

/// Infinite stream of random crops and their degraded versions. Batch `i`
/// is a pure function of `(seed, i)`.
#[derive(Debug, Clone)]
pub struct PairStream<T> {
    pool: Arc<Vec<Image>>,
    degradation: Degradation,
    patch_size: usize,
    batch_size: usize,
    seed: u64,
    next: u64,
    _marker: PhantomData<T>,
}

impl<T: Real> PairStream<T> {
    pub fn new(
        pool: Arc<Vec<Image>>,
        degradation: Degradation,
        patch_size: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        degradation.validate()?;
        if pool.is_empty() || patch_size == 0 || batch_size == 0 {
            return Err(Error::InvalidParameter(
                "pair stream needs a non-empty pool and positive patch/batch sizes".into(),
            ));
        }
        if let Some(small) = pool.iter().find(|im| im.height < patch_size || im.width < patch_size) {
            return Err(Error::InvalidParameter(format!(
                "pool image {}x{} is smaller than the {patch_size}px patch",
                small.height, small.width
            )));
        }
        Ok(Self {
            pool,
            degradation,
            patch_size,
            batch_size,
            seed,
            next: 0,
            _marker: PhantomData,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// The `k`-th clean crop and its degradation within batch `i`.
    pub fn sample(&self, i: u64, k: u64) -> Result<(Image, Image)> {
        let mut rng = rng_for(self.seed, &[i, k]);
        let im = &self.pool[rng.random_range(0..self.pool.len())];
        let p = self.patch_size;
        let y0 = rng.random_range(0..=im.height - p);
        let x0 = rng.random_range(0..=im.width - p);
        let clean = im.crop(y0, x0, p, p)?;
        let degraded = degrade(&clean, &self.degradation, derive_seed(self.seed, &[i, k, 1]))?;
        Ok((degraded, clean))
    }

    pub fn batch(&self, i: u64) -> Result<PairBatch<T>> {
        let pairs = (0..self.batch_size as u64)
            .map(|k| self.sample(i, k))
            .collect::<Result<Vec<_>>>()?;
        let degraded: Vec<&Image> = pairs.iter().map(|(d, _)| d).collect();
        let clean: Vec<&Image> = pairs.iter().map(|(_, c)| c).collect();
        Ok(PairBatch {
            degraded: Image::stack(&degraded)?,
            clean: Image::stack(&clean)?,
        })
    }
}

impl<T: Real> Iterator for PairStream<T> {
    type Item = Result<PairBatch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

pub fn make_pair_stream<T: Real>(
    pool: Arc<Vec<Image>>,
    degradation: Degradation,
    patch_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PairStream<T>> {
    PairStream::new(pool, degradation, patch_size, batch_size, seed)
}

/// Fixed evaluation pairs, generated once and reused so repeated evaluations
/// see identical inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub pairs: Vec<(Image, Image)>,
}

impl EvalSet {
    pub fn generate(
        pool: Arc<Vec<Image>>,
        degradation: &Degradation,
        count: usize,
        patch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let stream = PairStream::<f32>::new(pool, degradation.clone(), patch_size, 1, seed)?;
        let pairs = (0..count as u64)
            .map(|i| stream.sample(i, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
