use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ClassHierarchy;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A minibatch ready for a forward pass.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    /// `[N, C, H, W]`
    pub images: Tensor<T>,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
}

/// Labeled single-size images held in memory, row-major per image.
#[derive(Clone, Debug)]
pub struct ImageSet<T> {
    shape: [usize; 3],
    pixels: Vec<T>,
    coarse: Vec<usize>,
    fine: Vec<usize>,
}

impl<T: Scalar> ImageSet<T> {
    /// Coarse labels are checked against the fine labels' parents.
    pub fn new(
        shape: [usize; 3],
        pixels: Vec<T>,
        coarse: Vec<usize>,
        fine: Vec<usize>,
        hierarchy: &ClassHierarchy,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::InvalidArgument(format!("image shape {shape:?} has a zero extent")));
        }
        if coarse.len() != fine.len() || pixels.len() != per * fine.len() {
            return Err(Error::Data(format!(
                "{} pixels, {} coarse and {} fine labels do not describe whole {shape:?} images",
                pixels.len(),
                coarse.len(),
                fine.len()
            )));
        }
        for (i, (&c, &f)) in coarse.iter().zip(&fine).enumerate() {
            if f >= hierarchy.num_fine() || hierarchy.parent_of(f) != c {
                return Err(Error::Data(format!(
                    "example {i}: coarse label {c} is not the parent of fine label {f}"
                )));
            }
        }
        Ok(ImageSet {
            shape,
            pixels,
            coarse,
            fine,
        })
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    /// `[C, H, W]` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image(&self, i: usize) -> &[T] {
        let per = self.shape.iter().product::<usize>();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn coarse(&self) -> &[usize] {
        &self.coarse
    }

    pub fn fine(&self) -> &[usize] {
        &self.fine
    }

    /// Stack the listed examples into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<LabeledBatch<T>> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image(0).len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} images",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        Ok(LabeledBatch {
            images: Tensor::new(&[indices.len(), c, h, w], pixels)?,
            coarse: indices.iter().map(|&i| self.coarse[i]).collect(),
            fine: indices.iter().map(|&i| self.fine[i]).collect(),
        })
    }
}

/// Shuffled index batches over `len` records.
///
/// The trailing partial batch is dropped whenever a full batch exists, and
/// always when it holds a single record (batch norm needs two).
pub fn batch_indices<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    if len == 0 {
        return Err(Error::Data("cannot batch an empty record set".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let short = batches.last().is_some_and(|b| b.len() < batch_size);
    if short && (batches.len() > 1 || batches[0].len() < 2) {
        batches.pop();
    }
    Ok(batches)
}

/// One epoch of shuffled minibatches.
pub fn make_batches<T: Scalar, R: Rng + ?Sized>(
    set: &ImageSet<T>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<LabeledBatch<T>>> {
    batch_indices(set.len(), batch_size, rng)?
        .iter()
        .map(|idx| set.gather(idx))
        .collect()
}
