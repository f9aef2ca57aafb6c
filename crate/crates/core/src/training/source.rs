use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that can assemble model inputs for a list of sample indices.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images, audio and target indices for `indices`, in order.
    fn batch(&self, indices: &[usize]) -> (Tensor, Tensor, Vec<usize>);

    fn labels(&self, indices: &[usize]) -> Vec<usize>;
}

impl BatchSource for PairedDataset {
    fn len(&self) -> usize {
        PairedDataset::len(self)
    }

    fn batch(&self, indices: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        PairedDataset::batch(self, indices)
    }

    fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.pairs()[i].target.index()).collect()
    }
}

/// In-memory samples of arbitrary shape (e.g. for the tiny model variant).
#[derive(Debug, Clone)]
pub struct TensorDataset {
    images: Tensor,
    audio: Tensor,
    labels: Vec<usize>,
}

impl TensorDataset {
    pub fn new(images: Tensor, audio: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.dim0() != labels.len() || audio.dim0() != labels.len() {
            return Err(Error::Input(format!(
                "{} images, {} audio rows, {} labels",
                images.dim0(),
                audio.dim0(),
                labels.len()
            )));
        }
        Ok(TensorDataset { images, audio, labels })
    }
}

impl BatchSource for TensorDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, indices: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            self.audio.select_rows(indices),
            self.labels(indices),
        )
    }

    fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}
