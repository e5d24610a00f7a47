//! Intersection over union per class.

use crate::error::{Error, Result};

use super::scene::LabelTensor;

/// Running intersection and union counts, so several scenes can be scored
/// as one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    inter: Vec<u64>,
    union: Vec<u64>,
}

/// Per-class IoU (`None` for classes absent from both sides) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouCounts {
    pub fn new(n_class: usize) -> Self {
        Self {
            inter: vec![0; n_class],
            union: vec![0; n_class],
        }
    }

    pub fn n_class(&self) -> usize {
        self.inter.len()
    }

    pub fn add(&mut self, pred: &LabelTensor, gt: &LabelTensor) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch {
                expected: gt.dims().to_vec(),
                got: pred.dims().to_vec(),
            });
        }
        let n_class = self.n_class();
        for &l in pred.data().iter().chain(gt.data()) {
            if l >= n_class {
                return Err(Error::LabelOutOfRange { label: l, n_class });
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Mean over classes present in prediction or ground truth; 0 when no
    /// class is present at all.
    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class, mean }
    }
}

pub fn miou(pred: &LabelTensor, gt: &LabelTensor, n_class: usize) -> Result<IouReport> {
    let mut c = IouCounts::new(n_class);
    c.add(pred, gt)?;
    Ok(c.report())
}
