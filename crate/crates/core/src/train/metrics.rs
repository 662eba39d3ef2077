use crate::error::{Error, Result};

/// Pixel counts indexed `[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Data(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.classes;
        if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MiouReport> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let inter = self.count(c, c);
                let truth: u64 = (0..k).map(|p| self.count(c, p)).sum();
                let pred: u64 = (0..k).map(|t| self.count(t, c)).sum();
                let union = truth + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Data("mIoU of empty label maps".into()));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

/// Per-class IoU and their mean over classes present in either map.
pub fn miou(pred: &[usize], truth: &[usize], classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    cm.report()
}
