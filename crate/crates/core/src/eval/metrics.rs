use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NUM_CLASSES;

/// Confusion counts: `counts[truth][prediction]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn record(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Validation(format!(
                "prediction length {} != truth length {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(mut self, rhs: Confusion) -> Confusion {
        self += rhs;
        self
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, rhs: Confusion) {
        for (row, other) in self.counts.iter_mut().zip(rhs.counts.iter()) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), Add::add)
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    let mut c = Confusion::default();
    c.record(pred, truth)?;
    Ok(c)
}

/// Which classes enter the mIoU mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouClasses {
    #[default]
    All,
    WaveformOnly,
}

/// Per-class IoU (`None` when the class is absent from both sides) and the
/// mean over the included, present classes.
pub fn miou(conf: &Confusion, classes: MiouClasses) -> Result<([Option<f64>; NUM_CLASSES], f64)> {
    let mut per_class = [None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let tp = conf.counts[c][c];
        let fn_: u64 = conf.counts[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..NUM_CLASSES).map(|t| conf.counts[t][c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom > 0 {
            *slot = Some(tp as f64 / denom as f64);
        }
    }
    let first = match classes {
        MiouClasses::All => 0,
        MiouClasses::WaveformOnly => 1,
    };
    let included: Vec<f64> = per_class[first..].iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Undefined("mIoU: no class present in prediction or truth".into()));
    }
    Ok((per_class, included.iter().sum::<f64>() / included.len() as f64))
}
