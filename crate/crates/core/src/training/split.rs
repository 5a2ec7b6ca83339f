use crate::error::{Error, Result};
use crate::rng::RngState;

/// Whole-sequence train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

/// Sequence indices per partition, each in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Shuffles `0..n` and cuts it; validation and test get
    /// `floor(fraction·n)` sequences each, training the rest.
    pub fn assign(&self, n: usize, rng: &mut RngState) -> Result<Split> {
        self.validate()?;
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let n_val = (self.validation * n as f64).floor() as usize;
        let n_test = (self.test * n as f64).floor() as usize;
        let mut test = order[..n_test].to_vec();
        let mut validation = order[n_test..n_test + n_val].to_vec();
        let mut train = order[n_test + n_val..].to_vec();
        if train.is_empty() {
            return Err(Error::config(format!("training split is empty for {n} sequences")));
        }
        for part in [&mut train, &mut validation, &mut test] {
            part.sort_unstable();
        }
        Ok(Split { train, validation, test })
    }
}
