use std::collections::HashSet;

use crate::error::{check_dim, Error, Result};
use crate::numerics::Tensor2;
use crate::scalar::Scalar;

/// The remaining set `A_r` and the unlearning set `A_u`, one point per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset<T> {
    remain: Tensor2<T>,
    forget: Tensor2<T>,
}

impl<T: Scalar> SplitDataset<T> {
    /// Both sets non-empty, equally wide and without a row in common.
    pub fn new(remain: Tensor2<T>, forget: Tensor2<T>) -> Result<Self> {
        if remain.rows() == 0 || forget.rows() == 0 {
            return Err(Error::InvalidArgument(
                "remaining and unlearning sets must both be non-empty".into(),
            ));
        }
        check_dim("unlearning set width", remain.cols(), forget.cols())?;
        let key = |row: &[T]| row.iter().map(|v| v.f64().to_bits()).collect::<Vec<u64>>();
        let seen: HashSet<Vec<u64>> = remain.iter_rows().map(key).collect();
        if let Some(i) = forget.iter_rows().position(|r| seen.contains(&key(r))) {
            return Err(Error::InvalidArgument(format!(
                "unlearning row {i} also appears in the remaining set"
            )));
        }
        Ok(Self { remain, forget })
    }

    /// Skips the disjointness check; only for degenerate-case tests.
    /// Skips the disjointness check; only for degenerate-case tests.
    #[cfg(test)]
    pub(crate) fn new_unchecked(remain: Tensor2<T>, forget: Tensor2<T>) -> Self {
        Self { remain, forget }
    }

    pub fn remain(&self) -> &Tensor2<T> {
        &self.remain
    }

    pub fn forget(&self) -> &Tensor2<T> {
        &self.forget
    }

    pub fn dim(&self) -> usize {
        self.remain.cols()
    }

    pub fn n_remain(&self) -> usize {
        self.remain.rows()
    }

    pub fn n_forget(&self) -> usize {
        self.forget.rows()
    }

    /// `A = A_r ∪ A_u`, remaining rows first.
    pub fn full(&self) -> Tensor2<T> {
        let mut data = self.remain.as_slice().to_vec();
        data.extend_from_slice(self.forget.as_slice());
        Tensor2::from_vec(self.remain.rows() + self.forget.rows(), self.dim(), data)
            .expect("widths checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shared_rows_and_empty_sets() {
        let r = Tensor2::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let u = Tensor2::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!(SplitDataset::new(r.clone(), u).is_err());
        assert!(SplitDataset::new(r.clone(), Tensor2::zeros(0, 2)).is_err());
        let u = Tensor2::from_rows(&[[2.0, 1.0]]).unwrap();
        let ds = SplitDataset::new(r, u).unwrap();
        assert_eq!(ds.full().rows(), 3);
        assert_eq!(ds.full().row(2), &[2.0, 1.0]);
    }
}
