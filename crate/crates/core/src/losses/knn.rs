use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::SplitDataset;
use crate::scalar::{sq_dist, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    /// Row of `A_r`.
    pub index: usize,
    pub distance: T,
}

/// Exact `k` nearest neighbours in `A_r` of every row of `A_u`.
///
/// Neighbours are ordered by distance; equal distances keep the lower `A_r`
/// row first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex<T> {
    k: usize,
    lists: Vec<Vec<Neighbor<T>>>,
}

fn by_distance_then_index<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    a.distance
        .partial_cmp(&b.distance)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

impl<T: Scalar> NeighborIndex<T> {
    pub fn build(data: &SplitDataset<T>, k: usize) -> Result<Self> {
        let n_r = data.n_remain();
        if k == 0 || k > n_r {
            return Err(Error::InvalidArgument(format!(
                "k = {k} must lie in 1..={n_r} (size of the remaining set)"
            )));
        }
        let lists = data
            .forget()
            .iter_rows()
            .map(|u| {
                let mut all: Vec<Neighbor<T>> = data
                    .remain()
                    .iter_rows()
                    .enumerate()
                    .map(|(index, r)| Neighbor {
                        index,
                        distance: sq_dist(u, r).sqrt(),
                    })
                    .collect();
                if k < all.len() {
                    all.select_nth_unstable_by(k - 1, by_distance_then_index);
                    all.truncate(k);
                }
                all.sort_by(by_distance_then_index);
                all
            })
            .collect();
        Ok(Self { k, lists })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Neighbours of unlearning row `u`, nearest first.
    pub fn neighbors(&self, u: usize) -> &[Neighbor<T>] {
        &self.lists[u]
    }

    /// Neighbour rows of `u` in ascending `A_r` order.
    pub fn sorted_indices(&self, u: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self.lists[u].iter().map(|n| n.index).collect();
        idx.sort_unstable();
        idx
    }

    pub fn n_forget(&self) -> usize {
        self.lists.len()
    }

    /// CSV with columns `a_u_index,rank,a_r_index,distance`; rank starts at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["a_u_index", "rank", "a_r_index", "distance"])?;
        for (u, list) in self.lists.iter().enumerate() {
            for (rank, n) in list.iter().enumerate() {
                w.write_record(&[
                    u.to_string(),
                    (rank + 1).to_string(),
                    n.index.to_string(),
                    format!("{}", n.distance),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shorthand for [`NeighborIndex::build`].
pub fn build_neighbor_index<T: Scalar>(data: &SplitDataset<T>, k: usize) -> Result<NeighborIndex<T>> {
    NeighborIndex::build(data, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RngStream, Tensor2};

    fn split(remain: &[[f64; 2]], forget: &[[f64; 2]]) -> SplitDataset<f64> {
        SplitDataset::new(Tensor2::from_rows(remain).unwrap(), Tensor2::from_rows(forget).unwrap()).unwrap()
    }

    #[test]
    fn single_nearest_neighbour() {
        let ds = split(&[[0.0, 0.0], [3.0, 0.0]], &[[1.0, 0.0]]);
        let idx = build_neighbor_index(&ds, 1).unwrap();
        assert_eq!(idx.neighbors(0), &[Neighbor { index: 0, distance: 1.0 }]);
    }

    #[test]
    fn k_equal_to_remaining_returns_everything_sorted() {
        let ds = split(&[[5.0, 0.0], [1.0, 0.0], [2.0, 0.0]], &[[0.0, 0.0]]);
        let idx = build_neighbor_index(&ds, 3).unwrap();
        let order: Vec<usize> = idx.neighbors(0).iter().map(|n| n.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert_eq!(idx.sorted_indices(0), vec![0, 1, 2]);
    }

    #[test]
    fn ties_prefer_lower_rows() {
        let ds = split(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, 3.0]], &[[0.0, 0.0]]);
        let idx = build_neighbor_index(&ds, 2).unwrap();
        let order: Vec<usize> = idx.neighbors(0).iter().map(|n| n.index).collect();
        assert_eq!(order, vec![0, 1]);
    }

    #[test]
    fn invalid_k() {
        let ds = split(&[[0.0, 0.0]], &[[1.0, 0.0]]);
        assert!(build_neighbor_index(&ds, 0).is_err());
        assert!(build_neighbor_index(&ds, 2).is_err());
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = RngStream::new(77, 0);
        let remain: Vec<Vec<f64>> = (0..200).map(|_| rng.standard_normal(2)).collect();
        let forget: Vec<Vec<f64>> = (0..15).map(|_| rng.standard_normal(2)).collect();
        let ds = SplitDataset::new(Tensor2::from_rows(&remain).unwrap(), Tensor2::from_rows(&forget).unwrap()).unwrap();
        let idx = build_neighbor_index(&ds, 10).unwrap();
        for (u, q) in forget.iter().enumerate() {
            // independent oracle: squared distances, full stable sort
            let mut all: Vec<(f64, usize)> = remain
                .iter()
                .enumerate()
                .map(|(i, r)| ((q[0] - r[0]).powi(2) + (q[1] - r[1]).powi(2), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got: Vec<usize> = idx.neighbors(u).iter().map(|n| n.index).collect();
            let want: Vec<usize> = all[..10].iter().map(|p| p.1).collect();
            assert_eq!(got, want);
            for (n, p) in idx.neighbors(u).iter().zip(&all) {
                assert!((n.distance - p.0.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_export() {
        let ds = split(&[[0.0, 0.0], [3.0, 0.0]], &[[1.0, 0.0]]);
        let mut buf = Vec::new();
        build_neighbor_index(&ds, 2).unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "a_u_index,rank,a_r_index,distance\n0,1,0,1\n0,2,1,2\n"
        );
    }
}
