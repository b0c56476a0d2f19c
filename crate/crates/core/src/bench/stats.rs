use crate::scalar::Real;

/// Mean and unbiased sample variance; variance is zero for fewer than two
/// samples.
pub fn mean_and_variance<F: Real>(samples: &[F]) -> (F, F) {
    if samples.is_empty() {
        return (F::zero(), F::zero());
    }
    let n = F::from_usize(samples.len()).unwrap();
    let mean = samples.iter().fold(F::zero(), |a, &x| a + x) / n;
    if samples.len() < 2 {
        return (mean, F::zero());
    }
    let ss = samples.iter().fold(F::zero(), |a, &x| a + (x - mean) * (x - mean));
    (mean, ss / (n - F::one()))
}

/// Empirical distribution of chunk sizes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkSizeCdf {
    sizes: Vec<u64>,
}

impl ChunkSizeCdf {
    pub fn new(sizes: impl IntoIterator<Item = u64>) -> Self {
        let mut sizes: Vec<u64> = sizes.into_iter().collect();
        sizes.sort_unstable();
        ChunkSizeCdf { sizes }
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Distinct sizes with the fraction of chunks at or below each.
    pub fn points(&self) -> Vec<(u64, f64)> {
        let n = self.sizes.len() as f64;
        let mut out: Vec<(u64, f64)> = Vec::new();
        for (i, &s) in self.sizes.iter().enumerate() {
            let frac = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == s => last.1 = frac,
                _ => out.push((s, frac)),
            }
        }
        out
    }

    /// Fraction of chunks no larger than `size`.
    pub fn at(&self, size: u64) -> f64 {
        if self.sizes.is_empty() {
            return 0.0;
        }
        self.sizes.partition_point(|&s| s <= size) as f64 / self.sizes.len() as f64
    }

    pub fn csv_rows(&self, series: &str) -> Vec<String> {
        self.points()
            .into_iter()
            .map(|(s, f)| format!("{series},{s},{f:.6}"))
            .collect()
    }
}

pub const CDF_HEADER: &str = "series,chunk_bytes,cumulative";

/// n_d per rank (rows) and checkpoint (columns).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NdMatrix {
    pub steps: Vec<u64>,
    /// `values[rank][checkpoint]`
    pub values: Vec<Vec<f64>>,
}

impl NdMatrix {
    pub fn new(ranks: usize) -> Self {
        NdMatrix { steps: Vec::new(), values: vec![Vec::new(); ranks] }
    }

    pub fn push(&mut self, step: u64, per_rank: &[f64]) {
        assert_eq!(per_rank.len(), self.values.len(), "one value per rank");
        self.steps.push(step);
        for (row, &v) in self.values.iter_mut().zip(per_rank) {
            row.push(v);
        }
    }

    pub fn ranks(&self) -> usize {
        self.values.len()
    }

    /// Number of ranks with a nonzero entry at checkpoint column `col`.
    pub fn active_ranks(&self, col: usize) -> usize {
        self.values.iter().filter(|row| row[col] > 0.0).count()
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (rank, row) in self.values.iter().enumerate() {
            for (step, v) in self.steps.iter().zip(row) {
                out.push(format!("{rank},{step},{v:.6}"));
            }
        }
        out
    }
}

pub const ND_HEADER: &str = "rank,step,n_d";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_variance() {
        let (m, v) = mean_and_variance(&[1.0f64, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_and_variance::<f64>(&[]), (0.0, 0.0));
        assert_eq!(mean_and_variance(&[7.0f32]), (7.0, 0.0));
    }

    #[test]
    fn cdf_is_valid() {
        let c = ChunkSizeCdf::new([16, 4, 16, 8, 4, 4]);
        let p = c.points();
        assert_eq!(p.iter().map(|x| x.0).collect::<Vec<_>>(), vec![4, 8, 16]);
        assert!(p.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(p.last().unwrap().1, 1.0);
        assert_eq!(c.at(4), 0.5);
        assert_eq!(c.at(3), 0.0);
        assert!(ChunkSizeCdf::default().points().is_empty());
    }

    #[test]
    fn nd_matrix_rows() {
        let mut m = NdMatrix::new(2);
        m.push(10, &[0.5, 0.0]);
        m.push(20, &[1.0, 0.25]);
        assert_eq!(m.active_ranks(0), 1);
        assert_eq!(m.active_ranks(1), 2);
        assert_eq!(m.csv_rows()[3], "1,20,0.250000");
    }
}
