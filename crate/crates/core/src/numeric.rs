//! Small numeric helpers shared across modules.

/// Neumaier-compensated accumulator. Reductions over voxel buffers use this
/// so results stay reproducible to ~1e-12 relative regardless of how the
/// data was chunked upstream.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Sums a slice with compensation.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancellation() {
        // Naive summation loses the 1.0 entirely.
        let xs = [1e16, 1.0, -1e16];
        assert_eq!(kahan_sum(xs.iter().copied()), 1.0);
    }

    #[test]
    fn matches_exact_sum_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(kahan_sum(xs.iter().copied()), 999.0 * 1000.0 / 2.0);
    }
}
