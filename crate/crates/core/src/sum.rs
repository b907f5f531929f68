//! Deterministic compensated reductions.
//!
//! Per-subject terms are split into fixed-size chunks. Chunks may be evaluated
//! on any thread, but each chunk is summed sequentially and the chunk partials
//! are folded in index order, so the result depends only on the input order.

use rayon::prelude::*;

/// Number of subjects per reduction chunk.
pub const CHUNK: usize = 256;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: Neumaier) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums `f(i)` for `i in 0..n` with a fixed reduction topology.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<Neumaier> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Neumaier::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                acc.add(f(i));
            }
            acc
        })
        .collect();
    let mut total = Neumaier::new();
    for p in partials {
        total.merge(p);
    }
    total.value()
}

/// Vector analogue of [`chunked_sum`]: `f(i, out)` adds subject `i`'s
/// contribution into `out` (length `dim`).
pub fn chunked_vec_sum<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<Neumaier>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Neumaier::new(); dim];
            let mut scratch = vec![0.0; dim];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                f(i, &mut scratch);
                for (a, s) in acc.iter_mut().zip(&scratch) {
                    a.add(*s);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Neumaier::new(); dim];
    for p in partials {
        for (t, q) in total.iter_mut().zip(p) {
            t.merge(q);
        }
    }
    total.iter().map(Neumaier::value).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_recovers_small_terms() {
        let mut acc = Neumaier::new();
        acc.add(1.0);
        for _ in 0..10 {
            acc.add(1e-16);
        }
        acc.add(-1.0);
        assert!((acc.value() - 1e-15).abs() < 1e-30);
    }

    #[test]
    fn chunked_sum_matches_sequential_for_many_chunks() {
        let n = 3 * CHUNK + 17;
        let s = chunked_sum(n, |i| (i as f64).sqrt());
        let seq: f64 = (0..n).map(|i| (i as f64).sqrt()).sum();
        assert!((s - seq).abs() < 1e-9 * seq);
    }

    #[test]
    fn empty_sum_is_zero() {
        assert_eq!(chunked_sum(0, |_| 1.0), 0.0);
        assert_eq!(chunked_vec_sum(0, 3, |_, _| {}), vec![0.0; 3]);
    }
}
