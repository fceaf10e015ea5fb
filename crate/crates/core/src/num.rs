use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric code is generic over.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

/// Neumaier-compensated accumulator. The result does not depend on the
/// order of additions beyond the last few ulps.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    compensation: T,
}

impl<T: Scalar> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            compensation: T::zero(),
        }
    }

    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation = self.compensation + ((self.sum - t) + x);
        } else {
            self.compensation = self.compensation + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn total(&self) -> T {
        self.sum + self.compensation
    }
}

impl<T: Scalar> FromIterator<T> for CompensatedSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator.
pub fn stable_sum<T: Scalar, I: IntoIterator<Item = T>>(values: I) -> T {
    values.into_iter().collect::<CompensatedSum<T>>().total()
}

/// Compensated mean; the mean of nothing is zero.
pub fn stable_mean<T: Scalar, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut acc = CompensatedSum::new();
    let mut n = 0usize;
    for x in values {
        acc.add(x);
        n += 1;
    }
    if n == 0 {
        T::zero()
    } else {
        acc.total() / T::from_usize_lossy(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let xs = [1.0f64, 1e100, 1.0, -1e100];
        assert_eq!(stable_sum(xs), 2.0);
        assert_eq!(xs.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn order_does_not_matter() {
        let xs: Vec<f64> = (1..=1000).map(|i| 1.0 / i as f64).collect();
        let forward = stable_sum(xs.iter().copied());
        let backward = stable_sum(xs.iter().rev().copied());
        assert!((forward - backward).abs() <= 1e-15);
    }

    #[test]
    fn mean_of_empty_is_zero() {
        assert_eq!(stable_mean(Vec::<f32>::new()), 0.0);
        assert_eq!(stable_mean([1.0f32, 2.0, 3.0]), 2.0);
    }
}
