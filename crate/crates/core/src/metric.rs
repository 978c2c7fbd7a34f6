//! Prototypes, query-to-prototype distances, softmax posteriors and
//! absolute certainty.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

option_names!(DistanceMode { SqEuclidean => "sq_euclidean" | "sqeuclidean", Euclidean => "euclidean" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    SqEuclidean,
    Euclidean,
}

/// Class prototypes, one row per episode class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<T>(pub Matrix<T>);

impl<T: Scalar> Prototypes<T> {
    pub fn n_way(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, k: usize) -> &[T] {
        self.0.row(k)
    }
}

/// Mean support feature per class. `labels[j]` is the class of `features[j]`.
pub fn compute_prototypes<T: Scalar, V: AsRef<[T]>>(
    features: &[V],
    labels: &[usize],
    n_way: usize,
) -> Result<Prototypes<T>> {
    check_len("support labels", features.len(), labels.len())?;
    let dim = features.first().map_or(0, |f| f.as_ref().len());
    let mut sums = Matrix::zeros(n_way, dim);
    let mut counts = vec![0usize; n_way];
    for (f, &y) in features.iter().zip(labels) {
        let f = f.as_ref();
        check_len("support feature", dim, f.len())?;
        if y >= n_way {
            return Err(Error::InvalidConfig(format!("support label {y} >= n_way {n_way}")));
        }
        counts[y] += 1;
        for (s, &v) in sums.row_mut(y).iter_mut().zip(f) {
            *s += v;
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(k));
        }
        let inv = T::one() / T::lit(count as f64);
        sums.row_mut(k).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Prototypes(sums))
}

pub fn distance<T: Scalar>(a: &[T], b: &[T], mode: DistanceMode) -> T {
    let sq: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    match mode {
        DistanceMode::SqEuclidean => sq,
        DistanceMode::Euclidean => sq.sqrt(),
    }
}

/// `M × N` matrix of distances from each query to each prototype.
pub fn distances<T: Scalar, V: AsRef<[T]>>(
    queries: &[V],
    prototypes: &Prototypes<T>,
    mode: DistanceMode,
) -> Result<Matrix<T>> {
    let n = prototypes.n_way();
    let mut out = Matrix::zeros(queries.len(), n);
    for (i, q) in queries.iter().enumerate() {
        let q = q.as_ref();
        check_len("query feature", prototypes.dim(), q.len())?;
        for k in 0..n {
            out.row_mut(i)[k] = distance(q, prototypes.get(k), mode);
        }
    }
    Ok(out)
}

/// `ln Σ exp(x_k)`, max-shifted.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Log of the softmax of negated energies.
pub fn log_posterior<T: Scalar>(energies: &[T]) -> Vec<T> {
    let min = energies.iter().copied().fold(T::infinity(), T::min);
    let shifted: Vec<T> = energies.iter().map(|&e| min - e).collect();
    let lse = log_sum_exp(&shifted);
    shifted.into_iter().map(|s| s - lse).collect()
}

/// Softmax of negated energies.
pub fn posterior<T: Scalar>(energies: &[T]) -> Vec<T> {
    log_posterior(energies).into_iter().map(T::exp).collect()
}

/// Largest posterior probability.
pub fn certainty<T: Scalar>(p: &[T]) -> T {
    p.iter().copied().fold(T::zero(), T::max)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-query posteriors of one modality with the distances they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix<T> {
    pub distances: Matrix<T>,
    pub log_probs: Matrix<T>,
    pub probs: Matrix<T>,
}

impl<T: Scalar> PosteriorMatrix<T> {
    pub fn from_distances(distances: Matrix<T>) -> Self {
        let (m, n) = (distances.rows(), distances.cols());
        let mut log_probs = Matrix::zeros(m, n);
        let mut probs = Matrix::zeros(m, n);
        for i in 0..m {
            let lp = log_posterior(distances.row(i));
            for (k, v) in lp.into_iter().enumerate() {
                log_probs.row_mut(i)[k] = v;
                probs.row_mut(i)[k] = v.exp();
            }
        }
        Self {
            distances,
            log_probs,
            probs,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.probs.rows()
    }

    pub fn certainties(&self) -> Vec<T> {
        self.probs.iter_rows().map(certainty).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter_rows().map(argmax).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prototypes_are_class_means() {
        let one = compute_prototypes(&[vec![1.0, 2.0]], &[0], 1).unwrap();
        assert_eq!(one.get(0), &[1.0, 2.0]);
        let sym = compute_prototypes(&[vec![1.5, -2.0], vec![-1.5, 2.0]], &[0, 0], 1).unwrap();
        assert_eq!(sym.get(0), &[0.0, 0.0]);
        let three = [vec![0.3, 1.0], vec![0.6, -4.0], vec![1.2, 0.5]];
        let p = compute_prototypes(&three, &[0, 0, 0], 1).unwrap();
        let oracle: [f64; 2] = [(0.3 + 0.6 + 1.2) / 3.0, (1.0 - 4.0 + 0.5) / 3.0];
        for (a, b) in p.get(0).iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(
            compute_prototypes(&[vec![1.0]], &[0], 2),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn distance_hand_values() {
        let t = Prototypes(Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]));
        let sq = distances(&[vec![0.0, 0.0]], &t, DistanceMode::SqEuclidean).unwrap();
        assert_eq!(sq.row(0), &[25.0, 0.0]);
        let e = distances(&[vec![0.0, 0.0]], &t, DistanceMode::Euclidean).unwrap();
        assert_eq!(e.row(0), &[5.0, 0.0]);
        let swapped = Prototypes(Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]));
        let sw = distances(&[vec![0.0, 0.0]], &swapped, DistanceMode::SqEuclidean).unwrap();
        assert_eq!(sw.row(0), &[0.0, 25.0]);
        assert!(distances(&[vec![0.0]], &t, DistanceMode::SqEuclidean).is_err());
    }

    #[test]
    fn posterior_hand_values() {
        let p = posterior(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(certainty(&p), p[0]);
        let u = posterior(&[2.5f64; 5]);
        assert!(u.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!((certainty(&u) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn posterior_survives_huge_offset() {
        let psi = [0.1, 2.0, 0.7];
        let shifted: Vec<f64> = psi.iter().map(|v| v + 1000.0).collect();
        for (a, b) in posterior(&psi).iter().zip(posterior(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn works_in_single_precision() {
        let p = posterior(&[0.0f32, 3f32.ln()]);
        assert!((p[0] - 0.75).abs() < 1e-6);
    }

    fn row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..20.0, 2..12)
    }

    proptest! {
        #[test]
        fn posterior_on_simplex(psi in row()) {
            let p = posterior(&psi);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn shift_invariance(psi in row(), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = psi.iter().map(|v| v + c).collect();
            for (a, b) in posterior(&psi).iter().zip(posterior(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn lowering_one_distance_raises_its_mass(psi in row(), pick in 0usize..12, delta in 0.01f64..5.0) {
            let k = pick % psi.len();
            let mut lowered = psi.clone();
            lowered[k] -= delta;
            prop_assert!(posterior(&lowered)[k] > posterior(&psi)[k]);
        }

        #[test]
        fn certainty_at_least_uniform(psi in row()) {
            let p = posterior(&psi);
            let n = p.len() as f64;
            prop_assert!(certainty(&p) >= 1.0 / n - 1e-12);
        }

        #[test]
        fn certainty_permutation_invariant(psi in row()) {
            let p = posterior(&psi);
            let mut rev = p.clone();
            rev.reverse();
            prop_assert_eq!(certainty(&p), certainty(&rev));
        }
    }
}
