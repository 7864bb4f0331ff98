//! Hyperspherical energy of a layer's neurons.
//!
//! `HE(W) = Σ_{i≠j} ‖ŵᵢ − ŵⱼ‖⁻¹` over ordered pairs of unit-normalized
//! columns. The sum is invariant under any common orthogonal transform of
//! the columns and under positive per-column rescaling, which are exactly
//! the two operations an orthogonal adapter applies.

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{OftError, Result};
use crate::matcore::{normalize_columns, Matrix};
use crate::scalar::Scalar;

const REL_FLOOR: f64 = 1e-30;

pub fn hyperspherical_energy<T: Scalar>(w: &Matrix<T>) -> Result<T> {
    let n = w.cols();
    if n < 2 {
        return Err(OftError::dims("hyperspherical_energy", "at least 2 neurons", n));
    }
    let unit = normalize_columns(w)?.transpose();
    let mut total = T::zero();
    for i in 0..n {
        let ui = unit.row(i);
        for j in i + 1..n {
            let dist = ui
                .iter()
                .zip(unit.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            if dist < T::DEGENERATE_PAIR {
                return Err(OftError::DegeneratePair {
                    i,
                    j,
                    distance: dist.to_f64_lossy(),
                });
            }
            total += dist.recip();
        }
    }
    // Ordered pairs: each unordered pair counted twice.
    Ok(total + total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub he_before: f64,
    pub he_after: f64,
    pub abs_diff: f64,
    pub rel_diff: f64,
    pub num_neurons: usize,
}

impl EnergyReport {
    pub fn new(he_before: f64, he_after: f64, num_neurons: usize) -> Self {
        let abs_diff = (he_after - he_before).abs();
        EnergyReport {
            he_before,
            he_after,
            abs_diff,
            rel_diff: abs_diff / he_before.max(REL_FLOOR),
            num_neurons,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Energy of `before` vs `after`, two weights of the same layer.
pub fn compare<T: Scalar>(before: &Matrix<T>, after: &Matrix<T>) -> Result<EnergyReport> {
    if before.shape() != after.shape() {
        return Err(OftError::dims(
            "energy compare",
            format!("{}x{}", before.rows(), before.cols()),
            format!("{}x{}", after.rows(), after.cols()),
        ));
    }
    let b = hyperspherical_energy(before)?.to_f64_lossy();
    let a = hyperspherical_energy(after)?.to_f64_lossy();
    Ok(EnergyReport::new(b, a, before.cols()))
}

/// Energy of `w0` against the adapter's merged weight.
pub fn preservation_report<T: Scalar>(w0: &Matrix<T>, adapter: &Adapter<T>) -> Result<EnergyReport> {
    compare(w0, &adapter.merge(w0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::Mode;
    use crate::matcore::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_adapter(mode: Mode<f64>, rng: &mut impl Rng) -> Adapter<f64> {
        let mut a = Adapter::new(8, 6, 2, false, mode).unwrap();
        let p: Vec<f64> = (0..a.num_params()).map(|_| rng.gen_range(-0.8..0.8)).collect();
        a.set_params(&p).unwrap();
        a
    }

    #[test]
    fn hand_evaluated_values() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((hyperspherical_energy(&e).unwrap() - 2.0 / 2f64.sqrt()).abs() <= 1e-15);

        let anti = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        assert!((hyperspherical_energy::<f64>(&anti).unwrap() - 1.0).abs() <= 1e-15);

        let eye = Matrix::<f64>::identity(3);
        assert!((hyperspherical_energy(&eye).unwrap() - 6.0 / 2f64.sqrt()).abs() <= 1e-14);
    }

    #[test]
    fn degenerate_inputs() {
        let dup = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 1.0]]).unwrap();
        assert!(matches!(
            hyperspherical_energy(&dup),
            Err(OftError::DegeneratePair { i: 0, j: 1, .. })
        ));
        let zero = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            hyperspherical_energy(&zero),
            Err(OftError::ZeroNormNeuron { column: 1, .. })
        ));
        assert!(hyperspherical_energy(&Matrix::<f64>::zeros(3, 1)).is_err());
    }

    #[test]
    fn report_fields() {
        let r = EnergyReport::new(2.0, 2.5, 4);
        assert_eq!(r.abs_diff, 0.5);
        assert_eq!(r.rel_diff, 0.25);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["he_before", "he_after", "abs_diff", "rel_diff", "num_neurons"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(EnergyReport::new(0.0, 0.0, 2).rel_diff, 0.0);
    }

    #[test]
    fn adapters_preserve_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = random_mat(8, 6, &mut rng);
        for mode in [Mode::Oft, Mode::Coft { eps_prime: 0.05 }, Mode::Rescaled] {
            let mut a = random_adapter(mode, &mut rng);
            if let Mode::Coft { .. } = mode {
                a.project_in_place().unwrap();
            }
            let rep = preservation_report(&w0, &a).unwrap();
            assert!(rep.rel_diff <= 1e-8, "{mode}: {rep:?}");
            assert_eq!(rep.num_neurons, 6);
        }
        let fresh = Adapter::<f64>::oft(8, 6, 4).unwrap();
        assert_eq!(preservation_report(&w0, &fresh).unwrap().rel_diff, 0.0);
    }

    #[test]
    fn additive_low_rank_changes_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w0 = random_mat(8, 6, &mut rng);
        let u = random_mat(8, 1, &mut rng);
        let v = random_mat(1, 6, &mut rng);
        let uv = matmul(&u, &v).unwrap();
        let uv = uv.scale(0.1 * w0.frobenius_norm() / uv.frobenius_norm());
        let rep = compare(&w0, &w0.add(&uv).unwrap()).unwrap();
        assert!(rep.rel_diff > 1e-8, "{rep:?}");
    }

    #[test]
    fn collapsing_neurons_raises_energy() {
        let at = |angle: f64| {
            Matrix::from_rows(&[
                vec![1.0, angle.cos(), -1.0],
                vec![0.0, angle.sin(), 0.2],
            ])
            .unwrap()
        };
        let mut last = hyperspherical_energy(&at(1.5)).unwrap();
        for angle in [1.2, 0.9, 0.6, 0.3, 0.1] {
            let he = hyperspherical_energy(&at(angle)).unwrap();
            assert!(he > last);
            last = he;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn invariances(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = random_mat(6, 5, &mut rng);
                let he = hyperspherical_energy(&w).unwrap();

                let mut perm: Vec<usize> = (0..5).collect();
                perm.reverse();
                perm.swap(0, 2);
                let permuted = Matrix::from_fn(6, 5, |r, c| w.get(r, perm[c]));
                prop_assert!((hyperspherical_energy(&permuted).unwrap() - he).abs() <= 1e-10 * he);

                let mut t = crate::adapter::OrthoTransform::new(6, 1, false).unwrap();
                let p: Vec<f64> = (0..t.num_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                t.set_params(&p).unwrap();
                let rotated = t.apply_left(&w).unwrap();
                prop_assert!((hyperspherical_energy(&rotated).unwrap() - he).abs() <= 1e-10 * he);

                let scales: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..10.0)).collect();
                let scaled = w.scale_columns(&scales).unwrap();
                prop_assert!((hyperspherical_energy(&scaled).unwrap() - he).abs() <= 1e-10 * he);
            }
        }
    }
}
