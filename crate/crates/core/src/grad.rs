//! Gradients of scalar losses with respect to adapter parameters.
//!
//! For `A = I − Q` the Cayley map `R = (I + Q)A⁻¹` has differential
//! `dR = 2·A⁻¹·dQ·A⁻¹` (use `I + R = 2A⁻¹`). Pulling a weight gradient
//! `G_R = ∂L/∂R` back through it gives `∂L/∂Q = 2·A⁻ᵀ·G_R·A⁻ᵀ`, and a free
//! parameter `q` at `(i, j)` receives `∂L/∂Q[i,j] − ∂L/∂Q[j,i]`. The LU
//! factors of `A` from the forward pass serve both solves.

use serde::{Deserialize, Serialize};

use crate::adapter::{apply_blocks, Adapter};
use crate::error::{OftError, Result};
use crate::matcore::{self, Lu, Matrix};
use crate::scalar::Scalar;

/// Scalar loss of a layer output `z` (`n x batch`).
pub trait Loss<T: Scalar> {
    fn value(&self, z: &Matrix<T>) -> Result<T>;
    /// `∂L/∂z`, same shape as `z`.
    fn gradient(&self, z: &Matrix<T>) -> Result<Matrix<T>>;
    /// `L(a) − L(b)`. Override when a form without cancellation exists.
    fn difference(&self, a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
        Ok(self.value(a)? - self.value(b)?)
    }
}

/// `½‖z − target‖²_F`.
#[derive(Debug, Clone)]
pub struct SquaredError<T> {
    pub target: Matrix<T>,
}

impl<T: Scalar> SquaredError<T> {
    pub fn new(target: Matrix<T>) -> Self {
        SquaredError { target }
    }
}

impl<T: Scalar> Loss<T> for SquaredError<T> {
    fn value(&self, z: &Matrix<T>) -> Result<T> {
        let r = z.sub(&self.target)?.frobenius_norm();
        Ok(T::lit(0.5) * r * r)
    }

    fn gradient(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        z.sub(&self.target)
    }

    /// `½⟨a − b, (a − t) + (b − t)⟩`.
    fn difference(&self, a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
        let (ra, rb) = (a.sub(&self.target)?, b.sub(&self.target)?);
        let dot = a
            .sub(b)?
            .as_slice()
            .iter()
            .zip(ra.as_slice().iter().zip(rb.as_slice()))
            .map(|(&d, (&x, &y))| d * (x + y))
            .sum::<T>();
        Ok(T::lit(0.5) * dot)
    }
}

/// Default central-difference step for unit-scale `f64` parameters.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Gradient with respect to [`Adapter::params`], given `∂L/∂W` for the
/// merged weight `W = R·W⁰·D`.
pub fn grad_from_weight_grad<T: Scalar>(
    a: &Adapter<T>,
    w0: &Matrix<T>,
    g_w: &Matrix<T>,
) -> Result<Vec<T>> {
    let (d, n) = (a.input_dim(), a.num_neurons());
    if w0.shape() != (d, n) || g_w.shape() != (d, n) {
        return Err(OftError::dims(
            "grad_from_weight_grad",
            format!("{d}x{n}"),
            format!("{}x{} / {}x{}", w0.rows(), w0.cols(), g_w.rows(), g_w.cols()),
        ));
    }
    if !g_w.is_finite() {
        return Err(OftError::NonFinite("weight gradient"));
    }
    let t = a.transform();
    let blocks = t.cayley_blocks()?;
    let b = t.block_size();
    let scales = a.scales();
    let scaled_w0 = match a.log_scales() {
        Some(_) => w0.scale_columns(&scales)?,
        None => w0.clone(),
    };

    let per_block = crate::adapter::skew_free_count(b);
    let mut grad = vec![T::zero(); a.num_params()];
    for pos in 0..t.num_blocks() {
        let stored = if t.is_shared() { 0 } else { pos };
        if per_block == 0 {
            continue;
        }
        let g_slab = g_w.block(pos * b, 0, b, n);
        let m_slab = scaled_w0.block(pos * b, 0, b, n);
        let g_r = matcore::matmul_nt(&g_slab, &m_slab)?;
        let g_q = skew_pullback(&blocks[stored].lu, &g_r)?;
        let out = &mut grad[stored * per_block..(stored + 1) * per_block];
        let mut k = 0;
        for i in 0..b {
            for j in i + 1..b {
                out[k] += g_q.get(i, j) - g_q.get(j, i);
                k += 1;
            }
        }
    }

    if a.log_scales().is_some() {
        let rots: Vec<Matrix<T>> = blocks.into_iter().map(|c| c.rotation).collect();
        let rotated = apply_blocks(t, &rots, w0)?;
        let offset = a.num_skew_params();
        for r in 0..d {
            for (c, (&rw, &g)) in rotated.row(r).iter().zip(g_w.row(r)).enumerate() {
                grad[offset + c] += rw * g;
            }
        }
        for (g, &s) in grad[offset..].iter_mut().zip(&scales) {
            *g *= s;
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OftError::NonFinite("adapter gradient"));
    }
    Ok(grad)
}

/// `2·A⁻ᵀ·G·A⁻ᵀ` from the LU factors of `A = I − Q`.
fn skew_pullback<T: Scalar>(lu: &Lu<T>, g_r: &Matrix<T>) -> Result<Matrix<T>> {
    let y = lu.solve_transpose(g_r)?;
    let zt = lu.solve(&y.transpose())?;
    Ok(zt.transpose().scale(T::lit(2.0)))
}

/// Directional derivative of the Cayley map at `q` along skew direction
/// `e` (a full `b x b` matrix): `2·A⁻¹·E·A⁻¹`.
pub fn cayley_derivative<T: Scalar>(
    q: &crate::adapter::SkewParams<T>,
    e: &Matrix<T>,
) -> Result<Matrix<T>> {
    let lu = crate::adapter::cayley_block(q)?.lu;
    let left = lu.solve(e)?;
    // left·A⁻¹ = (A⁻ᵀ·leftᵀ)ᵀ
    Ok(lu.solve_transpose(&left.transpose())?.transpose().scale(T::lit(2.0)))
}

/// Loss value and analytic gradient of `loss(forward(a, w0, x))`.
pub fn adapter_grad<T: Scalar>(
    a: &Adapter<T>,
    w0: &Matrix<T>,
    x: &Matrix<T>,
    loss: &dyn Loss<T>,
) -> Result<(T, Vec<T>)> {
    let z = a.forward(w0, x)?;
    let value = loss.value(&z)?;
    if !value.is_finite() {
        return Err(OftError::NonFinite("loss"));
    }
    let g_z = loss.gradient(&z)?;
    // z = Wᵀx  ⇒  ∂L/∂W = x·(∂L/∂z)ᵀ
    let g_w = matcore::matmul_nt(x, &g_z)?;
    Ok((value, grad_from_weight_grad(a, w0, &g_w)?))
}

/// Central differences of `objective` over every adapter parameter. Each
/// probe rebuilds the full rotation from scratch.
pub fn fd_gradient<T: Scalar>(
    a: &Adapter<T>,
    step: T,
    mut objective: impl FnMut(&Adapter<T>) -> Result<T>,
) -> Result<Vec<T>> {
    fd_core(a, step, |plus, minus| Ok(objective(plus)? - objective(minus)?))
}

fn fd_core<T: Scalar>(
    a: &Adapter<T>,
    step: T,
    mut delta: impl FnMut(&Adapter<T>, &Adapter<T>) -> Result<T>,
) -> Result<Vec<T>> {
    if !(step >= T::lit(1e-8) && step <= T::lit(1e-3)) {
        return Err(OftError::InvalidConfig(format!(
            "finite-difference step must lie in [1e-8, 1e-3], got {step}"
        )));
    }
    let base = a.params();
    let mut plus = a.clone();
    let mut minus = a.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut params = base.clone();
    for k in 0..base.len() {
        params[k] = base[k] + step;
        plus.set_params(&params)?;
        params[k] = base[k] - step;
        minus.set_params(&params)?;
        params[k] = base[k];
        let diff = delta(&plus, &minus)?;
        if !diff.is_finite() {
            return Err(OftError::NonFinite("loss at finite-difference probe"));
        }
        out.push(diff / (step + step));
    }
    Ok(out)
}

/// Finite-difference gradient of `loss(forward(a, w0, x))`, with the loss
/// change taken through [`Loss::difference`].
pub fn fd_oracle<T: Scalar>(
    a: &Adapter<T>,
    w0: &Matrix<T>,
    x: &Matrix<T>,
    loss: &dyn Loss<T>,
    step: T,
) -> Result<Vec<T>> {
    fd_core(a, step, |plus, minus| {
        loss.difference(&plus.forward(w0, x)?, &minus.forward(w0, x)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param_index: usize,
    pub step: f64,
    pub num_params: usize,
}

impl GradCheckReport {
    /// Compares gradients entrywise by `|a − f| / max(|f|, 1e-8)`.
    pub fn compare<T: Scalar>(analytic: &[T], fd: &[T], step: T) -> Result<Self> {
        if analytic.len() != fd.len() {
            return Err(OftError::dims("GradCheckReport", analytic.len(), fd.len()));
        }
        let mut worst = (0.0f64, 0usize);
        for (k, (&g, &f)) in analytic.iter().zip(fd).enumerate() {
            let (g, f) = (g.to_f64_lossy(), f.to_f64_lossy());
            let err = (g - f).abs() / f.abs().max(1e-8);
            if err > worst.0 || err.is_nan() {
                worst = (err, k);
            }
        }
        Ok(GradCheckReport {
            max_rel_err: worst.0,
            worst_param_index: worst.1,
            step: step.to_f64_lossy(),
            num_params: analytic.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Analytic vs central-difference check for one instance.
pub fn grad_check<T: Scalar>(
    a: &Adapter<T>,
    w0: &Matrix<T>,
    x: &Matrix<T>,
    loss: &dyn Loss<T>,
    step: T,
) -> Result<GradCheckReport> {
    let (_, analytic) = adapter_grad(a, w0, x, loss)?;
    let fd = fd_oracle(a, w0, x, loss, step)?;
    GradCheckReport::compare(&analytic, &fd, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{Mode, SkewParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn randomize(a: &mut Adapter<f64>, scale: f64, rng: &mut impl Rng) {
        let p: Vec<f64> = (0..a.num_params()).map(|_| rng.gen_range(-scale..scale)).collect();
        a.set_params(&p).unwrap();
    }

    #[test]
    fn deviation_loss_is_stationary_at_identity() {
        // With W⁰ = I and x = I, z = Rᵀ and ½‖z − I‖² = ½‖R − I‖².
        let a = Adapter::<f64>::oft(6, 6, 2).unwrap();
        let eye = Matrix::identity(6);
        let (value, g) = adapter_grad(&a, &eye, &eye, &SquaredError::new(eye.clone())).unwrap();
        assert_eq!(value, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cayley_derivative_at_zero_is_twice_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = 5;
        let free: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir = SkewParams::from_free(b, free.clone()).unwrap();
        let e = dir.to_matrix();
        let zero = SkewParams::zeros(b);
        let analytic = cayley_derivative(&zero, &e).unwrap();
        assert!(analytic.max_abs_diff(&e.scale(2.0)).unwrap() <= 1e-15);

        let h = 1e-6;
        let at = |t: f64| {
            let p = SkewParams::from_free(b, free.iter().map(|v| v * t).collect()).unwrap();
            crate::adapter::cayley(&p).unwrap()
        };
        let fd = at(h).sub(&at(-h)).unwrap().scale(1.0 / (2.0 * h));
        assert!(fd.max_abs_diff(&e.scale(2.0)).unwrap() <= 1e-8);
    }

    #[test]
    fn cayley_derivative_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let b = 4;
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = SkewParams::from_free(b, dir.clone()).unwrap().to_matrix();
        let analytic = cayley_derivative(&SkewParams::from_free(b, q.clone()).unwrap(), &e).unwrap();
        let h = 1e-6;
        let at = |t: f64| {
            let p: Vec<f64> = q.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            crate::adapter::cayley(&SkewParams::from_free(b, p).unwrap()).unwrap()
        };
        let fd = at(h).sub(&at(-h)).unwrap().scale(1.0 / (2.0 * h));
        assert!(fd.max_abs_diff(&analytic).unwrap() <= 1e-8);
    }

    #[test]
    fn analytic_matches_fd_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for mode in [Mode::Oft, Mode::Coft { eps_prime: 0.5 }, Mode::Rescaled] {
            for shared in [false, true] {
                let mut a = Adapter::new(12, 7, 3, shared, mode).unwrap();
                randomize(&mut a, 0.5, &mut rng);
                let w0 = random_mat(12, 7, &mut rng);
                let x = random_mat(12, 5, &mut rng);
                let target = random_mat(7, 5, &mut rng);
                let rep = grad_check(&a, &w0, &x, &SquaredError::new(target), DEFAULT_FD_STEP).unwrap();
                assert!(rep.max_rel_err <= 1e-5, "{mode} shared={shared}: {rep:?}");
                assert_eq!(rep.num_params, a.num_params());
            }
        }
    }

    #[test]
    fn shared_gradient_is_sum_over_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (d, n, r) = (8, 4, 4);
        let mut shared = Adapter::new(d, n, r, true, Mode::Oft).unwrap();
        randomize(&mut shared, 0.7, &mut rng);
        let w0 = random_mat(d, n, &mut rng);
        let x = random_mat(d, 3, &mut rng);
        let loss = SquaredError::new(random_mat(n, 3, &mut rng));

        // Untied adapter with every block set to the shared parameters.
        let mut untied = Adapter::new(d, n, r, false, Mode::Oft).unwrap();
        let p: Vec<f64> = std::iter::repeat(shared.params()).take(r).flatten().collect();
        untied.set_params(&p).unwrap();
        let (_, g_untied) = adapter_grad(&untied, &w0, &x, &loss).unwrap();
        let per = g_untied.len() / r;
        let summed: Vec<f64> = (0..per).map(|k| (0..r).map(|pos| g_untied[pos * per + k]).sum()).collect();

        let (_, g_shared) = adapter_grad(&shared, &w0, &x, &loss).unwrap();
        let fd = fd_oracle(&shared, &w0, &x, &loss, 1e-6).unwrap();
        for k in 0..per {
            assert!((g_shared[k] - summed[k]).abs() <= 1e-12);
            assert!((g_shared[k] - fd[k]).abs() <= 1e-6 * fd[k].abs().max(1.0));
        }
    }

    #[test]
    fn no_scale_gradients_outside_rescaled_mode() {
        let a = Adapter::<f64>::oft(6, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let w0 = random_mat(6, 4, &mut rng);
        let x = random_mat(6, 2, &mut rng);
        let (_, g) = adapter_grad(&a, &w0, &x, &SquaredError::new(random_mat(4, 2, &mut rng))).unwrap();
        assert_eq!(g.len(), a.num_skew_params());
    }

    #[test]
    fn fd_exact_for_quadratic_in_theta() {
        // L(θ) = (θ₀ − 3)² through an objective on the adapter.
        let mut a = Adapter::<f64>::rescaled(2, 1, 2).unwrap();
        a.set_params(&[0.25]).unwrap();
        let g = fd_gradient(&a, 1e-4, |p| Ok((p.params()[0] - 3.0).powi(2))).unwrap();
        assert!((g[0] - 2.0 * (0.25 - 3.0)).abs() <= 1e-9);
    }

    #[test]
    fn fd_at_zero_respects_skew_layout() {
        // A symmetric-in-z loss at Q = 0: the oracle's entries map one-to-one
        // onto the analytic antisymmetric pullback G[i,j] − G[j,i].
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let a = Adapter::<f64>::oft(4, 4, 1).unwrap();
        let w0 = random_mat(4, 4, &mut rng);
        let x = random_mat(4, 6, &mut rng);
        let loss = SquaredError::new(Matrix::zeros(4, 6).add(&random_mat(4, 6, &mut rng)).unwrap());
        let fd = fd_oracle(&a, &w0, &x, &loss, 1e-6).unwrap();
        let z = a.forward(&w0, &x).unwrap();
        let g_w = matcore::matmul_nt(&x, &loss.gradient(&z).unwrap()).unwrap();
        let g_r = matcore::matmul_nt(&g_w, &w0).unwrap();
        let mut k = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                let want = 2.0 * (g_r.get(i, j) - g_r.get(j, i));
                assert!((fd[k] - want).abs() <= 1e-6 * want.abs().max(1.0));
                k += 1;
            }
        }
    }

    #[test]
    fn fd_step_sweep_is_v_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut a = Adapter::new(8, 5, 2, false, Mode::Rescaled).unwrap();
        randomize(&mut a, 0.5, &mut rng);
        let w0 = random_mat(8, 5, &mut rng);
        let x = random_mat(8, 4, &mut rng);
        let loss = SquaredError::new(random_mat(5, 4, &mut rng));
        let errs: Vec<f64> = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| grad_check(&a, &w0, &x, &loss, h).unwrap().max_rel_err)
            .collect();
        // Truncation error shrinks ~h² until roundoff takes over near 1e-6.
        assert!(errs[1] <= errs[0], "{errs:?}");
        assert!(errs[2] <= 1e-5, "{errs:?}");
    }

    #[test]
    fn fd_rejects_bad_step() {
        let a = Adapter::<f64>::oft(2, 1, 1).unwrap();
        assert!(fd_gradient(&a, 1e-2, |_| Ok(0.0)).is_err());
        assert!(fd_gradient(&a, 1e-9, |_| Ok(0.0)).is_err());
        assert!(fd_gradient(&a, 1e-6, |_| Ok(f64::NAN)).is_err());
    }

    #[test]
    fn report_json_roundtrip() {
        let rep = GradCheckReport::compare(&[1.0, 2.0], &[1.0, 2.000001], 1e-6).unwrap();
        assert_eq!(rep.worst_param_index, 1);
        let back: GradCheckReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
