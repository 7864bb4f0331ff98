//! Orthogonal finetuning adapters.
//!
//! A layer with frozen weight `W⁰` (`d x n`, neurons as columns) is adapted
//! by a learned orthogonal `R` acting on the left: `z = (R·W⁰)ᵀ x`. `R` is
//! block-diagonal with `r` equal blocks, each the Cayley image
//! `(I + Q)(I − Q)⁻¹` of a skew-symmetric `Q`. Three modes are supported:
//!
//! * `Oft`: plain orthogonal finetuning.
//! * `Coft`: the skew parameters are kept inside a Frobenius ball of radius
//!   `eps_prime`. Since `R − I = 2Q(I − Q)⁻¹` and `‖(I − Q)⁻¹‖₂ ≤ 1` for
//!   skew `Q`, the rotation deviation obeys `‖R − I‖_F ≤ 2‖Q‖_F`, which is
//!   also the first-order estimate. Pick `eps_prime ≈ ε / 2` to bound the
//!   deviation of `R` by `ε`.
//! * `Rescaled`: adds a positive per-neuron scale `sᵢ = exp(θᵢ)` applied
//!   after the rotation, `z = (R·W⁰·D)ᵀ x`.
//!
//! Every adapter starts from `Q = 0` and `θ = 0`, which is an exact no-op.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{OftError, Result};
use crate::matcore::{self, Lu, Matrix};
use crate::scalar::Scalar;

/// Free parameters of one skew-symmetric block: the strict upper triangle,
/// stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewParams<T> {
    dim: usize,
    free: Vec<T>,
}

/// Number of free parameters in a `dim x dim` skew-symmetric block.
pub fn skew_free_count(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

impl<T: Scalar> SkewParams<T> {
    pub fn zeros(dim: usize) -> Self {
        SkewParams {
            dim,
            free: vec![T::zero(); skew_free_count(dim)],
        }
    }

    pub fn from_free(dim: usize, free: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(OftError::InvalidConfig("skew block dimension must be at least 1".into()));
        }
        if free.len() != skew_free_count(dim) {
            return Err(OftError::dims("SkewParams", skew_free_count(dim), free.len()));
        }
        if free.iter().any(|v| !v.is_finite()) {
            return Err(OftError::NonFinite("skew parameters"));
        }
        Ok(SkewParams { dim, free })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn free(&self) -> &[T] {
        &self.free
    }

    pub(crate) fn free_mut(&mut self) -> &mut [T] {
        &mut self.free
    }

    /// Position of entry `(i, j)`, `i < j`, in the free vector.
    pub fn index_of(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.dim);
        i * self.dim - i * (i + 1) / 2 + (j - i - 1)
    }

    /// The full block `Q`, with `Q = −Qᵀ` exactly.
    pub fn to_matrix(&self) -> Matrix<T> {
        let b = self.dim;
        let mut q = Matrix::zeros(b, b);
        let mut it = self.free.iter();
        for i in 0..b {
            for j in i + 1..b {
                let v = *it.next().expect("free length");
                q.set(i, j, v);
                q.set(j, i, -v);
            }
        }
        q
    }

    /// Squared Frobenius norm of the materialized block (each free entry
    /// appears twice).
    pub fn frobenius_sq(&self) -> T {
        let s: T = self.free.iter().map(|&v| v * v).sum();
        s + s
    }
}

/// Cayley map of one block together with the LU factors of `I − Q`, which
/// the gradient reuses.
#[derive(Debug, Clone)]
pub(crate) struct CayleyBlock<T> {
    pub rotation: Matrix<T>,
    pub lu: Lu<T>,
}

pub(crate) fn cayley_block<T: Scalar>(q: &SkewParams<T>) -> Result<CayleyBlock<T>> {
    let b = q.dim;
    let qm = q.to_matrix();
    let eye = Matrix::identity(b);
    let lhs = eye.sub(&qm)?;
    let rhs = eye.add(&qm)?;
    let lu = Lu::factor(&lhs)?;
    // (I+Q) and (I−Q)⁻¹ commute, so solving (I−Q)·R = I+Q gives the same R.
    let rotation = lu.solve(&rhs)?;
    Ok(CayleyBlock { rotation, lu })
}

/// `R = (I + Q)(I − Q)⁻¹`.
pub fn cayley<T: Scalar>(q: &SkewParams<T>) -> Result<Matrix<T>> {
    Ok(cayley_block(q)?.rotation)
}

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|k| d % k == 0).collect()
}

/// Block-diagonal orthogonal transform `diag(R₁, …, R_r)` of size `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoTransform<T> {
    dim: usize,
    num_blocks: usize,
    shared: bool,
    blocks: Vec<SkewParams<T>>,
}

impl<T: Scalar> OrthoTransform<T> {
    /// Identity transform with `num_blocks` zero skew blocks (one stored
    /// block when `shared`).
    pub fn new(dim: usize, num_blocks: usize, shared: bool) -> Result<Self> {
        if dim == 0 {
            return Err(OftError::InvalidConfig("dimension must be at least 1".into()));
        }
        if num_blocks == 0 || dim % num_blocks != 0 {
            return Err(OftError::IndivisibleBlocks {
                d: dim,
                r: num_blocks,
                divisors: divisors(dim),
            });
        }
        let b = dim / num_blocks;
        let stored = if shared { 1 } else { num_blocks };
        Ok(OrthoTransform {
            dim,
            num_blocks,
            shared,
            blocks: vec![SkewParams::zeros(b); stored],
        })
    }

    pub fn from_blocks(
        dim: usize,
        num_blocks: usize,
        shared: bool,
        blocks: Vec<SkewParams<T>>,
    ) -> Result<Self> {
        let mut t = Self::new(dim, num_blocks, shared)?;
        if blocks.len() != t.blocks.len() {
            return Err(OftError::dims("OrthoTransform blocks", t.blocks.len(), blocks.len()));
        }
        let b = t.block_size();
        if let Some(bad) = blocks.iter().find(|blk| blk.dim != b) {
            return Err(OftError::dims("OrthoTransform block size", b, bad.dim));
        }
        t.blocks = blocks;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn block_size(&self) -> usize {
        self.dim / self.num_blocks
    }

    /// Stored blocks: `num_blocks` of them, or one when shared.
    pub fn blocks(&self) -> &[SkewParams<T>] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [SkewParams<T>] {
        &mut self.blocks
    }

    /// Stored block that occupies diagonal position `pos`.
    pub fn block_at(&self, pos: usize) -> &SkewParams<T> {
        if self.shared {
            &self.blocks[0]
        } else {
            &self.blocks[pos]
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.len() * skew_free_count(self.block_size())
    }

    /// Flattened free parameters, block after block.
    pub fn params(&self) -> Vec<T> {
        self.blocks.iter().flat_map(|b| b.free.iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(OftError::dims("OrthoTransform::set_params", self.num_params(), params.len()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(OftError::NonFinite("skew parameters"));
        }
        let per = skew_free_count(self.block_size());
        for (blk, chunk) in self.blocks.iter_mut().zip(params.chunks(per.max(1))) {
            blk.free.copy_from_slice(&chunk[..per]);
        }
        Ok(())
    }

    /// Frobenius norm of the full block-diagonal skew matrix; a shared
    /// block counts once per diagonal position.
    pub fn skew_norm(&self) -> T {
        let stored: T = self.blocks.iter().map(SkewParams::frobenius_sq).sum();
        let copies = if self.shared { self.num_blocks } else { 1 };
        (stored * T::from_usize(copies).unwrap()).sqrt()
    }

    /// The full block-diagonal skew matrix.
    pub fn skew_matrix(&self) -> Matrix<T> {
        let b = self.block_size();
        let mut q = Matrix::zeros(self.dim, self.dim);
        for pos in 0..self.num_blocks {
            q.set_block(pos * b, pos * b, &self.block_at(pos).to_matrix());
        }
        q
    }

    pub(crate) fn cayley_blocks(&self) -> Result<Vec<CayleyBlock<T>>> {
        self.blocks.iter().map(cayley_block).collect()
    }

    /// Cayley rotation of every stored block.
    pub fn block_rotations(&self) -> Result<Vec<Matrix<T>>> {
        Ok(self.cayley_blocks()?.into_iter().map(|c| c.rotation).collect())
    }

    /// The dense `d x d` matrix `R`.
    pub fn materialize(&self) -> Result<Matrix<T>> {
        let rots = self.block_rotations()?;
        Ok(assemble(self.dim, self.num_blocks, self.shared, &rots))
    }

    /// `R · w` computed block by block.
    pub fn apply_left(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        let rots = self.block_rotations()?;
        apply_blocks(self, &rots, w)
    }

    /// `‖R − I‖_F`.
    pub fn deviation_from_identity(&self) -> Result<T> {
        let rots = self.block_rotations()?;
        let b = self.block_size();
        let eye = Matrix::identity(b);
        let mut acc = T::zero();
        for pos in 0..self.num_blocks {
            let r = if self.shared { &rots[0] } else { &rots[pos] };
            let dev = r.sub(&eye)?.frobenius_norm();
            acc += dev * dev;
        }
        Ok(acc.sqrt())
    }
}

pub(crate) fn assemble<T: Scalar>(
    dim: usize,
    num_blocks: usize,
    shared: bool,
    rots: &[Matrix<T>],
) -> Matrix<T> {
    let b = dim / num_blocks;
    let mut out = Matrix::zeros(dim, dim);
    for pos in 0..num_blocks {
        let r = if shared { &rots[0] } else { &rots[pos] };
        out.set_block(pos * b, pos * b, r);
    }
    out
}

pub(crate) fn apply_blocks<T: Scalar>(
    t: &OrthoTransform<T>,
    rots: &[Matrix<T>],
    w: &Matrix<T>,
) -> Result<Matrix<T>> {
    if w.rows() != t.dim {
        return Err(OftError::dims("apply_left", format!("{} rows", t.dim), w.rows()));
    }
    let b = t.block_size();
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for pos in 0..t.num_blocks {
        let r = if t.shared { &rots[0] } else { &rots[pos] };
        let slab = w.block(pos * b, 0, b, w.cols());
        out.set_block(pos * b, 0, &matcore::matmul(r, &slab)?);
    }
    Ok(out)
}

/// `materialize` as a free function.
pub fn materialize<T: Scalar>(t: &OrthoTransform<T>) -> Result<Matrix<T>> {
    t.materialize()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode<T> {
    Oft,
    Coft { eps_prime: T },
    Rescaled,
}

impl<T> Mode<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Oft => "oft",
            Mode::Coft { .. } => "coft",
            Mode::Rescaled => "rescaled_oft",
        }
    }
}

impl<T> fmt::Display for Mode<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One layer's adapter: transform, mode and (in rescaled mode) the
/// log-magnitudes `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter<T> {
    d: usize,
    n: usize,
    transform: OrthoTransform<T>,
    mode: Mode<T>,
    log_scales: Option<Vec<T>>,
}

impl<T: Scalar> Adapter<T> {
    /// Fresh identity adapter for a `d x n` weight.
    pub fn new(d: usize, n: usize, num_blocks: usize, shared: bool, mode: Mode<T>) -> Result<Self> {
        if n == 0 {
            return Err(OftError::InvalidConfig("neuron count must be at least 1".into()));
        }
        if let Mode::Coft { eps_prime } = mode {
            if !(eps_prime > T::zero() && eps_prime.is_finite()) {
                return Err(OftError::InvalidConfig(format!(
                    "eps_prime must be a positive finite number, got {eps_prime}"
                )));
            }
        }
        let transform = OrthoTransform::new(d, num_blocks, shared)?;
        let log_scales = matches!(mode, Mode::Rescaled).then(|| vec![T::zero(); n]);
        Ok(Adapter {
            d,
            n,
            transform,
            mode,
            log_scales,
        })
    }

    pub fn oft(d: usize, n: usize, num_blocks: usize) -> Result<Self> {
        Self::new(d, n, num_blocks, false, Mode::Oft)
    }

    pub fn coft(d: usize, n: usize, num_blocks: usize, eps_prime: T) -> Result<Self> {
        Self::new(d, n, num_blocks, false, Mode::Coft { eps_prime })
    }

    pub fn rescaled(d: usize, n: usize, num_blocks: usize) -> Result<Self> {
        Self::new(d, n, num_blocks, false, Mode::Rescaled)
    }

    /// Rebuilds an adapter from stored parts, re-checking every invariant.
    pub fn from_parts(
        n: usize,
        transform: OrthoTransform<T>,
        mode: Mode<T>,
        log_scales: Option<Vec<T>>,
    ) -> Result<Self> {
        let mut a = Self::new(
            transform.dim(),
            n,
            transform.num_blocks(),
            transform.is_shared(),
            mode,
        )?;
        a.transform = transform;
        match (&mut a.log_scales, log_scales) {
            (Some(dst), Some(src)) => {
                if src.len() != n {
                    return Err(OftError::dims("Adapter log scales", n, src.len()));
                }
                if src.iter().any(|v| !v.is_finite()) {
                    return Err(OftError::NonFinite("log scales"));
                }
                *dst = src;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(OftError::InvalidConfig("rescaled adapter needs log scales".into()))
            }
            (None, Some(_)) => {
                return Err(OftError::InvalidConfig(format!(
                    "{} adapter cannot carry log scales",
                    a.mode
                )))
            }
        }
        Ok(a)
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn num_neurons(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> Mode<T> {
        self.mode
    }

    pub fn transform(&self) -> &OrthoTransform<T> {
        &self.transform
    }

    /// `θ`, present only in rescaled mode.
    pub fn log_scales(&self) -> Option<&[T]> {
        self.log_scales.as_deref()
    }

    /// `sᵢ = exp(θᵢ)`; all ones outside rescaled mode.
    pub fn scales(&self) -> Vec<T> {
        match &self.log_scales {
            Some(theta) => theta.iter().map(|t| t.exp()).collect(),
            None => vec![T::one(); self.n],
        }
    }

    pub fn num_skew_params(&self) -> usize {
        self.transform.num_params()
    }

    pub fn num_params(&self) -> usize {
        self.num_skew_params() + self.log_scales.as_ref().map_or(0, Vec::len)
    }

    /// Trainable parameters: skew free parameters block by block, then `θ`.
    pub fn params(&self) -> Vec<T> {
        let mut p = self.transform.params();
        if let Some(theta) = &self.log_scales {
            p.extend_from_slice(theta);
        }
        p
    }

    /// Overwrites all trainable parameters. Does not project; see
    /// [`Adapter::project_in_place`].
    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(OftError::dims("Adapter::set_params", self.num_params(), params.len()));
        }
        let k = self.num_skew_params();
        self.transform.set_params(&params[..k])?;
        if let Some(theta) = &mut self.log_scales {
            if params[k..].iter().any(|v| !v.is_finite()) {
                return Err(OftError::NonFinite("log scales"));
            }
            theta.copy_from_slice(&params[k..]);
        }
        Ok(())
    }

    /// `‖Q‖_F` over the whole block-diagonal skew matrix.
    pub fn skew_norm(&self) -> T {
        self.transform.skew_norm()
    }

    pub fn rotation(&self) -> Result<Matrix<T>> {
        self.transform.materialize()
    }

    pub fn rotation_deviation(&self) -> Result<T> {
        self.transform.deviation_from_identity()
    }

    fn check_weight(&self, w0: &Matrix<T>, op: &'static str) -> Result<()> {
        if w0.shape() != (self.d, self.n) {
            return Err(OftError::dims(
                op,
                format!("weight {}x{}", self.d, self.n),
                format!("weight {}x{}", w0.rows(), w0.cols()),
            ));
        }
        Ok(())
    }

    /// The static weight `R·W⁰` (times `D` when rescaled).
    pub fn merge(&self, w0: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_weight(w0, "merge")?;
        let rotated = self.transform.apply_left(w0)?;
        match &self.log_scales {
            Some(_) => rotated.scale_columns(&self.scales()),
            None => Ok(rotated),
        }
    }

    /// `z = (R·W⁰·D)ᵀ x` for a `d x batch` input.
    pub fn forward(&self, w0: &Matrix<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_weight(w0, "forward")?;
        if x.rows() != self.d {
            return Err(OftError::dims("forward", format!("input rows {}", self.d), x.rows()));
        }
        matcore::matmul_tn(&self.merge(w0)?, x)
    }

    /// Projects the skew parameters back into the coft ball. Returns whether
    /// anything changed.
    pub fn project_in_place(&mut self) -> Result<bool> {
        let eps = match self.mode {
            Mode::Coft { eps_prime } => eps_prime,
            other => return Err(OftError::NotCoft(other.name())),
        };
        let norm = self.skew_norm();
        if norm <= eps {
            return Ok(false);
        }
        let factor = eps / norm;
        for blk in self.transform.blocks_mut() {
            blk.free_mut().iter_mut().for_each(|v| *v *= factor);
        }
        // Rounding in the rescale can leave the norm a few ulps outside.
        while self.skew_norm() > eps {
            let shrink = T::one() - T::epsilon() * T::lit(4.0);
            for blk in self.transform.blocks_mut() {
                blk.free_mut().iter_mut().for_each(|v| *v *= shrink);
            }
        }
        Ok(true)
    }

    /// Euclidean projection onto `{‖Q‖_F ≤ eps_prime}`.
    pub fn coft_project(&self) -> Result<Self> {
        let mut out = self.clone();
        out.project_in_place()?;
        Ok(out)
    }

    /// Switches to rescaled mode, adding zero log scales if absent. The
    /// skew parameters are kept as they are.
    pub fn into_rescaled(mut self) -> Self {
        if self.log_scales.is_none() {
            self.log_scales = Some(vec![T::zero(); self.n]);
        }
        self.mode = Mode::Rescaled;
        self
    }
}

/// Free-function form of [`Adapter::coft_project`].
pub fn coft_project<T: Scalar>(a: &Adapter<T>) -> Result<Adapter<T>> {
    a.coft_project()
}

/// Matrix view of a convolution kernel of shape `(c_out, c_in, k_h, k_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvView {
    pub d: usize,
    pub n: usize,
    pub suggested_r: usize,
}

/// Dimensions of the flattened kernel: one column per output filter, and
/// one block per input channel so each rotation mixes only the `k_h·k_w`
/// taps of a single channel.
pub fn conv_view(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Result<ConvView> {
    if c_out == 0 || c_in == 0 || k_h == 0 || k_w == 0 {
        return Err(OftError::InvalidConfig("convolution dimensions must be at least 1".into()));
    }
    Ok(ConvView {
        d: c_in * k_h * k_w,
        n: c_out,
        suggested_r: c_in,
    })
}

/// Flattens a kernel stored `[c_out][c_in][k_h][k_w]` into the `d x n`
/// weight of [`conv_view`]: row `(ci·k_h + y)·k_w + x`, column `co`.
pub fn flatten_kernel<T: Scalar>(
    kernel: &[T],
    c_out: usize,
    c_in: usize,
    k_h: usize,
    k_w: usize,
) -> Result<Matrix<T>> {
    let view = conv_view(c_out, c_in, k_h, k_w)?;
    if kernel.len() != view.d * view.n {
        return Err(OftError::dims("flatten_kernel", view.d * view.n, kernel.len()));
    }
    let m = Matrix::from_fn(view.d, view.n, |row, co| kernel[co * view.d + row]);
    if !m.is_finite() {
        return Err(OftError::NonFinite("kernel"));
    }
    Ok(m)
}

/// Valid-padding, stride-1 patches of a `[c_in][h][w]` image as columns,
/// ordered to match [`flatten_kernel`]. Output positions run row-major.
pub fn im2col<T: Scalar>(
    image: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
) -> Result<Matrix<T>> {
    if image.len() != c_in * h * w {
        return Err(OftError::dims("im2col", c_in * h * w, image.len()));
    }
    if k_h > h || k_w > w || k_h == 0 || k_w == 0 {
        return Err(OftError::InvalidConfig("kernel larger than image".into()));
    }
    let (oh, ow) = (h - k_h + 1, w - k_w + 1);
    let d = c_in * k_h * k_w;
    Ok(Matrix::from_fn(d, oh * ow, |row, pos| {
        let ci = row / (k_h * k_w);
        let y = (row / k_w) % k_h;
        let x = row % k_w;
        let (py, px) = (pos / ow, pos % ow);
        image[(ci * h + py + y) * w + px + x]
    }))
}

/// Trainable-parameter budget of an adapter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMethod {
    Oft,
    OftShared,
    Lora { rank: usize },
}

/// `d(d/r − 1)/2` for block-diagonal OFT, `(d/r)(d/r − 1)/2` with block
/// sharing, `r'(d + n)` for a rank-`r'` low-rank update.
pub fn param_count(d: usize, n: usize, r: usize, method: ParamMethod) -> Result<usize> {
    let block = |d: usize, r: usize| -> Result<usize> {
        if r == 0 || d == 0 || d % r != 0 {
            return Err(OftError::IndivisibleBlocks {
                d,
                r,
                divisors: divisors(d),
            });
        }
        Ok(d / r)
    };
    match method {
        ParamMethod::Oft => Ok(r * skew_free_count(block(d, r)?)),
        ParamMethod::OftShared => Ok(skew_free_count(block(d, r)?)),
        ParamMethod::Lora { rank } => Ok(rank * (d + n)),
    }
}
