//! Forward kernels shared by the tape and by direct (non-recorded) callers.

use super::tensor::numel;
use super::{NumericsError, Real, Tensor};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major `rows x cols`.
    pub fn rm(cols: usize) -> Self {
        Self {
            row: cols as isize,
            col: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn rm_t(cols: usize) -> Self {
        Self {
            row: 1,
            col: cols as isize,
        }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows.saturating_sub(1)) * self.row as usize + (cols.saturating_sub(1)) * self.col as usize
    }
}

/// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || sa.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || sb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(sc.max_offset(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every addressed element was bounds-checked above; the output
    // slice is borrowed mutably so it cannot alias the inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        Strides::rm(k),
        b.data(),
        Strides::rm(n),
        T::zero(),
        &mut out,
        Strides::rm(n),
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn last_extent<T: Real>(x: &Tensor<T>) -> usize {
    x.shape().last().copied().unwrap_or(1)
}

/// Softmax along the last axis, computed with max subtraction.
pub fn softmax_lastaxis<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_extent(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Layer-norm intermediates kept for the backward pass.
pub(crate) struct LayerNormParts<T> {
    pub out: Tensor<T>,
    pub normalized: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_parts<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<LayerNormParts<T>, NumericsError> {
    let d = last_extent(x);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if !(eps > T::zero()) {
        return Err(NumericsError::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let rows = x.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (r, row) in x.data().chunks(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        let base = r * d;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            normalized[base + j] = xh;
            out[base + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(LayerNormParts {
        out: Tensor::from_parts(x.shape().to_vec(), out),
        normalized,
        rstd,
    })
}

/// Normalizes every last-axis vector to zero mean and unit (biased) variance,
/// then applies the affine `gamma * x + beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NumericsError> {
    layer_norm_parts(x, gamma, beta, eps).map(|p| p.out)
}

/// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Half-pixel-center sampling positions: `src = (dst + 0.5) * in / out - 0.5`,
/// clamped to the valid range (edge replication).
pub(crate) fn resize_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::of(src - lo as f64),
            }
        })
        .collect()
}

/// Geometry of a resize over `[..., h, w, c]`.
pub(crate) struct ResizeGeometry<T> {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub rows: Vec<Tap<T>>,
    pub cols: Vec<Tap<T>>,
}

impl<T: Real> ResizeGeometry<T> {
    pub fn new(shape: &[usize], out_h: usize, out_w: usize) -> Result<Self, NumericsError> {
        if shape.len() < 3 || out_h == 0 || out_w == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "bilinear_resize expects [..., h, w, c] input and positive output extents, got {shape:?} -> {out_h}x{out_w}"
            )));
        }
        let r = shape.len();
        let (in_h, in_w, channels) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        Ok(Self {
            batch: numel(&shape[..r - 3]),
            in_h,
            in_w,
            channels,
            rows: resize_taps(in_h, out_h),
            cols: resize_taps(in_w, out_w),
        })
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        let r = in_shape.len();
        let mut s = in_shape[..r - 3].to_vec();
        s.extend([self.rows.len(), self.cols.len(), self.channels]);
        s
    }
}

/// Bilinear resize of `[..., h, w, c]` images with half-pixel centers.
///
/// Evaluated in lerp form so that constant regions stay exactly constant.
pub fn bilinear_resize<T: Real>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, NumericsError> {
    let geo = ResizeGeometry::<T>::new(img.shape(), out_h, out_w)?;
    if geo.in_h == out_h && geo.in_w == out_w {
        return Ok(img.clone());
    }
    let c = geo.channels;
    let in_plane = geo.in_h * geo.in_w * c;
    let out_plane = out_h * out_w * c;
    let mut out = vec![T::zero(); geo.batch * out_plane];
    for b in 0..geo.batch {
        let src = &img.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        for (oy, ty) in geo.rows.iter().enumerate() {
            for (ox, tx) in geo.cols.iter().enumerate() {
                for ch in 0..c {
                    let at = |y: usize, x: usize| src[(y * geo.in_w + x) * c + ch];
                    let top = at(ty.lo, tx.lo) + tx.frac * (at(ty.lo, tx.hi) - at(ty.lo, tx.lo));
                    let bot = at(ty.hi, tx.lo) + tx.frac * (at(ty.hi, tx.hi) - at(ty.hi, tx.lo));
                    dst[(oy * out_w + ox) * c + ch] = top + ty.frac * (bot - top);
                }
            }
        }
    }
    Ok(Tensor::from_parts(geo.out_shape(img.shape()), out))
}

fn check_prob_matrix<T: Real>(op: &'static str, p: &Tensor<T>) -> Result<(usize, usize), NumericsError> {
    match p.shape() {
        &[b, k] => Ok((b, k)),
        other => Err(NumericsError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<(), NumericsError> {
    if labels.len() != batch {
        return Err(NumericsError::LabelCount {
            labels: labels.len(),
            batch,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NumericsError::InvalidLabel { label: bad, classes });
    }
    Ok(())
}

/// `max(p, PROB_FLOOR)` that keeps NaN, so a diverged forward pass is not
/// masked as a large finite loss.
pub fn floor_prob<T: Real>(p: T) -> T {
    let floor = T::of(PROB_FLOOR);
    if p < floor {
        floor
    } else {
        p
    }
}

/// Mean over the batch of `-ln p[i, y_i]`, with probabilities floored at
/// [`PROB_FLOOR`].
pub fn cross_entropy<T: Real>(p: &Tensor<T>, labels: &[usize]) -> Result<T, NumericsError> {
    let (b, k) = check_prob_matrix("cross_entropy", p)?;
    check_labels(labels, b, k)?;
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -floor_prob(p.data()[i * k + y]).ln())
        .sum();
    Ok(total / T::of(b as f64))
}

/// Mean over the batch of `sum_k p_k (ln p_k - ln q_k)`.
pub fn kl_divergence<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T, NumericsError> {
    let (b, _) = check_prob_matrix("kl_divergence", p)?;
    if p.shape() != q.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "kl_divergence",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let total: T = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&pk, &qk)| pk * (floor_prob(pk).ln() - floor_prob(qk).ln()))
        .sum();
    Ok(total / T::of(b as f64))
}
