//! Dense row-major tensors and the finite-difference gradient oracle.
//!
//! Images use the channels-first `[C, H, W]` convention (batched: `[N, C, H, W]`).
//! Training runs in `f32`; the gradient checker instantiates the same layers in
//! `f64`, which is why everything numeric is generic over [`Real`].

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{invalid, shape_err, Error, Result};

/// Floating point element type usable in tensors and layers.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
    + 'static
{
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid matrices of the given extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    /// `exp(self) - 1`, accurate to the precision training needs.
    fn exp_minus_one(self) -> Self {
        self.exp_m1()
    }
}

impl Real for f32 {
    fn exp_minus_one(self) -> f32 {
        self.exp() - 1.0
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Writes the `rows x cols` row-major `src` into `dst` as `cols x rows`.
pub fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    assert!(
        src.len() >= rows * cols && dst.len() >= rows * cols,
        "transpose: buffer too short"
    );
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                let row = &src[r * cols..(r + 1) * cols];
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
}

/// Row-major matrix product `c = alpha * op(a) * op(b) + beta * c`.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. With `trans_a` the slice `a` holds a
/// row-major `k x m` matrix; likewise `trans_b` means `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked against slice lengths above; strides describe
    // dense row-major storage of those extents.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// N-dimensional array with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for data produced by our own kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Same data viewed with a new shape of equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `what` in the message if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }
}

/// Concatenates `[C_i, H, W]` tensors along the channel axis, in input order.
pub fn concat_channels<T: Real>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero frames".into()))?;
    if first.rank() != 3 {
        return shape_err(format!("expected [C,H,W], got {:?}", first.shape()));
    }
    let (h, w) = (first.shape[1], first.shape[2]);
    let mut channels = 0;
    for f in frames {
        if f.rank() != 3 || f.shape[1] != h || f.shape[2] != w {
            return shape_err(format!(
                "frame {:?} does not match spatial extent [{h}, {w}]",
                f.shape()
            ));
        }
        channels += f.shape[0];
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for f in frames {
        data.extend_from_slice(&f.data);
    }
    Ok(Tensor::from_parts(vec![channels, h, w], data))
}

/// Inverse of [`concat_channels`]: splits `[C, H, W]` into blocks of the given
/// channel counts.
pub fn split_channels<T: Real>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if t.rank() != 3 {
        return shape_err(format!("expected [C,H,W], got {:?}", t.shape()));
    }
    if sizes.iter().sum::<usize>() != t.shape[0] {
        return invalid(format!("channel partition {sizes:?} does not sum to {}", t.shape[0]));
    }
    let plane = t.shape[1] * t.shape[2];
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&c| {
            let block = t.data[start * plane..(start + c) * plane].to_vec();
            start += c;
            Tensor::from_parts(vec![c, t.shape[1], t.shape[2]], block)
        })
        .collect())
}

/// Mirrors a `[C, H, W]` tensor left to right: `(c, h, w) -> (c, h, W-1-w)`.
pub fn flip_width<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.rank() != 3 {
        return shape_err(format!("flip_width needs rank 3, got {:?}", t.shape()));
    }
    let w = t.shape[2];
    let mut data = t.data.clone();
    if w > 0 {
        data.chunks_mut(w).for_each(|row| row.reverse());
    }
    Ok(Tensor::from_parts(t.shape.clone(), data))
}

/// Central-difference gradient of a scalar function, evaluated element by element.
///
/// Each entry is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return invalid(format!("eps must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at element {i} of finite difference"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(Tensor::from_parts(x.shape.clone(), grad))
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transpose_round_trip() {
        let src: Vec<f64> = (0..35 * 70).map(|v| v as f64).collect();
        let mut t = vec![0.0; src.len()];
        transpose_into(&src, 35, 70, &mut t);
        assert_eq!(t[3 * 35 + 2], src[2 * 70 + 3]);
        let mut back = vec![0.0; src.len()];
        transpose_into(&t, 70, 35, &mut back);
        assert_eq!(back, src);
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]), 3.0);
    }

    #[test]
    fn empty_tensor_is_valid() {
        let t = Tensor::<f32>::new(&[0], vec![]).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(&[3], vec![1.0, 2.0]),
            Err(Error::LengthMismatch {
                expected: 3,
                actual: 2,
                ..
            })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::<f64>::new(&[1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn concat_preserves_block_order() {
        let a = Tensor::<f32>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn six_stereo_frames_stack_to_twelve_channels() {
        let frames: Vec<_> = (0..6).map(|_| Tensor::<f32>::zeros(&[2, 94, 168])).collect();
        assert_eq!(concat_channels(&frames).unwrap().shape(), &[12, 94, 168]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 3, 2]);
        assert!(matches!(concat_channels(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn flip_reverses_rows() {
        let t = Tensor::<f32>::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip_width(&t).unwrap().data(), &[3.0, 2.0, 1.0]);
        let sym = Tensor::<f32>::new(&[1, 2, 3], vec![1.0, 5.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(flip_width(&sym).unwrap(), sym);
        assert!(flip_width(&Tensor::<f32>::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::<f64>::new(&[2, 3], vec![0.3, -1.0, 2.0, 4.0, 0.0, 1.5]).unwrap();
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::<f64>::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_input() {
        let x = Tensor::<f64>::new(&[1], vec![3.0]).unwrap();
        assert!(finite_diff_grad(|t| t.sum(), &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-5).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 3, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2 -> same product via trans_a
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0f64; 4];
        gemm(true, true, 2, 2, 3, 1.0, &at, &bt, 0.0, &mut c2);
        assert_eq!(c2, c);
    }

    proptest! {
        #[test]
        fn reshape_round_trip(dims in prop::collection::vec(1usize..5, 1..4)) {
            let n: usize = dims.iter().product();
            let t = Tensor::<f32>::from_fn(&dims, |i| i as f32);
            let flat = t.clone().reshape(&[n]).unwrap();
            prop_assert_eq!(flat.reshape(&dims).unwrap(), t);
        }

        #[test]
        fn flip_is_involution(c in 1usize..4, h in 1usize..5, w in 1usize..7, seed in any::<u64>()) {
            let t = Tensor::<f32>::from_fn(&[c, h, w], |i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32);
            prop_assert_eq!(flip_width(&flip_width(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn split_then_concat(sizes in prop::collection::vec(1usize..4, 1..5)) {
            let c: usize = sizes.iter().sum();
            let t = Tensor::<f32>::from_fn(&[c, 2, 3], |i| i as f32);
            let parts = split_channels(&t, &sizes).unwrap();
            prop_assert_eq!(concat_channels(&parts).unwrap(), t);
        }

        #[test]
        fn finite_diff_on_quadratic(vals in prop::collection::vec(-3.0f64..3.0, 1..6)) {
            // f(x) = sum_i (i+1) x_i^2 + x_i, gradient 2(i+1)x_i + 1
            let x = Tensor::new(&[vals.len()], vals.clone()).unwrap();
            let f = |t: &Tensor<f64>| t.data().iter().enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * v * v + v).sum::<f64>();
            let g = finite_diff_grad(f, &x, 1e-5).unwrap();
            let exact: Vec<f64> = vals.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v + 1.0).collect();
            prop_assert!(max_relative_error(g.data(), &exact, 1.0) < 1e-6);
        }
    }
}
