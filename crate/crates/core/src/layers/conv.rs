use rand::Rng;

use super::{conv_out, dims4, he_uniform, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, transpose_into, Real, Tensor};

/// 2-D cross-correlation with square kernels, per-channel bias and zero padding.
///
/// Weights are `[out_ch, in_ch, k, k]`. Implemented as im2col + GEMM; small
/// feature maps from several samples share one GEMM. The column buffer is
/// rebuilt during backward instead of being cached.
/// Output pixels per GEMM when batching samples together.
const GEMM_COLUMNS: usize = 1024;

#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = he_uniform(&shape, in_ch * kernel * kernel, rng);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn set_stride(&mut self, stride: usize) {
        self.stride = stride;
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out(h, self.kernel, self.stride, self.padding)?,
            conv_out(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = dims4(x, "conv2d")?;
        if c != self.in_ch {
            return shape_err(format!("conv2d expects {} input channels, got {c}", self.in_ch));
        }
        match self.output_hw(h, w) {
            Some((ho, wo)) => Ok((n, h, w, ho, wo)),
            None => shape_err(format!(
                "conv2d {}x{} stride {} padding {} underflows on {h}x{w}",
                self.kernel, self.kernel, self.stride, self.padding
            )),
        }
    }

    /// Output columns `ow` whose input column `ow * s + kw - p` lies inside `0..w`.
    fn valid_cols(&self, kw: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let off = kw as isize - p;
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let hi = if (w as isize) - off <= 0 {
            0
        } else {
            (((w as isize - off + s - 1) / s) as usize).min(wo)
        };
        (lo.min(hi), hi)
    }

    /// Column matrix `[in_ch * k * k, ..]` with row stride `ld`; this sample
    /// fills the first `ho * wo` entries of each row.
    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, src: &[T], h: usize, w: usize, ho: usize, wo: usize, col: &mut [T], ld: usize) {
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding as isize);
        let plane = ho * wo;
        if self.is_pointwise() {
            for (c, chan) in src.chunks(plane).take(self.in_ch).enumerate() {
                col[c * ld..c * ld + plane].copy_from_slice(chan);
            }
            return;
        }
        for c in 0..self.in_ch {
            let chan = &src[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * k + kh) * k + kw;
                    let dst = &mut col[row * ld..row * ld + plane];
                    let (lo, hi) = self.valid_cols(kw, w, wo);
                    for oh in 0..ho {
                        let ih = (oh * s) as isize + kh as isize - p;
                        let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                        if ih < 0 || ih >= h as isize || lo >= hi {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let in_row = &chan[ih as usize * w..(ih as usize + 1) * w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let first = ((lo * s) as isize + kw as isize - p) as usize;
                        if s == 1 {
                            out_row[lo..hi].copy_from_slice(&in_row[first..first + hi - lo]);
                        } else {
                            for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o = in_row[first + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Transposed im2col: one row of `in_ch * k * k` patch values per output pixel.
    fn im2row(&self, src: &[T], h: usize, w: usize, ho: usize, wo: usize, rows: &mut [T]) {
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let kdim = self.in_ch * k * k;
        if self.is_pointwise() {
            transpose_into(src, self.in_ch, h * w, rows);
            return;
        }
        // Output columns whose whole k-wide window lies inside the row.
        let inner_lo = p.div_ceil(s).min(wo);
        let inner_hi = if w + p >= k { ((w + p - k) / s + 1).min(wo) } else { 0 }.max(inner_lo);
        for oh in 0..ho {
            let block = &mut rows[oh * wo * kdim..(oh + 1) * wo * kdim];
            for c in 0..self.in_ch {
                let chan = &src[c * h * w..(c + 1) * h * w];
                for kh in 0..k {
                    let off = (c * k + kh) * k;
                    let ih = (oh * s + kh) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        for ow in 0..wo {
                            block[ow * kdim + off..ow * kdim + off + k].fill(T::zero());
                        }
                        continue;
                    }
                    let in_row = &chan[ih as usize * w..(ih as usize + 1) * w];
                    for ow in (0..inner_lo).chain(inner_hi..wo) {
                        for kw in 0..k {
                            let iw = (ow * s + kw) as isize - p as isize;
                            block[ow * kdim + off + kw] = if iw < 0 || iw >= w as isize {
                                T::zero()
                            } else {
                                in_row[iw as usize]
                            };
                        }
                    }
                    for ow in inner_lo..inner_hi {
                        let first = ow * s - p;
                        block[ow * kdim + off..ow * kdim + off + k].copy_from_slice(&in_row[first..first + k]);
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix with row stride `ld` back onto the image.
    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, col: &[T], ld: usize, h: usize, w: usize, ho: usize, wo: usize, dst: &mut [T]) {
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding as isize);
        let plane = ho * wo;
        if self.is_pointwise() {
            for (c, chan) in dst.chunks_mut(plane).take(self.in_ch).enumerate() {
                for (d, &v) in chan.iter_mut().zip(&col[c * ld..c * ld + plane]) {
                    *d += v;
                }
            }
            return;
        }
        for c in 0..self.in_ch {
            let chan = &mut dst[c * h * w..(c + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * k + kh) * k + kw;
                    let src = &col[row * ld..row * ld + plane];
                    let (lo, hi) = self.valid_cols(kw, w, wo);
                    if lo >= hi {
                        continue;
                    }
                    let first = ((lo * s) as isize + kw as isize - p) as usize;
                    for oh in 0..ho {
                        let ih = (oh * s) as isize + kh as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = &mut chan[ih as usize * w..(ih as usize + 1) * w];
                        let g = &src[oh * wo + lo..oh * wo + hi];
                        if s == 1 {
                            for (d, &v) in in_row[first..first + hi - lo].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in g.iter().enumerate() {
                                in_row[first + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn chunk_len(&self, n: usize, plane: usize) -> usize {
        (GEMM_COLUMNS / plane.max(1)).clamp(1, n.max(1))
    }

    pub fn forward(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w, ho, wo) = self.geometry(&input)?;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let plane = ho * wo;
        let in_stride = self.in_ch * h * w;
        let out_stride = self.out_ch * plane;
        let g = self.chunk_len(n, plane);
        let mut out = vec![T::zero(); n * out_stride];
        let mut col = vec![T::zero(); kdim * g * plane];
        let mut prod = vec![T::zero(); self.out_ch * g * plane];
        let bias = self.bias.value.data();
        for first in (0..n).step_by(g) {
            let count = g.min(n - first);
            let ld = count * plane;
            for j in 0..count {
                let src = &input.data()[(first + j) * in_stride..(first + j + 1) * in_stride];
                self.im2col(src, h, w, ho, wo, &mut col[j * plane..], ld);
            }
            gemm(
                false,
                false,
                self.out_ch,
                ld,
                kdim,
                T::one(),
                self.weight.value.data(),
                &col,
                T::zero(),
                &mut prod,
            );
            for j in 0..count {
                let dst = &mut out[(first + j) * out_stride..(first + j + 1) * out_stride];
                for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                    let row = &prod[o * ld + j * plane..o * ld + (j + 1) * plane];
                    for (d, &v) in chunk.iter_mut().zip(row) {
                        *d = v + bias[o];
                    }
                }
            }
        }
        self.cache = Some(input);
        Ok(Tensor::from_parts(vec![n, self.out_ch, ho, wo], out))
    }

    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let input = match self.cache.take() {
            Some(x) => x,
            None => return shape_err("conv2d backward called before forward"),
        };
        let (n, h, w, ho, wo) = self.geometry(&input)?;
        let plane = ho * wo;
        if grad.shape() != [n, self.out_ch, ho, wo] {
            return shape_err(format!(
                "conv2d grad {:?} does not match output [{n}, {}, {ho}, {wo}]",
                grad.shape(),
                self.out_ch
            ));
        }
        let kdim = self.in_ch * self.kernel * self.kernel;
        let in_stride = self.in_ch * h * w;
        let out_stride = self.out_ch * plane;
        let g = self.chunk_len(n, plane);
        let mut dx = vec![T::zero(); input.len()];
        let mut rows = vec![T::zero(); g * plane * kdim];
        let mut gy = vec![T::zero(); self.out_ch * g * plane];
        let mut dcol = vec![T::zero(); kdim * g * plane];
        for first in (0..n).step_by(g) {
            let count = g.min(n - first);
            let ld = count * plane;
            for j in 0..count {
                let sample = first + j;
                let src = &input.data()[sample * in_stride..(sample + 1) * in_stride];
                let dy = &grad.data()[sample * out_stride..(sample + 1) * out_stride];
                for (o, chunk) in dy.chunks(plane).enumerate() {
                    self.bias.grad.data_mut()[o] += chunk.iter().copied().sum();
                    gy[o * ld + j * plane..o * ld + (j + 1) * plane].copy_from_slice(chunk);
                }
                self.im2row(src, h, w, ho, wo, &mut rows[j * plane * kdim..(j + 1) * plane * kdim]);
            }
            // dW[O,K] += dY[O,P] * rows[P,K]; the transposed patches keep this
            // gemm off the much slower strided-operand path.
            gemm(
                false,
                false,
                self.out_ch,
                kdim,
                ld,
                T::one(),
                &gy,
                &rows,
                T::one(),
                self.weight.grad.data_mut(),
            );
            gemm(
                true,
                false,
                kdim,
                ld,
                self.out_ch,
                T::one(),
                self.weight.value.data(),
                &gy,
                T::zero(),
                &mut dcol,
            );
            for j in 0..count {
                let sample = first + j;
                let dxi = &mut dx[sample * in_stride..(sample + 1) * in_stride];
                self.col2im(&dcol[j * plane..], ld, h, w, ho, wo, dxi);
            }
        }
        Ok(Tensor::from_parts(input.shape().to_vec(), dx))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
}
