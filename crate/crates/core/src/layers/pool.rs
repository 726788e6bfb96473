use super::{conv_out, dims4};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Square-window spatial pooling.
///
/// Padding positions never participate: max pooling ignores them and average
/// pooling divides by the number of in-bounds window elements, so a constant
/// input maps to the same constant. Max-pool ties go to the lowest flat index.
#[derive(Clone, Debug)]
pub struct Pool {
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: usize,
    input_shape: Option<Vec<usize>>,
    argmax: Vec<usize>,
}

impl Pool {
    pub fn new(kind: PoolKind, window: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind,
            window,
            stride,
            padding,
            input_shape: None,
            argmax: Vec::new(),
        }
    }

    /// The 3x3, stride 2, padding 1 pool used between network stages.
    pub fn halving(kind: PoolKind) -> Self {
        Self::new(kind, 3, 2, 1)
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out(h, self.window, self.stride, self.padding)?,
            conv_out(w, self.window, self.stride, self.padding)?,
        ))
    }

    /// In-bounds index range of the window starting at output position `o`.
    fn span(&self, o: usize, size: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.window as isize).min(size as isize)).max(0) as usize;
        (lo, hi)
    }

    pub fn forward<T: Real>(&mut self, input: Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = dims4(&input, "pool")?;
        let Some((ho, wo)) = self.output_hw(h, w) else {
            return shape_err(format!("pool window {} underflows on {h}x{w}", self.window));
        };
        let x = input.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        self.argmax.clear();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                let (h0, h1) = self.span(oh, h);
                for ow in 0..wo {
                    let (w0, w1) = self.span(ow, w);
                    if h0 >= h1 || w0 >= w1 {
                        return shape_err("pool window lies entirely in padding");
                    }
                    match self.kind {
                        PoolKind::Max => {
                            let mut best = base + h0 * w + w0;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    let idx = base + ih * w + iw;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            self.argmax.push(best);
                            out.push(x[best]);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    acc += x[base + ih * w + iw];
                                }
                            }
                            let count = ((h1 - h0) * (w1 - w0)) as f64;
                            out.push(acc / T::lit(count));
                        }
                    }
                }
            }
        }
        self.input_shape = Some(input.shape().to_vec());
        Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
    }

    pub fn backward<T: Real>(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let Some(shape) = self.input_shape.take() else {
            return shape_err("pool backward called before forward");
        };
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = self.output_hw(h, w).expect("validated in forward");
        if grad.shape() != [n, c, ho, wo] {
            return shape_err(format!("pool grad has shape {:?}", grad.shape()));
        }
        let mut dx = vec![T::zero(); n * c * h * w];
        let g = grad.data();
        match self.kind {
            PoolKind::Max => {
                for (&idx, &gv) in self.argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
            }
            PoolKind::Avg => {
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oh in 0..ho {
                        let (h0, h1) = self.span(oh, h);
                        for ow in 0..wo {
                            let (w0, w1) = self.span(ow, w);
                            let count = ((h1 - h0) * (w1 - w0)) as f64;
                            let share = g[(plane * ho + oh) * wo + ow] / T::lit(count);
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    dx[base + ih * w + iw] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(shape, dx))
    }
}
