//! Raw loops behind the convolution and pooling primitives.

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_area(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source coordinate along one axis, `None` when it lands in padding.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Unfolds `x` (N×C×H×W) into a `[C·k·k, N·Ho·Wo]` patch matrix.
pub(crate) fn im2col<F: Element>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let cols = g.batch * g.out_area();
    let mut out = vec![F::zero(); g.patch_len() * cols];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[n * g.out_area()..][..g.out_area()];
                    for oy in 0..g.out_height {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for ox in 0..g.out_width {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                dst[oy * g.out_width + ox] = src[iy * g.width + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub(crate) fn col2im_add<F: Element>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let ncols = g.batch * g.out_area();
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * plane..][..plane];
                    let src = &src_row[n * g.out_area()..][..g.out_area()];
                    for oy in 0..g.out_height {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for ox in 0..g.out_width {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                dst[iy * g.width + ix] =
                                    dst[iy * g.width + ix] + src[oy * g.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N·P]` → `[N, O, P]`.
pub(crate) fn channels_to_batch<F: Element>(src: &[F], batch: usize, ch: usize, area: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for o in 0..ch {
        for n in 0..batch {
            let s = &src[o * batch * area + n * area..][..area];
            out[(n * ch + o) * area..][..area].copy_from_slice(s);
        }
    }
    out
}

/// `[N, O, P]` → `[O, N·P]`.
pub(crate) fn batch_to_channels<F: Element>(src: &[F], batch: usize, ch: usize, area: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for n in 0..batch {
        for o in 0..ch {
            let s = &src[(n * ch + o) * area..][..area];
            out[o * batch * area + n * area..][..area].copy_from_slice(s);
        }
    }
    out
}

/// 2×2/stride-2 max pooling over N×C×H×W planes. Returns outputs, the flat
/// input index chosen per output and the smallest top-two gap seen.
///
/// Ties go to the first maximal element in row-major window order.
pub(crate) fn max_pool2<F: Element>(
    x: &[F],
    planes: usize,
    height: usize,
    width: usize,
) -> (Vec<F>, Vec<usize>, f64) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let mut margin = f64::INFINITY;
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let taps = [
                    base + (2 * oy) * width + 2 * ox,
                    base + (2 * oy) * width + 2 * ox + 1,
                    base + (2 * oy + 1) * width + 2 * ox,
                    base + (2 * oy + 1) * width + 2 * ox + 1,
                ];
                let mut best = taps[0];
                for &t in &taps[1..] {
                    if x[t] > x[best] {
                        best = t;
                    }
                }
                for &t in &taps {
                    if t != best {
                        margin = margin.min((x[best] - x[t]).as_f64());
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax, margin)
}
