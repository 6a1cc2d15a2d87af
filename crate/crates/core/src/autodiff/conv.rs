//! im2col / col2im kernels behind the conv2d node.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image `[C, H, W]` into `[C*KH*KW, OH*OW]`.
pub fn im2col<T: Real>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let ohw = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - pad;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - pad;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*KH*KW, OH*OW]` back into an image, accumulating overlaps.
pub fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let ohw = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let base = ih as usize * g.width;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            plane[base + iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
