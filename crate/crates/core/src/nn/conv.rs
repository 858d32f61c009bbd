//! im2col helpers for valid (unpadded) 2-d convolution and max pooling.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    /// Number of spatial application sites.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one unrolled patch (`channels * kernel * kernel`).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Unrolls `x` (`channels x height x width`) into `cols`, one patch per
    /// row, giving a `positions x patch_len` matrix.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ow, k, s) = (self.out_width(), self.kernel, self.stride);
        let patch = self.patch_len();
        for p in 0..self.positions() {
            let (oy, ox) = (p / ow, p % ow);
            let row = &mut cols[p * patch..(p + 1) * patch];
            let mut idx = 0;
            for c in 0..self.channels {
                let plane = &x[c * self.height * self.width..];
                for ky in 0..k {
                    let base = (oy * s + ky) * self.width + ox * s;
                    row[idx..idx + k].copy_from_slice(&plane[base..base + k]);
                    idx += k;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-and-adds `cols` into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ow, k, s) = (self.out_width(), self.kernel, self.stride);
        let patch = self.patch_len();
        for p in 0..self.positions() {
            let (oy, ox) = (p / ow, p % ow);
            let row = &cols[p * patch..(p + 1) * patch];
            let mut idx = 0;
            for c in 0..self.channels {
                let plane = &mut dx[c * self.height * self.width..];
                for ky in 0..k {
                    let base = (oy * s + ky) * self.width + ox * s;
                    for (d, v) in plane[base..base + k].iter_mut().zip(&row[idx..idx + k]) {
                        *d += v;
                    }
                    idx += k;
                }
            }
        }
    }
}

/// Max pooling over non-overlapping `size x size` windows. Writes the pooled
/// values and, for each output, the flat input index of the winner (first
/// index on ties).
pub(crate) fn maxpool(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    size: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (height / size, width / size);
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = c * height * width + (oy * size + ky) * width + ox * size + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_small() {
        let g = ConvGeometry {
            channels: 1,
            height: 3,
            width: 3,
            kernel: 2,
            stride: 1,
        };
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut cols = vec![0.0; g.positions() * g.patch_len()];
        g.im2col(&x, &mut cols);
        assert_eq!(
            cols,
            vec![1., 2., 4., 5., 2., 3., 5., 6., 4., 5., 7., 8., 5., 6., 8., 9.]
        );
        let mut dx = vec![0.0; 9];
        g.col2im(&vec![1.0; 16], &mut dx);
        assert_eq!(dx, vec![1., 2., 1., 2., 4., 2., 1., 2., 1.]);
    }

    #[test]
    fn pool_ties_pick_first() {
        let x = vec![1.0, 1.0, 0.0, 0.5];
        let mut out = [0.0];
        let mut arg = [9];
        maxpool(&x, 1, 2, 2, 2, &mut out, &mut arg);
        assert_eq!((out[0], arg[0]), (1.0, 0));
    }
}
