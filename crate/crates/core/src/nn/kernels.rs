// Inner loops for the conv and fully-connected layers. Conv layers go through
// an im2col matrix of shape (in_channels * k * k, out_h * out_w) so that the
// forward and backward passes reduce to axpy/dot over contiguous rows.

use super::Shape;

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn im2col(input: &[f32], shape: Shape, kernel: usize, stride: usize, out: Shape) -> Vec<f32> {
    let positions = out.height * out.width;
    let rows = shape.channels * kernel * kernel;
    let mut cols = vec![0.0f32; rows * positions];
    for c in 0..shape.channels {
        let plane = &input[c * shape.height * shape.width..(c + 1) * shape.height * shape.width];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..out.height {
                    let src = &plane[(oy * stride + ky) * shape.width + kx..];
                    let line = &mut dst[oy * out.width..(oy + 1) * out.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        *d = src[ox * stride];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f32], shape: Shape, kernel: usize, stride: usize, out: Shape) -> Vec<f32> {
    let positions = out.height * out.width;
    let mut dx = vec![0.0f32; shape.len()];
    for c in 0..shape.channels {
        let plane = &mut dx[c * shape.height * shape.width..(c + 1) * shape.height * shape.width];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..out.height {
                    let base = (oy * stride + ky) * shape.width + kx;
                    for ox in 0..out.width {
                        plane[base + ox * stride] += src[oy * out.width + ox];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv_forward(cols: &[f32], weights: &[f32], bias: &[f32], out: Shape) -> Vec<f32> {
    let positions = out.height * out.width;
    let rows = cols.len() / positions;
    let mut y = vec![0.0f32; out.len()];
    for (o, yo) in y.chunks_exact_mut(positions).enumerate() {
        yo.fill(bias[o]);
        let w = &weights[o * rows..(o + 1) * rows];
        for (r, &wr) in w.iter().enumerate() {
            axpy(wr, &cols[r * positions..(r + 1) * positions], yo);
        }
    }
    y
}

pub(crate) fn conv_backward_params(cols: &[f32], delta: &[f32], out: Shape, gw: &mut [f32], gb: &mut [f32]) {
    let positions = out.height * out.width;
    let rows = cols.len() / positions;
    for (o, d) in delta.chunks_exact(positions).enumerate() {
        gb[o] += d.iter().sum::<f32>();
        let g = &mut gw[o * rows..(o + 1) * rows];
        for (r, gr) in g.iter_mut().enumerate() {
            *gr += dot(d, &cols[r * positions..(r + 1) * positions]);
        }
    }
}

pub(crate) fn conv_backward_cols(weights: &[f32], delta: &[f32], out: Shape, cols_len: usize) -> Vec<f32> {
    let positions = out.height * out.width;
    let rows = cols_len / positions;
    let mut dcols = vec![0.0f32; cols_len];
    for (o, d) in delta.chunks_exact(positions).enumerate() {
        let w = &weights[o * rows..(o + 1) * rows];
        for (r, &wr) in w.iter().enumerate() {
            axpy(wr, d, &mut dcols[r * positions..(r + 1) * positions]);
        }
    }
    dcols
}

pub(crate) fn dense_forward(x: &[f32], weights: &[f32], bias: &[f32]) -> Vec<f32> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + dot(&weights[o * n..(o + 1) * n], x))
        .collect()
}

pub(crate) fn dense_backward_params(x: &[f32], delta: &[f32], gw: &mut [f32], gb: &mut [f32]) {
    let n = x.len();
    for (o, &d) in delta.iter().enumerate() {
        gb[o] += d;
        if d != 0.0 {
            axpy(d, x, &mut gw[o * n..(o + 1) * n]);
        }
    }
}

pub(crate) fn dense_backward_input(weights: &[f32], delta: &[f32], in_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; in_len];
    for (o, &d) in delta.iter().enumerate() {
        if d != 0.0 {
            axpy(d, &weights[o * in_len..(o + 1) * in_len], &mut dx);
        }
    }
    dx
}
