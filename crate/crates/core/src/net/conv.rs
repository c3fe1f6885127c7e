//! 3×3×3 convolution with unit padding, lowered to a matrix product per
//! sample (im2col / col2im).

use crate::tensor::{FeatureBatch, Shape5};

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL * KERNEL;

pub fn out_extent(n: usize, stride: usize) -> usize {
    // pad 1, kernel 3
    (n + 2 - KERNEL) / stride + 1
}

pub fn output_shape(input: Shape5, out_channels: usize, stride: usize) -> Shape5 {
    Shape5::new(
        input.batch,
        out_channels,
        out_extent(input.depth, stride),
        out_extent(input.height, stride),
        out_extent(input.width, stride),
    )
}

/// Row-major `c = a · b + beta · c` where either operand may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the dimensions and strides asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Fills `cols` (`Cin·27 × P`) from one sample.
fn im2col(sample: &[f64], in_shape: Shape5, out_shape: Shape5, stride: usize, cols: &mut [f64]) {
    let (d, h, w) = (in_shape.depth, in_shape.height, in_shape.width);
    let (od, oh, ow) = (out_shape.depth, out_shape.height, out_shape.width);
    let p = od * oh * ow;
    for ci in 0..in_shape.channels {
        let chan = &sample[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..KERNEL {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = ci * TAPS + (kd * KERNEL + kh) * KERNEL + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let iz = (z * stride + kd) as isize - 1;
                        for y in 0..oh {
                            let iy = (y * stride + kh) as isize - 1;
                            let out_row = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                out_row.fill(0.0);
                                continue;
                            }
                            let src = &chan[(iz as usize * h + iy as usize) * w..][..w];
                            for (x, o) in out_row.iter_mut().enumerate() {
                                let ix = (x * stride + kw) as isize - 1;
                                *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into a sample gradient.
fn col2im(cols: &[f64], in_shape: Shape5, out_shape: Shape5, stride: usize, grad: &mut [f64]) {
    let (d, h, w) = (in_shape.depth, in_shape.height, in_shape.width);
    let (od, oh, ow) = (out_shape.depth, out_shape.height, out_shape.width);
    let p = od * oh * ow;
    for ci in 0..in_shape.channels {
        let chan = &mut grad[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..KERNEL {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = ci * TAPS + (kd * KERNEL + kh) * KERNEL + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let iz = (z * stride + kd) as isize - 1;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * stride + kh) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut chan[(iz as usize * h + iy as usize) * w..][..w];
                            let in_row = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (x, &g) in in_row.iter().enumerate() {
                                let ix = (x * stride + kw) as isize - 1;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `Cout × Cin × 3 × 3 × 3`.
pub fn forward(x: &FeatureBatch, weight: &[f64], bias: &[f64], out_channels: usize, stride: usize) -> FeatureBatch {
    let in_shape = x.shape();
    let out_shape = output_shape(in_shape, out_channels, stride);
    let k = in_shape.channels * TAPS;
    let p = out_shape.spatial();
    let mut out = FeatureBatch::zeros(out_shape);
    let mut cols = vec![0.0; k * p];
    for b in 0..in_shape.batch {
        im2col(x.sample(b), in_shape, out_shape, stride, &mut cols);
        let dst = &mut out.data_mut()[b * out_channels * p..(b + 1) * out_channels * p];
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        gemm(out_channels, k, p, weight, false, &cols, false, dst, 1.0);
    }
    out
}

pub struct ConvGrads {
    pub input: FeatureBatch,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn backward(x: &FeatureBatch, weight: &[f64], grad_out: &FeatureBatch, stride: usize, need_input: bool) -> ConvGrads {
    let in_shape = x.shape();
    let out_shape = grad_out.shape();
    let cout = out_shape.channels;
    let k = in_shape.channels * TAPS;
    let p = out_shape.spatial();
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    let mut dw = vec![0.0; cout * k];
    let mut db = vec![0.0; cout];
    let mut dx = FeatureBatch::zeros(in_shape);
    let per_in = in_shape.channels * in_shape.spatial();
    for b in 0..in_shape.batch {
        let dy = &grad_out.data()[b * cout * p..(b + 1) * cout * p];
        for (o, row) in dy.chunks(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        im2col(x.sample(b), in_shape, out_shape, stride, &mut cols);
        gemm(cout, p, k, dy, false, &cols, true, &mut dw, 1.0);
        if need_input {
            gemm(k, cout, p, weight, true, dy, false, &mut dcols, 0.0);
            col2im(&dcols, in_shape, out_shape, stride, &mut dx.data_mut()[b * per_in..(b + 1) * per_in]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
