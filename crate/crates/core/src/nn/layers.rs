//! Forward and backward kernels for the fixed layer set.
//!
//! Convolutions are 3x3, stride 1, zero padding 1, computed per sample as an
//! im2col product so that a sample's output never depends on the batch it is
//! in. Fully connected layers use plain loops for the same reason.

use super::tensor::Tensor4;
use super::Real;

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// 3x3 convolution weights, `weight` laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Fully connected layer, `weight` laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn im2col<T: Real>(x: &[T], channels: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(c * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x_out, d) in dst.iter_mut().enumerate() {
                        let ix = x_out as isize + kx as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], channels: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(c * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for x_out in 0..w {
                        let ix = x_out as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[y * w + x_out];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn fan_in(&self) -> usize {
        self.in_channels * TAPS
    }

    /// Returns the output and the im2col buffer for every sample.
    pub(crate) fn forward(&self, x: &Tensor4<T>) -> (Tensor4<T>, Vec<T>) {
        let [b, _, h, w] = x.dims();
        let hw = h * w;
        let k = self.fan_in();
        let mut cols = vec![T::zero(); b * k * hw];
        let mut out = Tensor4::zeros([b, self.out_channels, h, w]);
        for s in 0..b {
            let col = &mut cols[s * k * hw..(s + 1) * k * hw];
            im2col(x.sample(s), self.in_channels, h, w, col);
            let y = out.sample_mut(s);
            for (o, plane) in y.chunks_mut(hw).enumerate() {
                plane.fill(self.bias[o]);
            }
            T::gemm(
                self.out_channels,
                k,
                hw,
                T::one(),
                &self.weight,
                (k, 1),
                col,
                (hw, 1),
                T::one(),
                y,
                (hw, 1),
            );
        }
        (out, cols)
    }

    /// Accumulates parameter gradients (when requested) and returns the input
    /// gradient (when requested).
    pub(crate) fn backward(
        &self,
        in_dims: [usize; 4],
        cols: &[T],
        dy: &Tensor4<T>,
        mut grads: Option<(&mut [T], &mut [T])>,
        want_dx: bool,
    ) -> Option<Tensor4<T>> {
        let [b, _, h, w] = in_dims;
        let hw = h * w;
        let k = self.fan_in();
        let mut dx = want_dx.then(|| Tensor4::zeros(in_dims));
        let mut dcol = vec![T::zero(); if want_dx { k * hw } else { 0 }];
        for s in 0..b {
            let dys = dy.sample(s);
            let col = &cols[s * k * hw..(s + 1) * k * hw];
            if let Some((dw, db)) = grads.as_mut() {
                T::gemm(
                    self.out_channels,
                    hw,
                    k,
                    T::one(),
                    dys,
                    (hw, 1),
                    col,
                    (1, hw),
                    T::one(),
                    dw,
                    (k, 1),
                );
                for (o, plane) in dys.chunks(hw).enumerate() {
                    db[o] += plane.iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    k,
                    self.out_channels,
                    hw,
                    T::one(),
                    &self.weight,
                    (1, k),
                    dys,
                    (hw, 1),
                    T::zero(),
                    &mut dcol,
                    (hw, 1),
                );
                col2im_add(&dcol, self.in_channels, h, w, dx.sample_mut(s));
            }
        }
        dx
    }
}

impl<T: Real> Linear<T> {
    pub(crate) fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let b = x.batch();
        let mut out = Tensor4::zeros([b, self.out_features, 1, 1]);
        for s in 0..b {
            let xs = x.sample(s);
            for (o, y) in out.sample_mut(s).iter_mut().enumerate() {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = self.bias[o];
                for (wv, xv) in row.iter().zip(xs) {
                    acc += *wv * *xv;
                }
                *y = acc;
            }
        }
        out
    }

    pub(crate) fn backward(
        &self,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        mut grads: Option<(&mut [T], &mut [T])>,
        want_dx: bool,
    ) -> Option<Tensor4<T>> {
        let b = x.batch();
        let mut dx = want_dx.then(|| Tensor4::zeros(x.dims()));
        for s in 0..b {
            let xs = x.sample(s);
            let dys = dy.sample(s);
            if let Some((dw, db)) = grads.as_mut() {
                for (o, g) in dys.iter().enumerate() {
                    db[o] += *g;
                    let row = &mut dw[o * self.in_features..(o + 1) * self.in_features];
                    for (d, xv) in row.iter_mut().zip(xs) {
                        *d += *g * *xv;
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = dx.sample_mut(s);
                for (o, g) in dys.iter().enumerate() {
                    let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                    for (d, wv) in dxs.iter_mut().zip(row) {
                        *d += *g * *wv;
                    }
                }
            }
        }
        dx
    }
}

pub(crate) fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Uses the forward output: the unit is active where `y > 0`.
pub(crate) fn relu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
        if *v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// 2x2 average pooling with stride 2; a trailing odd row or column is dropped.
pub(crate) fn avg_pool_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    let src = x.data();
    let dst = y.data_mut();
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        let out = &mut dst[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                out[oy * ow + ox] =
                    (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward<T: Real>(in_dims: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = in_dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor4::zeros(in_dims);
    let src = dy.data();
    let dst = dx.data_mut();
    for bc in 0..b * c {
        let g = &src[bc * oh * ow..(bc + 1) * oh * ow];
        let plane = &mut dst[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                plane[i] = v;
                plane[i + 1] = v;
                plane[i + w] = v;
                plane[i + w + 1] = v;
            }
        }
    }
    dx
}

pub(crate) fn global_pool_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, _, _] = x.dims();
    let hw = x.plane();
    let scale = T::from_f64(1.0 / hw as f64);
    let data: Vec<T> = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor4::new([b, c, 1, 1], data).expect("pooled dims are consistent")
}

pub(crate) fn global_pool_backward<T: Real>(in_dims: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let hw = in_dims[2] * in_dims[3];
    let scale = T::from_f64(1.0 / hw as f64);
    let mut dx = Tensor4::zeros(in_dims);
    for (plane, g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(*g * scale);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // Single centre tap: the convolution reproduces its input plus bias.
        let mut weight = vec![0.0f64; 9];
        weight[4] = 1.0;
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 1,
            weight,
            bias: vec![0.5],
        };
        let x = Tensor4::new([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let (y, _) = conv.forward(&x);
        let want: Vec<f64> = (0..9).map(|v| v as f64 + 0.5).collect();
        assert_eq!(y.data(), &want[..]);
    }

    #[test]
    fn conv_zero_padding_at_border() {
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 1,
            weight: vec![1.0f64; 9],
            bias: vec![0.0],
        };
        let x = Tensor4::new([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let (y, _) = conv.forward(&x);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn pooling_shapes_and_values() {
        let x = Tensor4::new(
            [1, 1, 2, 4],
            vec![1.0f64, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0],
        )
        .unwrap();
        let y = avg_pool_forward(&x);
        assert_eq!(y.dims(), [1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.0, 6.0]);
        let g = global_pool_forward(&x);
        assert_eq!(g.data(), &[4.0]);
    }
}
