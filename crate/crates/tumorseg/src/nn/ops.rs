//! Stateless tensor math: padding, im2col, activations, pooling, and
//! instance normalization, each with an explicit backward.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};

use super::Tensor;

/// How a convolution pads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Symmetric `k/2` padding, stride 1: output resolution = input.
    Same,
    /// Pad bottom/right so stride-`s` windows cover the image exactly
    /// `ceil(len/s)` times. Keeps patch `i` anchored at row `s·i`, matching
    /// the edge map's stride-5 pooling windows.
    CeilCover,
}

/// Output size plus (top, bottom, left, right) padding for one spatial dim
/// pair under the given mode.
pub fn conv_geometry(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    mode: PadMode,
) -> ((usize, usize), (usize, usize, usize, usize)) {
    match mode {
        PadMode::Same => {
            assert_eq!(stride, 1, "Same padding assumes stride 1");
            assert_eq!(k % 2, 1, "Same padding assumes odd kernels");
            ((h, w), (k / 2, k / 2, k / 2, k / 2))
        }
        PadMode::CeilCover => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let need_h = (oh - 1) * stride + k;
            let need_w = (ow - 1) * stride + k;
            ((oh, ow), (0, need_h - h, 0, need_w - w))
        }
    }
}

/// Zero-pad the two spatial axes.
pub fn pad_hw(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    if top + bottom + left + right == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dim();
    let mut out = Tensor::zeros((n, c, h + top + bottom, w + left + right));
    out.slice_mut(s![.., .., top..top + h, left..left + w])
        .assign(x);
    out
}

/// Remove padding added by [`pad_hw`].
pub fn crop_hw(x: &Tensor, top: usize, h: usize, left: usize, w: usize) -> Tensor {
    x.slice(s![.., .., top..top + h, left..left + w]).to_owned()
}

/// Unfold one padded item `[c, hp, wp]` into columns `[c·k·k, oh·ow]`.
pub fn im2col(xpad: ArrayView3<f64>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<f64> {
    let c = xpad.dim().0;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let view = xpad.slice(s![
                    ci,
                    ki..ki + (oh - 1) * stride + 1; stride,
                    kj..kj + (ow - 1) * stride + 1; stride
                ]);
                let mut dst = cols.row_mut(row);
                for (d, &v) in dst.iter_mut().zip(view.iter()) {
                    *d = v;
                }
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of [`im2col`] back onto a padded item.
pub fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((c, hp, wp));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut view = dx.slice_mut(s![
                    ci,
                    ki..ki + (oh - 1) * stride + 1; stride,
                    kj..kj + (ow - 1) * stride + 1; stride
                ]);
                for (d, &g) in view.iter_mut().zip(dcols.row(row).iter()) {
                    *d += g;
                }
            }
        }
    }
    dx
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the pre-activation input.
pub fn relu_bwd(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn leaky_relu_fwd(x: &Tensor, slope: f64) -> Tensor {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_bwd(x: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn sigmoid_fwd(z: &Tensor) -> Tensor {
    z.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given its output `y`.
pub fn sigmoid_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dz = dy.clone();
    ndarray::Zip::from(&mut dz)
        .and(y)
        .for_each(|d, &v| *d *= v * (1.0 - v));
    dz
}

pub fn tanh_fwd(z: &Tensor) -> Tensor {
    z.mapv(f64::tanh)
}

/// Backward through tanh given its output `y`.
pub fn tanh_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dz = dy.clone();
    ndarray::Zip::from(&mut dz)
        .and(y)
        .for_each(|d, &v| *d *= 1.0 - v * v);
    dz
}

/// Per-pixel softmax over the channel axis, computed with the max-shift
/// trick for stability.
pub fn softmax_channels(z: &Tensor) -> Tensor {
    let (n, c, h, w) = z.dim();
    let mut y = z.clone();
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(y[[ni, ci, hi, wi]]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (y[[ni, ci, hi, wi]] - m).exp();
                    y[[ni, ci, hi, wi]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    y[[ni, ci, hi, wi]] /= sum;
                }
            }
        }
    }
    y
}

/// Backward through the channel softmax given its output `y`:
/// `dz_c = y_c · (dy_c − Σ_k dy_k y_k)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = y.dim();
    let mut dz = Tensor::zeros((n, c, h, w));
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += dy[[ni, ci, hi, wi]] * y[[ni, ci, hi, wi]];
                }
                for ci in 0..c {
                    dz[[ni, ci, hi, wi]] =
                        y[[ni, ci, hi, wi]] * (dy[[ni, ci, hi, wi]] - dot);
                }
            }
        }
    }
    dz
}

/// 2×2 stride-2 max pool. Input spatial dims must be even. The cache holds
/// the winning offset (`di·2+dj`) per output cell; ties go to the first
/// element in scan order, deterministically.
pub fn maxpool2_fwd(x: &Tensor) -> (Tensor, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros((n, c, oh, ow));
    let mut idx = Array4::<u8>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0u8;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x[[ni, ci, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                arg = (di * 2 + dj) as u8;
                            }
                        }
                    }
                    y[[ni, ci, i, j]] = best;
                    idx[[ni, ci, i, j]] = arg;
                }
            }
        }
    }
    (y, idx)
}

/// Route pooled gradients back to the argmax positions.
pub fn maxpool2_bwd(idx: &Array4<u8>, dy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Tensor::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let a = idx[[ni, ci, i, j]] as usize;
                    dx[[ni, ci, 2 * i + a / 2, 2 * j + a % 2]] = dy[[ni, ci, i, j]];
                }
            }
        }
    }
    dx
}

/// Per-(item, channel) statistics cached by instance norm for the backward.
pub struct InstNormCache {
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per (item, channel).
    pub inv: Array2<f64>,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Instance normalization without affine parameters: each (item, channel)
/// plane is shifted to zero mean and unit variance.
pub fn instnorm_fwd(x: &Tensor) -> (Tensor, InstNormCache) {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut xhat = Tensor::zeros((n, c, h, w));
    let mut inv = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            let mean = plane.sum() / m;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let iv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            inv[[ni, ci]] = iv;
            let mut out = xhat.slice_mut(s![ni, ci, .., ..]);
            ndarray::Zip::from(&mut out)
                .and(&plane)
                .for_each(|o, &v| *o = (v - mean) * iv);
        }
    }
    let y = xhat.clone();
    (y, InstNormCache { xhat, inv })
}

/// `dx = inv · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))`, per (item, channel).
pub fn instnorm_bwd(cache: &InstNormCache, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = dy.dim();
    let m = (h * w) as f64;
    let mut dx = Tensor::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.slice(s![ni, ci, .., ..]);
            let xh = cache.xhat.slice(s![ni, ci, .., ..]);
            let mean_g = g.sum() / m;
            let mut mean_gx = 0.0;
            ndarray::Zip::from(&g).and(&xh).for_each(|&a, &b| mean_gx += a * b);
            mean_gx /= m;
            let iv = cache.inv[[ni, ci]];
            let mut out = dx.slice_mut(s![ni, ci, .., ..]);
            ndarray::Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| *o = iv * (gv - mean_g - xv * mean_gx));
        }
    }
    dx
}

/// Stack two tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching non-channel dims")
}

/// Split a channel-concatenated gradient back into the two parts.
pub fn split_channels(d: &Tensor, first: usize) -> (Tensor, Tensor) {
    let a = d.slice(s![.., ..first, .., ..]).to_owned();
    let b = d.slice(s![.., first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut SmallRng, dim: (usize, usize, usize, usize)) -> Tensor {
        Array::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    /// FD check of `sum(out ⊙ seed)` w.r.t. the input for an elementwise op.
    fn fd_input(
        fwd: impl Fn(&Tensor) -> Tensor,
        bwd: impl Fn(&Tensor, &Tensor) -> Tensor,
        x: &Tensor,
        seed: &Tensor,
    ) {
        let analytic = bwd(x, seed);
        let h = 1e-5;
        let mut rng = SmallRng::seed_from_u64(99);
        for _ in 0..24 {
            let idx = (
                rng.random_range(0..x.dim().0),
                rng.random_range(0..x.dim().1),
                rng.random_range(0..x.dim().2),
                rng.random_range(0..x.dim().3),
            );
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = ((&fwd(&p) * seed).sum() - (&fwd(&m) * seed).sum()) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-3,
                "at {idx:?}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn geometry_same_and_ceil_cover() {
        assert_eq!(conv_geometry(64, 64, 3, 1, PadMode::Same), ((64, 64), (1, 1, 1, 1)));
        assert_eq!(
            conv_geometry(64, 64, 5, 5, PadMode::CeilCover),
            ((13, 13), (0, 1, 0, 1))
        );
        assert_eq!(
            conv_geometry(128, 128, 5, 5, PadMode::CeilCover),
            ((26, 26), (0, 2, 0, 2))
        );
        assert_eq!(
            conv_geometry(7, 7, 1, 1, PadMode::CeilCover),
            ((7, 7), (0, 0, 0, 0))
        );
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), C> must equal <x, col2im(C)> for the pair to be adjoint.
        let mut rng = SmallRng::seed_from_u64(3);
        for (k, s, hp, wp) in [(3usize, 1usize, 8usize, 7usize), (5, 5, 11, 6), (2, 2, 6, 8)] {
            let oh = (hp - k) / s + 1;
            let ow = (wp - k) / s + 1;
            let x = Array::from_shape_fn((2, hp, wp), |_| rng.random_range(-1.0..1.0f64));
            let c = Array::from_shape_fn((2 * k * k, oh * ow), |_| rng.random_range(-1.0..1.0));
            let lhs = (&im2col(x.view(), k, s, oh, ow) * &c).sum();
            let rhs = (&x * &col2im(&c, 2, hp, wp, k, s, oh, ow)).sum();
            assert!((lhs - rhs).abs() < 1e-10, "k={k} s={s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = SmallRng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, (2, 3, 4, 5));
        let seed = rand_tensor(&mut rng, (2, 3, 4, 5));
        fd_input(relu_fwd, relu_bwd, &x, &seed);
        fd_input(
            |x| leaky_relu_fwd(x, 0.2),
            |x, dy| leaky_relu_bwd(x, dy, 0.2),
            &x,
            &seed,
        );
        fd_input(
            sigmoid_fwd,
            |x, dy| sigmoid_bwd(&sigmoid_fwd(x), dy),
            &x,
            &seed,
        );
        fd_input(tanh_fwd, |x, dy| tanh_bwd(&tanh_fwd(x), dy), &x, &seed);
        fd_input(
            softmax_channels,
            |x, dy| softmax_backward(&softmax_channels(x), dy),
            &x,
            &seed,
        );
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let mut rng = SmallRng::seed_from_u64(5);
        let z = rand_tensor(&mut rng, (2, 4, 3, 3)) * 10.0;
        let y = softmax_channels(&z);
        for ni in 0..2 {
            for hi in 0..3 {
                for wi in 0..3 {
                    let s: f64 = (0..4).map(|c| y[[ni, c, hi, wi]]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_roundtrip_and_gradient() {
        let mut rng = SmallRng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, (2, 3, 6, 4));
        let (y, idx) = maxpool2_fwd(&x);
        assert_eq!(y.dim(), (2, 3, 3, 2));
        // Every pooled value is the max of its window.
        for ni in 0..2 {
            for ci in 0..3 {
                for i in 0..3 {
                    for j in 0..2 {
                        let mut m = f64::NEG_INFINITY;
                        for di in 0..2 {
                            for dj in 0..2 {
                                m = m.max(x[[ni, ci, 2 * i + di, 2 * j + dj]]);
                            }
                        }
                        assert_eq!(y[[ni, ci, i, j]], m);
                    }
                }
            }
        }
        let seed = rand_tensor(&mut rng, (2, 3, 3, 2));
        let dx = maxpool2_bwd(&idx, &seed);
        // FD on a few coordinates.
        let h = 1e-6;
        for _ in 0..16 {
            let c = (
                rng.random_range(0..2),
                rng.random_range(0..3),
                rng.random_range(0..6),
                rng.random_range(0..4),
            );
            let mut p = x.clone();
            p[c] += h;
            let mut m = x.clone();
            m[c] -= h;
            let fd = ((&maxpool2_fwd(&p).0 * &seed).sum() - (&maxpool2_fwd(&m).0 * &seed).sum())
                / (2.0 * h);
            assert!((fd - dx[c]).abs() < 1e-6, "at {c:?}");
        }
    }

    #[test]
    fn instance_norm_normalizes_and_matches_fd() {
        let mut rng = SmallRng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, (2, 3, 5, 4)) * 3.0 + 1.0;
        let (y, _) = instnorm_fwd(&x);
        for ni in 0..2 {
            for ci in 0..3 {
                let plane = y.slice(s![ni, ci, .., ..]);
                let mean = plane.sum() / 20.0;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
            }
        }
        let seed = rand_tensor(&mut rng, (2, 3, 5, 4));
        fd_input(
            |x| instnorm_fwd(x).0,
            |x, dy| {
                let (_, cache) = instnorm_fwd(x);
                instnorm_bwd(&cache, dy)
            },
            &x,
            &seed,
        );
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = SmallRng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, (2, 3, 4, 4));
        let b = rand_tensor(&mut rng, (2, 5, 4, 4));
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (2, 8, 4, 4));
        let (da, db) = split_channels(&cat, 3);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }
}
