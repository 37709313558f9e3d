//! Parameterized layers: convolution, transposed convolution, and the
//! conv→norm→ReLU block the U-Nets are assembled from.
//!
//! Forward and backward fan out over batch items with rayon and reduce in
//! index order, so results are bitwise reproducible regardless of thread
//! count.

use ndarray::{s, Array1, Array2, Axis, Ix1, Ix4};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::init::xavier_uniform;
use super::ops::{
    col2im, conv_geometry, crop_hw, im2col, instnorm_bwd, instnorm_fwd, pad_hw, relu_bwd,
    relu_fwd, InstNormCache, PadMode,
};
use super::{GradBuf, ParamId, Params, Tensor};

/// 2-D convolution; weights `[out_c, in_c, k, k]`, zero-initialized biases.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut Params,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: PadMode,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        let w = ps.insert(
            format!("{name}.w"),
            xavier_uniform(rng, &[out_c, in_c, k, k], fan_in, fan_out),
        );
        let b = ps.insert(format!("{name}.b"), ndarray::ArrayD::zeros(vec![out_c]));
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, ps: &Params, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "channel mismatch into conv");
        let ((oh, ow), (pt, pb, pl, pr)) = conv_geometry(h, w, self.k, self.stride, self.pad);
        let xpad = pad_hw(x, pt, pb, pl, pr);
        let w4 = ps.value(self.w).view().into_dimensionality::<Ix4>().unwrap();
        let wmat = w4
            .to_shape((self.out_c, self.in_c * self.k * self.k))
            .unwrap();
        let bias = ps.value(self.b).view().into_dimensionality::<Ix1>().unwrap();
        let planes: Vec<Array2<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = im2col(
                    xpad.index_axis(Axis(0), ni),
                    self.k,
                    self.stride,
                    oh,
                    ow,
                );
                let mut y = wmat.dot(&cols);
                for (mut row, &bv) in y.rows_mut().into_iter().zip(bias.iter()) {
                    row += bv;
                }
                y
            })
            .collect();
        let mut out = Tensor::zeros((n, self.out_c, oh, ow));
        for (ni, plane) in planes.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), ni)
                .assign(&plane.into_shape_with_order((self.out_c, oh, ow)).unwrap());
        }
        out
    }

    /// Returns the input gradient; accumulates weight/bias gradients into
    /// `grads` unless the layer is frozen (`None`).
    pub fn backward(
        &self,
        ps: &Params,
        x: &Tensor,
        dy: &Tensor,
        mut grads: Option<&mut GradBuf>,
    ) -> Tensor {
        let (n, _, h, w) = x.dim();
        let ((oh, ow), (pt, pb, pl, pr)) = conv_geometry(h, w, self.k, self.stride, self.pad);
        debug_assert_eq!(dy.dim(), (n, self.out_c, oh, ow));
        let xpad = pad_hw(x, pt, pb, pl, pr);
        let (_, _, hp, wp) = xpad.dim();
        let w4 = ps.value(self.w).view().into_dimensionality::<Ix4>().unwrap();
        let wmat = w4
            .to_shape((self.out_c, self.in_c * self.k * self.k))
            .unwrap();
        let want_param_grads = grads.is_some();
        type ItemGrads = (Tensor, Option<(Array2<f64>, Array1<f64>)>);
        let per_item: Vec<ItemGrads> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let dy_mat = dy
                    .index_axis(Axis(0), ni)
                    .to_shape((self.out_c, oh * ow))
                    .unwrap()
                    .into_owned();
                let dcols = wmat.t().dot(&dy_mat);
                let dxpad = col2im(&dcols, self.in_c, hp, wp, self.k, self.stride, oh, ow);
                let dx = crop_hw(
                    &dxpad.insert_axis(Axis(0)),
                    pt,
                    h,
                    pl,
                    w,
                );
                let wg = want_param_grads.then(|| {
                    let cols = im2col(
                        xpad.index_axis(Axis(0), ni),
                        self.k,
                        self.stride,
                        oh,
                        ow,
                    );
                    (dy_mat.dot(&cols.t()), dy_mat.sum_axis(Axis(1)))
                });
                (dx, wg)
            })
            .collect();
        let mut dx = Tensor::zeros((n, self.in_c, h, w));
        let mut dw_total = Array2::<f64>::zeros((self.out_c, self.in_c * self.k * self.k));
        let mut db_total = Array1::<f64>::zeros(self.out_c);
        for (ni, (dx_n, wg)) in per_item.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), ni)
                .assign(&dx_n.index_axis(Axis(0), 0));
            if let Some((dw, db)) = wg {
                dw_total += &dw;
                db_total += &db;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            g.add(
                self.w,
                &dw_total
                    .into_shape_with_order((self.out_c, self.in_c, self.k, self.k))
                    .unwrap()
                    .into_dyn(),
            );
            g.add(self.b, &db_total.into_dyn());
        }
        dx
    }

    /// Weight and bias gradients alone, without touching a shared buffer.
    /// Used to price individual loss terms against the head layer.
    pub fn param_grad_norm(&self, ps: &Params, x: &Tensor, dy: &Tensor) -> f64 {
        let mut local = ps.zero_grads();
        self.backward(ps, x, dy, Some(&mut local));
        local.l2_norm_of(&[self.w, self.b])
    }
}

/// 2×2 stride-2 transposed convolution (learned upsampling); weights
/// `[in_c, out_c, 2, 2]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
}

const TK: usize = 2;

impl ConvTranspose2d {
    pub fn new(
        ps: &mut Params,
        name: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_c * TK * TK;
        let fan_out = out_c * TK * TK;
        let w = ps.insert(
            format!("{name}.w"),
            xavier_uniform(rng, &[in_c, out_c, TK, TK], fan_in, fan_out),
        );
        let b = ps.insert(format!("{name}.b"), ndarray::ArrayD::zeros(vec![out_c]));
        Self { w, b, in_c, out_c }
    }

    pub fn forward(&self, ps: &Params, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "channel mismatch into transposed conv");
        let w4 = ps.value(self.w).view().into_dimensionality::<Ix4>().unwrap();
        let bias = ps.value(self.b).view().into_dimensionality::<Ix1>().unwrap();
        let planes: Vec<Tensor> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let x_mat = x
                    .index_axis(Axis(0), ni)
                    .to_shape((self.in_c, h * w))
                    .unwrap()
                    .into_owned();
                let mut out = Tensor::zeros((1, self.out_c, h * TK, w * TK));
                for di in 0..TK {
                    for dj in 0..TK {
                        let w_dd = w4.slice(s![.., .., di, dj]);
                        let o = w_dd.t().dot(&x_mat); // [out_c, h*w]
                        let o3 = o.into_shape_with_order((self.out_c, h, w)).unwrap();
                        out.slice_mut(s![0, .., di..; TK, dj..; TK]).assign(&o3);
                    }
                }
                for (oc, &bv) in bias.iter().enumerate() {
                    out.slice_mut(s![0, oc, .., ..]).mapv_inplace(|v| v + bv);
                }
                out
            })
            .collect();
        let mut out = Tensor::zeros((n, self.out_c, h * TK, w * TK));
        for (ni, p) in planes.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), ni)
                .assign(&p.index_axis(Axis(0), 0));
        }
        out
    }

    pub fn backward(
        &self,
        ps: &Params,
        x: &Tensor,
        dy: &Tensor,
        mut grads: Option<&mut GradBuf>,
    ) -> Tensor {
        let (n, _, h, w) = x.dim();
        debug_assert_eq!(dy.dim(), (n, self.out_c, h * TK, w * TK));
        let w4 = ps.value(self.w).view().into_dimensionality::<Ix4>().unwrap();
        let want_param_grads = grads.is_some();
        type ItemGrads = (Tensor, Option<(Tensor, Array1<f64>)>);
        let per_item: Vec<ItemGrads> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let x_mat = x
                    .index_axis(Axis(0), ni)
                    .to_shape((self.in_c, h * w))
                    .unwrap()
                    .into_owned();
                let mut dx_mat = Array2::<f64>::zeros((self.in_c, h * w));
                let mut dw = want_param_grads
                    .then(|| Tensor::zeros((self.in_c, self.out_c, TK, TK)));
                let mut db = want_param_grads.then(|| Array1::<f64>::zeros(self.out_c));
                for di in 0..TK {
                    for dj in 0..TK {
                        let dy_dd = dy
                            .slice(s![ni, .., di..; TK, dj..; TK])
                            .to_shape((self.out_c, h * w))
                            .unwrap()
                            .into_owned();
                        let w_dd = w4.slice(s![.., .., di, dj]);
                        dx_mat += &w_dd.dot(&dy_dd);
                        if let Some(dw) = dw.as_mut() {
                            let g = x_mat.dot(&dy_dd.t()); // [in_c, out_c]
                            dw.slice_mut(s![.., .., di, dj]).assign(&g);
                        }
                        if let Some(db) = db.as_mut() {
                            *db += &dy_dd.sum_axis(Axis(1));
                        }
                    }
                }
                let dx = dx_mat
                    .into_shape_with_order((1, self.in_c, h, w))
                    .unwrap();
                (dx, dw.map(|dw| (dw, db.unwrap())))
            })
            .collect();
        let mut dx = Tensor::zeros((n, self.in_c, h, w));
        let mut dw_total = Tensor::zeros((self.in_c, self.out_c, TK, TK));
        let mut db_total = Array1::<f64>::zeros(self.out_c);
        for (ni, (dx_n, wg)) in per_item.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), ni)
                .assign(&dx_n.index_axis(Axis(0), 0));
            if let Some((dw, db)) = wg {
                dw_total += &dw;
                db_total += &db;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            g.add(self.w, &dw_total.into_dyn());
            g.add(self.b, &db_total.into_dyn());
        }
        dx
    }
}

/// Two rounds of 3×3 same-conv → instance norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

pub struct ConvBlockTrace {
    x: Tensor,
    n1: InstNormCache,
    h1: Tensor,
    n2: InstNormCache,
}

impl ConvBlock {
    pub fn new(
        ps: &mut Params,
        name: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let c1 = Conv2d::new(ps, &format!("{name}.c1"), in_c, out_c, 3, 1, PadMode::Same, rng);
        let c2 = Conv2d::new(ps, &format!("{name}.c2"), out_c, out_c, 3, 1, PadMode::Same, rng);
        Self { c1, c2 }
    }

    pub fn infer(&self, ps: &Params, x: &Tensor) -> Tensor {
        let (p1, _) = instnorm_fwd(&self.c1.forward(ps, x));
        let h1 = relu_fwd(&p1);
        let (p2, _) = instnorm_fwd(&self.c2.forward(ps, &h1));
        relu_fwd(&p2)
    }

    pub fn forward_t(&self, ps: &Params, x: &Tensor) -> (Tensor, ConvBlockTrace) {
        let z1 = self.c1.forward(ps, x);
        let (p1, n1) = instnorm_fwd(&z1);
        let h1 = relu_fwd(&p1);
        let z2 = self.c2.forward(ps, &h1);
        let (p2, n2) = instnorm_fwd(&z2);
        let y = relu_fwd(&p2);
        (
            y,
            ConvBlockTrace {
                x: x.clone(),
                n1,
                h1,
                n2,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &Params,
        trace: &ConvBlockTrace,
        dy: &Tensor,
        mut grads: Option<&mut GradBuf>,
    ) -> Tensor {
        let dp2 = relu_bwd(&trace.n2.xhat, dy);
        let dz2 = instnorm_bwd(&trace.n2, &dp2);
        let dh1 = self.c2.backward(ps, &trace.h1, &dz2, grads.as_deref_mut());
        let dp1 = relu_bwd(&trace.n1.xhat, &dh1);
        let dz1 = instnorm_bwd(&trace.n1, &dp1);
        self.c1.backward(ps, &trace.x, &dz1, grads)
    }
}

/// Re-exported so network code can concatenate skip connections without
/// reaching into `ops`.
pub use super::ops::{concat_channels as concat, split_channels as split};
