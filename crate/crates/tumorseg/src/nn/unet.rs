//! Symmetric 2-D U-Net used by both the segmenter (softmax head) and the
//! inpainting generator (tanh head).
//!
//! Stages run at channel widths `encoder_channels[0..L]`; the last stage is
//! the bottleneck. 2×2 max-pooling separates encoder stages, transposed
//! convolutions mirror them on the way up, and every decoder stage
//! concatenates the equal-resolution encoder output before its conv block.
//! Inputs whose spatial dims are not multiples of `2^(L-1)` are zero-padded
//! bottom/right and the output is cropped back, so callers always see
//! output spatial shape == input spatial shape.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{concat, split, Conv2d, ConvBlock, ConvBlockTrace, ConvTranspose2d};
use super::ops::{
    maxpool2_bwd, maxpool2_fwd, pad_hw, softmax_backward, softmax_channels, tanh_bwd, tanh_fwd,
    PadMode,
};
use super::{GradBuf, Params, Tensor};

/// Background + tumor labels 1, 2, 4.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-pixel class probabilities.
    Softmax,
    /// Intensities in (−1, 1).
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width per stage, shallow to deep; the last entry is the
    /// bottleneck width.
    pub encoder_channels: Vec<usize>,
    pub out_channels: usize,
    pub head: HeadKind,
}

impl UNetConfig {
    /// The segmentation network: 4 modalities in, one probability map per
    /// class out.
    pub fn segmenter() -> Self {
        Self {
            in_channels: 4,
            encoder_channels: vec![64, 128, 256, 320],
            out_channels: NUM_CLASSES,
            head: HeadKind::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.encoder_channels.len() < 2 {
            return Err(Error::Config(
                "encoder needs at least two stages (one skip + bottleneck)".into(),
            ));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "encoder channel widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial dims are padded up to a multiple of this before pooling.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.encoder_channels.len() - 1)
    }
}

/// The inpainting generator: modality count in and out, tanh output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub modalities: usize,
    pub encoder_channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            modalities: 4,
            encoder_channels: vec![64, 128, 256, 320],
        }
    }
}

impl GeneratorConfig {
    pub fn to_unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.modalities,
            encoder_channels: self.encoder_channels.clone(),
            out_channels: self.modalities,
            head: HeadKind::Tanh,
        }
    }
}

pub struct UNet {
    pub cfg: UNetConfig,
    enc: Vec<ConvBlock>,
    ups: Vec<ConvTranspose2d>,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    pub params: Params,
}

pub struct UNetTrace {
    orig_hw: (usize, usize),
    enc_traces: Vec<ConvBlockTrace>,
    pool_idx: Vec<Array4<u8>>,
    /// Decoder records in execution order: stage `L-2` down to `0`.
    up_inputs: Vec<Tensor>,
    dec_traces: Vec<ConvBlockTrace>,
    head_in: Tensor,
    /// Post-activation output at padded resolution.
    y_padded: Tensor,
}

impl UNet {
    pub fn build(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let chain = &cfg.encoder_channels;
        let depth = chain.len();
        let mut enc = Vec::with_capacity(depth);
        let mut in_c = cfg.in_channels;
        for (i, &c) in chain.iter().enumerate() {
            enc.push(ConvBlock::new(&mut params, &format!("enc{i}"), in_c, c, &mut rng));
            in_c = c;
        }
        let mut ups = Vec::with_capacity(depth - 1);
        let mut dec = Vec::with_capacity(depth - 1);
        for i in 0..depth - 1 {
            ups.push(ConvTranspose2d::new(
                &mut params,
                &format!("up{i}"),
                chain[i + 1],
                chain[i],
                &mut rng,
            ));
            dec.push(ConvBlock::new(
                &mut params,
                &format!("dec{i}"),
                2 * chain[i],
                chain[i],
                &mut rng,
            ));
        }
        let head = Conv2d::new(
            &mut params,
            "head",
            chain[0],
            cfg.out_channels,
            1,
            1,
            PadMode::Same,
            &mut rng,
        );
        Ok(Self {
            cfg,
            enc,
            ups,
            dec,
            head,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dim().1 != self.cfg.in_channels {
            return Err(Error::Data(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels,
                x.dim().1
            )));
        }
        Ok(())
    }

    fn pad_input(&self, x: &Tensor) -> Tensor {
        let m = self.cfg.spatial_multiple();
        let (_, _, h, w) = x.dim();
        let ph = h.div_ceil(m) * m - h;
        let pw = w.div_ceil(m) * m - w;
        pad_hw(x, 0, ph, 0, pw)
    }

    fn apply_head_act(&self, z: &Tensor) -> Tensor {
        match self.cfg.head {
            HeadKind::Softmax => softmax_channels(z),
            HeadKind::Tanh => tanh_fwd(z),
        }
    }

    /// Forward pass without caches, for inference.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (_, _, h, w) = x.dim();
        let depth = self.enc.len();
        let mut cur = self.pad_input(x);
        let mut skips = Vec::with_capacity(depth - 1);
        for i in 0..depth - 1 {
            let y = self.enc[i].infer(&self.params, &cur);
            let (pooled, _) = maxpool2_fwd(&y);
            skips.push(y);
            cur = pooled;
        }
        cur = self.enc[depth - 1].infer(&self.params, &cur);
        for i in (0..depth - 1).rev() {
            let u = self.ups[i].forward(&self.params, &cur);
            cur = self.dec[i].infer(&self.params, &concat(&skips[i], &u));
        }
        let y = self.apply_head_act(&self.head.forward(&self.params, &cur));
        Ok(y.slice(ndarray::s![.., .., ..h, ..w]).to_owned())
    }

    /// Forward pass keeping every cache needed by [`UNet::backward`].
    pub fn forward_t(&self, x: &Tensor) -> Result<(Tensor, UNetTrace)> {
        self.check_input(x)?;
        let (_, _, h, w) = x.dim();
        let depth = self.enc.len();
        let mut cur = self.pad_input(x);
        let mut enc_traces = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth - 1);
        let mut skips = Vec::with_capacity(depth - 1);
        for i in 0..depth - 1 {
            let (y, tr) = self.enc[i].forward_t(&self.params, &cur);
            enc_traces.push(tr);
            let (pooled, idx) = maxpool2_fwd(&y);
            pool_idx.push(idx);
            skips.push(y);
            cur = pooled;
        }
        let (mut cur, tr) = self.enc[depth - 1].forward_t(&self.params, &cur);
        enc_traces.push(tr);
        let mut up_inputs = Vec::with_capacity(depth - 1);
        let mut dec_traces = Vec::with_capacity(depth - 1);
        for i in (0..depth - 1).rev() {
            up_inputs.push(cur.clone());
            let u = self.ups[i].forward(&self.params, &cur);
            let (y, tr) = self.dec[i].forward_t(&self.params, &concat(&skips[i], &u));
            dec_traces.push(tr);
            cur = y;
        }
        let head_in = cur;
        let z = self.head.forward(&self.params, &head_in);
        let y_padded = self.apply_head_act(&z);
        let out = y_padded.slice(ndarray::s![.., .., ..h, ..w]).to_owned();
        Ok((
            out,
            UNetTrace {
                orig_hw: (h, w),
                enc_traces,
                pool_idx,
                up_inputs,
                dec_traces,
                head_in,
                y_padded,
            },
        ))
    }

    fn head_act_backward(&self, trace: &UNetTrace, d_out: &Tensor) -> Tensor {
        let (_, _, hp, wp) = trace.y_padded.dim();
        let (h, w) = trace.orig_hw;
        let d_pad = pad_hw(d_out, 0, hp - h, 0, wp - w);
        match self.cfg.head {
            HeadKind::Softmax => softmax_backward(&trace.y_padded, &d_pad),
            HeadKind::Tanh => tanh_bwd(&trace.y_padded, &d_pad),
        }
    }

    /// Backpropagate `d_out` (gradient of a scalar loss w.r.t. the network
    /// output, at original resolution). Returns the input gradient;
    /// accumulates parameter gradients unless frozen (`grads = None`).
    pub fn backward(
        &self,
        trace: &UNetTrace,
        d_out: &Tensor,
        mut grads: Option<&mut GradBuf>,
    ) -> Tensor {
        let depth = self.enc.len();
        let dz = self.head_act_backward(trace, d_out);
        let mut cur = self
            .head
            .backward(&self.params, &trace.head_in, &dz, grads.as_deref_mut());
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth - 1];
        // Decoder ran stages L-2..0, so trace position j holds stage L-2-j;
        // walk them in reverse execution order (shallow to deep).
        for i in 0..depth - 1 {
            let pos = depth - 2 - i;
            let d_cat = self.dec[i].backward(
                &self.params,
                &trace.dec_traces[pos],
                &cur,
                grads.as_deref_mut(),
            );
            let (d_skip, d_up_out) = split(&d_cat, self.cfg.encoder_channels[i]);
            skip_grads[i] = Some(d_skip);
            cur = self.ups[i].backward(
                &self.params,
                &trace.up_inputs[pos],
                &d_up_out,
                grads.as_deref_mut(),
            );
        }
        cur = self.enc[depth - 1].backward(
            &self.params,
            &trace.enc_traces[depth - 1],
            &cur,
            grads.as_deref_mut(),
        );
        for i in (0..depth - 1).rev() {
            let mut d_enc_out = maxpool2_bwd(&trace.pool_idx[i], &cur);
            d_enc_out += skip_grads[i].as_ref().expect("filled above");
            cur = self.enc[i].backward(
                &self.params,
                &trace.enc_traces[i],
                &d_enc_out,
                grads.as_deref_mut(),
            );
        }
        let (h, w) = trace.orig_hw;
        cur.slice(ndarray::s![.., .., ..h, ..w]).to_owned()
    }

    /// L2 norm of one loss term's gradient w.r.t. the head parameters only:
    /// the cheap per-term signal used for dynamic weight balancing.
    pub fn head_grad_norm(&self, trace: &UNetTrace, d_out: &Tensor) -> f64 {
        let dz = self.head_act_backward(trace, d_out);
        self.head.param_grad_norm(&self.params, &trace.head_in, &dz)
    }

    /// Parameter ids of the head layer.
    pub fn head_param_ids(&self) -> [super::ParamId; 2] {
        [self.head.w, self.head.b]
    }
}

/// Class probabilities for a batch of slices; softmax guarantees per-pixel
/// channel sums of 1.
pub fn seg_forward(net: &UNet, images: &Tensor) -> Result<Tensor> {
    if net.cfg.head != HeadKind::Softmax {
        return Err(Error::Config(
            "seg_forward requires a softmax-headed network".into(),
        ));
    }
    net.infer(images)
}

/// Reconstruction of an occluded batch; inputs must already sit in the
/// tanh-compatible range [−1, 1].
pub fn gen_forward(net: &UNet, occluded: &Tensor) -> Result<Tensor> {
    if net.cfg.head != HeadKind::Tanh {
        return Err(Error::Config(
            "gen_forward requires a tanh-headed network".into(),
        ));
    }
    if let Some(v) = occluded.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::Numerical(format!(
            "generator input outside [-1, 1]: {v}"
        )));
    }
    net.infer(occluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Axis};
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            encoder_channels: vec![3, 5],
            out_channels: 2,
            head: HeadKind::Softmax,
        }
    }

    fn rand_tensor(rng: &mut SmallRng, dim: (usize, usize, usize, usize)) -> Tensor {
        Array::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let a = UNet::build(tiny_cfg(), 3).unwrap();
        let b = UNet::build(tiny_cfg(), 3).unwrap();
        let c = UNet::build(tiny_cfg(), 4).unwrap();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        assert_ne!(a.params.content_hash(), c.params.content_hash());
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = tiny_cfg();
        cfg.encoder_channels = vec![8];
        assert!(UNet::build(cfg, 0).is_err());
        let mut cfg = tiny_cfg();
        cfg.encoder_channels = vec![8, 0];
        assert!(UNet::build(cfg, 0).is_err());
        let mut cfg = tiny_cfg();
        cfg.out_channels = 0;
        assert!(UNet::build(cfg, 0).is_err());
    }

    #[test]
    fn parameter_count_matches_hand_tally() {
        // Default encoder chain, 4 input channels, 2 classes; every layer
        // summed from conv arithmetic: out·in·k² + out.
        let cfg = UNetConfig {
            in_channels: 4,
            encoder_channels: vec![64, 128, 256, 320],
            out_channels: 2,
            head: HeadKind::Softmax,
        };
        let net = UNet::build(cfg, 0).unwrap();
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let chain = [64usize, 128, 256, 320];
        let mut total = 0;
        let mut in_c = 4;
        for &c in &chain {
            total += conv(in_c, c, 3) + conv(c, c, 3);
            in_c = c;
        }
        for i in 0..3 {
            total += chain[i + 1] * chain[i] * 4 + chain[i]; // transposed conv
            total += conv(2 * chain[i], chain[i], 3) + conv(chain[i], chain[i], 3);
        }
        total += conv(64, 2, 1);
        assert_eq!(net.param_count(), total);
        assert_eq!(total, 5_620_930);
    }

    #[test]
    fn softmax_head_sums_to_one_across_random_batches() {
        let net = UNet::build(tiny_cfg(), 5).unwrap();
        let mut rng = SmallRng::seed_from_u64(6);
        for _ in 0..100 {
            let x = rand_tensor(&mut rng, (1, 2, 8, 8));
            let y = seg_forward(&net, &x).unwrap();
            for hi in 0..8 {
                for wi in 0..8 {
                    let s = y[[0, 0, hi, wi]] + y[[0, 1, hi, wi]];
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(y[[0, 0, hi, wi]] >= 0.0 && y[[0, 0, hi, wi]] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn output_resolution_follows_input() {
        let cfg = UNetConfig {
            in_channels: 4,
            encoder_channels: vec![4, 6, 8, 10],
            out_channels: 3,
            head: HeadKind::Softmax,
        };
        let net = UNet::build(cfg, 7).unwrap();
        let mut rng = SmallRng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, (1, 4, 128, 128));
        assert_eq!(seg_forward(&net, &x).unwrap().dim(), (1, 3, 128, 128));
        // Not a multiple of 2^(L-1): padded internally, cropped back.
        let x = rand_tensor(&mut rng, (1, 4, 50, 42));
        let y = seg_forward(&net, &x).unwrap();
        assert_eq!(y.dim(), (1, 3, 50, 42));
        let s = y[[0, 0, 49, 41]] + y[[0, 1, 49, 41]] + y[[0, 2, 49, 41]];
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_items_are_independent() {
        let net = UNet::build(tiny_cfg(), 9).unwrap();
        let mut rng = SmallRng::seed_from_u64(10);
        let one = rand_tensor(&mut rng, (1, 2, 8, 8));
        let mut two = Tensor::zeros((2, 2, 8, 8));
        two.index_axis_mut(Axis(0), 0).assign(&one.index_axis(Axis(0), 0));
        two.index_axis_mut(Axis(0), 1).assign(&one.index_axis(Axis(0), 0));
        let y1 = net.infer(&one).unwrap();
        let y2 = net.infer(&two).unwrap();
        assert_eq!(y2.index_axis(Axis(0), 0), y1.index_axis(Axis(0), 0));
        assert_eq!(y2.index_axis(Axis(0), 1), y1.index_axis(Axis(0), 0));
    }

    #[test]
    fn generator_range_shape_and_zeroed_head() {
        let gcfg = GeneratorConfig {
            modalities: 4,
            encoder_channels: vec![3, 4],
        };
        let mut net = UNet::build(gcfg.to_unet(), 11).unwrap();
        let mut rng = SmallRng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, (2, 4, 12, 12));
        let y = gen_forward(&net, &x).unwrap();
        assert_eq!(y.dim(), (2, 4, 12, 12));
        assert!(y.iter().all(|&v| v > -1.0 && v < 1.0));
        let bad = &x * 3.0;
        assert!(matches!(gen_forward(&net, &bad), Err(Error::Numerical(_))));
        for name in ["head.w", "head.b"] {
            net.params.by_name_mut(name).unwrap().fill(0.0);
        }
        let y = gen_forward(&net, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_matches_traced_forward() {
        let net = UNet::build(tiny_cfg(), 13).unwrap();
        let mut rng = SmallRng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, (2, 2, 10, 6));
        let (y, _) = net.forward_t(&x).unwrap();
        assert_eq!(y, net.infer(&x).unwrap());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        for head in [HeadKind::Softmax, HeadKind::Tanh] {
            let cfg = UNetConfig {
                head,
                ..tiny_cfg()
            };
            let net = UNet::build(cfg, 15).unwrap();
            let mut rng = SmallRng::seed_from_u64(16);
            let x = rand_tensor(&mut rng, (2, 2, 8, 8));
            let (y, trace) = net.forward_t(&x).unwrap();
            let dy = Array::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
            let mut grads = net.params.zero_grads();
            net.backward(&trace, &dy, Some(&mut grads));
            for id in 0..net.params.len() {
                assert!(
                    grads.get(id).iter().any(|&g| g != 0.0),
                    "dead parameter {} under {head:?}",
                    net.params.name(id)
                );
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut net = UNet::build(tiny_cfg(), 17).unwrap();
        let mut rng = SmallRng::seed_from_u64(18);
        let x = rand_tensor(&mut rng, (1, 2, 8, 8));
        let (y, trace) = net.forward_t(&x).unwrap();
        let seed = Array::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let mut grads = net.params.zero_grads();
        let dx = net.backward(&trace, &seed, Some(&mut grads));
        let h = 1e-5;
        // Every parameter tensor, sampled coordinates.
        for id in 0..net.params.len() {
            let n = net.params.value(id).len();
            let analytic = grads.get(id).clone();
            for _ in 0..6.min(n) {
                let flat = rng.random_range(0..n);
                let orig = net.params.value(id).as_slice().unwrap()[flat];
                net.params.value_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
                let up = (&net.infer(&x).unwrap() * &seed).sum();
                net.params.value_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
                let down = (&net.infer(&x).unwrap() * &seed).sum();
                net.params.value_mut(id).as_slice_mut().unwrap()[flat] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[flat];
                assert!(
                    (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 2e-3,
                    "{} [{flat}]: fd {fd} vs analytic {a}",
                    net.params.name(id)
                );
            }
        }
        // Input gradient.
        for _ in 0..10 {
            let idx = (
                0,
                rng.random_range(0..2),
                rng.random_range(0..8),
                rng.random_range(0..8),
            );
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = ((&net.infer(&p).unwrap() * &seed).sum()
                - (&net.infer(&m).unwrap() * &seed).sum())
                / (2.0 * h);
            assert!(
                (fd - dx[idx]).abs() / fd.abs().max(dx[idx].abs()).max(1e-6) < 2e-3,
                "input {idx:?}: fd {fd} vs analytic {}",
                dx[idx]
            );
        }
    }

    #[test]
    fn head_grad_norm_matches_full_backward_restricted_to_head() {
        let net = UNet::build(tiny_cfg(), 19).unwrap();
        let mut rng = SmallRng::seed_from_u64(20);
        let x = rand_tensor(&mut rng, (2, 2, 8, 8));
        let (y, trace) = net.forward_t(&x).unwrap();
        let dy = Array::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let mut grads = net.params.zero_grads();
        net.backward(&trace, &dy, Some(&mut grads));
        let direct = net.head_grad_norm(&trace, &dy);
        let via_full = grads.l2_norm_of(&net.head_param_ids());
        assert!((direct - via_full).abs() < 1e-10);
    }
}
