//! Patch discriminator for the inpainting GAN.
//!
//! A stride-5 first convolution carves the input into a coarse grid, two
//! stride-1 convolutions with instance norm deepen each patch's receptive
//! field, and a 1×1 sigmoid head scores every patch in (0, 1): one
//! real/synthetic verdict per `ceil(H/5) × ceil(W/5)` cell. Patch `(i, j)`
//! is anchored at input row `5i`, column `5j`, matching the stride-5 pooling
//! used to build edge-attention gates.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::Conv2d;
use super::ops::{
    instnorm_bwd, instnorm_fwd, leaky_relu_bwd, leaky_relu_fwd, sigmoid_bwd, sigmoid_fwd,
    InstNormCache, PadMode,
};
use super::{GradBuf, Params, Tensor};

const LRELU_SLOPE: f64 = 0.2;
const PATCH: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Widths of the three hidden conv layers.
    pub widths: [usize; 3],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            widths: [32, 64, 64],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(
                "discriminator channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    head: Conv2d,
    pub params: Params,
}

pub struct DiscTrace {
    x: Tensor,
    z1: Tensor,
    a1: Tensor,
    n2: InstNormCache,
    a2: Tensor,
    n3: InstNormCache,
    a3: Tensor,
    y: Tensor,
}

impl Discriminator {
    pub fn build(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let [w1, w2, w3] = cfg.widths;
        let c1 = Conv2d::new(
            &mut params,
            "c1",
            cfg.in_channels,
            w1,
            PATCH,
            PATCH,
            PadMode::CeilCover,
            &mut rng,
        );
        let c2 = Conv2d::new(&mut params, "c2", w1, w2, 3, 1, PadMode::Same, &mut rng);
        let c3 = Conv2d::new(&mut params, "c3", w2, w3, 3, 1, PadMode::Same, &mut rng);
        let head = Conv2d::new(&mut params, "head", w3, 1, 1, 1, PadMode::Same, &mut rng);
        Ok(Self {
            cfg,
            c1,
            c2,
            c3,
            head,
            params,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Data(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h < PATCH || w < PATCH {
            return Err(Error::Data(format!(
                "discriminator input {h}×{w} smaller than one {PATCH}×{PATCH} patch"
            )));
        }
        Ok(())
    }

    /// Patch scores without caches.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let a1 = leaky_relu_fwd(&self.c1.forward(&self.params, x), LRELU_SLOPE);
        let (p2, _) = instnorm_fwd(&self.c2.forward(&self.params, &a1));
        let a2 = leaky_relu_fwd(&p2, LRELU_SLOPE);
        let (p3, _) = instnorm_fwd(&self.c3.forward(&self.params, &a2));
        let a3 = leaky_relu_fwd(&p3, LRELU_SLOPE);
        Ok(sigmoid_fwd(&self.head.forward(&self.params, &a3)))
    }

    /// Forward pass keeping every cache needed by [`Discriminator::backward`].
    pub fn forward_t(&self, x: &Tensor) -> Result<(Tensor, DiscTrace)> {
        self.check_input(x)?;
        let z1 = self.c1.forward(&self.params, x);
        let a1 = leaky_relu_fwd(&z1, LRELU_SLOPE);
        let (p2, n2) = instnorm_fwd(&self.c2.forward(&self.params, &a1));
        let a2 = leaky_relu_fwd(&p2, LRELU_SLOPE);
        let (p3, n3) = instnorm_fwd(&self.c3.forward(&self.params, &a2));
        let a3 = leaky_relu_fwd(&p3, LRELU_SLOPE);
        let y = sigmoid_fwd(&self.head.forward(&self.params, &a3));
        Ok((
            y.clone(),
            DiscTrace {
                x: x.clone(),
                z1,
                a1,
                n2,
                a2,
                n3,
                a3,
                y,
            },
        ))
    }

    /// Backpropagate a patch-score gradient to the input; accumulates
    /// parameter gradients unless frozen (`grads = None`).
    pub fn backward(
        &self,
        trace: &DiscTrace,
        d_scores: &Tensor,
        mut grads: Option<&mut GradBuf>,
    ) -> Tensor {
        let dz_h = sigmoid_bwd(&trace.y, d_scores);
        let d_a3 = self
            .head
            .backward(&self.params, &trace.a3, &dz_h, grads.as_deref_mut());
        let d_p3 = leaky_relu_bwd(&trace.n3.xhat, &d_a3, LRELU_SLOPE);
        let d_z3 = instnorm_bwd(&trace.n3, &d_p3);
        let d_a2 = self
            .c3
            .backward(&self.params, &trace.a2, &d_z3, grads.as_deref_mut());
        let d_p2 = leaky_relu_bwd(&trace.n2.xhat, &d_a2, LRELU_SLOPE);
        let d_z2 = instnorm_bwd(&trace.n2, &d_p2);
        let d_a1 = self
            .c2
            .backward(&self.params, &trace.a1, &d_z2, grads.as_deref_mut());
        let d_z1 = leaky_relu_bwd(&trace.z1, &d_a1, LRELU_SLOPE);
        self.c1.backward(&self.params, &trace.x, &d_z1, grads)
    }
}

/// Patch realness scores for a batch already in the tanh range [−1, 1].
pub fn disc_forward(net: &Discriminator, images: &Tensor) -> Result<Tensor> {
    if let Some(v) = images.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::Numerical(format!(
            "discriminator input outside [-1, 1]: {v}"
        )));
    }
    net.infer(images)
}
