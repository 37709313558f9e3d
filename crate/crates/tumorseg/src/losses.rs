//! Loss terms, phased introduction, and gradient-norm weight balancing.
//!
//! Every term returns its scalar value together with the analytic gradient
//! with respect to its primary input, so the training loop can weight and
//! combine per-term gradients without re-running a backward pass per term.
//!
//! Training proceeds in two phases: epochs 0–10 optimize the segmentation
//! terms (cross-entropy + Dice) alone; from epoch 11 the sparsity, size, and
//! adversarial terms join, each scaled by a dynamic weight
//! `λ_i = 1 / (‖∇L_i‖ + ε)` so that terms with smaller gradients contribute
//! proportionally more. Gradient norms are estimated against the segmenter's
//! final-layer parameters only and smoothed with an EMA; see
//! [`LossLedger::observe_grad_norms`].

use ndarray::{Array, Array2, ArrayView, ArrayView2, Dimension};
use serde::{Deserialize, Serialize};

use crate::edge::EdgeMap;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing constant in the soft-Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-6;
/// EMA momentum for per-term gradient-norm estimates.
pub const GRAD_NORM_MOMENTUM: f64 = 0.9;
/// First epoch (0-indexed) of phase 2.
pub const PHASE_SWITCH_EPOCH: usize = 11;

/// Names of the dynamically balanced terms, in the order used by every
/// `[f64; 4]` of norms or weights in this module.
pub const BALANCED_TERM_NAMES: [&str; 4] = ["seg", "sparsity", "adv", "size"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    One,
    Two,
}

/// Epochs 0–10 → phase 1, epoch 11 onward → phase 2.
pub fn phase_for_epoch(epoch: usize) -> Phase {
    if epoch < PHASE_SWITCH_EPOCH {
        Phase::One
    } else {
        Phase::Two
    }
}

/// Tunable loss coefficients, logged in every run header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    /// Sparsity coefficient α.
    pub alpha: f64,
    /// Size-consistency coefficient γ.
    pub gamma: f64,
    /// Guard ε in the dynamic-weight denominator.
    pub eps_weight: f64,
    /// First epoch (0-indexed) where the refinement terms join the loss;
    /// defaults to [`PHASE_SWITCH_EPOCH`], shrunk for small-budget runs.
    pub phase_switch_epoch: usize,
}

impl Default for LossConstants {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 1.0,
            eps_weight: 1e-8,
            phase_switch_epoch: PHASE_SWITCH_EPOCH,
        }
    }
}

/// Most recent scalar value of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub d_gan: f64,
    pub g_gan: f64,
    pub ce: f64,
    pub dice: f64,
    pub sparsity: f64,
    pub size: f64,
    pub adv: f64,
}

/// Bookkeeping for one training run: term values, smoothed gradient norms,
/// and the weights most recently used to combine them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossLedger {
    pub constants: LossConstants,
    pub values: TermValues,
    /// EMA of per-term gradient norms, `BALANCED_TERM_NAMES` order.
    pub grad_norms: [f64; 4],
    /// Weights used by the last [`total_loss`] call.
    pub weights: [f64; 4],
    pub phase: Phase,
    ema_ready: bool,
}

impl LossLedger {
    pub fn new(constants: LossConstants) -> Self {
        Self {
            constants,
            values: TermValues::default(),
            grad_norms: [0.0; 4],
            weights: [1.0, 0.0, 0.0, 0.0],
            phase: Phase::One,
            ema_ready: false,
        }
    }

    /// Fold a fresh set of per-term gradient-norm estimates into the EMA.
    /// The first observation seeds the average directly.
    pub fn observe_grad_norms(&mut self, fresh: [f64; 4]) {
        if self.ema_ready {
            for (ema, f) in self.grad_norms.iter_mut().zip(fresh) {
                *ema = GRAD_NORM_MOMENTUM * *ema + (1.0 - GRAD_NORM_MOMENTUM) * f;
            }
        } else {
            self.grad_norms = fresh;
            self.ema_ready = true;
        }
    }
}

fn warn_clamped(op: &str, clamped: usize) {
    if clamped > 0 {
        log::warn!("{op}: {clamped} probabilities clamped to ({PROB_EPS}, {})", 1.0 - PROB_EPS);
    }
}

/// `−E[ln D(x)] − E[ln(1 − D(G(z)))]`, plus gradients w.r.t. both score maps.
///
/// Expectations are means over every patch cell of each map. Scores at
/// exactly 0 or 1 are clamped (and their gradient zeroed, since the clamp is
/// flat there).
pub fn disc_loss<D1, D2>(
    real_scores: ArrayView<f64, D1>,
    fake_scores: ArrayView<f64, D2>,
) -> (f64, Array<f64, D1>, Array<f64, D2>)
where
    D1: Dimension,
    D2: Dimension,
{
    let mut clamped = 0usize;
    let nr = real_scores.len() as f64;
    let mut loss = 0.0;
    let mut d_real = Array::zeros(real_scores.raw_dim());
    ndarray::Zip::from(&mut d_real)
        .and(&real_scores)
        .for_each(|g, &r| {
            let c = r.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if c != r {
                clamped += 1;
            }
            loss -= c.ln() / nr;
            *g = if c == r { -1.0 / (c * nr) } else { 0.0 };
        });
    let nf = fake_scores.len() as f64;
    let mut d_fake = Array::zeros(fake_scores.raw_dim());
    ndarray::Zip::from(&mut d_fake)
        .and(&fake_scores)
        .for_each(|g, &f| {
            let c = f.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if c != f {
                clamped += 1;
            }
            loss -= (1.0 - c).ln() / nf;
            *g = if c == f { 1.0 / ((1.0 - c) * nf) } else { 0.0 };
        });
    warn_clamped("disc_loss", clamped);
    (loss, d_real, d_fake)
}

/// `−E[ln D(G(z))]`: the generator's incentive to fool the discriminator.
pub fn gen_loss<D: Dimension>(fake_scores: ArrayView<f64, D>) -> (f64, Array<f64, D>) {
    let n = fake_scores.len() as f64;
    let mut grad = Array::zeros(fake_scores.raw_dim());
    if fake_scores.is_empty() {
        return (0.0, grad);
    }
    let mut clamped = 0usize;
    let mut loss = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&fake_scores)
        .for_each(|g, &f| {
            let c = f.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if c != f {
                clamped += 1;
            }
            loss -= c.ln() / n;
            *g = if c == f { -1.0 / (c * n) } else { 0.0 };
        });
    warn_clamped("gen_loss", clamped);
    (loss, grad)
}

/// Mean absolute reconstruction error over the masked region:
/// `Σ |r − t|·m / Σ m` (zero, with zero gradient, when the mask is empty).
/// The gradient uses the standard sign subgradient, zero where `r == t`.
pub fn masked_l1_loss<D: Dimension>(
    recon: ArrayView<f64, D>,
    target: ArrayView<f64, D>,
    mask: ArrayView<f64, D>,
) -> (f64, Array<f64, D>) {
    let area: f64 = mask.sum();
    let mut grad = Array::zeros(recon.raw_dim());
    if area <= 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&recon)
        .and(&target)
        .and(&mask)
        .for_each(|g, &r, &t, &m| {
            loss += (r - t).abs() * m / area;
            // f64::signum maps ±0.0 to ±1.0; the subgradient at r == t is 0.
            let sign = if r > t {
                1.0
            } else if r < t {
                -1.0
            } else {
                0.0
            };
            *g = sign * m / area;
        });
    (loss, grad)
}

/// Binary cross-entropy, mean over every element of the map. Multi-class
/// segmentation sums this over softmax channels (see [`multiclass_ce`]).
pub fn ce_loss<D: Dimension>(
    probs: ArrayView<f64, D>,
    targets: ArrayView<f64, D>,
) -> (f64, Array<f64, D>) {
    let n = probs.len() as f64;
    let mut grad = Array::zeros(probs.raw_dim());
    if probs.is_empty() {
        return (0.0, grad);
    }
    let mut clamped = 0usize;
    let mut loss = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&probs)
        .and(&targets)
        .for_each(|g, &p, &t| {
            let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if c != p {
                clamped += 1;
            }
            loss -= (t * c.ln() + (1.0 - t) * (1.0 - c).ln()) / n;
            *g = if c == p {
                (-t / c + (1.0 - t) / (1.0 - c)) / n
            } else {
                0.0
            };
        });
    warn_clamped("ce_loss", clamped);
    (loss, grad)
}

/// Per-class binary cross-entropy summed over the channel axis of a
/// `[classes, H, W]` probability stack against a one-hot target stack.
pub fn multiclass_ce(
    probs: ndarray::ArrayView3<f64>,
    onehot: ndarray::ArrayView3<f64>,
) -> (f64, ndarray::Array3<f64>) {
    use ndarray::Axis;
    let mut grad = ndarray::Array3::zeros(probs.raw_dim());
    let mut total = 0.0;
    for c in 0..probs.dim().0 {
        let (v, g) = ce_loss(probs.index_axis(Axis(0), c), onehot.index_axis(Axis(0), c));
        total += v;
        grad.index_axis_mut(Axis(0), c).assign(&g);
    }
    (total, grad)
}

/// Soft Dice loss `1 − (2·Σpt + s) / (Σp + Σt + s)` with the gradient taken
/// w.r.t. the soft mask. Zero when both masks are empty.
pub fn dice_loss<D: Dimension>(
    soft_mask: ArrayView<f64, D>,
    target_mask: ArrayView<f64, D>,
) -> (f64, Array<f64, D>) {
    let sum_p: f64 = soft_mask.sum();
    let sum_t: f64 = target_mask.sum();
    let mut inter = 0.0;
    ndarray::Zip::from(&soft_mask)
        .and(&target_mask)
        .for_each(|&p, &t| inter += p * t);
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_t + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let grad = ndarray::Zip::from(&target_mask)
        .map_collect(|&t| (num - 2.0 * t * den) / (den * den));
    (loss, grad)
}

/// `α · mean(M)`: L1 mask penalty, normalized per pixel so α is
/// resolution-independent.
pub fn sparsity_loss<D: Dimension>(mask: ArrayView<f64, D>, alpha: f64) -> (f64, Array<f64, D>) {
    let n = mask.len() as f64;
    if mask.is_empty() {
        return (0.0, Array::zeros(mask.raw_dim()));
    }
    let loss = alpha * mask.sum() / n;
    let grad = Array::from_elem(mask.raw_dim(), alpha / n);
    (loss, grad)
}

/// `γ · |ΣM − S| / S` for one batch item with ground-truth lesion size `S`.
/// Returns zero (and a zero gradient) when `S = 0`; blank slices are
/// pre-filtered, so that case is defensive.
pub fn size_loss<D: Dimension>(
    mask: ArrayView<f64, D>,
    s_label: f64,
    gamma: f64,
) -> (f64, Array<f64, D>) {
    if s_label <= 0.0 {
        return (0.0, Array::zeros(mask.raw_dim()));
    }
    let diff = mask.sum() - s_label;
    let loss = gamma * diff.abs() / s_label;
    let g = if diff == 0.0 {
        0.0
    } else {
        gamma * diff.signum() / s_label
    };
    (loss, Array::from_elem(mask.raw_dim(), g))
}

/// Edge-gated adversarial feedback on the discriminator's abnormality map:
/// `mean_p [ E_p · (−ln(1 − a_p)) ]`.
///
/// `a_p` is the per-patch probability that the reconstruction still looks
/// abnormal, so minimizing the term pushes reconstructions toward "normal"
/// exactly where the proposed mask has a boundary. Patches with zero edge
/// weight contribute nothing. The gradient is w.r.t. the abnormality map.
pub fn adv_feedback_loss(
    abnormality: ArrayView2<f64>,
    edge: &EdgeMap,
) -> Result<(f64, Array2<f64>)> {
    if abnormality.dim() != edge.values.dim() {
        return Err(Error::Data(format!(
            "adversarial loss shape mismatch: discriminator map {:?} vs edge map {:?}",
            abnormality.dim(),
            edge.values.dim()
        )));
    }
    let n = abnormality.len() as f64;
    let mut grad = Array2::zeros(abnormality.raw_dim());
    if abnormality.is_empty() {
        return Ok((0.0, grad));
    }
    if edge.values.iter().all(|&e| e == 0.0) {
        log::warn!("adv_feedback_loss: edge map is all zero, no boundary signal");
    }
    let mut clamped = 0usize;
    let mut loss = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&abnormality)
        .and(&edge.values)
        .for_each(|g, &a, &e| {
            let c = a.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if c != a {
                clamped += 1;
            }
            loss -= e * (1.0 - c).ln() / n;
            *g = if c == a { e / ((1.0 - c) * n) } else { 0.0 };
        });
    warn_clamped("adv_feedback_loss", clamped);
    Ok((loss, grad))
}

/// `λ_i = 1 / (‖∇L_i‖ + ε)`, then rescaled so the weights sum to the number
/// of terms. Rescaling keeps the total loss on a stable scale; the ratios of
/// Eq-style raw weights are preserved.
pub fn dynamic_weights(grad_norms: &[f64], eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = grad_norms.iter().map(|&g| 1.0 / (g + eps)).collect();
    let sum: f64 = raw.iter().sum();
    let k = raw.len() as f64;
    raw.into_iter().map(|r| r * k / sum).collect()
}

/// Combine the ledger's term values for the given epoch. Phase 1 is plain
/// `L_ce + L_dice`; phase 2 applies dynamic weights to the segmentation,
/// sparsity, adversarial, and size terms. The phase and the weights used are
/// written back to the ledger, and the total is returned.
pub fn total_loss(ledger: &mut LossLedger, epoch: usize) -> f64 {
    ledger.phase = if epoch < ledger.constants.phase_switch_epoch {
        Phase::One
    } else {
        Phase::Two
    };
    let v = &ledger.values;
    let seg = v.ce + v.dice;
    match ledger.phase {
        Phase::One => {
            ledger.weights = [1.0, 0.0, 0.0, 0.0];
            seg
        }
        Phase::Two => {
            let w = dynamic_weights(&ledger.grad_norms, ledger.constants.eps_weight);
            ledger.weights = [w[0], w[1], w[2], w[3]];
            w[0] * seg + w[1] * v.sparsity + w[2] * v.adv + w[3] * v.size
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::edge_attention;
    use ndarray::{array, Array2};
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    fn random_map(rng: &mut SmallRng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(lo..hi))
    }

    /// Central finite differences, h = 1e-4, max relative error 1e-3.
    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-4;
        for idx in ndarray::indices(x.dim()) {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic[idx];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (fd - a).abs() / denom < 1e-3,
                "at {idx:?}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn disc_loss_reference_points() {
        let half = Array2::from_elem((3, 3), 0.5);
        let (l, _, _) = disc_loss(half.view(), half.view());
        assert!((l - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        let good_real = Array2::from_elem((3, 3), 1.0 - 1e-6);
        let good_fake = Array2::from_elem((3, 3), 1e-6);
        let (l, _, _) = disc_loss(good_real.view(), good_fake.view());
        assert!(l < 1e-5);
    }

    #[test]
    fn disc_loss_matches_scalar_oracle() {
        let mut rng = SmallRng::seed_from_u64(10);
        let real = random_map(&mut rng, 4, 5, 0.05, 0.95);
        let fake = random_map(&mut rng, 3, 6, 0.05, 0.95);
        let (l, _, _) = disc_loss(real.view(), fake.view());
        let mut expect = 0.0;
        for &r in real.iter() {
            expect -= r.ln() / real.len() as f64;
        }
        for &f in fake.iter() {
            expect -= (1.0 - f).ln() / fake.len() as f64;
        }
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_gradients_match_finite_differences() {
        let mut rng = SmallRng::seed_from_u64(11);
        let real = random_map(&mut rng, 6, 6, 0.1, 0.9);
        let fake = random_map(&mut rng, 6, 6, 0.1, 0.9);
        let (_, d_real, d_fake) = disc_loss(real.view(), fake.view());
        fd_check(
            |x| disc_loss(x.view(), fake.view()).0,
            &real,
            &d_real,
        );
        fd_check(
            |x| disc_loss(real.view(), x.view()).0,
            &fake,
            &d_fake,
        );
    }

    #[test]
    fn gen_loss_reference_points_and_gradient() {
        let half = Array2::from_elem((2, 2), 0.5);
        assert!((gen_loss(half.view()).0 - (2.0f64).ln()).abs() < 1e-12);
        let good = Array2::from_elem((2, 2), 1.0 - 1e-6);
        assert!(gen_loss(good.view()).0 < 1e-5);
        let mut rng = SmallRng::seed_from_u64(12);
        let fake = random_map(&mut rng, 6, 6, 0.1, 0.9);
        let expect: f64 =
            fake.iter().map(|&f| -f.ln()).sum::<f64>() / fake.len() as f64;
        let (l, grad) = gen_loss(fake.view());
        assert!((l - expect).abs() < 1e-12);
        fd_check(|x| gen_loss(x.view()).0, &fake, &grad);
    }

    #[test]
    fn ce_loss_reference_points() {
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let p_perfect = array![[1.0 - PROB_EPS, PROB_EPS], [PROB_EPS, 1.0 - PROB_EPS]];
        assert!(ce_loss(p_perfect.view(), y.view()).0 < 1e-6);
        let p_half = Array2::from_elem((2, 2), 0.5);
        assert!((ce_loss(p_half.view(), y.view()).0 - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_matches_oracle_and_finite_differences() {
        let mut rng = SmallRng::seed_from_u64(13);
        let p = random_map(&mut rng, 6, 6, 0.1, 0.9);
        let y = Array2::from_shape_fn((6, 6), |_| f64::from(rng.random_bool(0.5)));
        let (l, grad) = ce_loss(p.view(), y.view());
        let mut expect = 0.0;
        for (pi, yi) in p.iter().zip(y.iter()) {
            expect -= (yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln()) / 36.0;
        }
        assert!((l - expect).abs() < 1e-12);
        fd_check(|x| ce_loss(x.view(), y.view()).0, &p, &grad);
    }

    #[test]
    fn multiclass_ce_sums_per_channel_terms() {
        let mut rng = SmallRng::seed_from_u64(14);
        let probs = ndarray::Array3::from_shape_fn((4, 3, 3), |_| rng.random_range(0.1..0.9));
        let mut onehot = ndarray::Array3::zeros((4, 3, 3));
        for i in 0..3 {
            for j in 0..3 {
                onehot[[rng.random_range(0..4), i, j]] = 1.0;
            }
        }
        let (total, _) = multiclass_ce(probs.view(), onehot.view());
        let mut expect = 0.0;
        for c in 0..4 {
            expect += ce_loss(
                probs.index_axis(ndarray::Axis(0), c),
                onehot.index_axis(ndarray::Axis(0), c),
            )
            .0;
        }
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_reference_points() {
        let t = array![[1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(dice_loss(t.view(), t.view()).0, 0.0);
        let p = array![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]];
        assert!(dice_loss(p.view(), t.view()).0 > 0.999);
        // Equal sizes, half overlap -> 0.5.
        let a = array![[1.0, 1.0, 0.0, 0.0]];
        let b = array![[0.0, 1.0, 1.0, 0.0]];
        assert!((dice_loss(a.view(), b.view()).0 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dice_loss_is_symmetric_on_binary_masks() {
        let mut rng = SmallRng::seed_from_u64(15);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((5, 5), |_| f64::from(rng.random_bool(0.4)));
            let b = Array2::from_shape_fn((5, 5), |_| f64::from(rng.random_bool(0.4)));
            assert_eq!(dice_loss(a.view(), b.view()).0, dice_loss(b.view(), a.view()).0);
        }
    }

    #[test]
    fn dice_loss_gradient_matches_finite_differences() {
        let mut rng = SmallRng::seed_from_u64(16);
        let p = random_map(&mut rng, 6, 6, 0.05, 0.95);
        let t = Array2::from_shape_fn((6, 6), |_| f64::from(rng.random_bool(0.4)));
        let (_, grad) = dice_loss(p.view(), t.view());
        fd_check(|x| dice_loss(x.view(), t.view()).0, &p, &grad);
    }

    #[test]
    fn sparsity_loss_reference_points_and_gradient() {
        let zero = Array2::<f64>::zeros((4, 4));
        assert_eq!(sparsity_loss(zero.view(), 0.1).0, 0.0);
        let ones = Array2::<f64>::ones((4, 4));
        assert!((sparsity_loss(ones.view(), 1.0).0 - 1.0).abs() < 1e-12);
        let mut rng = SmallRng::seed_from_u64(17);
        let m = random_map(&mut rng, 6, 6, 0.0, 1.0);
        let (l, grad) = sparsity_loss(m.view(), 0.1);
        assert!((l - 0.1 * m.mean().unwrap()).abs() < 1e-12);
        fd_check(|x| sparsity_loss(x.view(), 0.1).0, &m, &grad);
    }

    #[test]
    fn size_loss_reference_points_and_gradient() {
        let m = Array2::from_elem((4, 4), 0.5);
        assert_eq!(size_loss(m.view(), 8.0, 1.0).0, 0.0);
        assert!((size_loss(m.view(), 4.0, 1.0).0 - 1.0).abs() < 1e-12);
        assert_eq!(size_loss(m.view(), 0.0, 1.0).0, 0.0);
        let mut rng = SmallRng::seed_from_u64(18);
        let m = random_map(&mut rng, 6, 6, 0.0, 1.0);
        let s = m.sum() + 3.0; // keep |ΣM−S| well away from the kink
        let (l, grad) = size_loss(m.view(), s, 1.0);
        assert!((l - (m.sum() - s).abs() / s).abs() < 1e-12);
        fd_check(|x| size_loss(x.view(), s, 1.0).0, &m, &grad);
    }

    #[test]
    fn adv_loss_reference_points() {
        let zero_edge = edge_attention(Array2::<f64>::zeros((15, 15)).view());
        let a = Array2::from_elem((3, 3), 0.5);
        assert_eq!(adv_feedback_loss(a.view(), &zero_edge).unwrap().0, 0.0);
        let unit_edge = EdgeMap {
            values: Array2::ones((3, 3)),
            source_shape: (15, 15),
        };
        let (l, _) = adv_feedback_loss(a.view(), &unit_edge).unwrap();
        assert!((l - (2.0f64).ln()).abs() < 1e-12);
        let wrong = Array2::from_elem((2, 2), 0.5);
        assert!(adv_feedback_loss(wrong.view(), &unit_edge).is_err());
    }

    #[test]
    fn adv_loss_matches_gated_oracle_and_finite_differences() {
        let mut rng = SmallRng::seed_from_u64(19);
        let a = random_map(&mut rng, 6, 6, 0.1, 0.9);
        let edge = EdgeMap {
            values: random_map(&mut rng, 6, 6, 0.0, 2.0),
            source_shape: (30, 30),
        };
        let (l, grad) = adv_feedback_loss(a.view(), &edge).unwrap();
        let mut expect = 0.0;
        for (ai, ei) in a.iter().zip(edge.values.iter()) {
            expect -= ei * (1.0 - ai).ln() / 36.0;
        }
        assert!((l - expect).abs() < 1e-12);
        fd_check(
            |x| adv_feedback_loss(x.view(), &edge).unwrap().0,
            &a,
            &grad,
        );
    }

    #[test]
    fn dynamic_weights_formula() {
        let eps = 1e-8;
        let w = dynamic_weights(&[1.0, 1.0], eps);
        assert!((w[0] - w[1]).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        // Renormalization preserves ratios: 1/(1+ε) vs 1/(3+ε).
        let w = dynamic_weights(&[1.0, 3.0], eps);
        assert!((w[0] / w[1] - 3.0).abs() < 1e-6);
        // Zero norm -> raw weight 1/ε, visible through the ratio.
        let w = dynamic_weights(&[0.0, 1.0], eps);
        assert!((w[0] / w[1] - (1.0 + eps) / eps).abs() / (1.0 / eps) < 1e-6);
    }

    #[test]
    fn dynamic_weights_scale_response() {
        let eps = 1e-12;
        let base = dynamic_weights(&[0.7, 2.0], eps);
        let scaled = dynamic_weights(&[0.7 * 5.0, 2.0], eps);
        let ratio_change = (base[0] / base[1]) / (scaled[0] / scaled[1]);
        assert!((ratio_change - 5.0).abs() < 1e-6);
    }

    #[test]
    fn phase_is_a_step_function_at_eleven() {
        for epoch in 0..=30 {
            let expect = if epoch <= 10 { Phase::One } else { Phase::Two };
            assert_eq!(phase_for_epoch(epoch), expect, "epoch {epoch}");
        }
    }

    #[test]
    fn total_loss_phases() {
        let mut ledger = LossLedger::new(LossConstants::default());
        ledger.values = TermValues {
            d_gan: 0.9,
            g_gan: 0.8,
            ce: 0.4,
            dice: 0.3,
            sparsity: 0.02,
            size: 0.6,
            adv: 0.15,
        };
        ledger.observe_grad_norms([1.0, 0.5, 2.0, 0.25]);
        let total = total_loss(&mut ledger, 5);
        assert!((total - 0.7).abs() < 1e-12);
        assert_eq!(ledger.weights[1..], [0.0, 0.0, 0.0]);
        assert_eq!(ledger.phase, Phase::One);

        let total = total_loss(&mut ledger, 11);
        assert_eq!(ledger.phase, Phase::Two);
        assert!(ledger.weights.iter().all(|&w| w > 0.0));
        let w = dynamic_weights(&ledger.grad_norms, ledger.constants.eps_weight);
        let expect = w[0] * 0.7 + w[1] * 0.02 + w[2] * 0.15 + w[3] * 0.6;
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn grad_norm_ema_seeds_then_smooths() {
        let mut ledger = LossLedger::new(LossConstants::default());
        ledger.observe_grad_norms([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ledger.grad_norms, [1.0, 2.0, 3.0, 4.0]);
        ledger.observe_grad_norms([2.0, 2.0, 3.0, 0.0]);
        assert!((ledger.grad_norms[0] - 1.1).abs() < 1e-12);
        assert!((ledger.grad_norms[3] - 3.6).abs() < 1e-12);
    }

    #[test]
    fn configured_phase_switch_moves_the_step() {
        let constants = LossConstants {
            phase_switch_epoch: 3,
            ..LossConstants::default()
        };
        let mut ledger = LossLedger::new(constants);
        ledger.values.ce = 1.0;
        ledger.observe_grad_norms([1.0, 1.0, 1.0, 1.0]);
        total_loss(&mut ledger, 2);
        assert_eq!(ledger.phase, Phase::One);
        total_loss(&mut ledger, 3);
        assert_eq!(ledger.phase, Phase::Two);
    }

    #[test]
    fn masked_l1_value_oracle() {
        // (|1-0| + |2-5| + |0.5-0.5|) over mask area 3 => 4/3; the unmasked
        // cell at [1,0] is ignored entirely.
        let recon = array![[1.0, 2.0], [9.0, 0.5]];
        let target = array![[0.0, 5.0], [0.0, 0.5]];
        let mask = array![[1.0, 1.0], [0.0, 1.0]];
        let (v, g) = masked_l1_loss(recon.view(), target.view(), mask.view());
        assert!((v - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(g[[1, 0]], 0.0); // masked out
        assert_eq!(g[[1, 1]], 0.0); // exact match: zero subgradient
        assert!((g[[0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[[0, 1]] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_l1_empty_mask_is_inert() {
        let x = array![[1.0, 2.0]];
        let zeros = Array2::zeros((1, 2));
        let (v, g) = masked_l1_loss(x.view(), x.view(), zeros.view());
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_l1_gradient_matches_finite_differences() {
        let mut rng = SmallRng::seed_from_u64(77);
        let recon = random_map(&mut rng, 5, 4, -1.0, 1.0);
        let target = random_map(&mut rng, 5, 4, -1.0, 1.0);
        let mask = Array2::from_shape_fn((5, 4), |_| f64::from(rng.random_bool(0.6)));
        let (_, g) = masked_l1_loss(recon.view(), target.view(), mask.view());
        fd_check(
            |r| masked_l1_loss(r.view(), target.view(), mask.view()).0,
            &recon,
            &g,
        );
    }
}
