//! Whole-volume prediction with a trained segmenter.

use ndarray::{s, Array3, Array4, Axis};

use crate::enhance::{DegeneratePolicy, EnhanceParams};
use crate::error::Result;
use crate::nn::{seg_forward, Tensor, UNet};
use crate::volume::Volume;

use super::data::{class_label, prepare_slices};

/// Slices processed per forward pass, bounding activation memory.
const CHUNK: usize = 8;

/// Enhance every slice of a volume and stack them as a `[S, 4, H, W]`
/// tensor in the tanh range.
pub fn volume_to_tensor(
    volume: &Volume,
    params: &EnhanceParams,
    policy: DegeneratePolicy,
) -> Result<Tensor> {
    let slices = prepare_slices(volume, params, policy, true)?;
    let (_, h, w) = slices[0].image.dim();
    let mut out = Tensor::zeros((slices.len(), 4, h, w));
    for (i, sl) in slices.iter().enumerate() {
        for (idx, &v) in sl.image.indexed_iter() {
            out[[i, idx.0, idx.1, idx.2]] = 2.0 * f64::from(v) - 1.0;
        }
    }
    Ok(out)
}

/// Class probabilities for every slice: `[S, classes, H, W]`.
pub fn predict_probs(
    net: &UNet,
    volume: &Volume,
    params: &EnhanceParams,
    policy: DegeneratePolicy,
) -> Result<Array4<f64>> {
    let x = volume_to_tensor(volume, params, policy)?;
    let (s_total, _, h, w) = x.dim();
    let mut probs = Array4::zeros((s_total, net.cfg.out_channels, h, w));
    let mut start = 0;
    while start < s_total {
        let end = (start + CHUNK).min(s_total);
        let chunk = x.slice(s![start..end, .., .., ..]).to_owned();
        let y = seg_forward(net, &chunk)?;
        probs.slice_mut(s![start..end, .., .., ..]).assign(&y);
        start = end;
    }
    Ok(probs)
}

fn tumor_argmax_label(probs: &Array4<f64>, sl: usize, r: usize, c: usize) -> u8 {
    let classes = probs.dim().1;
    // Ties resolve to the lowest class index, so untrained uniform outputs
    // still label deterministically.
    let mut best = 1;
    for k in 2..classes {
        if probs[[sl, k, r, c]] > probs[[sl, best, r, c]] {
            best = k;
        }
    }
    class_label(best)
}

/// Label volume by plain per-voxel argmax over all classes.
pub fn predict_labels(
    net: &UNet,
    volume: &Volume,
    params: &EnhanceParams,
    policy: DegeneratePolicy,
) -> Result<Array3<u8>> {
    let probs = predict_probs(net, volume, params, policy)?;
    let (s_total, classes, h, w) = probs.dim();
    let mut labels = Array3::zeros((s_total, h, w));
    for sl in 0..s_total {
        for r in 0..h {
            for c in 0..w {
                // Lowest class index wins ties: a fully uniform output is
                // read as background, not as an arbitrary tumor class.
                let mut best = 0;
                for k in 1..classes {
                    if probs[[sl, k, r, c]] > probs[[sl, best, r, c]] {
                        best = k;
                    }
                }
                labels[[sl, r, c]] = class_label(best);
            }
        }
    }
    Ok(labels)
}

/// Label volume with an explicit decision threshold `tau` on the abnormality
/// mask `1 − P(background)`: voxels below the threshold become background,
/// voxels at or above it take the most probable tumor class.
pub fn predict_with_threshold(
    net: &UNet,
    volume: &Volume,
    params: &EnhanceParams,
    policy: DegeneratePolicy,
    tau: f64,
) -> Result<Array3<u8>> {
    let probs = predict_probs(net, volume, params, policy)?;
    Ok(threshold_labels(&probs, tau))
}

/// Apply the decision threshold to an existing probability volume; sweeping
/// thresholds then needs only one forward pass per volume.
pub fn threshold_labels(probs: &Array4<f64>, tau: f64) -> Array3<u8> {
    let (s_total, _, h, w) = probs.dim();
    let mut labels = Array3::zeros((s_total, h, w));
    for sl in 0..s_total {
        for r in 0..h {
            for c in 0..w {
                let abnormality = 1.0 - probs[[sl, 0, r, c]];
                if abnormality >= tau {
                    labels[[sl, r, c]] = tumor_argmax_label(probs, sl, r, c);
                }
            }
        }
    }
    labels
}

/// Mean abnormality map over slices, useful for report imagery:
/// `[S, H, W]` of `1 − P(background)`.
pub fn abnormality_maps(probs: &Array4<f64>) -> Array3<f64> {
    probs.index_axis(Axis(1), 0).mapv(|p| 1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{HeadKind, UNetConfig};
    use crate::volume::{synth_dataset, PhantomSpec};

    fn tiny_net(seed: u64) -> UNet {
        UNet::build(
            UNetConfig {
                in_channels: 4,
                encoder_channels: vec![3, 4],
                out_channels: 4,
                head: HeadKind::Softmax,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_volume(seed: u64) -> Volume {
        synth_dataset(
            &PhantomSpec {
                image_size: 32,
                n_slices: 3,
                n_subjects: 1,
                tumor_radius_range: (3.0, 6.0),
                seed,
                ..PhantomSpec::default()
            },
            true,
        )
        .unwrap()
        .remove(0)
    }

    #[test]
    fn probability_and_label_shapes() {
        let net = tiny_net(1);
        let vol = tiny_volume(2);
        let ep = EnhanceParams::default();
        let probs = predict_probs(&net, &vol, &ep, DegeneratePolicy::Skip).unwrap();
        assert_eq!(probs.dim(), (3, 4, 32, 32));
        let labels = predict_labels(&net, &vol, &ep, DegeneratePolicy::Skip).unwrap();
        assert_eq!(labels.dim(), (3, 32, 32));
        assert!(labels.iter().all(|l| [0, 1, 2, 4].contains(l)));
    }

    #[test]
    fn labels_agree_with_manual_argmax() {
        let net = tiny_net(3);
        let vol = tiny_volume(4);
        let ep = EnhanceParams::default();
        let probs = predict_probs(&net, &vol, &ep, DegeneratePolicy::Skip).unwrap();
        let labels = predict_labels(&net, &vol, &ep, DegeneratePolicy::Skip).unwrap();
        for (sl, r, c) in [(0, 5, 7), (1, 16, 16), (2, 31, 0)] {
            let mut best = 0;
            for k in 1..4 {
                if probs[[sl, k, r, c]] > probs[[sl, best, r, c]] {
                    best = k;
                }
            }
            assert_eq!(labels[[sl, r, c]], class_label(best));
        }
    }

    #[test]
    fn threshold_extremes_and_monotonicity() {
        let net = tiny_net(5);
        let vol = tiny_volume(6);
        let ep = EnhanceParams::default();
        // tau = 0: everything clears the bar, nothing is background.
        let all = predict_with_threshold(&net, &vol, &ep, DegeneratePolicy::Skip, 0.0).unwrap();
        assert!(all.iter().all(|&l| l != 0));
        // tau just above 1: nothing clears it.
        let none = predict_with_threshold(&net, &vol, &ep, DegeneratePolicy::Skip, 1.01).unwrap();
        assert!(none.iter().all(|&l| l == 0));
        // Raising tau never grows the predicted tumor set.
        let mut prev = usize::MAX;
        for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let labels =
                predict_with_threshold(&net, &vol, &ep, DegeneratePolicy::Skip, tau).unwrap();
            let count = labels.iter().filter(|&&l| l != 0).count();
            assert!(count <= prev, "tau {tau} grew the mask");
            prev = count;
        }
    }

    #[test]
    fn chunking_is_invisible() {
        // 11 slices crosses the chunk boundary; a volume-sized batch in one
        // pass must match the chunked path exactly.
        let net = tiny_net(7);
        let vol = synth_dataset(
            &PhantomSpec {
                image_size: 16,
                n_slices: 11,
                n_subjects: 1,
                tumor_radius_range: (3.0, 5.0),
                seed: 8,
                ..PhantomSpec::default()
            },
            true,
        )
        .unwrap()
        .remove(0);
        let ep = EnhanceParams::default();
        let probs = predict_probs(&net, &vol, &ep, DegeneratePolicy::Skip).unwrap();
        let x = volume_to_tensor(&vol, &ep, DegeneratePolicy::Skip).unwrap();
        let direct = seg_forward(&net, &x).unwrap();
        assert_eq!(probs, direct);
    }
}

