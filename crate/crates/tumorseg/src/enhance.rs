//! Five-stage low-complexity contrast enhancement, applied per modality slice.
//!
//! For a nonnegative slice `I` with maximum `M` and shape parameter `λ`:
//!
//! ```text
//! IMG1 = M / ln(M + 1) * ln(I + 1)          log stretch, preserves ranking
//! IMG2 = 1 - exp(-I)                        soft saturation
//! IMG3 = (IMG1 + IMG2) / (λ + IMG1 * IMG2)  fusion of the two curves
//! IMG4 = erf(λ * atan(exp(IMG3)) - 0.5 * IMG3)
//! IMG5 = (IMG4 - min) / (max - min)         min-max normalization
//! ```
//!
//! All arithmetic runs in `f64`; the composition of saturating functions in
//! stage 4 is sensitive to rounding. Volumes are cast back to `f32` at the
//! end. Constant or all-zero slices are degenerate (stage 1 divides by
//! `ln(M+1)`, stage 5 by `max-min`) and are either copied verbatim or turned
//! into an error, per [`DegeneratePolicy`].

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnhanceParams {
    /// The λ of stages 3 and 4. No canonical value exists; 1.0 is an
    /// arbitrary but documented default.
    pub lambda_enh: f64,
    /// Spread below which stage 4's output is treated as constant.
    pub epsilon_guard: f64,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        Self {
            lambda_enh: 1.0,
            epsilon_guard: 1e-12,
        }
    }
}

impl EnhanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_enh.is_finite() && self.lambda_enh > 0.0) {
            return Err(Error::Config(format!(
                "lambda_enh must be positive, got {}",
                self.lambda_enh
            )));
        }
        if !(self.epsilon_guard.is_finite() && self.epsilon_guard > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_guard must be positive, got {}",
                self.epsilon_guard
            )));
        }
        Ok(())
    }
}

/// What to do with slices that cannot be enhanced (constant, all-zero,
/// negative, or non-finite).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    /// Copy the offending slice through unchanged. Blank slices legitimately
    /// occur at the ends of real volumes, so this is the default.
    Skip,
    /// Abort with a data error.
    Fail,
}

fn check_input(image: &ArrayView2<f64>) -> Result<()> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in image.iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Data(format!(
                "enhancement input must be finite and nonnegative, found {v}"
            )));
        }
        min = min.min(v);
        max = max.max(v);
    }
    if image.is_empty() || max <= 0.0 || min == max {
        return Err(Error::Data(
            "enhancement input is constant or all zero".into(),
        ));
    }
    Ok(())
}

/// All five intermediate stages, in order. Stage 5 is the final output.
pub fn enhance_stages(
    image: ArrayView2<f64>,
    params: &EnhanceParams,
) -> Result<[Array2<f64>; 5]> {
    params.validate()?;
    check_input(&image)?;
    let lam = params.lambda_enh;
    let max = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_gain = max / (max + 1.0).ln();
    let img1 = image.mapv(|v| log_gain * (v + 1.0).ln());
    let img2 = image.mapv(|v| 1.0 - (-v).exp());
    let mut img3 = Array2::zeros(image.dim());
    ndarray::Zip::from(&mut img3)
        .and(&img1)
        .and(&img2)
        .for_each(|c, &a, &b| *c = (a + b) / (lam + a * b));
    let img4 = img3.mapv(|c| libm::erf(lam * c.exp().atan() - 0.5 * c));
    let lo = img4.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img4.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= params.epsilon_guard {
        return Err(Error::Data(
            "enhancement output collapsed to a constant".into(),
        ));
    }
    let img5 = img4.mapv(|d| (d - lo) / (hi - lo));
    Ok([img1, img2, img3, img4, img5])
}

/// Enhance one slice. Output spans exactly [0, 1].
pub fn enhance(image: ArrayView2<f64>, params: &EnhanceParams) -> Result<Array2<f64>> {
    let [_, _, _, _, img5] = enhance_stages(image, params)?;
    Ok(img5)
}

/// Enhance every modality slice of a volume independently. Labels, spacing,
/// and subject id pass through untouched.
pub fn enhance_volume(
    volume: &Volume,
    params: &EnhanceParams,
    policy: DegeneratePolicy,
) -> Result<Volume> {
    params.validate()?;
    let mut modalities = volume.modalities.clone();
    let (n_mod, n_slices, _, _) = modalities.dim();
    for m in 0..n_mod {
        for s in 0..n_slices {
            let slice = volume
                .modalities
                .index_axis(Axis(0), m)
                .index_axis(Axis(0), s)
                .mapv(f64::from);
            match enhance(slice.view(), params) {
                Ok(out) => {
                    let mut target = modalities.index_axis_mut(Axis(0), m);
                    let mut target = target.index_axis_mut(Axis(0), s);
                    ndarray::Zip::from(&mut target)
                        .and(&out)
                        .for_each(|t, &v| *t = v as f32);
                }
                Err(e @ Error::Config(_)) => return Err(e),
                Err(e) => match policy {
                    DegeneratePolicy::Skip => {} // slice already holds the input
                    DegeneratePolicy::Fail => {
                        return Err(Error::Data(format!(
                            "{} modality {m} slice {s}: {e}",
                            volume.subject_id
                        )))
                    }
                },
            }
        }
    }
    Volume::new(
        modalities,
        volume.labels.clone(),
        volume.voxel_spacing,
        volume.subject_id.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_dataset, PhantomSpec};
    use ndarray::array;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    /// Reference values for [[1,2],[3,4]], λ=1, from a 50-digit scalar
    /// evaluation of the five stages.
    const ORACLE_STAGES: [[f64; 4]; 5] = [
        [
            1.72270623229357220268,
            2.730424777943941180538,
            3.445412464587144405361,
            4.0,
        ],
        [
            0.6321205588285576784045,
            0.864664716763387308106,
            0.9502129316321360570207,
            0.9816843611112658197063,
        ],
        [
            1.127273387749171582528,
            1.069679963808434497434,
            1.028487006271010414611,
            1.01115279985706476775,
        ],
        [
            0.6735728062586986311143,
            0.6815373326448041677717,
            0.686821377283876860651,
            0.6889437637769365422824,
        ],
        [0.0, 0.518154212361558228298, 0.8619222979088041349189, 1.0],
    ];

    #[test]
    fn matches_high_precision_reference() {
        let input = array![[1.0, 2.0], [3.0, 4.0]];
        let stages = enhance_stages(input.view(), &EnhanceParams::default()).unwrap();
        for (stage, expect) in stages.iter().zip(ORACLE_STAGES) {
            for (got, want) in stage.iter().zip(expect) {
                assert!(
                    (got - want).abs() <= 1e-14 * want.abs().max(1.0),
                    "got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn output_spans_zero_to_one_exactly() {
        let input = array![[0.0, 0.3, 2.0], [5.0, 1.0, 0.7]];
        let out = enhance(input.view(), &EnhanceParams::default()).unwrap();
        let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let zero = Array2::<f64>::zeros((3, 3));
        assert!(enhance(zero.view(), &EnhanceParams::default()).is_err());
        let constant = Array2::from_elem((3, 3), 2.5);
        assert!(enhance(constant.view(), &EnhanceParams::default()).is_err());
        let negative = array![[1.0, -0.5], [2.0, 3.0]];
        assert!(enhance(negative.view(), &EnhanceParams::default()).is_err());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let input = array![[1.0, 2.0], [3.0, 4.0]];
        let params = EnhanceParams {
            lambda_enh: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            enhance(input.view(), &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_stretch_preserves_pixel_ranking() {
        let mut rng = SmallRng::seed_from_u64(42);
        for _ in 0..200 {
            let img = Array2::from_shape_fn((4, 5), |_| rng.random_range(0.0..50.0f64));
            let [img1, ..] = enhance_stages(img.view(), &EnhanceParams::default()).unwrap();
            let flat_in: Vec<f64> = img.iter().cloned().collect();
            let flat_out: Vec<f64> = img1.iter().cloned().collect();
            for i in 0..flat_in.len() {
                for j in 0..flat_in.len() {
                    if flat_in[i] < flat_in[j] {
                        assert!(flat_out[i] < flat_out[j]);
                    } else if flat_in[i] == flat_in[j] {
                        assert_eq!(flat_out[i], flat_out[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn range_holds_over_random_images() {
        let mut rng = SmallRng::seed_from_u64(7);
        for _ in 0..1000 {
            let h = rng.random_range(2..8);
            let w = rng.random_range(2..8);
            let img = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..20.0f64));
            if let Ok(out) = enhance(img.view(), &EnhanceParams::default()) {
                assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn same_input_same_bits() {
        let input = array![[0.1, 1.0, 4.0], [2.0, 0.5, 3.3]];
        let a = enhance(input.view(), &EnhanceParams::default()).unwrap();
        let b = enhance(input.view(), &EnhanceParams::default()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn volume_enhancement_keeps_labels_and_skips_blank_slices() {
        let spec = PhantomSpec {
            n_subjects: 1,
            seed: 21,
            ..Default::default()
        };
        let mut v = synth_dataset(&spec, true).unwrap().remove(0);
        // Blank out one modality slice to exercise the skip policy.
        v.modalities
            .index_axis_mut(Axis(0), 2)
            .index_axis_mut(Axis(0), 3)
            .fill(0.0);
        let params = EnhanceParams::default();
        let out = enhance_volume(&v, &params, DegeneratePolicy::Skip).unwrap();
        assert_eq!(out.labels, v.labels);
        assert_eq!(out.subject_id, v.subject_id);
        let blank = out.modalities.index_axis(Axis(0), 2);
        assert!(blank.index_axis(Axis(0), 3).iter().all(|&x| x == 0.0));
        // Non-degenerate slices really were enhanced: max is 1 exactly.
        let done = out
            .modalities
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 3)
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(done, 1.0);
        assert!(matches!(
            enhance_volume(&v, &params, DegeneratePolicy::Fail),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn modalities_are_processed_independently() {
        let spec = PhantomSpec {
            n_subjects: 1,
            seed: 9,
            ..Default::default()
        };
        let v = synth_dataset(&spec, true).unwrap().remove(0);
        let mut swapped = v.clone();
        let c0 = v.modalities.index_axis(Axis(0), 0).to_owned();
        let c2 = v.modalities.index_axis(Axis(0), 2).to_owned();
        swapped.modalities.index_axis_mut(Axis(0), 0).assign(&c2);
        swapped.modalities.index_axis_mut(Axis(0), 2).assign(&c0);
        let params = EnhanceParams::default();
        let a = enhance_volume(&v, &params, DegeneratePolicy::Skip).unwrap();
        let b = enhance_volume(&swapped, &params, DegeneratePolicy::Skip).unwrap();
        assert_eq!(
            a.modalities.index_axis(Axis(0), 0),
            b.modalities.index_axis(Axis(0), 2)
        );
        assert_eq!(
            a.modalities.index_axis(Axis(0), 2),
            b.modalities.index_axis(Axis(0), 0)
        );
        assert_eq!(
            a.modalities.index_axis(Axis(0), 1),
            b.modalities.index_axis(Axis(0), 1)
        );
    }
}
