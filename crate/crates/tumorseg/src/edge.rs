//! Edge refinement for the adversarial feedback path.
//!
//! A proposed soft mask is first dilated by a shape-preserving 5×5 max-pool,
//! then differentiated with the 4-neighbor Laplacian
//! `∇²M = M[i+1,j] + M[i-1,j] + M[i,j+1] + M[i,j-1] - 4·M[i,j]`,
//! and finally `|∇²|` is downsampled by a 5×5 stride-5 max-pool so the
//! result aligns with the discriminator's patch map. The product of the two
//! maps concentrates the adversarial penalty on patches that straddle the
//! proposed tumor boundary.
//!
//! Both stencil and pooling clamp indices at the border (replicate padding),
//! so constant masks produce exactly zero attention everywhere.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Downsampled, nonnegative edge-attention map at discriminator resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    /// `ceil(H/5) × ceil(W/5)` attention weights, ≥ 0.
    pub values: Array2<f64>,
    /// The `(H, W)` of the mask this map was derived from.
    pub source_shape: (usize, usize),
}

const POOL: usize = 5;

/// Shape-preserving dilation: each pixel becomes the max over its 5×5
/// neighborhood, truncated at the borders. Output ≥ input elementwise.
pub fn maxpool_expand(mask: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let i0 = i.saturating_sub(POOL / 2);
        let i1 = (i + POOL / 2).min(h.saturating_sub(1));
        for j in 0..w {
            let j0 = j.saturating_sub(POOL / 2);
            let j1 = (j + POOL / 2).min(w.saturating_sub(1));
            let mut m = f64::NEG_INFINITY;
            for a in i0..=i1 {
                for b in j0..=j1 {
                    m = m.max(mask[[a, b]]);
                }
            }
            out[[i, j]] = m;
        }
    }
    out
}

/// 4-neighbor Laplacian with replicate boundary handling.
pub fn laplacian(mask: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        mask[[i, j]]
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        at(i + 1, j) + at(i - 1, j) + at(i, j + 1) + at(i, j - 1) - 4.0 * at(i, j)
    })
}

/// 5×5 stride-5 max pool with truncated edge windows: `(h, w)` in,
/// `(ceil(h/5), ceil(w/5))` out.
fn stride_pool(values: &Array2<f64>) -> Array2<f64> {
    let (h, w) = values.dim();
    let oh = h.div_ceil(POOL);
    let ow = w.div_ceil(POOL);
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let mut m = f64::NEG_INFINITY;
        for a in i * POOL..((i + 1) * POOL).min(h) {
            for b in j * POOL..((j + 1) * POOL).min(w) {
                m = m.max(values[[a, b]]);
            }
        }
        m
    })
}

/// Dilate, differentiate, rectify, downsample. The result matches the
/// discriminator map shape for the same image size.
pub fn edge_attention(mask: ArrayView2<f64>) -> EdgeMap {
    let expanded = maxpool_expand(mask);
    let lap = laplacian(expanded.view());
    let values = stride_pool(&lap.mapv(f64::abs));
    EdgeMap {
        values,
        source_shape: mask.dim(),
    }
}

/// Weight a discriminator patch map by edge attention, elementwise.
pub fn gate(disc_map: ArrayView2<f64>, edge: &EdgeMap) -> Result<Array2<f64>> {
    if disc_map.dim() != edge.values.dim() {
        return Err(Error::Data(format!(
            "gate shape mismatch: discriminator map {:?} vs edge map {:?}",
            disc_map.dim(),
            edge.values.dim()
        )));
    }
    Ok(&disc_map.to_owned() * &edge.values)
}
