//! Connected-component labeling on binary volumes.

use ndarray::{Array3, ArrayView3};
use std::collections::VecDeque;

/// Label the connected components of `mask` under 26-connectivity (voxels
/// touching by face, edge, or corner belong together). Returns the label
/// volume (0 = background, components numbered 1..=n in scan order of their
/// first voxel) and the component count.
pub fn connected_components(mask: ArrayView3<bool>) -> (Array3<u32>, usize) {
    let (ns, nh, nw) = mask.dim();
    let mut labels = Array3::<u32>::zeros((ns, nh, nw));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for s in 0..ns {
        for h in 0..nh {
            for w in 0..nw {
                if !mask[[s, h, w]] || labels[[s, h, w]] != 0 {
                    continue;
                }
                next += 1;
                labels[[s, h, w]] = next;
                queue.push_back([s, h, w]);
                while let Some([cs, ch, cw]) = queue.pop_front() {
                    for ds in -1i64..=1 {
                        for dh in -1i64..=1 {
                            for dw in -1i64..=1 {
                                if ds == 0 && dh == 0 && dw == 0 {
                                    continue;
                                }
                                let (s2, h2, w2) =
                                    (cs as i64 + ds, ch as i64 + dh, cw as i64 + dw);
                                if s2 < 0
                                    || h2 < 0
                                    || w2 < 0
                                    || s2 >= ns as i64
                                    || h2 >= nh as i64
                                    || w2 >= nw as i64
                                {
                                    continue;
                                }
                                let idx = [s2 as usize, h2 as usize, w2 as usize];
                                if mask[idx] && labels[idx] == 0 {
                                    labels[idx] = next;
                                    queue.push_back(idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}
