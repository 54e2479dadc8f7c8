//! Occlusion detection and the occlusion-aware spatio-temporal patch filter
//! run after the alternation loop of each level.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{check_dims, Result};
use crate::image::{FlowField, Image};
use crate::state::SequenceState;

/// Forward-backward error below which a correspondence is fully visible.
pub const VISIBLE_PX: f64 = 0.5;
/// Error above which a correspondence is treated as occluded.
pub const OCCLUDED_PX: f64 = 1.5;
/// Patch side length used by the filter.
pub const PATCH: usize = 5;

/// Visibility of one correspondence field, values in `{0, 0.5, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub o: Vec<f64>,
}

impl OcclusionMask {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        OcclusionMask {
            width,
            height,
            o: vec![value; width * height],
        }
    }
}

/// Occlusion state of every `(frame, offset)` pair in a sequence. Pairs
/// that are absent count as fully occluded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OcclusionMap {
    pub masks: BTreeMap<(usize, isize), OcclusionMask>,
}

impl OcclusionMap {
    /// Masks for all offsets `±1..=±n_neighbors`, thresholds multiplied by
    /// `scale` (the level's cumulative scale factor).
    pub fn from_state(state: &SequenceState, n_neighbors: usize, scale: f64) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for i in 0..state.len() {
            for k in 1..=n_neighbors as isize {
                for n in [-k, k] {
                    if !state.has_offset(i, n) {
                        continue;
                    }
                    let (Some(there), Some(back)) =
                        (state.flow_to(i, n), state.flow_to((i as isize + n) as usize, -n))
                    else {
                        continue;
                    };
                    masks.insert((i, n), detect_occlusion_scaled(&there, &back, scale)?);
                }
            }
        }
        Ok(OcclusionMap { masks })
    }

    pub fn get(&self, i: usize, n: isize) -> Option<&OcclusionMask> {
        self.masks.get(&(i, n))
    }
}

/// Forward-backward check with the full-resolution thresholds.
pub fn detect_occlusion(fwd: &FlowField, bwd: &FlowField) -> Result<OcclusionMask> {
    detect_occlusion_scaled(fwd, bwd, 1.0)
}

/// `e(x) = ‖fwd(x) + bwd(x + fwd(x))‖`, classified against thresholds scaled
/// by `scale`.
pub fn detect_occlusion_scaled(
    fwd: &FlowField,
    bwd: &FlowField,
    scale: f64,
) -> Result<OcclusionMask> {
    check_dims(fwd.dims(), bwd.dims())?;
    let (w, h) = fwd.dims();
    let (lo, hi) = (VISIBLE_PX * scale, OCCLUDED_PX * scale);
    let o = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let (u, v) = fwd.at(k);
            let (bu, bv) = bwd.sample((k % w) as f64 + u, (k / w) as f64 + v);
            let e = ((u + bu).powi(2) + (v + bv).powi(2)).sqrt();
            if e <= lo {
                1.0
            } else if e <= hi {
                0.5
            } else {
                0.0
            }
        })
        .collect();
    Ok(OcclusionMask {
        width: w,
        height: h,
        o,
    })
}

/// Channel-summed SSD of the clamp-to-edge patches around `(ax, ay)` in `a`
/// and `(bx, by)` in `b`, divided by the patch pixel count.
fn patch_distance(a: &Image, ax: usize, ay: usize, b: &Image, bx: usize, by: usize) -> f64 {
    let (w, h) = a.dims();
    let r = (PATCH / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut acc = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for dy in -r..=r {
            let ya = clamp(ay as isize + dy, h) * w;
            let yb = clamp(by as isize + dy, h) * w;
            for dx in -r..=r {
                let d = pa[ya + clamp(ax as isize + dx, w)] - pb[yb + clamp(bx as isize + dx, w)];
                acc += d * d;
            }
        }
    }
    acc / (PATCH * PATCH) as f64
}

/// Weighted average over the 3×3 neighbourhoods of `round(x + u_{i→i+n})`
/// for `n = −N..=N` (`n = 0` with full visibility), patch-similarity
/// weights gated by the occlusion state. Accumulated as offsets from the
/// centre value so that constant sequences pass through exactly.
pub fn spatiotemporal_filter(
    state: &SequenceState,
    occ: &OcclusionMap,
    sigma_w: f64,
    n_neighbors: usize,
) -> Result<Vec<Image>> {
    let (w, h) = state.dims();
    for m in occ.masks.values() {
        check_dims((w, h), (m.width, m.height))?;
    }
    let inv = 1.0 / (2.0 * sigma_w * sigma_w);
    let channels = state.channels();
    let mut out = Vec::with_capacity(state.len());
    for i in 0..state.len() {
        // (source frame, flow, mask); n = 0 has no flow and no mask
        let mut sources: Vec<(usize, Option<FlowField>, Option<&OcclusionMask>)> =
            vec![(i, None, None)];
        for k in 1..=n_neighbors as isize {
            for n in [-k, k] {
                let (Some(flow), Some(mask)) = (state.flow_to(i, n), occ.get(i, n)) else {
                    continue;
                };
                sources.push(((i as isize + n) as usize, Some(flow.into_owned()), Some(mask)));
            }
        }
        let li = &state.latent[i];
        let rows: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = vec![0.0; w * channels];
                for x in 0..w {
                    let k = y * w + x;
                    let mut z = 0.0;
                    let mut acc = vec![0.0; channels];
                    for (j, flow, mask) in &sources {
                        let o = mask.map_or(1.0, |m| m.o[k]);
                        if o == 0.0 {
                            continue;
                        }
                        let (cx, cy) = match flow {
                            Some(f) => {
                                let (u, v) = f.at(k);
                                ((x as f64 + u).round(), (y as f64 + v).round())
                            }
                            None => (x as f64, y as f64),
                        };
                        let lj = &state.latent[*j];
                        for dy in -1..=1 {
                            let yy = cy + dy as f64;
                            if yy < 0.0 || yy > (h - 1) as f64 {
                                continue;
                            }
                            for dx in -1..=1 {
                                let xx = cx + dx as f64;
                                if xx < 0.0 || xx > (w - 1) as f64 {
                                    continue;
                                }
                                let (xx, yy) = (xx as usize, yy as usize);
                                let d = patch_distance(li, x, y, lj, xx, yy);
                                let wt = o * (-d * inv).exp();
                                z += wt;
                                for (c, a) in acc.iter_mut().enumerate() {
                                    *a += wt * (lj.plane(c)[yy * w + xx] - li.plane(c)[k]);
                                }
                            }
                        }
                    }
                    for c in 0..channels {
                        row[c * w + x] = if z < 1e-8 {
                            li.plane(c)[k]
                        } else {
                            li.plane(c)[k] + acc[c] / z
                        };
                    }
                }
                row
            })
            .collect();
        let mut img = Image::new(w, h, channels);
        for (y, row) in rows.iter().enumerate() {
            for c in 0..channels {
                img.plane_mut(c)[y * w..(y + 1) * w].copy_from_slice(&row[c * w..(c + 1) * w]);
            }
        }
        out.push(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_pair_is_visible() {
        let f = FlowField::constant(8, 8, 1.0, 0.0);
        let m = detect_occlusion(&f, &f.negated()).unwrap();
        assert!(m.o.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_inverse_pair_is_occluded() {
        let f = FlowField::constant(8, 8, 2.0, 0.0);
        let m = detect_occlusion(&f, &f).unwrap();
        assert!(m.o.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_error_is_half_visible() {
        let f = FlowField::constant(8, 8, 0.0, 0.0);
        let b = FlowField::constant(8, 8, 1.0, 0.0);
        let m = detect_occlusion(&f, &b).unwrap();
        assert!(m.o.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_sequence_is_fixed() {
        let s = SequenceState::from_blurry(vec![Image::filled(9, 7, 3, 0.3); 4], 1.0).unwrap();
        let occ = OcclusionMap::from_state(&s, 2, 1.0).unwrap();
        let out = spatiotemporal_filter(&s, &occ, 25.0 / 255.0, 2).unwrap();
        for (a, b) in out.iter().zip(&s.latent) {
            assert_eq!(a, b);
        }
    }
}
