//! Pixel-wise blur operator parameterized by bidirectional flows.
//!
//! A blurry pixel averages the latent frame along the two segments
//! `[0, τ·u_fwd(x)]` and `[0, τ·u_bwd(x)]`. The exposure integral is
//! discretized with the midpoint rule, `S` samples per direction at
//! `t_s = τ(s - ½)/S`, each read with clamped bilinear interpolation, so every
//! kernel is a convex combination of latent pixels.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{check_dims, Error, Result};
use crate::image::{derivative_filters, gaussian_blur, FlowField, Footprint, Image};
use crate::state::SequenceState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurParams {
    pub tau: f64,
    pub samples: usize,
}

impl BlurParams {
    pub fn new(tau: f64, samples: usize) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidParam {
                name: "tau",
                reason: format!("duty cycle {tau} outside (0, 1]"),
            });
        }
        if samples == 0 {
            return Err(Error::InvalidParam {
                name: "samples",
                reason: "need at least one sample".into(),
            });
        }
        Ok(BlurParams { tau, samples })
    }

    /// Sample count spacing the samples at most one pixel apart.
    pub fn auto(tau: f64, fwd: &FlowField, bwd: &FlowField) -> Result<Self> {
        let m = fwd.max_magnitude().max(bwd.max_magnitude());
        Self::new(tau, default_samples(tau, m))
    }

    pub fn sample_times(&self) -> Vec<f64> {
        let s = self.samples as f64;
        (1..=self.samples)
            .map(|k| self.tau * (k as f64 - 0.5) / s)
            .collect()
    }
}

/// `max(2, ⌈τ · max_magnitude⌉)`.
pub fn default_samples(tau: f64, max_magnitude: f64) -> usize {
    ((tau * max_magnitude).ceil() as usize).max(2)
}

fn check_inputs(img: &Image, fwd: &FlowField, bwd: &FlowField) -> Result<()> {
    check_dims(img.dims(), fwd.dims())?;
    check_dims(img.dims(), bwd.dims())
}

/// Forward blur `K L`.
pub fn apply_blur(l: &Image, fwd: &FlowField, bwd: &FlowField, bp: BlurParams) -> Result<Image> {
    check_inputs(l, fwd, bwd)?;
    let (w, h) = l.dims();
    let times = bp.sample_times();
    let norm = 1.0 / (2 * bp.samples) as f64;
    let mut out = Image::new(w, h, l.channels());
    for c in 0..l.channels() {
        let src = l.plane(c);
        out.plane_mut(c)
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    let i = y * w + x;
                    *o = blur_pixel(src, w, h, i, fwd.at(i), bwd.at(i), &times, norm);
                }
            });
    }
    Ok(out)
}

/// `(K L)(x)` at pixel `i` for explicit kernel flows; `times` and `norm` come
/// from [`BlurParams::sample_times`] and `1/(2S)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn blur_pixel(
    src: &[f64],
    w: usize,
    h: usize,
    i: usize,
    fwd: (f64, f64),
    bwd: (f64, f64),
    times: &[f64],
    norm: f64,
) -> f64 {
    let (x, y) = ((i % w) as f64, (i / w) as f64);
    let center = src[i];
    // Accumulate differences to the centre so that a kernel collapsing onto
    // x reproduces L(x) exactly.
    let mut acc = 0.0;
    for (du, dv) in [fwd, bwd] {
        for &t in times {
            let fp = Footprint::new(w, h, x + t * du, y + t * dv);
            acc += fp.apply(src) - center;
        }
    }
    center + norm * acc
}

/// Transpose of [`apply_blur`]: every bilinear gather becomes a scatter.
pub fn apply_blur_adjoint(
    r: &Image,
    fwd: &FlowField,
    bwd: &FlowField,
    bp: BlurParams,
) -> Result<Image> {
    check_inputs(r, fwd, bwd)?;
    let (w, h) = r.dims();
    let times = bp.sample_times();
    let norm = 1.0 / (2 * bp.samples) as f64;
    let mut out = r.clone();
    out.data_mut()
        .par_chunks_mut(w * h)
        .enumerate()
        .for_each(|(c, plane)| {
            let src = r.plane(c);
            // offsets from the identity, added at the end so that a
            // collapsed kernel returns r exactly
            let mut dst = vec![0.0; w * h];
            // sequential scatter: fixed accumulation order
            for i in 0..w * h {
                let val = norm * src[i];
                if val == 0.0 {
                    continue;
                }
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                for flow in [fwd, bwd] {
                    let (du, dv) = flow.at(i);
                    for &t in &times {
                        Footprint::new(w, h, x + t * du, y + t * dv).scatter(&mut dst, val);
                        dst[i] -= val;
                    }
                }
            }
            plane.iter_mut().zip(&dst).for_each(|(p, d)| *p += d);
        });
    Ok(out)
}

/// A blur kernel rasterized on a square window centred at a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterKernel {
    pub center: (usize, usize),
    pub window: usize,
    /// Row-major `window × window` weights; offset `(dx, dy)` lives at
    /// `(dy + r) * window + dx + r` with `r = window / 2`.
    pub weights: Vec<f64>,
}

impl RasterKernel {
    pub fn radius(&self) -> usize {
        self.window / 2
    }

    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius() as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.weights[((dy + r) as usize) * self.window + (dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Plain-text grid: one row per line, space-separated values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.weights.chunks(self.window) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

fn required_window(fwd: (f64, f64), bwd: (f64, f64), tau: f64) -> usize {
    let m = fwd.0.hypot(fwd.1).max(bwd.0.hypot(bwd.1));
    let r = (tau * m).ceil() as usize + 1;
    2 * r + 1
}

/// Rasterize the kernel at `center` in free space (no image border).
pub fn rasterize_kernel(
    center: (usize, usize),
    fwd: (f64, f64),
    bwd: (f64, f64),
    bp: BlurParams,
    window: usize,
) -> Result<RasterKernel> {
    rasterize(center, fwd, bwd, bp, window, None)
}

/// Rasterize the kernel as applied inside a `width × height` frame, i.e.
/// with sample positions clamped to the border exactly like [`apply_blur`].
pub fn rasterize_kernel_clamped(
    center: (usize, usize),
    fwd: (f64, f64),
    bwd: (f64, f64),
    bp: BlurParams,
    window: usize,
    width: usize,
    height: usize,
) -> Result<RasterKernel> {
    rasterize(center, fwd, bwd, bp, window, Some((width, height)))
}

fn rasterize(
    center: (usize, usize),
    fwd: (f64, f64),
    bwd: (f64, f64),
    bp: BlurParams,
    window: usize,
    frame: Option<(usize, usize)>,
) -> Result<RasterKernel> {
    let needed = required_window(fwd, bwd, bp.tau);
    if window % 2 == 0 || window < needed {
        return Err(Error::WindowTooSmall {
            window,
            needed: needed.max(window | 1),
        });
    }
    let r = (window / 2) as isize;
    let mut weights = vec![0.0; window * window];
    let norm = 1.0 / (2 * bp.samples) as f64;
    let (cx, cy) = (center.0 as f64, center.1 as f64);
    for (du, dv) in [fwd, bwd] {
        for t in bp.sample_times() {
            let (mut px, mut py) = (cx + t * du, cy + t * dv);
            if let Some((w, h)) = frame {
                px = px.clamp(0.0, (w - 1) as f64);
                py = py.clamp(0.0, (h - 1) as f64);
            }
            // local bilinear split relative to the centre
            let (ox, oy) = (px - cx, py - cy);
            let (x0, y0) = (ox.floor(), oy.floor());
            let (fx, fy) = (ox - x0, oy - y0);
            for (ddx, ddy, wt) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                if wt == 0.0 {
                    continue;
                }
                let kx = x0 as isize + ddx + r;
                let ky = y0 as isize + ddy + r;
                weights[ky as usize * window + kx as usize] += norm * wt;
            }
        }
    }
    Ok(RasterKernel {
        center,
        window,
        weights,
    })
}

/// The blur of one frame as an explicit sparse matrix, built once per
/// subproblem and reused for many products.
#[derive(Debug, Clone)]
pub struct BlurOperator {
    width: usize,
    height: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    t_row_ptr: Vec<usize>,
    t_cols: Vec<usize>,
    t_vals: Vec<f64>,
}

impl BlurOperator {
    pub fn new(fwd: &FlowField, bwd: &FlowField, bp: BlurParams) -> Result<Self> {
        check_dims(fwd.dims(), bwd.dims())?;
        let (w, h) = fwd.dims();
        let times = bp.sample_times();
        let norm = 1.0 / (2 * bp.samples) as f64;
        let rows: Vec<Vec<(usize, f64)>> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let mut entries = Vec::with_capacity(8 * bp.samples);
                for flow in [fwd, bwd] {
                    let (du, dv) = flow.at(i);
                    for &t in &times {
                        let fp = Footprint::new(w, h, x + t * du, y + t * dv);
                        for k in 0..4 {
                            if fp.w[k] != 0.0 {
                                entries.push((fp.idx[k], norm * fp.w[k]));
                            }
                        }
                    }
                }
                entries.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
                for (c, v) in entries {
                    match merged.last_mut() {
                        Some(last) if last.0 == c => last.1 += v,
                        _ => merged.push((c, v)),
                    }
                }
                merged
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(w * h + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in &rows {
            for &(c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        // transpose
        let n = w * h;
        let mut counts = vec![0usize; n + 1];
        for &c in &cols {
            counts[c + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let t_row_ptr = counts.clone();
        let mut fill = counts;
        let mut t_cols = vec![0; cols.len()];
        let mut t_vals = vec![0.0; cols.len()];
        for r in 0..n {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = cols[k];
                t_cols[fill[c]] = r;
                t_vals[fill[c]] = vals[k];
                fill[c] += 1;
            }
        }
        Ok(BlurOperator {
            width: w,
            height: h,
            row_ptr,
            cols,
            vals,
            t_row_ptr,
            t_cols,
            t_vals,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn apply_plane(&self, src: &[f64], dst: &mut [f64]) {
        spmv(&self.row_ptr, &self.cols, &self.vals, self.width, src, dst);
    }

    pub fn apply_transpose_plane(&self, src: &[f64], dst: &mut [f64]) {
        spmv(
            &self.t_row_ptr,
            &self.t_cols,
            &self.t_vals,
            self.width,
            src,
            dst,
        );
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = Image::new(img.width(), img.height(), img.channels());
        for c in 0..img.channels() {
            self.apply_plane(img.plane(c), out.plane_mut(c));
        }
        out
    }

    pub fn apply_transpose(&self, img: &Image) -> Image {
        let mut out = Image::new(img.width(), img.height(), img.channels());
        for c in 0..img.channels() {
            self.apply_transpose_plane(img.plane(c), out.plane_mut(c));
        }
        out
    }

    /// Row `i` as `(column, weight)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }
}

fn spmv(row_ptr: &[usize], cols: &[usize], vals: &[f64], w: usize, src: &[f64], dst: &mut [f64]) {
    dst.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        for (x, o) in out.iter_mut().enumerate() {
            let r = y * w + x;
            let mut acc = 0.0;
            for k in row_ptr[r]..row_ptr[r + 1] {
                acc += vals[k] * src[cols[k]];
            }
            *o = acc;
        }
    });
}

/// Duty-cycle candidates searched by [`estimate_duty_cycle`].
pub const DUTY_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Sharpened stand-in for the latent frame: `B + 1.5 (B - G_σ=1 * B)`.
pub fn sharpen_proxy(b: &Image) -> Image {
    let g = gaussian_blur(b, 1.0);
    b.with_data(
        b.data()
            .iter()
            .zip(g.data())
            .map(|(v, s)| v + 1.5 * (v - s))
            .collect(),
    )
}

/// Derivative-domain residual `Σ_∂ ‖∂ K(τ) B̃ − ∂ B‖²` of one frame.
pub fn duty_residual(
    blurry: &Image,
    proxy: &Image,
    fwd: &FlowField,
    bwd: &FlowField,
    tau: f64,
) -> Result<f64> {
    let bp = BlurParams::auto(tau, fwd, bwd)?;
    let kb = apply_blur(proxy, fwd, bwd, bp)?;
    let [kx, ky] = derivative_filters(&kb);
    let [bx, by] = derivative_filters(blurry);
    let mut r = 0.0;
    for (a, b) in [(&kx, &bx), (&ky, &by)] {
        r += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>();
    }
    Ok(r)
}

/// Estimate the duty cycle by a per-frame grid search over [`DUTY_GRID`],
/// then assign the temporal median to every frame. Ties go to the smaller τ.
pub fn estimate_duty_cycle(
    blurry: &[Image],
    init_fwd: &[FlowField],
    init_bwd: &[FlowField],
) -> Result<Vec<f64>> {
    if blurry.len() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: blurry.len(),
        });
    }
    let mut state = SequenceState::from_blurry(blurry.to_vec(), 1.0)?;
    if init_fwd.len() != blurry.len() || init_bwd.len() != blurry.len() {
        return Err(Error::InvalidParam {
            name: "init flows",
            reason: format!(
                "{} forward / {} backward flows for {} frames",
                init_fwd.len(),
                init_bwd.len(),
                blurry.len()
            ),
        });
    }
    state.fwd = init_fwd.to_vec();
    state.bwd = init_bwd.to_vec();
    state.validate()?;
    let mut per_frame = Vec::with_capacity(blurry.len());
    for i in 0..state.len() {
        let proxy = sharpen_proxy(&state.blurry[i]);
        let (fwd, bwd) = state.kernel_flows(i);
        let mut best = (f64::INFINITY, DUTY_GRID[0]);
        for &tau in &DUTY_GRID {
            let r = duty_residual(&state.blurry[i], &proxy, &fwd, &bwd, tau)?;
            if r < best.0 {
                best = (r, tau);
            }
        }
        per_frame.push(best.1);
    }
    let mut sorted = per_frame.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[(sorted.len() - 1) / 2];
    Ok(vec![median; blurry.len()])
}
