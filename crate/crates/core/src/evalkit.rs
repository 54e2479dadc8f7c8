//! Synthetic scenes with exact ground truth, forward-model blur synthesis
//! and the evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blur::{apply_blur, default_samples, BlurParams};
use crate::error::{check_dims, Error, Result};
use crate::image::{det_sum_by, gaussian_blur, FlowField, Footprint, Image};

/// Largest per-frame displacement a scene may contain.
pub const MAX_MOTION: f64 = 10.0;

/// Scene description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub background: Motion,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
}

fn default_channels() -> usize {
    1
}

/// Per-frame motion of the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Translation {
        velocity: [f64; 2],
    },
    /// `x ↦ x + M (x − c) + t` with `c` the canvas centre.
    Affine {
        matrix: [[f64; 2]; 2],
        translation: [f64; 2],
    },
}

/// Rigid textured object translating with constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    /// Centre in frame 0.
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Rect { size: [f64; 2] },
    Disk { radius: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Rect { size } => dx.abs() <= size[0] / 2.0 && dy.abs() <= size[1] / 2.0,
            Shape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }

    fn half_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { size } => (size[0] / 2.0, size[1] / 2.0),
            Shape::Disk { radius } => (radius, radius),
        }
    }
}

impl SceneSpec {
    /// Five 64×64 frames: background drifting by (1, 0), a 16×16 square
    /// moving by (−3, 0), τ = 0.8.
    pub fn demo() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            frames: 5,
            tau: 0.8,
            seed: 7,
            channels: 1,
            background: Motion::Translation {
                velocity: [1.0, 0.0],
            },
            objects: vec![SceneObject {
                shape: Shape::Rect {
                    size: [16.0, 16.0],
                },
                center: [38.0, 32.0],
                velocity: [-3.0, 0.0],
                seed: 11,
            }],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidScene(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.width < 8 || self.height < 8 || self.width > 4096 || self.height > 4096 {
            return bad(format!("canvas {}x{} outside 8..=4096", self.width, self.height));
        }
        if self.frames < 1 || self.frames > 256 {
            return bad(format!("{} frames outside 1..=256", self.frames));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("{} channels (expected 1 or 3)", self.channels));
        }
        let (cx, cy) = self.centre();
        let mut worst = 0.0f64;
        for (x, y) in [
            (0.0, 0.0),
            (self.width as f64 - 1.0, 0.0),
            (0.0, self.height as f64 - 1.0),
            (self.width as f64 - 1.0, self.height as f64 - 1.0),
        ] {
            let (u, v) = self.background.displacement(x - cx, y - cy);
            worst = worst.max(u.hypot(v));
        }
        if !worst.is_finite() || worst > MAX_MOTION {
            return bad(format!("background moves {worst:.2} px per frame (max {MAX_MOTION})"));
        }
        if let Motion::Affine { matrix, .. } = &self.background {
            let det = (1.0 + matrix[0][0]) * (1.0 + matrix[1][1]) - matrix[0][1] * matrix[1][0];
            if det.abs() < 1e-6 {
                return bad("affine background motion is not invertible".into());
            }
        }
        for (k, o) in self.objects.iter().enumerate() {
            let speed = o.velocity[0].hypot(o.velocity[1]);
            if !speed.is_finite() || speed > MAX_MOTION {
                return bad(format!("object {k} moves {speed:.2} px per frame"));
            }
            let (hx, hy) = o.shape.half_extent();
            if !(hx > 0.0 && hy > 0.0) {
                return bad(format!("object {k} has an empty shape"));
            }
            for i in 0..self.frames {
                let cx = o.center[0] + i as f64 * o.velocity[0];
                let cy = o.center[1] + i as f64 * o.velocity[1];
                if cx - hx < 0.0
                    || cy - hy < 0.0
                    || cx + hx > self.width as f64 - 1.0
                    || cy + hy > self.height as f64 - 1.0
                {
                    return bad(format!("object {k} leaves the canvas in frame {i}"));
                }
            }
        }
        Ok(())
    }

    fn centre(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }
}

impl Motion {
    /// Displacement at a position relative to the canvas centre.
    fn displacement(&self, rx: f64, ry: f64) -> (f64, f64) {
        match *self {
            Motion::Translation { velocity } => (velocity[0], velocity[1]),
            Motion::Affine {
                matrix,
                translation,
            } => (
                matrix[0][0] * rx + matrix[0][1] * ry + translation[0],
                matrix[1][0] * rx + matrix[1][1] * ry + translation[1],
            ),
        }
    }

    /// Inverse of `x ↦ x + displacement(x)` in centre-relative coordinates.
    fn inverse(&self, rx: f64, ry: f64) -> (f64, f64) {
        match *self {
            Motion::Translation { velocity } => (rx - velocity[0], ry - velocity[1]),
            Motion::Affine {
                matrix,
                translation,
            } => {
                let (a, b) = (1.0 + matrix[0][0], matrix[0][1]);
                let (c, d) = (matrix[1][0], 1.0 + matrix[1][1]);
                let det = a * d - b * c;
                let (px, py) = (rx - translation[0], ry - translation[1]);
                ((d * px - b * py) / det, (-c * px + a * py) / det)
            }
        }
    }
}

/// Sharp frames with the flows that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub sharp: Vec<Image>,
    /// `u_{i→i+1}` for every frame, including the last (the motion continues).
    pub gt_fwd: Vec<FlowField>,
    /// `u_{i→i−1}` for every frame, including the first.
    pub gt_bwd: Vec<FlowField>,
    pub tau: f64,
    /// Per frame, whether each pixel belongs to a foreground object.
    pub object_mask: Vec<Vec<bool>>,
}

/// Seeded noise on a grid, smoothed and stretched to `[0.1, 0.9]`.
struct Texture {
    img: Image,
    /// Texture coordinates of grid pixel (0, 0).
    origin: (f64, f64),
}

impl Texture {
    fn new(width: usize, height: usize, channels: usize, origin: (f64, f64), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Image::from_fn(width, height, channels, |_, _, _| rng.random::<f64>());
        let smooth = gaussian_blur(&noise, 1.2);
        let lo = smooth.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = smooth.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        Texture {
            img: smooth.map(|v| 0.1 + 0.8 * (v - lo) / span),
            origin,
        }
    }

    fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let fp = Footprint::new(
            self.img.width(),
            self.img.height(),
            x - self.origin.0,
            y - self.origin.1,
        );
        fp.apply(self.img.plane(c))
    }
}

/// Render the frames and exact per-pixel flows of a scene.
pub fn render_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (w, h, t, ch) = (spec.width, spec.height, spec.frames, spec.channels);
    let (cx, cy) = spec.centre();
    let reach = MAX_MOTION * t as f64 + 4.0;
    // background texture coordinates stay within the canvas plus `reach` for
    // translations; affine motions contract or expand around the centre and
    // may need more, which the edge clamp absorbs
    let margin = reach.ceil() as usize;
    let bg = Texture::new(
        w + 2 * margin,
        h + 2 * margin,
        ch,
        (-(margin as f64), -(margin as f64)),
        spec.seed,
    );
    let objects: Vec<(Texture, &SceneObject)> = spec
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let (hx, hy) = o.shape.half_extent();
            let (tw, th) = ((2.0 * hx).ceil() as usize + 4, (2.0 * hy).ceil() as usize + 4);
            let tex = Texture::new(
                tw,
                th,
                ch,
                (-(tw as f64) / 2.0, -(th as f64) / 2.0),
                spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1)) ^ o.seed,
            );
            (tex, o)
        })
        .collect();

    let mut sharp = Vec::with_capacity(t);
    let mut gt_fwd = Vec::with_capacity(t);
    let mut gt_bwd = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for i in 0..t {
        let mut img = Image::new(w, h, ch);
        let mut fwd = FlowField::zeros(w, h);
        let mut bwd = FlowField::zeros(w, h);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                let k = y * w + x;
                // background: pull back through i steps of the motion
                let (mut px, mut py) = (rx, ry);
                for _ in 0..i {
                    (px, py) = spec.background.inverse(px, py);
                }
                for c in 0..ch {
                    img.plane_mut(c)[k] = bg.sample(px + cx, py + cy, c);
                }
                let (u, v) = spec.background.displacement(rx, ry);
                fwd.u[k] = u;
                fwd.v[k] = v;
                let (bx, by) = spec.background.inverse(rx, ry);
                bwd.u[k] = bx - rx;
                bwd.v[k] = by - ry;
                // objects, later ones on top
                for (tex, o) in &objects {
                    let ox = o.center[0] + i as f64 * o.velocity[0];
                    let oy = o.center[1] + i as f64 * o.velocity[1];
                    let (dx, dy) = (x as f64 - ox, y as f64 - oy);
                    if o.shape.contains(dx, dy) {
                        for c in 0..ch {
                            img.plane_mut(c)[k] = tex.sample(dx, dy, c);
                        }
                        fwd.u[k] = o.velocity[0];
                        fwd.v[k] = o.velocity[1];
                        bwd.u[k] = -o.velocity[0];
                        bwd.v[k] = -o.velocity[1];
                        mask[k] = true;
                    }
                }
            }
        }
        sharp.push(img);
        gt_fwd.push(fwd);
        gt_bwd.push(bwd);
        masks.push(mask);
    }
    Ok(SyntheticScene {
        sharp,
        gt_fwd,
        gt_bwd,
        tau: spec.tau,
        object_mask: masks,
    })
}

/// Blur every sharp frame with its ground-truth flows. `samples = None` uses
/// four times the solver's automatic sample count.
pub fn synthesize_blur(scene: &SyntheticScene, samples: Option<usize>) -> Result<Vec<Image>> {
    scene
        .sharp
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let (f, b) = (&scene.gt_fwd[i], &scene.gt_bwd[i]);
            let s = samples.unwrap_or_else(|| {
                4 * default_samples(scene.tau, f.max_magnitude().max(b.max_magnitude()))
            });
            apply_blur(l, f, b, BlurParams::new(scene.tau, s)?)
        })
        .collect()
}

/// Mean end-point error, optionally restricted to `mask`.
pub fn epe(flow: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    check_dims(gt.dims(), flow.dims())?;
    let n = flow.u.len();
    let err = |k: usize| (flow.u[k] - gt.u[k]).hypot(flow.v[k] - gt.v[k]);
    match mask {
        None => Ok(det_sum_by(n, err) / n as f64),
        Some(m) => {
            if m.len() != n {
                return Err(Error::InvalidParam {
                    name: "mask",
                    reason: format!("{} entries for {n} pixels", m.len()),
                });
            }
            let count = m.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(Error::InvalidParam {
                    name: "mask",
                    reason: "selects no pixel".into(),
                });
            }
            Ok(det_sum_by(n, |k| if m[k] { err(k) } else { 0.0 }) / count as f64)
        }
    }
}

/// Mask excluding pixels within `band` of an object boundary in frame `i`.
pub fn boundary_mask(scene: &SyntheticScene, i: usize, band: usize) -> Vec<bool> {
    let (w, h) = scene.sharp[i].dims();
    let m = &scene.object_mask[i];
    let b = band as isize;
    (0..w * h)
        .map(|k| {
            let (x, y) = ((k % w) as isize, (k / w) as isize);
            for dy in -b..=b {
                for dx in -b..=b {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    if m[yy as usize * w + xx as usize] != m[k] {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// `10 log10(1 / MSE)`; `+∞` when the images are identical.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    img.same_shape(reference)?;
    let (a, b) = (img.data(), reference.data());
    let mse = det_sum_by(a.len(), |k| (a[k] - b[k]).powi(2)) / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// HSV coding: hue = flow angle, saturation = magnitude / `max_mag` (largest
/// magnitude when `None`), clipped at one, value one. Zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f64>) -> Image {
    let (w, h) = flow.dims();
    let scale = max_mag.unwrap_or_else(|| flow.max_magnitude());
    let mut img = Image::new(w, h, 3);
    for k in 0..w * h {
        let (u, v) = flow.at(k);
        let mag = u.hypot(v);
        let sat = if scale > 0.0 { (mag / scale).min(1.0) } else { 0.0 };
        let hue = v.atan2(u).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * 6.0;
        let rgb = hsv_to_rgb(hue, sat);
        for (c, val) in rgb.into_iter().enumerate() {
            img.plane_mut(c)[k] = val;
        }
    }
    img
}

/// `hue` in sextants `[0, 6)`, value fixed at one.
fn hsv_to_rgb(hue: f64, sat: f64) -> [f64; 3] {
    let sector = (hue.floor() as usize).min(5);
    let f = hue - sector as f64;
    let p = 1.0 - sat;
    let q = 1.0 - sat * f;
    let t = 1.0 - sat * (1.0 - f);
    match sector {
        0 => [1.0, t, p],
        1 => [q, 1.0, p],
        2 => [p, 1.0, t],
        3 => [p, q, 1.0],
        4 => [t, p, 1.0],
        _ => [1.0, p, q],
    }
}
