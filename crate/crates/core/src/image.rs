//! Pixel containers and the shared low-level image operators.
//!
//! Images are stored planar: one row-major plane of `width * height` values
//! per channel. All samplers clamp to the edge; derivative filters are forward
//! differences that vanish on the last row/column.

use rayon::prelude::*;

use crate::error::{check_dims, Error, Result};

/// Chunk length used for every deterministic parallel reduction. Fixed so
/// that sums do not depend on the number of worker threads.
const REDUCE_CHUNK: usize = 2048;

/// Sum a slice with a chunking that does not depend on the thread count.
pub(crate) fn det_sum(values: &[f64]) -> f64 {
    if values.len() <= REDUCE_CHUNK {
        return values.iter().sum();
    }
    let partial: Vec<f64> = values
        .par_chunks(REDUCE_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub(crate) fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= REDUCE_CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partial: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Deterministic sum of `f(i)` over `0..n`.
pub(crate) fn det_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// A single- or multi-channel intensity image with nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Build from planar data (`channels` consecutive row-major planes).
    pub fn from_planar(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("empty image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite intensity".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[c * self.pixels() + y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let n = self.pixels();
        self.data[c * n + y * self.width + x] = value;
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub fn map<F: Fn(f64) -> f64 + Sync>(&self, f: F) -> Image {
        self.with_data(self.data.par_iter().map(|&v| f(v)).collect())
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        check_dims(self.dims(), other.dims())?;
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                got: other.channels,
            });
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        det_sum(&self.data) / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        det_sum_by(self.data.len(), |i| (self.data[i] - m).powi(2)) / self.data.len() as f64
    }
}

/// Per-pixel 2-D displacement field, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![du; width * height],
            v: vec![dv; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "flow component lengths {}/{} do not match {width}x{height}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidImage("non-finite flow vector".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn from_fn<F>(width: usize, height: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> (f64, f64),
    {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        FlowField {
            width,
            height,
            u,
            v,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn at(&self, i: usize) -> (f64, f64) {
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, x: usize, y: usize, value: (f64, f64)) {
        let i = y * self.width + x;
        self.u[i] = value.0;
        self.v[i] = value.1;
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|a| -a).collect(),
            v: self.v.iter().map(|a| -a).collect(),
        }
    }

    pub fn scaled(&self, su: f64, sv: f64) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|a| a * su).collect(),
            v: self.v.iter().map(|a| a * sv).collect(),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len();
        det_sum_by(n, |i| self.u[i].hypot(self.v[i])) / n as f64
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&a| a == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|a| a.is_finite())
    }

    /// Sample the vector field at a continuous position (bilinear, clamped).
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let fp = Footprint::new(self.width, self.height, x, y);
        (fp.apply(&self.u), fp.apply(&self.v))
    }
}

/// Bilinear footprint of a continuous position after clamping it to the
/// image rectangle: four pixel indices and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    /// Fractional offsets inside the cell.
    pub fx: f64,
    pub fy: f64,
    /// Whether the position was moved by the clamp along each axis; the
    /// interpolant is flat in that direction.
    pub clamped_x: bool,
    pub clamped_y: bool,
}

impl Footprint {
    #[inline]
    pub fn new(width: usize, height: usize, x: f64, y: f64) -> Self {
        let (x0, fx, clamped_x) = axis(width, x);
        let (y0, fy, clamped_y) = axis(height, y);
        let x1 = if width > 1 { x0 + 1 } else { x0 };
        let y1 = if height > 1 { y0 + 1 } else { y0 };
        let r0 = y0 * width;
        let r1 = y1 * width;
        Footprint {
            idx: [r0 + x0, r0 + x1, r1 + x0, r1 + x1],
            w: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            fx,
            fy,
            clamped_x,
            clamped_y,
        }
    }

    #[inline]
    pub fn apply(&self, plane: &[f64]) -> f64 {
        // nested-difference form: exact on lattice points and constants
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        a + self.fx * (b - a) + self.fy * ((c - a) + self.fx * ((d - c) - (b - a)))
    }

    /// Derivative of the interpolant with respect to the sample position.
    #[inline]
    pub fn gradient(&self, plane: &[f64]) -> (f64, f64) {
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        let gx = if self.clamped_x {
            0.0
        } else {
            (1.0 - self.fy) * (b - a) + self.fy * (d - c)
        };
        let gy = if self.clamped_y {
            0.0
        } else {
            (1.0 - self.fx) * (c - a) + self.fx * (d - b)
        };
        (gx, gy)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], value: f64) {
        for k in 0..4 {
            plane[self.idx[k]] += self.w[k] * value;
        }
    }
}

#[inline]
fn axis(len: usize, p: f64) -> (usize, f64, bool) {
    if len == 1 {
        return (0, 0.0, true);
    }
    let max = (len - 1) as f64;
    let (q, clamped) = if p < 0.0 {
        (0.0, true)
    } else if p > max {
        (max, true)
    } else if p.is_nan() {
        (0.0, true)
    } else {
        (p, false)
    };
    let i = (q.floor() as usize).min(len - 2);
    (i, q - i as f64, clamped)
}

/// Bilinear interpolation at a continuous position; one value per channel.
/// Positions outside the image are clamped to the border.
pub fn sample_bilinear(img: &Image, x: f64, y: f64) -> Vec<f64> {
    let fp = Footprint::new(img.width, img.height, x, y);
    (0..img.channels).map(|c| fp.apply(img.plane(c))).collect()
}

/// `out(x) = img(x + t * flow(x))`, bilinear with edge clamp.
pub fn warp_image(img: &Image, flow: &FlowField, t: f64) -> Result<Image> {
    check_dims(img.dims(), flow.dims())?;
    let (w, h) = img.dims();
    if t == 0.0 || flow.is_zero() {
        return Ok(img.clone());
    }
    let n = w * h;
    let mut out = Image::new(w, h, img.channels);
    for c in 0..img.channels {
        let src = img.plane(c);
        out.plane_mut(c)
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    let i = y * w + x;
                    let fp = Footprint::new(
                        w,
                        h,
                        x as f64 + t * flow.u[i],
                        y as f64 + t * flow.v[i],
                    );
                    *o = fp.apply(src);
                }
            });
        debug_assert_eq!(out.plane(c).len(), n);
    }
    Ok(out)
}

/// Forward-difference gradient with zero derivative on the last column/row.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub dx: Image,
    pub dy: Image,
}

pub fn gradient(img: &Image) -> Gradient {
    let [dx, dy] = derivative_filters(img);
    Gradient { dx, dy }
}

/// The derivative filters used in the data term: `[d/dx, d/dy]`.
pub fn derivative_filters(img: &Image) -> [Image; 2] {
    let (w, h) = img.dims();
    let mut dx = Image::new(w, h, img.channels);
    let mut dy = Image::new(w, h, img.channels);
    for c in 0..img.channels {
        diff_x(img.plane(c), w, h, dx.plane_mut(c));
        diff_y(img.plane(c), w, h, dy.plane_mut(c));
    }
    [dx, dy]
}

/// Adjoints of the two filters returned by [`derivative_filters`].
pub fn derivative_adjoints(gx: &Image, gy: &Image) -> [Image; 2] {
    let (w, h) = gx.dims();
    let mut ax = Image::new(w, h, gx.channels);
    let mut ay = Image::new(w, h, gy.channels);
    for c in 0..gx.channels {
        diff_x_adjoint(gx.plane(c), w, h, ax.plane_mut(c));
        diff_y_adjoint(gy.plane(c), w, h, ay.plane_mut(c));
    }
    [ax, ay]
}

pub fn diff_x(src: &[f64], w: usize, _h: usize, dst: &mut [f64]) {
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let s = &src[y * w..(y + 1) * w];
        for x in 0..w - 1 {
            row[x] = s[x + 1] - s[x];
        }
        row[w - 1] = 0.0;
    });
}

pub fn diff_y(src: &[f64], w: usize, h: usize, dst: &mut [f64]) {
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        if y + 1 < h {
            let s0 = &src[y * w..(y + 1) * w];
            let s1 = &src[(y + 1) * w..(y + 2) * w];
            for x in 0..w {
                row[x] = s1[x] - s0[x];
            }
        } else {
            row.fill(0.0);
        }
    });
}

/// Transpose of [`diff_x`]: negative backward difference.
pub fn diff_x_adjoint(src: &[f64], w: usize, _h: usize, dst: &mut [f64]) {
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let s = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let left = if x >= 1 { s[x - 1] } else { 0.0 };
            let here = if x + 1 < w { s[x] } else { 0.0 };
            row[x] = left - here;
        }
    });
}

/// Transpose of [`diff_y`].
pub fn diff_y_adjoint(src: &[f64], w: usize, h: usize, dst: &mut [f64]) {
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let up = if y >= 1 { src[(y - 1) * w + x] } else { 0.0 };
            let here = if y + 1 < h { src[y * w + x] } else { 0.0 };
            row[x] = up - here;
        }
    });
}

/// `Σ_∂ ∂ᵀ∂` applied to one plane: the normal operator of the
/// derivative-domain data term.
pub fn derivative_normal(src: &[f64], w: usize, h: usize, dst: &mut [f64]) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut t = vec![0.0; w * h];
    diff_x(src, w, h, &mut gx);
    diff_y(src, w, h, &mut gy);
    diff_x_adjoint(&gx, w, h, dst);
    diff_y_adjoint(&gy, w, h, &mut t);
    dst.par_iter_mut().zip(&t).for_each(|(d, a)| *d += a);
}

/// Separable Gaussian blur with edge clamp.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let (w, h) = img.dims();
    let mut out = img.clone();
    for c in 0..img.channels {
        let src = img.plane(c).to_vec();
        let mut tmp = vec![0.0; w * h];
        tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += t * src[y * w + xx];
                }
                row[x] = acc;
            }
        });
        out.plane_mut(c)
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let yy =
                            (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                        acc += t * tmp[yy * w + x];
                    }
                    row[x] = acc;
                }
            });
    }
    out
}

/// 3x3 median of one plane with edge clamp.
pub fn median3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut win = [0.0f64; 9];
        for (x, o) in row.iter_mut().enumerate() {
            let mut k = 0;
            for dy in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1isize..=1 {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    win[k] = src[yy * w + xx];
                    k += 1;
                }
            }
            win.sort_by(|a, b| a.total_cmp(b));
            *o = win[4];
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng_next(&mut rng))
    }

    fn rng_next(rng: &mut ChaCha8Rng) -> f64 {
        rng.random::<f64>()
    }

    #[test]
    fn sample_at_lattice_point_is_exact() {
        let img = random_image(7, 9, 1, 1);
        assert_eq!(sample_bilinear(&img, 3.0, 5.0)[0], img.get(3, 5, 0));
        assert_eq!(sample_bilinear(&img, 6.0, 8.0)[0], img.get(6, 8, 0));
        assert_eq!(sample_bilinear(&img, 0.0, 0.0)[0], img.get(0, 0, 0));
    }

    #[test]
    fn sample_constant_anywhere() {
        let img = Image::filled(5, 4, 3, 0.375);
        for &(x, y) in &[(0.3, 0.7), (-4.0, 2.2), (10.5, -3.0), (2.5, 3.9)] {
            assert!(sample_bilinear(&img, x, y)
                .iter()
                .all(|&v| (v - 0.375).abs() < 1e-15));
        }
    }

    #[test]
    fn sample_two_pixel_ramp() {
        let img = Image::from_planar(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert!((sample_bilinear(&img, 0.25, 0.0)[0] - 0.25).abs() < 1e-15);
        // clamped beyond both ends
        assert_eq!(sample_bilinear(&img, -3.0, 0.0)[0], 0.0);
        assert_eq!(sample_bilinear(&img, 7.0, 2.0)[0], 1.0);
    }

    #[test]
    fn sample_is_linear_in_image() {
        let a = random_image(6, 6, 1, 2);
        let b = random_image(6, 6, 1, 3);
        let (al, be) = (0.7, -1.3);
        let comb = a.with_data(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| al * p + be * q)
                .collect(),
        );
        for &(x, y) in &[(1.3, 2.7), (4.9, 0.1), (-1.0, 3.3)] {
            let lhs = sample_bilinear(&comb, x, y)[0];
            let rhs = al * sample_bilinear(&a, x, y)[0] + be * sample_bilinear(&b, x, y)[0];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_identity_cases() {
        let img = random_image(8, 5, 3, 4);
        let flow = FlowField::from_fn(8, 5, |x, y| (x as f64 * 0.3, -(y as f64) * 0.2));
        assert_eq!(warp_image(&img, &flow, 0.0).unwrap(), img);
        assert_eq!(
            warp_image(&img, &FlowField::zeros(8, 5), 0.7).unwrap(),
            img
        );
    }

    #[test]
    fn warp_shifts_ramp() {
        let img = Image::from_fn(6, 3, 1, |x, _, _| x as f64 / 5.0);
        let out = warp_image(&img, &FlowField::constant(6, 3, 1.0, 0.0), 1.0).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                assert!((out.get(x, y, 0) - (x + 1) as f64 / 5.0).abs() < 1e-15);
            }
            assert_eq!(out.get(5, y, 0), 1.0);
        }
    }

    #[test]
    fn warp_rejects_mismatch() {
        let img = Image::new(4, 4, 1);
        assert!(warp_image(&img, &FlowField::zeros(4, 5), 1.0).is_err());
    }

    #[test]
    fn gradient_cases() {
        let g = gradient(&Image::filled(4, 4, 1, 0.2));
        assert!(g.dx.data().iter().chain(g.dy.data()).all(|&v| v == 0.0));

        let ramp = Image::from_fn(5, 4, 1, |x, _, _| 0.1 * x as f64);
        let g = gradient(&ramp);
        for y in 0..4 {
            for x in 0..4 {
                assert!((g.dx.get(x, y, 0) - 0.1).abs() < 1e-12);
            }
            assert_eq!(g.dx.get(4, y, 0), 0.0);
        }
        assert!(g.dy.data().iter().all(|&v| v == 0.0));

        let img = Image::from_planar(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let g = gradient(&img);
        assert_eq!(g.dx.get(0, 0, 0), 1.0);
        assert_eq!(g.dx.get(0, 1, 0), 1.0);
        assert!(g.dy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_ramp_derivatives() {
        let ramp = Image::from_fn(4, 6, 1, |_, y, _| 0.05 * y as f64);
        let [dx, dy] = derivative_filters(&ramp);
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for y in 0..5 {
            assert!((dy.get(2, y, 0) - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_adjoint_identity() {
        for seed in 0..5 {
            let a = random_image(8, 8, 1, 10 + seed);
            let b = random_image(8, 8, 1, 20 + seed);
            let [ax, ay] = derivative_filters(&a);
            let [bx, by] = derivative_adjoints(&b, &b);
            let lhs_x = det_dot(ax.data(), b.data());
            let rhs_x = det_dot(a.data(), bx.data());
            let lhs_y = det_dot(ay.data(), b.data());
            let rhs_y = det_dot(a.data(), by.data());
            assert!((lhs_x - rhs_x).abs() < 1e-10);
            assert!((lhs_y - rhs_y).abs() < 1e-10);
        }
    }

    #[test]
    fn footprint_gradient_matches_difference() {
        let img = random_image(6, 6, 1, 7);
        let (x, y) = (2.3, 3.6);
        let h = 1e-6;
        let fp = Footprint::new(6, 6, x, y);
        let (gx, gy) = fp.gradient(img.plane(0));
        let fx = (Footprint::new(6, 6, x + h, y).apply(img.plane(0))
            - Footprint::new(6, 6, x - h, y).apply(img.plane(0)))
            / (2.0 * h);
        let fy = (Footprint::new(6, 6, x, y + h).apply(img.plane(0))
            - Footprint::new(6, 6, x, y - h).apply(img.plane(0)))
            / (2.0 * h);
        assert!((gx - fx).abs() < 1e-8);
        assert!((gy - fy).abs() < 1e-8);
        let out = Footprint::new(6, 6, -2.0, 2.5);
        assert_eq!(out.gradient(img.plane(0)).0, 0.0);
    }

    #[test]
    fn median_removes_outlier() {
        let mut p = vec![1.0; 25];
        p[12] = 50.0;
        let m = median3(&p, 5, 5);
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gaussian_preserves_constant() {
        let img = Image::filled(9, 7, 1, 0.4);
        let out = gaussian_blur(&img, 1.0);
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn from_planar_validates() {
        assert!(Image::from_planar(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::from_planar(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::from_planar(1, 1, 1, vec![f64::NAN]).is_err());
    }
}
