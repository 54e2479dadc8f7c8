//! File formats: Middlebury `.flo` flows, binary/ASCII PGM and PPM, and PNG
//! through the `image` crate. Pixels are stored as `[0, 1]` floats and
//! quantized with `round(255 · clamp(v, 0, 1))` on output.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};

/// Magic tag of `.flo` files.
pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
/// Largest side accepted by the decoders.
pub const MAX_SIDE: usize = 1 << 14;

fn decode_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Decode {
        format,
        reason: reason.into(),
    }
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for k in 0..w * h {
        out.extend_from_slice(&(flow.u[k] as f32).to_le_bytes());
        out.extend_from_slice(&(flow.v[k] as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(decode_err("flo", "missing PIEH header"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 || w as usize > MAX_SIDE || h as usize > MAX_SIDE {
        return Err(decode_err("flo", format!("bad size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let body = &bytes[12..];
    if body.len() != 8 * w * h {
        return Err(decode_err(
            "flo",
            format!("expected {} payload bytes, got {}", 8 * w * h, body.len()),
        ));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in body.chunks_exact(8) {
        let a = f32::from_le_bytes(pair[..4].try_into().expect("4 bytes"));
        let b = f32::from_le_bytes(pair[4..].try_into().expect("4 bytes"));
        if !a.is_finite() || !b.is_finite() {
            return Err(decode_err("flo", "non-finite flow value"));
        }
        u.push(a as f64);
        v.push(b as f64);
    }
    FlowField::from_parts(w, h, u, v)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    Ok(fs::write(path, encode_flo(flow))?)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

/// `round(255 · clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Interleaved 8-bit samples of an image, row-major.
pub fn to_bytes(img: &Image) -> Vec<u8> {
    let (w, h) = img.dims();
    let c = img.channels();
    let mut out = Vec::with_capacity(w * h * c);
    for k in 0..w * h {
        for ch in 0..c {
            out.push(quantize(img.plane(ch)[k]));
        }
    }
    out
}

fn from_bytes(w: usize, h: usize, c: usize, bytes: &[u8], maxval: f64) -> Result<Image> {
    let mut data = vec![0.0; w * h * c];
    for k in 0..w * h {
        for ch in 0..c {
            data[ch * w * h + k] = bytes[k * c + ch] as f64 / maxval;
        }
    }
    Image::from_planar(w, h, c, data)
}

/// Binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_bytes(img));
    out
}

struct PnmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmHeader<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(decode_err("pnm", "expected a number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| decode_err("pnm", "bad number"))
    }
}

/// PGM/PPM in ASCII (`P2`, `P3`) or binary (`P5`, `P6`) form, 8 or 16 bit.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(decode_err("pnm", "missing P header"));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        other => {
            return Err(decode_err(
                "pnm",
                format!("unsupported variant P{}", other as char),
            ))
        }
    };
    let mut hd = PnmHeader { bytes, pos: 2 };
    let w = hd.number()?;
    let h = hd.number()?;
    let maxval = hd.number()?;
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(decode_err("pnm", format!("bad size {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(decode_err("pnm", format!("bad maxval {maxval}")));
    }
    let n = w * h * channels;
    let mut samples = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if hd.pos >= bytes.len() || !bytes[hd.pos].is_ascii_whitespace() {
            return Err(decode_err("pnm", "truncated header"));
        }
        let body = &bytes[hd.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if body.len() < need {
            return Err(decode_err(
                "pnm",
                format!("expected {need} raster bytes, got {}", body.len()),
            ));
        }
        if wide {
            samples.extend(body[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as usize));
        } else {
            samples.extend(body[..n].iter().map(|&b| b as usize));
        }
    } else {
        for _ in 0..n {
            samples.push(hd.number()?);
        }
    }
    if samples.iter().any(|&s| s > maxval) {
        return Err(decode_err("pnm", "sample exceeds maxval"));
    }
    let mut data = vec![0.0; n];
    for k in 0..w * h {
        for c in 0..channels {
            data[c * w * h + k] = samples[k * channels + c] as f64 / maxval as f64;
        }
    }
    Image::from_planar(w, h, channels, data)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut Cursor::new(&mut out),
        &to_bytes(img),
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )?;
    Ok(out)
}

/// PNG decoding; gray stays one channel, everything else becomes RGB.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(decode_err("png", format!("bad size {w}x{h}")));
    }
    if dynimg.color().channel_count() <= 2 {
        let g = dynimg.to_luma8();
        from_bytes(w, h, 1, g.as_raw(), 255.0)
    } else {
        let rgb = dynimg.to_rgb8();
        from_bytes(w, h, 3, rgb.as_raw(), 255.0)
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Read a frame; the format follows the file extension.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    match extension(path).as_str() {
        "png" => decode_png(&bytes),
        "pgm" | "ppm" | "pnm" => decode_pnm(&bytes),
        other => Err(decode_err("image", format!("unsupported extension '{other}'"))),
    }
}

/// Write a frame; the format follows the file extension.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = match extension(path).as_str() {
        "png" => encode_png(img)?,
        "pgm" | "ppm" | "pnm" => encode_pnm(img),
        other => {
            return Err(decode_err(
                "image",
                format!("unsupported extension '{other}'"),
            ))
        }
    };
    Ok(fs::write(path, bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_round_trip() {
        let f = FlowField::from_fn(5, 3, |x, y| (x as f64 * 0.5, -(y as f64) * 0.25));
        let bytes = encode_flo(&f);
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(bytes.len(), 12 + 8 * 15);
        assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn flo_rejects_truncation() {
        let bytes = encode_flo(&FlowField::zeros(2, 2));
        assert!(decode_flo(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_flo(b"PIEH").is_err());
        let mut neg = bytes.clone();
        neg[4..8].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(decode_flo(&neg).is_err());
    }

    #[test]
    fn pnm_binary_round_trip() {
        let img = Image::from_fn(4, 3, 3, |x, y, c| ((x + 2 * y + c) * 17) as f64 / 255.0);
        assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
        let gray = Image::from_fn(4, 3, 1, |x, y, _| ((x * y) * 20) as f64 / 255.0);
        assert_eq!(decode_pnm(&encode_pnm(&gray)).unwrap(), gray);
    }

    #[test]
    fn pnm_ascii_with_comments() {
        let text = b"P2\n# tiny\n2 2\n# max\n4\n0 1\n2 4\n";
        let img = decode_pnm(text).unwrap();
        assert_eq!(img.data(), &[0.0, 0.25, 0.5, 1.0]);
        assert!(decode_pnm(b"P2\n2 2\n4\n0 1 2 5\n").is_err());
        assert!(decode_pnm(b"P7\n").is_err());
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let img = Image::from_fn(6, 4, 3, |x, y, c| ((x * 40 + y * 10 + c * 3) % 256) as f64 / 255.0);
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(7.0), 255);
    }
}
