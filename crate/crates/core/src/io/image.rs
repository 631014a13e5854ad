//! 8-bit RGB rasters. Binary PPM (P6, maxval 255) is always available;
//! PNG needs the `png` feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Maps a byte to `[-1, 1]`.
pub fn byte_to_unit(v: u8) -> f32 {
    (v as f64 / 255.0 * 2.0 - 1.0) as f32
}

/// Clamps to `[-1, 1]`, maps to `[0, 255]` and rounds half away from zero.
pub fn unit_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { (v as f64).clamp(-1.0, 1.0) };
    ((v + 1.0) / 2.0 * 255.0).round() as u8
}

/// Reads a PPM (or, with the `png` feature, a PNG) as a `1x3xHxW` tensor.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(path, &bytes);
    }
    decode_ppm(path, &bytes)
}

/// Writes a `1x3xHxW` (or `1x1xHxW`, as gray) tensor. The format follows
/// the extension: `.png` needs the `png` feature, anything else is PPM.
pub fn save_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = to_rgb_bytes(img)?;
    let s = img.shape();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(path, &rgb, s.w, s.h)? } else { encode_ppm(&rgb, s.w, s.h) };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_rgb_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || !(s.c == 3 || s.c == 1) {
        return Err(Error::invalid("save_image", format!("expected a 1x3xHxW or 1x1xHxW image, got {s}")));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            let src = if s.c == 1 { 0 } else { c };
            out.push(unit_to_byte(img.data()[src * plane + i]));
        }
    }
    Ok(out)
}

fn from_rgb_bytes(rgb: &[u8], w: usize, h: usize) -> Tensor {
    let plane = w * h;
    let mut data = vec![0.0; plane * 3];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = byte_to_unit(rgb[i * 3 + c]);
        }
    }
    Tensor::from_vec_unchecked(Shape::new(1, 3, h, w), data)
}

pub fn encode_ppm(rgb: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, reason)
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Parses a decimal field; returns it with its starting offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let v = text.parse().map_err(|_| Error::format(self.path, start as u64, format!("{what} `{text}` is out of range")))?;
        Ok((v, start))
    }
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if !bytes.starts_with(b"P6") {
        return Err(cur.err("missing P6 magic number (only binary RGB PPM is supported)"));
    }
    cur.pos = 2;
    let (w, _) = cur.number("width")?;
    let (h, _) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, maxval_at as u64, format!("unsupported maxval {maxval} (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, 0, format!("empty image {w}x{h}")));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte before the pixel data")),
    }
    let need = w.checked_mul(h).and_then(|p| p.checked_mul(3)).ok_or_else(|| cur.err("image too large"))?;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated pixel data: {have} of {need} bytes present"),
        ));
    }
    Ok(from_rgb_bytes(&bytes[cur.pos..cur.pos + need], w, h))
}

#[cfg(feature = "png")]
fn decode_png(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, 0, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, 0, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::format(path, 0, "indexed PNG was not expanded")),
    };
    Ok(from_rgb_bytes(&rgb, w, h))
}

#[cfg(not(feature = "png"))]
fn decode_png(path: &Path, _bytes: &[u8]) -> Result<Tensor> {
    Err(Error::format(path, 0, "PNG support is not compiled in (enable the `png` feature)"))
}

#[cfg(feature = "png")]
fn encode_png(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writer.write_image_data(rgb).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    Ok(out)
}

#[cfg(not(feature = "png"))]
fn encode_png(path: &Path, _rgb: &[u8], _w: usize, _h: usize) -> Result<Vec<u8>> {
    Err(Error::invalid("save_image", format!("{}: PNG support is not compiled in", path.display())))
}

/// Visualises a signed band: `gain * x` saved with zero at mid-gray.
pub fn band_to_display(band: &Tensor, gain: f32) -> Tensor {
    band.map(|v| (v * gain).clamp(-1.0, 1.0))
}
