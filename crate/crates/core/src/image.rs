//! Float raster images, bilinear resampling and PNG / PPM I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `(row, column, channel)` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("{channels} channels (need 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Writes one pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value.clamp(0.0, 1.0);
    }

    /// Copies the `h x w` block whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<RasterImage> {
        if h == 0 || w == 0 || row + h > self.height || col + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({row}, {col}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for r in row..row + h {
            let start = (r * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(RasterImage {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Pastes `block` with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, block: &RasterImage, row: usize, col: usize) -> Result<()> {
        if block.channels != self.channels
            || row + block.height > self.height
            || col + block.width > self.width
        {
            return Err(Error::invalid(format!(
                "paste {}x{}x{} at ({row}, {col}) into {}x{}x{}",
                block.height, block.width, block.channels, self.height, self.width, self.channels
            )));
        }
        let c = self.channels;
        for r in 0..block.height {
            let dst = ((row + r) * self.width + col) * c;
            let src = r * block.width * c;
            self.data[dst..dst + block.width * c]
                .copy_from_slice(&block.data[src..src + block.width * c]);
        }
        Ok(())
    }
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

/// Half-pixel-centre sample positions: `u = (i + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let max = (input - 1) as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        w: Vec::with_capacity(output),
    };
    for i in 0..output {
        let u = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = u.floor() as usize;
        taps.lo.push(lo);
        taps.hi.push((lo + 1).min(input - 1));
        taps.w.push(u - lo as f64);
    }
    taps
}

/// `a + w (b - a)`, clamped to the closed interval between `a` and `b` so
/// interpolation can never leave the range of its sources.
#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    (a + w * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resize with half-pixel centres.
pub fn bilinear_resize(img: &RasterImage, out_h: usize, out_w: usize) -> Result<RasterImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("resize target {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let ty = axis_taps(img.height, out_h);
    let tx = axis_taps(img.width, out_w);
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (r0, r1, wy) = (ty.lo[i], ty.hi[i], ty.w[i]);
        for j in 0..out_w {
            let (c0, c1, wx) = (tx.lo[j], tx.hi[j], tx.w[j]);
            for ch in 0..c {
                let top = lerp(img.get(r0, c0, ch) as f64, img.get(r0, c1, ch) as f64, wx);
                let bot = lerp(img.get(r1, c0, ch) as f64, img.get(r1, c1, ch) as f64, wx);
                data.push(lerp(top, bot, wy) as f32);
            }
        }
    }
    Ok(RasterImage {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_bytes(height: usize, width: usize, src_channels: usize, bytes: &[u8], max: f32) -> Result<RasterImage> {
    let keep = if src_channels >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(height * width * keep);
    for px in bytes.chunks_exact(src_channels).take(height * width) {
        for v in &px[..keep] {
            data.push(*v as f32 / max);
        }
    }
    RasterImage::new(height, width, keep, data)
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB or RGBA; alpha is dropped).
pub fn read_png(path: &Path) -> Result<RasterImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Parse(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let channels = info.color_type.samples();
    from_bytes(
        info.height as usize,
        info.width as usize,
        channels,
        &buf[..info.buffer_size()],
        255.0,
    )
}

pub fn write_png(img: &RasterImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    encoder
        .write_header()
        .and_then(|mut w| w.write_image_data(&bytes))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("malformed PNM header".into()))
}

/// Parses binary PPM (`P6`) or PGM (`P5`) with 8-bit samples.
pub fn decode_pnm(bytes: &[u8]) -> Result<RasterImage> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Parse("not a binary PPM/PGM file".into())),
    };
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos)?;
    let height = ppm_token(bytes, &mut pos)?;
    let max = ppm_token(bytes, &mut pos)?;
    if max == 0 || max > 255 {
        return Err(Error::Parse(format!("unsupported PNM maxval {max}")));
    }
    pos += 1;
    let need = width * height * channels;
    let body = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Parse("truncated PNM body".into()))?;
    from_bytes(height, width, channels, body, max as f32)
}

pub fn encode_pnm(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| to_u8(*v)));
    out
}

/// Reads an image by extension: `.png`, `.ppm` or `.pgm`.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("ppm") | Some("pgm") | Some("pnm") => {
            let mut bytes = Vec::new();
            File::open(path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(path, e))?;
            decode_pnm(&bytes)
        }
        _ => read_png(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = RasterImage> {
        (1usize..9, 1usize..9, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0.0f32..=1.0, h * w * c)
                .prop_map(move |d| RasterImage::new(h, w, c, d).unwrap())
        })
    }

    #[test]
    fn same_size_resize_is_identity() {
        let data: Vec<f32> = (0..35).map(|i| i as f32 / 35.0).collect();
        let img = RasterImage::new(7, 5, 1, data).unwrap();
        assert_eq!(bilinear_resize(&img, 7, 5).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RasterImage::filled(5, 9, 3, 0.37).unwrap();
        for (h, w) in [(1, 1), (3, 17), (20, 4), (64, 64)] {
            let out = bilinear_resize(&img, h, w).unwrap();
            assert!(out.data().iter().all(|v| *v == 0.37));
        }
    }

    #[test]
    fn checkerboard_to_single_pixel() {
        let img = RasterImage::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = bilinear_resize(&img, 1, 1).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn zero_target_is_rejected() {
        let img = RasterImage::filled(2, 2, 1, 0.0).unwrap();
        assert!(matches!(bilinear_resize(&img, 0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn out_of_range_intensity_is_rejected() {
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn pnm_round_trip() {
        let img = RasterImage::new(2, 3, 3, (0..18).map(|i| i as f32 * 15.0 / 255.0).collect()).unwrap();
        let back = decode_pnm(&encode_pnm(&img)).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let with_comment = b"P5\n# hi\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pnm(with_comment).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = RasterImage::new(3, 2, 1, (0..6).map(|i| (i * 40) as f32 / 255.0).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    proptest! {
        #[test]
        fn resize_stays_within_source_range(img in arb_image(), h in 1usize..12, w in 1usize..12) {
            let out = bilinear_resize(&img, h, w).unwrap();
            let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(out.data().iter().all(|v| *v >= lo && *v <= hi));
        }
    }
}
