//! Non-overlapping grid splitting with an optional global view.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{bilinear_resize, RasterImage};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub include_global: bool,
    /// Encoder input side length `S`.
    pub view_side: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, include_global: bool, view_side: usize) -> Result<Self> {
        let spec = Self {
            rows,
            cols,
            include_global,
            view_side,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The single-resized-image configuration.
    pub fn baseline(view_side: usize) -> Self {
        Self {
            rows: 1,
            cols: 1,
            include_global: false,
            view_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.view_side == 0 {
            return Err(Error::invalid(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn view_count(&self) -> usize {
        self.tile_count() + usize::from(self.include_global)
    }

    pub fn canvas_size(&self) -> (usize, usize) {
        (self.rows * self.view_side, self.cols * self.view_side)
    }

    pub fn is_baseline(&self) -> bool {
        self.rows == 1 && self.cols == 1 && !self.include_global
    }

    /// Short label such as `2x2+g`.
    pub fn label(&self) -> String {
        GridShape::from(*self).to_string()
    }
}

/// Grid shape without the view side, as written on the command line:
/// `RxC` or `RxC+g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub include_global: bool,
}

impl GridShape {
    pub fn with_side(self, view_side: usize) -> Result<GridSpec> {
        GridSpec::new(self.rows, self.cols, self.include_global, view_side)
    }

    /// The five configurations compared throughout: `1x1, 2x2, 2x2+g, 3x3, 3x3+g`.
    pub fn standard_sweep() -> Vec<GridShape> {
        ["1x1", "2x2", "2x2+g", "3x3", "3x3+g"]
            .iter()
            .map(|s| s.parse().expect("static labels parse"))
            .collect()
    }

    pub fn parse_list(list: &str) -> Result<Vec<GridShape>> {
        list.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl From<GridSpec> for GridShape {
    fn from(s: GridSpec) -> Self {
        Self {
            rows: s.rows,
            cols: s.cols,
            include_global: s.include_global,
        }
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)?;
        if self.include_global {
            write!(f, "+g")?;
        }
        Ok(())
    }
}

impl FromStr for GridShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, include_global) = match s.strip_suffix("+g") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let bad = || Error::Parse(format!("grid `{s}` (expected RxC or RxC+g)"));
        let (r, c) = body.split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Self {
            rows,
            cols,
            include_global,
        })
    }
}

/// Tiles in row-major grid order (`t = row * cols + col`) plus the optional
/// global view. Every view is `S x S`.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<RasterImage>,
    pub global_view: Option<RasterImage>,
}

impl TileSet {
    /// All encoder inputs in fusion order: tiles first, global last.
    pub fn views(&self) -> impl Iterator<Item = &RasterImage> {
        self.tiles.iter().chain(self.global_view.iter())
    }

    pub fn view_count(&self) -> usize {
        self.tiles.len() + usize::from(self.global_view.is_some())
    }
}

/// Resizes the image to the `(r*S, c*S)` canvas and cuts it into `r x c`
/// disjoint `S x S` tiles. The global view, when requested, is resized from
/// the original image rather than from the canvas.
pub fn split_into_tiles(img: &RasterImage, spec: &GridSpec) -> Result<TileSet> {
    spec.validate()?;
    let (ch, cw) = spec.canvas_size();
    let canvas = bilinear_resize(img, ch, cw)?;
    let s = spec.view_side;
    let mut tiles = Vec::with_capacity(spec.tile_count());
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            tiles.push(canvas.crop(r * s, c * s, s, s)?);
        }
    }
    let global_view = if spec.include_global {
        Some(bilinear_resize(img, s, s)?)
    } else {
        None
    };
    Ok(TileSet { tiles, global_view })
}

/// Reassembles tiles into the canvas they were cut from.
pub fn stitch_tiles(tiles: &TileSet, spec: &GridSpec) -> Result<RasterImage> {
    if tiles.tiles.len() != spec.tile_count() {
        return Err(Error::Contract(format!(
            "{} tiles for a {} grid",
            tiles.tiles.len(),
            spec.label()
        )));
    }
    let (h, w) = spec.canvas_size();
    let channels = tiles.tiles[0].channels();
    let mut canvas = RasterImage::filled(h, w, channels, 0.0)?;
    let s = spec.view_side;
    for (t, tile) in tiles.tiles.iter().enumerate() {
        canvas.paste(tile, (t / spec.cols) * s, (t % spec.cols) * s)?;
    }
    Ok(canvas)
}

/// Per-channel pixel normalisation constants. Persisted with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl PixelNorm {
    pub fn uniform(channels: usize, mean: f32, std: f32) -> Self {
        Self {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }
}

impl Default for PixelNorm {
    fn default() -> Self {
        Self::uniform(1, 0.5, 0.5)
    }
}

/// `(pixel - mean) / std` per channel, laid out channel-major as
/// `(channels, height, width)`.
pub fn normalize_pixels<T: Scalar>(img: &RasterImage, norm: &PixelNorm) -> Result<Tensor<T>> {
    let c = img.channels();
    if norm.mean.len() != c || norm.std.len() != c {
        return Err(Error::invalid(format!(
            "normalisation has {}/{} channels, image has {c}",
            norm.mean.len(),
            norm.std.len()
        )));
    }
    if norm.std.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::invalid("normalisation std must be nonzero"));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let (m, s) = (norm.mean[ch] as f64, norm.std[ch] as f64);
        for r in 0..h {
            for col in 0..w {
                data.push(T::of((img.get(r, col, ch) as f64 - m) / s));
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> RasterImage {
        let n = h * w * c;
        RasterImage::new(h, w, c, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn exact_two_by_two_split() {
        let img = ramp(448, 448, 1);
        let spec = GridSpec::new(2, 2, false, 224).unwrap();
        let set = split_into_tiles(&img, &spec).unwrap();
        assert_eq!(set.tiles.len(), 4);
        assert!(set.global_view.is_none());
        assert_eq!(set.tiles[0], img.crop(0, 0, 224, 224).unwrap());
        assert_eq!(set.tiles[3], img.crop(224, 224, 224, 224).unwrap());
    }

    #[test]
    fn baseline_is_a_plain_resize() {
        let img = ramp(300, 500, 3);
        let set = split_into_tiles(&img, &GridSpec::baseline(224)).unwrap();
        assert_eq!(set.tiles, vec![bilinear_resize(&img, 224, 224).unwrap()]);
    }

    #[test]
    fn three_by_three_with_global_reassembles() {
        let img = ramp(300, 500, 3);
        let spec = GridSpec::new(3, 3, true, 112).unwrap();
        let set = split_into_tiles(&img, &spec).unwrap();
        assert_eq!(set.tiles.len(), 9);
        assert!(set.tiles.iter().all(|t| t.height() == 112 && t.width() == 112));
        let g = set.global_view.as_ref().unwrap();
        assert_eq!(*g, bilinear_resize(&img, 112, 112).unwrap());
        let canvas = bilinear_resize(&img, 336, 336).unwrap();
        assert_eq!(stitch_tiles(&set, &spec).unwrap(), canvas);
    }

    #[test]
    fn grid_labels_round_trip() {
        for s in ["1x1", "2x2+g", "3x4", "3x3+g"] {
            assert_eq!(s.parse::<GridShape>().unwrap().to_string(), s);
        }
        assert!("0x2".parse::<GridShape>().is_err());
        assert!("2by2".parse::<GridShape>().is_err());
        assert_eq!(GridShape::standard_sweep().len(), 5);
    }

    #[test]
    fn normalisation_cases() {
        let img = RasterImage::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let raw: Tensor<f64> = normalize_pixels(&img, &PixelNorm::uniform(1, 0.0, 1.0)).unwrap();
        assert_eq!(raw.data(), &[0.0, 1.0]);
        let t: Tensor<f64> = normalize_pixels(&img, &PixelNorm::uniform(1, 0.5, 0.25)).unwrap();
        assert_eq!(t.data(), &[-2.0, 2.0]);
        assert_eq!(t.shape(), &[1, 1, 2]);
        let half = RasterImage::filled(4, 4, 1, 0.5).unwrap();
        let z: Tensor<f32> = normalize_pixels(&half, &PixelNorm::default()).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert!(normalize_pixels::<f32>(&img, &PixelNorm::uniform(1, 0.5, 0.0)).is_err());
    }

    #[test]
    fn normalisation_is_channel_major() {
        let img = RasterImage::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let t: Tensor<f32> = normalize_pixels(&img, &PixelNorm::uniform(3, 0.0, 1.0)).unwrap();
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tiles_partition_the_canvas(
            h in 1usize..40, w in 1usize..40, rows in 1usize..4, cols in 1usize..4,
            side in 1usize..12, global in any::<bool>(), seed in any::<u64>(),
        ) {
            let n = h * w;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 999.0).collect();
            let img = RasterImage::new(h, w, 1, data).unwrap();
            let spec = GridSpec::new(rows, cols, global, side).unwrap();
            let set = split_into_tiles(&img, &spec).unwrap();
            prop_assert_eq!(set.tiles.len(), rows * cols);
            prop_assert_eq!(set.global_view.is_some(), global);
            let canvas = bilinear_resize(&img, rows * side, cols * side).unwrap();
            prop_assert_eq!(stitch_tiles(&set, &spec).unwrap(), canvas);
            prop_assert_eq!(split_into_tiles(&img, &spec).unwrap(), set);
        }
    }
}
