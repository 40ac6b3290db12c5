//! Procedural benchmarks whose answers follow from the placement metadata
//! stored with every sample.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::par;
use crate::seed::{rng_for, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Detail,
    Coherence,
    Pope,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Detail => "detail",
            TaskKind::Coherence => "coherence",
            TaskKind::Pope => "pope",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detail" => Ok(TaskKind::Detail),
            "coherence" => Ok(TaskKind::Coherence),
            "pope" => Ok(TaskKind::Pope),
            _ => Err(Error::Parse(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Left,
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSubset {
    Random,
    Popular,
    Adversarial,
}

impl PopeSubset {
    pub const ALL: [PopeSubset; 3] = [PopeSubset::Random, PopeSubset::Popular, PopeSubset::Adversarial];
}

/// Top-left pixel of a placed object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Placement {
    Detail {
        glyph: usize,
        at: Pos,
        glyph_side: usize,
        /// Tile holding the glyph under a 2x2 split.
        tile_2x2: usize,
    },
    Coherence {
        relation: Relation,
        a: Pos,
        b: Pos,
        marker_side: usize,
        grid_rows: usize,
        grid_cols: usize,
        tile_a: usize,
        tile_b: usize,
    },
    Pope {
        present: Vec<(usize, Pos)>,
        query: usize,
        subset: PopeSubset,
    },
}

impl Placement {
    /// The answer implied by the placement alone.
    pub fn answer(&self) -> Vec<u8> {
        match self {
            Placement::Detail { glyph, .. } => vec![b'0' + *glyph as u8],
            Placement::Coherence {
                relation, a, b, ..
            } => {
                let yes = match relation {
                    Relation::Left => a.col < b.col,
                    Relation::Above => a.row < b.row,
                };
                yes_no(yes)
            }
            Placement::Pope { present, query, .. } => yes_no(present.iter().any(|(g, _)| g == query)),
        }
    }

    pub fn question(&self) -> Vec<u8> {
        match self {
            Placement::Detail { .. } => b"which glyph?".to_vec(),
            Placement::Coherence { relation, .. } => match relation {
                Relation::Left => b"is A left of B?".to_vec(),
                Relation::Above => b"is A above B?".to_vec(),
            },
            Placement::Pope { query, .. } => format!("is glyph {query} present?").into_bytes(),
        }
    }

    /// Caption-style description used for projector pretraining.
    pub fn caption(&self) -> Vec<u8> {
        match self {
            Placement::Detail { glyph, .. } => format!("glyph {glyph}").into_bytes(),
            Placement::Coherence {
                relation, a, b, ..
            } => {
                let word = match relation {
                    Relation::Left if a.col < b.col => "left of",
                    Relation::Left => "right of",
                    Relation::Above if a.row < b.row => "above",
                    Relation::Above => "below",
                };
                format!("a {word} b").into_bytes()
            }
            Placement::Pope { present, .. } => {
                let mut ids: Vec<usize> = present.iter().map(|(g, _)| *g).collect();
                ids.sort_unstable();
                let list: Vec<String> = ids.iter().map(|g| g.to_string()).collect();
                format!("glyphs {}", list.join(" ")).into_bytes()
            }
        }
    }
}

fn yes_no(yes: bool) -> Vec<u8> {
    if yes {
        b"y".to_vec()
    } else {
        b"n".to_vec()
    }
}

pub const CAPTION_PROMPT: &[u8] = b"describe";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub image: RasterImage,
    pub question: Vec<u8>,
    pub answer: Vec<u8>,
    pub task: TaskKind,
    pub placement: Placement,
}

impl SyntheticSample {
    fn from_placement(index: usize, image: RasterImage, task: TaskKind, placement: Placement) -> Self {
        Self {
            index,
            image,
            question: placement.question(),
            answer: placement.answer(),
            task,
            placement,
        }
    }
}

/// A 4x4 binary pattern, bit `r * 4 + c` set when cell `(r, c)` is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph(pub u16);

impl Glyph {
    pub fn cell(self, r: usize, c: usize) -> bool {
        self.0 >> (r * 4 + c) & 1 == 1
    }

    pub fn hamming(self, other: Glyph) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Every 2x2 block of cells has exactly two cells on.
    pub fn is_balanced(self) -> bool {
        (0..2).all(|br| {
            (0..2).all(|bc| {
                let on = (0..2)
                    .flat_map(|r| (0..2).map(move |c| (2 * br + r, 2 * bc + c)))
                    .filter(|(r, c)| self.cell(*r, *c))
                    .count();
                on == 2
            })
        })
    }
}

/// `n` balanced glyphs chosen greedily for large pairwise Hamming distance.
///
/// A balanced glyph rendered with 2 px cells averages to exactly 0.5 over
/// every aligned 4x4 pixel block, so a 4x downsample erases its identity.
pub fn glyph_family(n: usize) -> Vec<Glyph> {
    let pool: Vec<Glyph> = (0..=u16::MAX).map(Glyph).filter(|g| g.is_balanced()).collect();
    let mut chosen = vec![pool[0]];
    while chosen.len() < n.min(pool.len()) {
        let next = pool
            .iter()
            .filter(|g| !chosen.contains(g))
            .max_by_key(|g| {
                let d = chosen.iter().map(|c| c.hamming(**g)).min().unwrap_or(0);
                (d, std::cmp::Reverse(g.0))
            })
            .copied()
            .expect("pool larger than family");
        chosen.push(next);
    }
    chosen
}

fn sample_rng(seed: u64, task: &str, index: usize) -> crate::seed::Rng {
    rng_for(sub_seed(seed, "data"), &format!("{task}/{index}"))
}

/// Smooth mid-gray texture with light per-pixel noise, in `[0.3, 0.7]`.
fn background(side: usize, rng: &mut impl Rng) -> RasterImage {
    let fx = rng.random_range(0.05f32..0.3);
    let fy = rng.random_range(0.05f32..0.3);
    let (px, py) = (rng.random_range(0.0f32..6.3), rng.random_range(0.0f32..6.3));
    let mut data = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let wave = (fx * c as f32 + px).sin() * (fy * r as f32 + py).sin();
            let noise = rng.random_range(-0.04f32..0.04);
            data.push((0.5 + 0.1 * wave + noise).clamp(0.3, 0.7));
        }
    }
    RasterImage::new(side, side, 1, data).expect("valid texture")
}

fn draw_glyph(img: &mut RasterImage, g: Glyph, at: Pos, side: usize) {
    let cell = side / 4;
    for r in 0..side {
        for c in 0..side {
            let v = if g.cell(r / cell, c / cell) { 1.0 } else { 0.0 };
            img.set(at.row + r, at.col + c, 0, v);
        }
    }
}

fn fill_square(img: &mut RasterImage, at: Pos, side: usize, value: f32) {
    for r in 0..side {
        for c in 0..side {
            img.set(at.row + r, at.col + c, 0, value);
        }
    }
}

/// Identify which of `n_glyphs` tiny glyphs appears in the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailTask {
    pub image_side: usize,
    pub glyph_side: usize,
    pub n_glyphs: usize,
    /// Glyph origins lie on multiples of this many pixels; defaults to
    /// `glyph_side`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<usize>,
}

impl Default for DetailTask {
    fn default() -> Self {
        Self {
            image_side: 256,
            glyph_side: 8,
            n_glyphs: 8,
            lattice: None,
        }
    }
}

impl DetailTask {
    pub fn new(image_side: usize, glyph_side: usize, n_glyphs: usize) -> Result<Self> {
        let t = Self {
            image_side,
            glyph_side,
            n_glyphs,
            lattice: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.glyph_side == 0 || 2 * self.glyph_side > self.image_side {
            return Err(Error::invalid(format!(
                "glyph side {} does not fit a 2x2 tile of a {}-pixel image",
                self.glyph_side, self.image_side
            )));
        }
        if self.glyph_side % 4 != 0 || self.image_side % (2 * self.glyph_side) != 0 {
            return Err(Error::invalid(format!(
                "glyph side {} must be a multiple of 4 and tile the {}-pixel half-image",
                self.glyph_side, self.image_side
            )));
        }
        let step = self.lattice();
        if step % self.glyph_side != 0 || (self.image_side / 2) % step != 0 {
            return Err(Error::invalid(format!(
                "lattice {step} must be a multiple of the glyph side and divide the half-image"
            )));
        }
        if !(2..=10).contains(&self.n_glyphs) {
            return Err(Error::invalid(format!(
                "{} glyphs; answers are single digits",
                self.n_glyphs
            )));
        }
        Ok(())
    }

    pub fn lattice(&self) -> usize {
        self.lattice.unwrap_or(self.glyph_side)
    }

    pub fn sample(&self, seed: u64, index: usize, glyphs: &[Glyph]) -> SyntheticSample {
        let mut rng = sample_rng(seed, "detail", index);
        let glyph = rng.random_range(0..self.n_glyphs);
        let step = self.lattice();
        let cells = self.image_side / step;
        let at = Pos {
            row: rng.random_range(0..cells) * step,
            col: rng.random_range(0..cells) * step,
        };
        let mut image = background(self.image_side, &mut rng);
        draw_glyph(&mut image, glyphs[glyph], at, self.glyph_side);
        let half = self.image_side / 2;
        let placement = Placement::Detail {
            glyph,
            at,
            glyph_side: self.glyph_side,
            tile_2x2: (at.row / half) * 2 + at.col / half,
        };
        SyntheticSample::from_placement(index, image, TaskKind::Detail, placement)
    }
}

/// How the two markers of a coherence sample are laid out over the tiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Markers in different tile columns (left) or tile rows (above), so the
    /// tile indices alone settle the answer.
    #[default]
    Across,
    /// Markers in the same tile column (left) or tile row (above) but
    /// different tiles; only their offsets inside the tiles settle the
    /// answer, at least one marker side apart.
    Aligned,
}

/// Decide a spatial relation between a white marker A and a black marker B
/// that always sit in different tiles of an `rows x cols` split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTask {
    pub image_side: usize,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub layout: Layout,
}

impl Default for CoherenceTask {
    fn default() -> Self {
        Self {
            image_side: 96,
            rows: 3,
            cols: 3,
            layout: Layout::Across,
        }
    }
}

impl CoherenceTask {
    pub fn new(image_side: usize, rows: usize, cols: usize) -> Result<Self> {
        let t = Self {
            image_side,
            rows,
            cols,
            layout: Layout::Across,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows * self.cols < 4 {
            return Err(Error::invalid(format!(
                "{}x{} grid has fewer than 4 tiles",
                self.rows, self.cols
            )));
        }
        if self.image_side % self.rows != 0 || self.image_side % self.cols != 0 || self.marker_side() == 0 {
            return Err(Error::invalid(format!(
                "{}-pixel image does not split into {}x{} tiles",
                self.image_side, self.rows, self.cols
            )));
        }
        if self.layout == Layout::Aligned && (self.rows < 2 || self.cols < 2) {
            return Err(Error::invalid("aligned layout needs at least 2 tile rows and columns"));
        }
        Ok(())
    }

    pub fn with_layout(mut self, layout: Layout) -> Result<Self> {
        self.layout = layout;
        self.validate()?;
        Ok(self)
    }

    pub fn marker_side(&self) -> usize {
        (self.image_side / self.rows).min(self.image_side / self.cols) / 4
    }

    pub fn sample(&self, seed: u64, index: usize) -> SyntheticSample {
        let mut rng = sample_rng(seed, "coherence", index);
        let relation = match (self.rows >= 2, self.cols >= 2) {
            (true, true) => {
                if rng.random_bool(0.5) {
                    Relation::Left
                } else {
                    Relation::Above
                }
            }
            (false, _) => Relation::Left,
            (true, false) => Relation::Above,
        };
        let yes = rng.random_bool(0.5);
        let m = self.marker_side();
        let (a, b, (ra, ca), (rb, cb)) = match self.layout {
            Layout::Across => self.place_across(&mut rng, relation, yes),
            Layout::Aligned => self.place_aligned(&mut rng, relation, yes),
        };
        let mut image = background(self.image_side, &mut rng);
        fill_square(&mut image, a, m, 1.0);
        fill_square(&mut image, b, m, 0.0);
        let placement = Placement::Coherence {
            relation,
            a,
            b,
            marker_side: m,
            grid_rows: self.rows,
            grid_cols: self.cols,
            tile_a: ra * self.cols + ca,
            tile_b: rb * self.cols + cb,
        };
        SyntheticSample::from_placement(index, image, TaskKind::Coherence, placement)
    }

    /// Distinct tiles along the relation axis; the tile order decides.
    fn place_across(&self, rng: &mut crate::seed::Rng, relation: Relation, yes: bool) -> (Pos, Pos, (usize, usize), (usize, usize)) {
        let distinct = |rng: &mut crate::seed::Rng, n: usize| {
            let lo = rng.random_range(0..n - 1);
            let hi = rng.random_range(lo + 1..n);
            if yes {
                (lo, hi)
            } else {
                (hi, lo)
            }
        };
        let ((ra, ca), (rb, cb)) = match relation {
            Relation::Left => {
                let (ca, cb) = distinct(rng, self.cols);
                ((rng.random_range(0..self.rows), ca), (rng.random_range(0..self.rows), cb))
            }
            Relation::Above => {
                let (ra, rb) = distinct(rng, self.rows);
                ((ra, rng.random_range(0..self.cols)), (rb, rng.random_range(0..self.cols)))
            }
        };
        let (th, tw) = (self.image_side / self.rows, self.image_side / self.cols);
        let m = self.marker_side();
        let mut place = |r: usize, c: usize| Pos {
            row: r * th + rng.random_range(0..=th - m),
            col: c * tw + rng.random_range(0..=tw - m),
        };
        let a = place(ra, ca);
        let b = place(rb, cb);
        (a, b, (ra, ca), (rb, cb))
    }

    /// One tile line shared by both markers; the in-tile offsets decide.
    fn place_aligned(&self, rng: &mut crate::seed::Rng, relation: Relation, yes: bool) -> (Pos, Pos, (usize, usize), (usize, usize)) {
        let (th, tw) = (self.image_side / self.rows, self.image_side / self.cols);
        let m = self.marker_side();
        // two offsets in 0..=span at least m apart, ordered by the answer
        let offsets = |rng: &mut crate::seed::Rng, span: usize| {
            let lo = rng.random_range(0..=span - m);
            let hi = rng.random_range(lo + m..=span);
            if yes {
                (lo, hi)
            } else {
                (hi, lo)
            }
        };
        let pair = |rng: &mut crate::seed::Rng, n: usize| {
            let x = rng.random_range(0..n);
            let y = (x + rng.random_range(1..n)) % n;
            (x, y)
        };
        match relation {
            Relation::Left => {
                let c = rng.random_range(0..self.cols);
                let (ra, rb) = pair(rng, self.rows);
                let (xa, xb) = offsets(rng, tw - m);
                let a = Pos { row: ra * th + rng.random_range(0..=th - m), col: c * tw + xa };
                let b = Pos { row: rb * th + rng.random_range(0..=th - m), col: c * tw + xb };
                (a, b, (ra, c), (rb, c))
            }
            Relation::Above => {
                let r = rng.random_range(0..self.rows);
                let (ca, cb) = pair(rng, self.cols);
                let (ya, yb) = offsets(rng, th - m);
                let a = Pos { row: r * th + ya, col: ca * tw + rng.random_range(0..=tw - m) };
                let b = Pos { row: r * th + yb, col: cb * tw + rng.random_range(0..=tw - m) };
                (a, b, (r, ca), (r, cb))
            }
        }
    }
}

/// Object-presence probing over glyph "objects" with random, popular and
/// adversarial negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopeTask {
    pub image_side: usize,
    pub glyph_side: usize,
    pub n_glyphs: usize,
    pub objects_per_image: usize,
    pub subset: PopeSubset,
}

impl Default for PopeTask {
    fn default() -> Self {
        Self {
            image_side: 128,
            glyph_side: 8,
            n_glyphs: 8,
            objects_per_image: 3,
            subset: PopeSubset::Random,
        }
    }
}

impl PopeTask {
    pub fn validate(&self) -> Result<()> {
        DetailTask::new(self.image_side, self.glyph_side, self.n_glyphs)?;
        let cells = (self.image_side / self.glyph_side).pow(2);
        if self.objects_per_image == 0 || self.objects_per_image >= self.n_glyphs || self.objects_per_image > cells {
            return Err(Error::invalid(format!(
                "{} objects per image out of {} glyphs",
                self.objects_per_image, self.n_glyphs
            )));
        }
        Ok(())
    }

    /// Class prior used when drawing present objects; glyph 0 is the most
    /// common.
    fn weight(g: usize) -> f64 {
        1.0 / (g + 1) as f64
    }

    pub fn sample(&self, seed: u64, index: usize, glyphs: &[Glyph]) -> SyntheticSample {
        let mut rng = sample_rng(seed, "pope", index);
        let mut present: Vec<usize> = Vec::new();
        while present.len() < self.objects_per_image {
            let total: f64 = (0..self.n_glyphs)
                .filter(|g| !present.contains(g))
                .map(Self::weight)
                .sum();
            let mut u = rng.random_range(0.0..total);
            let pick = (0..self.n_glyphs)
                .filter(|g| !present.contains(g))
                .find(|g| {
                    u -= Self::weight(*g);
                    u < 0.0
                })
                .unwrap_or_else(|| (0..self.n_glyphs).rev().find(|g| !present.contains(g)).unwrap());
            present.push(pick);
        }
        let cells = self.image_side / self.glyph_side;
        let mut spots: Vec<Pos> = Vec::new();
        while spots.len() < present.len() {
            let p = Pos {
                row: rng.random_range(0..cells) * self.glyph_side,
                col: rng.random_range(0..cells) * self.glyph_side,
            };
            if !spots.contains(&p) {
                spots.push(p);
            }
        }
        let absent: Vec<usize> = (0..self.n_glyphs).filter(|g| !present.contains(g)).collect();
        let query = if rng.random_bool(0.5) {
            present[rng.random_range(0..present.len())]
        } else {
            match self.subset {
                PopeSubset::Random => absent[rng.random_range(0..absent.len())],
                PopeSubset::Popular => absent[0],
                PopeSubset::Adversarial => *absent
                    .iter()
                    .min_by_key(|g| {
                        present
                            .iter()
                            .map(|p| glyphs[*p].hamming(glyphs[**g]))
                            .min()
                            .unwrap_or(u32::MAX)
                    })
                    .expect("some glyph is absent"),
            }
        };
        let mut image = background(self.image_side, &mut rng);
        for (g, at) in present.iter().zip(&spots) {
            draw_glyph(&mut image, glyphs[*g], *at, self.glyph_side);
        }
        let placement = Placement::Pope {
            present: present.into_iter().zip(spots).collect(),
            query,
            subset: self.subset,
        };
        SyntheticSample::from_placement(index, image, TaskKind::Pope, placement)
    }
}

/// Any of the generators, addressable by sample index so datasets can be
/// produced lazily.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskSpec {
    Detail(DetailTask),
    Coherence(CoherenceTask),
    Pope(PopeTask),
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Detail(_) => TaskKind::Detail,
            TaskSpec::Coherence(_) => TaskKind::Coherence,
            TaskSpec::Pope(_) => TaskKind::Pope,
        }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Detail => TaskSpec::Detail(DetailTask::default()),
            TaskKind::Coherence => TaskSpec::Coherence(CoherenceTask::default()),
            TaskKind::Pope => TaskSpec::Pope(PopeTask::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Detail(t) => t.validate(),
            TaskSpec::Coherence(t) => t.validate(),
            TaskSpec::Pope(t) => t.validate(),
        }
    }

    pub fn image_side(&self) -> usize {
        match self {
            TaskSpec::Detail(t) => t.image_side,
            TaskSpec::Coherence(t) => t.image_side,
            TaskSpec::Pope(t) => t.image_side,
        }
    }

    pub fn source(&self, seed: u64) -> Result<TaskSource> {
        self.validate()?;
        let glyphs = match self {
            TaskSpec::Detail(t) => glyph_family(t.n_glyphs),
            TaskSpec::Pope(t) => glyph_family(t.n_glyphs),
            TaskSpec::Coherence(_) => Vec::new(),
        };
        Ok(TaskSource {
            spec: self.clone(),
            seed,
            glyphs,
        })
    }
}

/// A seeded, index-addressable sample stream.
#[derive(Clone, Debug)]
pub struct TaskSource {
    pub spec: TaskSpec,
    pub seed: u64,
    glyphs: Vec<Glyph>,
}

impl TaskSource {
    pub fn sample(&self, index: usize) -> SyntheticSample {
        match &self.spec {
            TaskSpec::Detail(t) => t.sample(self.seed, index, &self.glyphs),
            TaskSpec::Coherence(t) => t.sample(self.seed, index),
            TaskSpec::Pope(t) => t.sample(self.seed, index, &self.glyphs),
        }
    }

    pub fn samples(&self, range: std::ops::Range<usize>) -> Vec<SyntheticSample> {
        let start = range.start;
        par::map_range(range.len(), |i| self.sample(start + i))
    }

    pub fn glyphs(&self) -> &[Glyph] {
        &self.glyphs
    }
}

pub fn generate_detail_task(
    seed: u64,
    n: usize,
    image_side: usize,
    glyph_side: usize,
    n_glyphs: usize,
) -> Result<Vec<SyntheticSample>> {
    let spec = TaskSpec::Detail(DetailTask::new(image_side, glyph_side, n_glyphs)?);
    Ok(spec.source(seed)?.samples(0..n))
}

pub fn generate_coherence_task(
    seed: u64,
    n: usize,
    image_side: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<SyntheticSample>> {
    let spec = TaskSpec::Coherence(CoherenceTask::new(image_side, rows, cols)?);
    Ok(spec.source(seed)?.samples(0..n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{split_into_tiles, GridSpec};
    use crate::image::bilinear_resize;
    use proptest::prelude::*;

    #[test]
    fn glyph_family_is_balanced_and_distinct() {
        let fam = glyph_family(10);
        assert_eq!(fam.len(), 10);
        assert!(fam.iter().all(|g| g.is_balanced()));
        for (i, a) in fam.iter().enumerate() {
            for b in &fam[i + 1..] {
                assert!(a.hamming(*b) >= 4, "{a:?} {b:?}");
            }
        }
        assert_eq!(glyph_family(8), fam[..8].to_vec());
    }

    #[test]
    fn detail_generation_is_reproducible() {
        let a = generate_detail_task(3, 5, 64, 8, 8).unwrap();
        let b = generate_detail_task(3, 5, 64, 8, 8).unwrap();
        assert_eq!(a, b);
        let c = generate_detail_task(4, 5, 64, 8, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn detail_rejects_oversized_glyph() {
        assert!(matches!(DetailTask::new(16, 16, 8), Err(Error::InvalidArgument(_))));
        assert!(DetailTask::new(256, 6, 8).is_err());
        assert!(DetailTask::new(256, 8, 11).is_err());
    }

    #[test]
    fn baseline_erases_glyph_but_2x2_keeps_it() {
        let task = DetailTask::default();
        let glyphs = glyph_family(task.n_glyphs);
        for i in 0..20 {
            let s = task.sample(11, i, &glyphs);
            let Placement::Detail { glyph, at, .. } = s.placement else { unreachable!() };
            // 1x1 path: 256 -> 64, the glyph covers 2x2 output pixels, all 0.5
            let small = bilinear_resize(&s.image, 64, 64).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    assert_eq!(small.get(at.row / 4 + r, at.col / 4 + c, 0), 0.5);
                }
            }
            // 2x2 path: each 2 px cell becomes one exact pixel inside one tile
            let tiles = split_into_tiles(&s.image, &GridSpec::new(2, 2, false, 64).unwrap()).unwrap();
            let Placement::Detail { tile_2x2, .. } = s.placement else { unreachable!() };
            let tile = &tiles.tiles[tile_2x2];
            let (r0, c0) = ((at.row % 128) / 2, (at.col % 128) / 2);
            for r in 0..4 {
                for c in 0..4 {
                    let want = if glyphs[glyph].cell(r, c) { 1.0 } else { 0.0 };
                    assert_eq!(tile.get(r0 + r, c0 + c, 0), want);
                }
            }
        }
    }

    #[test]
    fn detail_labels_are_uniform() {
        let src = TaskSpec::Detail(DetailTask {
            image_side: 32,
            glyph_side: 8,
            n_glyphs: 8,
            lattice: None,
        })
        .source(5)
        .unwrap();
        let n = 10_000;
        let mut counts = [0usize; 8];
        for s in src.samples(0..n) {
            counts[(s.answer[0] - b'0') as usize] += 1;
        }
        for c in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.125).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn coherence_markers_in_different_tiles_and_balanced() {
        let src = TaskSpec::Coherence(CoherenceTask::default()).source(9).unwrap();
        let n = 10_000;
        let samples = src.samples(0..n);
        let yes = samples.iter().filter(|s| s.answer == b"y").count();
        assert!(((yes as f64 / n as f64) - 0.5).abs() <= 0.03);
        for s in &samples {
            let Placement::Coherence { tile_a, tile_b, a, b, marker_side, grid_cols, .. } = &s.placement else {
                unreachable!()
            };
            assert_ne!(tile_a, tile_b);
            let tile_of = |p: &Pos| (p.row / 32) * grid_cols + p.col / 32;
            assert_eq!(tile_of(a), *tile_a);
            // the marker lies wholly inside its tile
            let end = Pos { row: a.row + marker_side - 1, col: a.col + marker_side - 1 };
            assert_eq!(tile_of(&end), *tile_a);
            assert_eq!(tile_of(b), *tile_b);
        }
    }

    #[test]
    fn swapping_markers_flips_the_answer() {
        let src = TaskSpec::Coherence(CoherenceTask::default()).source(2).unwrap();
        for s in src.samples(0..200) {
            let Placement::Coherence { relation, a, b, marker_side, grid_rows, grid_cols, tile_a, tile_b } =
                s.placement.clone()
            else {
                unreachable!()
            };
            let swapped = Placement::Coherence {
                relation,
                a: b,
                b: a,
                marker_side,
                grid_rows,
                grid_cols,
                tile_a: tile_b,
                tile_b: tile_a,
            };
            assert_ne!(swapped.answer(), s.answer);
        }
    }

    #[test]
    fn aligned_layout_shares_a_tile_line_and_stays_balanced() {
        let task = CoherenceTask::default().with_layout(Layout::Aligned).unwrap();
        let src = TaskSpec::Coherence(task).source(5).unwrap();
        let n = 10_000;
        let samples = src.samples(0..n);
        let yes = samples.iter().filter(|s| s.answer == b"y").count();
        assert!(((yes as f64 / n as f64) - 0.5).abs() <= 0.03);
        for s in &samples {
            let Placement::Coherence { relation, tile_a, tile_b, a, b, marker_side, grid_cols, .. } = &s.placement else {
                unreachable!()
            };
            assert_ne!(tile_a, tile_b);
            let (ta, tb) = ((tile_a / grid_cols, tile_a % grid_cols), (tile_b / grid_cols, tile_b % grid_cols));
            match relation {
                Relation::Left => {
                    assert_eq!(ta.1, tb.1);
                    assert!(a.col.abs_diff(b.col) >= *marker_side);
                }
                Relation::Above => {
                    assert_eq!(ta.0, tb.0);
                    assert!(a.row.abs_diff(b.row) >= *marker_side);
                }
            }
        }
        assert!(CoherenceTask::new(96, 1, 4).unwrap().with_layout(Layout::Aligned).is_err());
    }

    #[test]
    fn coherence_needs_four_tiles() {
        assert!(CoherenceTask::new(96, 1, 3).is_err());
        assert!(CoherenceTask::new(96, 2, 2).is_ok());
    }

    #[test]
    fn pope_subsets_behave() {
        for subset in PopeSubset::ALL {
            let task = PopeTask {
                subset,
                ..PopeTask::default()
            };
            let src = TaskSpec::Pope(task).source(4).unwrap();
            for s in src.samples(0..100) {
                let Placement::Pope { present, query, .. } = &s.placement else { unreachable!() };
                assert_eq!(present.len(), 3);
                if s.answer == b"n" {
                    assert!(present.iter().all(|(g, _)| g != query));
                    if subset == PopeSubset::Popular {
                        assert!((0..*query).all(|g| present.iter().any(|(p, _)| *p == g)));
                    }
                }
            }
        }
    }

    #[test]
    fn captions_describe_content() {
        let src = TaskSpec::Detail(DetailTask::default()).source(1).unwrap();
        let s = src.sample(0);
        assert_eq!(s.placement.caption(), format!("glyph {}", s.answer[0] as char).into_bytes());
    }

    proptest! {
        #[test]
        fn generators_are_self_oracles(seed in any::<u64>(), i in 0usize..1000) {
            for spec in [
                TaskSpec::Detail(DetailTask { image_side: 64, glyph_side: 8, n_glyphs: 8, lattice: None }),
                TaskSpec::Coherence(CoherenceTask::new(48, 2, 3).unwrap()),
                TaskSpec::Pope(PopeTask { image_side: 64, ..PopeTask::default() }),
            ] {
                let s = spec.source(seed).unwrap().sample(i);
                prop_assert_eq!(&s.answer, &s.placement.answer());
                prop_assert_eq!(&s.question, &s.placement.question());
                prop_assert_eq!(s.task, spec.kind());
            }
        }
    }
}
