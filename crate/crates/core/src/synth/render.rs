//! Procedural knee-like radiographs.
//!
//! Geometry is laid out on a 64x64 reference grid and scaled linearly to
//! the configured size. The left knee is drawn with the medial half on
//! the low columns; right knees are the horizontal mirror.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::rng::{stream_rng, Stream};
use crate::score::{Feature, FeatureValue, Half, OaScoreRecord, Side, Site};

pub const BACKGROUND: f32 = 0.05;
pub const BONE: f32 = 0.55;
pub const SPUR: f32 = 0.9;
pub const SPECKLE: f32 = 0.8;
pub const SCLEROSIS_STEP: f32 = 0.12;
pub const CYST_DELTA: f32 = -0.5;
pub const SPECKLE_PROB: f64 = 0.2;

const REF: usize = 64;
const FEMUR_TOP: usize = 14;
const GAP_TOP: usize = 26;
const TIBIA_TOP: usize = 38;
const TIBIA_END: usize = 50;
const SPUR_HEIGHT: usize = 3;
const STRIP: usize = 4;
const CYST_RADIUS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { height: 64, width: 64, noise_sigma: 0.03, max_shift: 2, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height < 32 || self.width < 32 {
            return Err(SynthError::Config(format!("image size {}x{} below 32x32", self.height, self.width)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Same geometry with noise and shift disabled.
    pub fn clean(&self) -> Self {
        SynthConfig { noise_sigma: 0.0, max_shift: 0, ..*self }
    }
}

/// Grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl SynthImage {
    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        SynthImage { height, width, pixels: vec![v; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f32) {
        self.pixels[r * self.width + c] = v;
    }

    fn add(&mut self, r: usize, c: usize, v: f32) {
        self.pixels[r * self.width + c] += v;
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }
}

/// Boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, cells: vec![false; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.cells[r * self.width + c] = self.get(r, self.width - 1 - c);
            }
        }
        out
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilated(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Mask::empty(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                for rr in r.saturating_sub(radius)..(r + radius + 1).min(self.height) {
                    for cc in c.saturating_sub(radius)..(c + radius + 1).min(self.width) {
                        out.cells[rr * self.width + cc] = true;
                    }
                }
            }
        }
        out
    }
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    rows: (usize, usize),
    cols: (usize, usize),
}

impl Rect {
    fn cells(self) -> impl Iterator<Item = (usize, usize)> {
        (self.rows.0..self.rows.1).flat_map(move |r| (self.cols.0..self.cols.1).map(move |c| (r, c)))
    }
}

/// Reference-grid geometry scaled to one image size, in the left-knee frame.
struct Layout {
    height: usize,
    width: usize,
}

impl Layout {
    fn new(cfg: &SynthConfig) -> Self {
        Layout { height: cfg.height, width: cfg.width }
    }

    fn y(&self, r: usize) -> usize {
        (r * self.height / REF).min(self.height)
    }

    fn x(&self, c: usize) -> usize {
        (c * self.width / REF).min(self.width)
    }

    fn half_cols(&self, half: Half) -> (usize, usize) {
        match half {
            Half::Medial => (0, self.x(REF / 2)),
            Half::Lateral => (self.x(REF / 2), self.width),
        }
    }

    fn tibia_top(&self, rec: &OaScoreRecord, half: Half) -> usize {
        TIBIA_TOP - 2 * rec.jsn[half as usize].value() as usize
    }

    fn tibia_end(&self, rec: &OaScoreRecord, half: Half) -> usize {
        TIBIA_END - rec.attrition[half as usize].value() as usize
    }

    fn rect(&self, rows: (usize, usize), half: Half) -> Rect {
        Rect { rows: (self.y(rows.0), self.y(rows.1)), cols: self.half_cols(half) }
    }

    fn femur(&self) -> Rect {
        Rect { rows: (self.y(FEMUR_TOP), self.y(GAP_TOP)), cols: (0, self.width) }
    }

    fn tibia(&self, rec: &OaScoreRecord, half: Half) -> Rect {
        self.rect((self.tibia_top(rec, half), self.tibia_end(rec, half)), half)
    }

    fn gap(&self, rec: &OaScoreRecord, half: Half) -> Rect {
        self.rect((GAP_TOP, self.tibia_top(rec, half)), half)
    }

    fn narrowing(&self, rec: &OaScoreRecord, half: Half) -> Rect {
        self.rect((self.tibia_top(rec, half), TIBIA_TOP), half)
    }

    fn thinning(&self, rec: &OaScoreRecord, half: Half) -> Rect {
        self.rect((self.tibia_end(rec, half), TIBIA_END), half)
    }

    fn sclerosis_strip(&self, rec: &OaScoreRecord, site: Site) -> Rect {
        let half = site.half();
        if site.structure() == "femur" {
            self.rect((GAP_TOP - STRIP, GAP_TOP), half)
        } else {
            let top = self.tibia_top(rec, half);
            self.rect((top, top + STRIP), half)
        }
    }

    /// Spur of width `2 * grade` at the outer gap corner of a bone compartment.
    fn spur(&self, rec: &OaScoreRecord, site: Site, grade: usize) -> Rect {
        let half = site.half();
        let rows = if site.structure() == "femur" {
            (GAP_TOP, GAP_TOP + SPUR_HEIGHT)
        } else {
            let top = self.tibia_top(rec, half);
            (top - SPUR_HEIGHT, top)
        };
        let w = 2 * grade;
        let cols = match half {
            Half::Medial => (0, self.x(w)),
            Half::Lateral => (self.width - self.x(w), self.width),
        };
        Rect { rows: (self.y(rows.0), self.y(rows.1)), cols }
    }

    /// Center (reference grid) of a bone compartment, for cyst placement.
    fn center(&self, rec: &OaScoreRecord, site: Site) -> (f64, f64) {
        let half = site.half();
        let (r0, r1) = if site.structure() == "femur" {
            (FEMUR_TOP, GAP_TOP)
        } else {
            (self.tibia_top(rec, half), self.tibia_end(rec, half))
        };
        let col = match half {
            Half::Medial => REF / 4,
            Half::Lateral => 3 * REF / 4,
        };
        (
            (r0 + r1) as f64 / 2.0 * self.height as f64 / REF as f64,
            col as f64 * self.width as f64 / REF as f64,
        )
    }

    fn disk(&self, center: (f64, f64)) -> impl Iterator<Item = (usize, usize)> + '_ {
        let radius = CYST_RADIUS as f64 * self.height.min(self.width) as f64 / REF as f64;
        let (h, w) = (self.height, self.width);
        (0..h).flat_map(move |r| (0..w).map(move |c| (r, c))).filter(move |&(r, c)| {
            let (dr, dc) = (r as f64 - center.0, c as f64 - center.1);
            dr * dr + dc * dc <= radius * radius
        })
    }
}

fn halves() -> [Half; 2] {
    [Half::Medial, Half::Lateral]
}

fn joint_site(half: Half) -> Site {
    match half {
        Half::Medial => Site::JointMedial,
        Half::Lateral => Site::JointLateral,
    }
}

/// Noise-free drawing in the left-knee frame; speckles use `rng`.
fn draw_canonical<R: Rng>(rec: &OaScoreRecord, cfg: &SynthConfig, rng: &mut R) -> SynthImage {
    let lay = Layout::new(cfg);
    let mut img = SynthImage::filled(cfg.height, cfg.width, BACKGROUND);
    for (r, c) in lay.femur().cells() {
        img.set(r, c, BONE);
    }
    for half in halves() {
        for (r, c) in lay.tibia(rec, half).cells() {
            img.set(r, c, BONE);
        }
    }
    for site in Site::BONES {
        let g = rec.sclerosis[site as usize].value() as f32;
        if g > 0.0 {
            for (r, c) in lay.sclerosis_strip(rec, site).cells() {
                img.add(r, c, SCLEROSIS_STEP * g);
            }
        }
    }
    for site in Site::BONES {
        if rec.cysts[site as usize] {
            let cells: Vec<_> = lay.disk(lay.center(rec, site)).collect();
            for (r, c) in cells {
                img.add(r, c, CYST_DELTA);
            }
        }
    }
    for site in Site::BONES {
        let g = rec.osteophytes[site as usize].value() as usize;
        if g > 0 {
            for (r, c) in lay.spur(rec, site, g).cells() {
                img.set(r, c, SPUR);
            }
        }
    }
    for half in halves() {
        if rec.chondrocalcinosis[half as usize] {
            for (r, c) in lay.gap(rec, half).cells() {
                if rng.random_bool(SPECKLE_PROB) {
                    img.set(r, c, SPECKLE);
                }
            }
        }
    }
    img
}

/// Renders `record` deterministically from `(record, cfg, seed)`.
pub fn render_image(record: &OaScoreRecord, cfg: &SynthConfig, seed: u64) -> Result<SynthImage, SynthError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Render, 0);
    let mut img = draw_canonical(record, cfg, &mut rng);
    if record.side == Side::Right {
        img = img.mirrored();
    }
    let s = cfg.max_shift as i64;
    let (dy, dx) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
    if dy != 0 || dx != 0 {
        let mut shifted = SynthImage::filled(cfg.height, cfg.width, BACKGROUND);
        for r in 0..cfg.height as i64 {
            for c in 0..cfg.width as i64 {
                let (sr, sc) = (r - dy, c - dx);
                if sr >= 0 && sc >= 0 && sr < cfg.height as i64 && sc < cfg.width as i64 {
                    shifted.set(r as usize, c as usize, img.get(sr as usize, sc as usize));
                }
            }
        }
        img = shifted;
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for p in img.pixels.iter_mut() {
            *p += normal.sample(&mut rng) as f32;
        }
    }
    for p in img.pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// A feature at one compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureSite {
    pub feature: Feature,
    pub site: Site,
}

/// Pixels the renderer changes for one finding, dilated by the maximum shift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthRegion {
    pub feature: FeatureSite,
    pub mask: Mask,
}

/// Mask of the pixels drawn for `feature` (before the random shift),
/// dilated by `cfg.max_shift`. Chondrocalcinosis covers the whole gap
/// region its speckles are scattered over.
pub fn ground_truth_region(
    record: &OaScoreRecord,
    feature: FeatureSite,
    cfg: &SynthConfig,
) -> Result<GroundTruthRegion, SynthError> {
    cfg.validate()?;
    let FeatureSite { feature: f, site } = feature;
    let value = record.value(f, site).ok_or(SynthError::FeatureAbsent(f, site))?;
    if !value.is_present() {
        return Err(SynthError::FeatureAbsent(f, site));
    }
    let lay = Layout::new(cfg);
    let mut mask = Mask::empty(cfg.height, cfg.width);
    let mut mark = |cells: &mut dyn Iterator<Item = (usize, usize)>| {
        for (r, c) in cells {
            mask.cells[r * cfg.width + c] = true;
        }
    };
    let half = site.half();
    match (f, value) {
        (Feature::Osteophytes, FeatureValue::Grade(g)) => mark(&mut lay.spur(record, site, g.value() as usize).cells()),
        (Feature::Sclerosis, _) => mark(&mut lay.sclerosis_strip(record, site).cells()),
        (Feature::JointSpaceNarrowing, _) => mark(&mut lay.narrowing(record, half).cells()),
        (Feature::Attrition, _) => mark(&mut lay.thinning(record, half).cells()),
        (Feature::Cysts, _) => mark(&mut lay.disk(lay.center(record, site))),
        (Feature::Chondrocalcinosis, _) => {
            debug_assert_eq!(joint_site(half), site);
            mark(&mut lay.gap(record, half).cells())
        }
        (Feature::Osteophytes, FeatureValue::Flag(_)) => unreachable!("osteophytes are graded"),
    }
    if record.side == Side::Right {
        mask = mask.mirrored();
    }
    Ok(GroundTruthRegion { feature, mask: mask.dilated(cfg.max_shift) })
}
