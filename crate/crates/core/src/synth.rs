//! Synthetic query-frame generation: random projective warps plus random
//! black block noise over rendered slide images, with exact ground-truth
//! corruption metadata (homography, block mask, warped-slide footprint)
//! retained for quality scoring.
//!
//! Homographies act on coordinates centered on the image midpoint and are
//! normalized so the bottom-right entry is exactly 1. With that convention
//! the similarity part occupies the upper 2×3 block untouched by the
//! perspective row, so sampled parameters can be recovered from the matrix
//! exactly — which is also how the matrices are stored in manifests.
//!
//! Noise levels 1..=10 map to target blocked-pixel ratios `0.05·level`
//! (5%–50%); the placed blocks are adjusted until the measured union lands
//! within ±0.01 of the target ratio. Both mappings are conventions of this
//! crate: levels are reproducible and strictly ordered by corruption.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_u64, seed_for, Stream};
use crate::tensor::Tensor;

/// Row-major 3×3 real matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Identity matrix.
pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Determinant bound below which a homography counts as degenerate.
pub const DET_EPS: f64 = 1e-6;

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse via the adjugate. Degenerate matrices are a contract error.
pub fn mat_inv(m: &Mat3) -> Result<Mat3> {
    let det = mat_det(m);
    if !det.is_finite() || det.abs() <= DET_EPS {
        return Err(Error::Contract(format!(
            "homography is not invertible (|det| = {} ≤ {DET_EPS})",
            det.abs()
        )));
    }
    let c = |r1: usize, c1: usize, r2: usize, c2: usize| m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = adj[i][j] / det;
        }
    }
    Ok(out)
}

/// Applies `m` to `(x, y)` with the projective divide. `None` when the
/// point maps to infinity.
pub fn mat_apply(m: &Mat3, x: f64, y: f64) -> Option<(f64, f64)> {
    let xw = m[0][0] * x + m[0][1] * y + m[0][2];
    let yw = m[1][0] * x + m[1][1] * y + m[1][2];
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    if w.abs() < 1e-12 {
        return None;
    }
    Some((xw / w, yw / w))
}

/// Uniform sampling ranges for [`random_homography`], all inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct HomographyRanges {
    /// Isotropic scale factor.
    pub scale: (f64, f64),
    /// Rotation in degrees.
    pub rotation_deg: (f64, f64),
    /// Translation in pixels (centered coordinates).
    pub translation: (f64, f64),
    /// Perspective (bottom-row) coefficients.
    pub perspective: (f64, f64),
}

/// Reference image side the translation range is quoted at.
pub const REFERENCE_IMAGE_SIZE: usize = 256;

impl HomographyRanges {
    /// The full corruption ranges at the 256 px reference size:
    /// scale [0.9, 1.1], rotation ±30°, translation ±50 px,
    /// perspective ±1e-4.
    pub fn reference() -> Self {
        HomographyRanges {
            scale: (0.9, 1.1),
            rotation_deg: (-30.0, 30.0),
            translation: (-50.0, 50.0),
            perspective: (-1e-4, 1e-4),
        }
    }

    /// Reference ranges with the translation scaled proportionally to the
    /// image side, so smaller profiles displace content by the same
    /// fraction of the frame.
    pub fn for_image_size(size: usize) -> Self {
        let f = size as f64 / REFERENCE_IMAGE_SIZE as f64;
        HomographyRanges {
            translation: (-50.0 * f, 50.0 * f),
            ..HomographyRanges::reference()
        }
    }

    /// Ranges collapsed onto the identity transform.
    pub fn identity() -> Self {
        HomographyRanges {
            scale: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            translation: (0.0, 0.0),
            perspective: (0.0, 0.0),
        }
    }

    fn well_formed(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("scale", self.scale),
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
            ("perspective", self.perspective),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Contract(format!(
                    "homography range {name} is malformed: [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Checks that the ranges do not exceed the reference bounds.
    fn within_reference(&self) -> Result<()> {
        let r = HomographyRanges::reference();
        let inside = |name: &str, (lo, hi): (f64, f64), (blo, bhi): (f64, f64)| {
            if lo < blo || hi > bhi {
                Err(Error::Contract(format!(
                    "homography range {name} [{lo}, {hi}] exceeds the supported [{blo}, {bhi}]"
                )))
            } else {
                Ok(())
            }
        };
        inside("scale", self.scale, r.scale)?;
        inside("rotation_deg", self.rotation_deg, r.rotation_deg)?;
        inside("translation", self.translation, r.translation)?;
        inside("perspective", self.perspective, r.perspective)
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn compose_homography(scale: f64, rot_deg: f64, tx: f64, ty: f64, p7: f64, p8: f64) -> Mat3 {
    let (sin, cos) = rot_deg.to_radians().sin_cos();
    [
        [scale * cos, -scale * sin, tx],
        [scale * sin, scale * cos, ty],
        [p7, p8, 1.0],
    ]
}

/// Draws a random projective transform: isotropic scale · rotation ·
/// translation with small perspective terms, all sampled uniformly.
/// Ranges wider than the reference bounds are rejected; use
/// [`random_homography_unrestricted`] to bypass that guard.
///
/// A degenerate draw (|det| ≤ 1e-6) is resampled, erroring after 100
/// failures.
pub fn random_homography(ranges: &HomographyRanges, rng: &mut ChaCha8Rng) -> Result<Mat3> {
    ranges.within_reference()?;
    random_homography_unrestricted(ranges, rng)
}

/// [`random_homography`] without the reference-bounds guard.
pub fn random_homography_unrestricted(
    ranges: &HomographyRanges,
    rng: &mut ChaCha8Rng,
) -> Result<Mat3> {
    ranges.well_formed()?;
    for _ in 0..100 {
        let scale = sample_range(rng, ranges.scale);
        let rot = sample_range(rng, ranges.rotation_deg);
        let tx = sample_range(rng, ranges.translation);
        let ty = sample_range(rng, ranges.translation);
        let p7 = sample_range(rng, ranges.perspective);
        let p8 = sample_range(rng, ranges.perspective);
        let h = compose_homography(scale, rot, tx, ty, p7, p8);
        if mat_det(&h).abs() > DET_EPS {
            return Ok(h);
        }
    }
    Err(Error::Exhausted(
        "100 consecutive degenerate homography draws; ranges admit no invertible transform".into(),
    ))
}

/// Recovers `(scale, rotation_deg, tx, ty, p7, p8)` from a matrix built by
/// [`random_homography`]. Exact because the perspective row never mixes
/// into the upper block under this construction.
pub fn decompose_homography(h: &Mat3) -> (f64, f64, f64, f64, f64, f64) {
    let scale = h[0][0].hypot(h[1][0]);
    let rot = h[1][0].atan2(h[0][0]).to_degrees();
    (scale, rot, h[0][2], h[1][2], h[2][0], h[2][1])
}

/// A binary image mask (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask { width, height, data: vec![value; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {width}×{height}",
                data.len()
            )));
        }
        Ok(Mask { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Number of set pixels.
    pub fn count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    /// Set-pixel fraction of the full area.
    pub fn density(&self) -> f64 {
        self.count() as f64 / (self.width * self.height) as f64
    }

    /// Pixels set in both masks.
    pub fn intersection_count(&self, other: &Mask) -> Result<u64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "mask sizes differ: {}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|&(&a, &b)| a && b)
            .count() as u64)
    }
}

fn expect_image(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        other => Err(Error::Shape(format!(
            "expected a non-empty [height, width] image, got shape {other:?}"
        ))),
    }
}

/// Inverse-mapped bilinear warp over raw row-major data; out-of-source
/// samples are zero.
fn warp_raw(src: &[f32], width: usize, height: usize, h_inv: &Mat3) -> Vec<f32> {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let sample = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            0.0
        } else {
            src[yi as usize * width + xi as usize] as f64
        }
    };
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let Some((sx, sy)) = mat_apply(h_inv, x as f64 - cx, y as f64 - cy) else {
                continue;
            };
            let (sx, sy) = (sx + cx, sy + cy);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = (1.0 - fx) * (1.0 - fy) * sample(x0, y0)
                + fx * (1.0 - fy) * sample(x0 + 1, y0)
                + (1.0 - fx) * fy * sample(x0, y0 + 1)
                + fx * fy * sample(x0 + 1, y0 + 1);
            out[y * width + x] = v as f32;
        }
    }
    out
}

/// Warps `image` by the forward homography `H` (centered coordinates):
/// output pixels are pulled from `H⁻¹` with bilinear interpolation, black
/// outside the source. Output size equals input size.
pub fn warp(image: &Tensor<f32>, h: &Mat3) -> Result<Tensor<f32>> {
    let (height, width) = expect_image(image)?;
    let h_inv = mat_inv(h)?;
    let out = warp_raw(image.data(), width, height, &h_inv);
    Tensor::from_vec(&[height, width], out)
}

/// Warps a binary mask: bilinear on the 0/1 field, re-binarized at 0.5.
pub fn warp_binary(mask: &Mask, h: &Mat3) -> Result<Mask> {
    let h_inv = mat_inv(h)?;
    let field: Vec<f32> = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let warped = warp_raw(&field, mask.width, mask.height, &h_inv);
    Mask::from_data(
        mask.width,
        mask.height,
        warped.into_iter().map(|v| v >= 0.5).collect(),
    )
}

/// The image-domain footprint of the warped source rectangle: where the
/// warped all-ones mask lands.
pub fn warp_footprint(width: usize, height: usize, h: &Mat3) -> Result<Mask> {
    warp_binary(&Mask::filled(width, height, true), h)
}

/// Axis-aligned block; half-open pixel extents.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

/// Union-of-rectangles coverage tracker with O(strip) grow/shrink updates.
struct Coverage {
    width: usize,
    height: usize,
    counts: Vec<u16>,
    union: u64,
    rects: Vec<Rect>,
}

impl Coverage {
    fn new(width: usize, height: usize) -> Self {
        Coverage { width, height, counts: vec![0; width * height], union: 0, rects: Vec::new() }
    }

    fn bump(&mut self, x: usize, y: usize, up: bool) {
        let c = &mut self.counts[y * self.width + x];
        if up {
            if *c == 0 {
                self.union += 1;
            }
            *c += 1;
        } else {
            *c -= 1;
            if *c == 0 {
                self.union -= 1;
            }
        }
    }

    fn paint(&mut self, r: Rect, up: bool) {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                self.bump(x, y, up);
            }
        }
    }

    fn add(&mut self, r: Rect) {
        self.paint(r, true);
        self.rects.push(r);
    }

    /// Extends rect `ri` by one pixel toward `side` (0 right, 1 bottom,
    /// 2 left, 3 top). Returns false at the image boundary.
    fn grow(&mut self, ri: usize, side: usize) -> bool {
        let r = self.rects[ri];
        let strip = match side {
            0 if r.x0 + r.w < self.width => Rect { x0: r.x0 + r.w, y0: r.y0, w: 1, h: r.h },
            1 if r.y0 + r.h < self.height => Rect { x0: r.x0, y0: r.y0 + r.h, w: r.w, h: 1 },
            2 if r.x0 > 0 => Rect { x0: r.x0 - 1, y0: r.y0, w: 1, h: r.h },
            3 if r.y0 > 0 => Rect { x0: r.x0, y0: r.y0 - 1, w: r.w, h: 1 },
            _ => return false,
        };
        self.paint(strip, true);
        let r = &mut self.rects[ri];
        match side {
            0 => r.w += 1,
            1 => r.h += 1,
            2 => {
                r.x0 -= 1;
                r.w += 1;
            }
            _ => {
                r.y0 -= 1;
                r.h += 1;
            }
        }
        true
    }

    /// Shrinks rect `ri` by one pixel from `side`. Returns false when the
    /// rect is a single pixel wide/tall in that direction.
    fn shrink(&mut self, ri: usize, side: usize) -> bool {
        let r = self.rects[ri];
        let horizontal = side == 0 || side == 2;
        if (horizontal && r.w <= 1) || (!horizontal && r.h <= 1) {
            return false;
        }
        let strip = match side {
            0 => Rect { x0: r.x0 + r.w - 1, y0: r.y0, w: 1, h: r.h },
            1 => Rect { x0: r.x0, y0: r.y0 + r.h - 1, w: r.w, h: 1 },
            2 => Rect { x0: r.x0, y0: r.y0, w: 1, h: r.h },
            _ => Rect { x0: r.x0, y0: r.y0, w: r.w, h: 1 },
        };
        self.paint(strip, false);
        let r = &mut self.rects[ri];
        match side {
            0 => r.w -= 1,
            1 => r.h -= 1,
            2 => {
                r.x0 += 1;
                r.w -= 1;
            }
            _ => {
                r.y0 += 1;
                r.h -= 1;
            }
        }
        true
    }

    fn into_mask(self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.counts.into_iter().map(|c| c > 0).collect(),
        }
    }
}

/// Blocked-pixel count window for a noise level: the measured ratio must
/// land within ±0.01 of `0.05·level`.
fn coverage_window(level: u8, area: u64) -> Result<(u64, u64)> {
    if !(1..=10).contains(&level) {
        return Err(Error::Contract(format!("noise level must be 1..=10, got {level}")));
    }
    let target = 0.05 * level as f64;
    let lo = ((target - 0.01) * area as f64).ceil() as u64;
    let hi = ((target + 0.01) * area as f64).floor().min(area as f64) as u64;
    if lo > hi {
        return Err(Error::Data(format!(
            "image of {area} px cannot realize blocked ratio {target} ± 0.01 \
             (window [{lo}, {hi}] is empty)"
        )));
    }
    Ok((lo, hi))
}

/// Places `block_count` random axis-aligned black rectangles whose union
/// covers `0.05·noise_level ± 0.01` of the image, returning the corrupted
/// image and the exact block mask. Blocks may overlap; union is counted
/// once.
pub fn add_block_noise(
    image: &Tensor<f32>,
    noise_level: u8,
    block_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Mask)> {
    let (height, width) = expect_image(image)?;
    let area = (width * height) as u64;
    let (lo, hi) = coverage_window(noise_level, area)?;
    if block_count == 0 || block_count as u64 > hi {
        return Err(Error::Contract(format!(
            "{block_count} blocks cannot realize a coverage budget of at most {hi} px"
        )));
    }

    let mut cov = Coverage::new(width, height);
    for j in 0..block_count {
        let remaining_blocks = (block_count - j) as f64;
        let deficit = (lo + hi) as f64 / 2.0 - cov.union as f64;
        let mean_area = (deficit / remaining_blocks).max(1.0);
        // The last block takes the remaining deficit exactly; earlier
        // blocks jitter around their share.
        let block_area = if j + 1 == block_count {
            mean_area
        } else {
            mean_area * rng.gen_range(0.7..=1.3)
        };
        let aspect = rng.gen_range(0.5..=2.0);
        let bw = ((block_area * aspect).sqrt().round() as usize).clamp(1, width);
        let bh = ((block_area / aspect).sqrt().round() as usize).clamp(1, height);
        let x0 = rng.gen_range(0..=width - bw);
        let y0 = rng.gen_range(0..=height - bh);
        cov.add(Rect { x0, y0, w: bw, h: bh });
    }

    // Fix-up: nudge rectangles until the union lands inside the window.
    // Overlap makes the initial union undershoot, so growth dominates.
    let mut cursor = 0usize;
    let mut side = 0usize;
    let budget = 8 * (area + 1024);
    let mut steps = 0u64;
    while cov.union < lo || cov.union > hi {
        steps += 1;
        if steps > budget {
            return Err(Error::Contract(format!(
                "block coverage fix-up did not converge (union {} outside [{lo}, {hi}])",
                cov.union
            )));
        }
        let ri = cursor % cov.rects.len();
        let moved = if cov.union < lo { cov.grow(ri, side % 4) } else { cov.shrink(ri, side % 4) };
        side += 1;
        if side % 4 == 0 || !moved {
            cursor += 1;
        }
    }

    let mask = cov.into_mask();
    let mut out = image.clone();
    let data = out.data_mut();
    for (px, &blocked) in data.iter_mut().zip(mask.data.iter()) {
        if blocked {
            *px = 0.0;
        }
    }
    Ok((out, mask))
}

/// Everything needed to regenerate one corrupted query exactly.
#[derive(Debug, Clone)]
pub struct CorruptionParams {
    pub noise_level: u8,
    pub block_count: usize,
    pub homography: Mat3,
    /// Seed of the query's private generator.
    pub seed: u64,
}

/// Ground truth retained per generated query for quality scoring.
#[derive(Debug, Clone)]
pub struct CorruptionRecord {
    pub params: CorruptionParams,
    /// Exactly `block_mask.density()`.
    pub blocked_ratio: f64,
    pub block_mask: Mask,
    /// Footprint of the warped source rectangle.
    pub slide_mask: Mask,
}

/// Default block-count range: uniform in `[1, 8]`.
pub const BLOCK_COUNT_RANGE: (usize, usize) = (1, 8);

/// Generates one corrupted query from `slide`:
/// `add_block_noise(warp(slide, random_homography(..)), ..)`, with every
/// random choice drawn from a generator derived from `seed` alone.
pub fn generate_query(
    slide: &Tensor<f32>,
    noise_level: u8,
    seed: u64,
) -> Result<(Tensor<f32>, CorruptionRecord)> {
    let (height, width) = expect_image(slide)?;
    if height != width {
        return Err(Error::Shape(format!("slides are square, got {height}×{width}")));
    }
    let mut rng = seed_for(seed, Stream::QueryGen, 0);
    let h = random_homography(&HomographyRanges::for_image_size(width), &mut rng)?;
    let warped = warp(slide, &h)?;
    let slide_mask = warp_footprint(width, height, &h)?;
    let block_count = rng.gen_range(BLOCK_COUNT_RANGE.0..=BLOCK_COUNT_RANGE.1);
    let (image, block_mask) = add_block_noise(&warped, noise_level, block_count, &mut rng)?;
    let record = CorruptionRecord {
        params: CorruptionParams { noise_level, block_count, homography: h, seed },
        blocked_ratio: block_mask.density(),
        block_mask,
        slide_mask,
    };
    Ok((image, record))
}

/// Generates `count` corrupted queries from one slide. Query `i` uses
/// noise level `levels[i % levels.len()]` and its own sub-seed derived
/// from `base_seed`, so any single query can be regenerated independently.
pub fn generate_queries(
    slide: &Tensor<f32>,
    count: usize,
    levels: &[u8],
    base_seed: u64,
) -> Result<Vec<(Tensor<f32>, CorruptionRecord)>> {
    if count == 0 {
        return Err(Error::Contract("query count must be at least 1".into()));
    }
    if levels.is_empty() {
        return Err(Error::Contract("level distribution must be non-empty".into()));
    }
    (0..count)
        .map(|i| {
            let level = levels[i % levels.len()];
            generate_query(slide, level, derive_u64(base_seed, Stream::QueryGen, i as u64))
        })
        .collect()
}

/// Renders a procedural slide: a plain mid-light background, a distinct
/// constellation of small round markers in each quadrant, rows of dark
/// glyph blocks (title, indented body lines), and a figure region.
/// Returns the image and its text mask (exactly the glyph pixels).
///
/// Every deck styles its slides differently, so the per-slide palette —
/// background tone, marker tones and densities, ink darkness, text
/// density, figure geometry and tone — is drawn from wide ranges. The
/// identity of a slide lives in its quadrant marker fields: each
/// quadrant is empty or scattered with markers of one tone (well above
/// or well below the background) at one of three densities. Markers are
/// many and small, so partial occlusion removes a proportionate few
/// instead of erasing the cue, and each field stays inside its quadrant
/// under the whole viewpoint range. A mid-tone background keeps the
/// contrast of occluded (black) regions low, so corruption perturbs
/// pooled statistics far less than the marker fields that distinguish
/// slides. Non-glyph tones stay at 0.32 or above so occlusions and
/// out-of-view regions (both rendered black) never masquerade as slide
/// content.
pub fn render_slide(size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Mask)> {
    if size < 32 {
        return Err(Error::Contract(format!("slide size must be at least 32 px, got {size}")));
    }
    // Per-slide palette.
    let bg = rng.gen_range(0.55..=0.66);
    let ink_base = rng.gen_range(0.02..=0.14);
    let word_gap_p = rng.gen_range(0.15..=0.5);

    let mut img = vec![bg as f32; size * size];

    // Quadrant marker fields: state 0 is empty; otherwise markers take
    // one of two tones and one of three densities (7 states, drawn
    // independently per quadrant).
    const MARKER_TONES: [f64; 2] = [0.34, 0.96];
    const MARKER_COUNTS: [usize; 3] = [8, 18, 30];
    let scale = size as f64 / 64.0;
    let r_base = (2.0 * scale).max(2.0);
    let half = size / 2;
    for quadrant in 0..4usize {
        let state = rng.gen_range(0..7usize);
        if state == 0 {
            continue;
        }
        let tone = MARKER_TONES[(state - 1) % 2] as f32;
        let count = MARKER_COUNTS[(state - 1) / 2];
        let (qx, qy) = ((quadrant % 2) * half, (quadrant / 2) * half);
        let pad = (3.0 * scale) as usize + 2;
        for _ in 0..count {
            let r = r_base + rng.gen_range(0.0..=scale);
            let cx = rng.gen_range(qx + pad..qx + half - pad) as f64;
            let cy = rng.gen_range(qy + pad..qy + half - pad) as f64;
            let ri = r.ceil() as isize;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if (dx * dx + dy * dy) as f64 <= r * r {
                        let (px, py) = (cx as isize + dx, cy as isize + dy);
                        if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                            img[py as usize * size + px as usize] = tone;
                        }
                    }
                }
            }
        }
    }

    let mut text = Mask::filled(size, size, false);

    let margin = (size / 16).max(2);
    let paint_glyph_row = |img: &mut Vec<f32>,
                               text: &mut Mask,
                               rng: &mut ChaCha8Rng,
                               y0: usize,
                               gh: usize,
                               x_start: usize,
                               x_end: usize| {
        let mut x = x_start;
        let min_gw = (size / 32).max(2);
        while x + min_gw <= x_end {
            let max_gw = (size / 10).max(min_gw + 1);
            let gw = rng.gen_range(min_gw..=max_gw).min(x_end - x);
            let ink = (ink_base + rng.gen_range(-0.04f64..=0.04)).clamp(0.02, 0.30) as f32;
            for y in y0..(y0 + gh).min(size) {
                for xi in x..x + gw {
                    img[y * size + xi] = ink;
                    text.set(xi, y, true);
                }
            }
            let word_gap = rng.gen_bool(word_gap_p);
            let gap = rng.gen_range(1..=(size / 20).max(2)) * if word_gap { 3 } else { 1 };
            x += gw + gap;
        }
    };

    // Title row: taller glyphs, fixed left edge.
    let title_h = (size / 9).max(4) + rng.gen_range(0..=(size / 16).max(1));
    let mut y = margin;
    paint_glyph_row(&mut img, &mut text, rng, y, title_h, margin, size - margin);
    y += title_h + (size / 12).max(2);

    // Body rows.
    let rows = rng.gen_range(1..=2);
    for _ in 0..rows {
        let row_h = (size / 14).max(3) + rng.gen_range(0..=(size / 40).max(1));
        if y + row_h + margin >= size {
            break;
        }
        let indent = margin + rng.gen_range(0..=size / 6);
        let run = rng.gen_range(0.55..=0.95);
        let x_end = (indent as f64 + run * (size - margin - indent) as f64) as usize;
        paint_glyph_row(&mut img, &mut text, rng, y, row_h, indent, x_end.min(size - margin));
        y += row_h + (size / 24).max(1) + rng.gen_range(0..=(size / 32).max(1));
    }

    // A figure block in the lower region, clear of the text mask. Its
    // tone sits below every panel level so it reads as a dark box.
    let figures = 1;
    let fig_tone_base = rng.gen_range(0.345..=0.385);
    for _ in 0..figures {
        let fw = (size as f64 * rng.gen_range(0.10..=0.18)) as usize;
        let fh = (size as f64 * rng.gen_range(0.08..=0.15)) as usize;
        let fx = rng.gen_range(margin..=(size - margin - fw).max(margin + 1));
        let fy_lo = size / 2;
        let fy = rng.gen_range(fy_lo..=(size - margin - fh).max(fy_lo + 1));
        let filled = rng.gen_bool(0.5);
        let tone = (fig_tone_base + rng.gen_range(-0.015f64..=0.015)).clamp(0.34, 0.40) as f32;
        for yy in fy..(fy + fh).min(size - margin) {
            for xx in fx..(fx + fw).min(size - margin) {
                if text.get(xx, yy) {
                    continue;
                }
                let on_border = yy < fy + 2 || yy + 2 >= fy + fh || xx < fx + 2 || xx + 2 >= fx + fw;
                if filled || on_border {
                    img[yy * size + xx] = tone;
                }
            }
        }
    }

    Ok((Tensor::from_vec(&[size, size], img)?, text))
}
