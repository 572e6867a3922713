//! Image quality scoring and decile binning for stratified evaluation.
//!
//! The quality of a corrupted query is `Q = T · S · (C − B)`: the visible
//! text area times the slide area times the unblocked area, all in pixels.
//! The factors come from the generator's ground-truth masks rather than
//! from detection, so scores are exact integers (represented exactly in
//! `f64` up to 2⁵³, far beyond any realistic image size).
//!
//! Evaluated sets are split into ten equal-frequency levels; level 1 holds
//! the highest-quality decile. Equal-frequency binning (rather than
//! equal-width) keeps every stratum populated for reporting.

use crate::error::{Error, Result};
use crate::synth::{warp_binary, CorruptionRecord, Mask};

/// The pixel areas entering the quality product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QualityInputs {
    /// Visible text area `T` (text pixels not hidden by blocks).
    pub text_area: u64,
    /// Slide area `S` (footprint of the warped slide).
    pub slide_area: u64,
    /// Blocked area `B`.
    pub blocked_area: u64,
    /// Total image area `C`, constant per dataset.
    pub image_size: u64,
}

impl QualityInputs {
    /// Validates `0 ≤ B ≤ C` and `0 ≤ T ≤ S ≤ C`.
    pub fn new(text_area: u64, slide_area: u64, blocked_area: u64, image_size: u64) -> Result<Self> {
        if blocked_area > image_size {
            return Err(Error::Contract(format!(
                "blocked area {blocked_area} exceeds image size {image_size}"
            )));
        }
        if text_area > slide_area || slide_area > image_size {
            return Err(Error::Contract(format!(
                "area ordering violated: text {text_area} ≤ slide {slide_area} ≤ image {image_size}"
            )));
        }
        Ok(QualityInputs { text_area, slide_area, blocked_area, image_size })
    }
}

/// The quality value `T · S · (C − B)`.
pub fn quality_score(q: &QualityInputs) -> f64 {
    let exact =
        q.text_area as u128 * q.slide_area as u128 * (q.image_size - q.blocked_area) as u128;
    exact as f64
}

/// Splits scores into ten equal-frequency levels: level 1 is the highest
/// decile, level 10 the lowest. Ties are broken by stable input order, and
/// level populations differ by at most one (earlier levels take the
/// remainder).
pub fn assign_levels(scores: &[f64]) -> Result<Vec<u8>> {
    if scores.len() < 10 {
        return Err(Error::Contract(format!(
            "need at least 10 scores to form deciles, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("scores must be finite, got {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: equal scores stay in input order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let n = scores.len();
    let base = n / 10;
    let remainder = n % 10;
    let mut levels = vec![0u8; n];
    let mut next = 0usize;
    for level in 1..=10u8 {
        let size = base + usize::from((level as usize) <= remainder);
        for &idx in &order[next..next + size] {
            levels[idx] = level;
        }
        next += size;
    }
    Ok(levels)
}

/// Derives the quality inputs of one generated query from its corruption
/// record and the source slide's text mask: `B` is the block-mask area,
/// `S` the warped-slide footprint area, and `T` the warped text mask minus
/// its intersection with the blocks.
pub fn quality_from_record(record: &CorruptionRecord, text_mask: &Mask) -> Result<QualityInputs> {
    let (w, h) = (record.block_mask.width(), record.block_mask.height());
    if record.slide_mask.width() != w || record.slide_mask.height() != h {
        return Err(Error::Data(format!(
            "record masks disagree in size: blocks {w}×{h}, slide {}×{}",
            record.slide_mask.width(),
            record.slide_mask.height()
        )));
    }
    if text_mask.width() != w || text_mask.height() != h {
        return Err(Error::Data(format!(
            "text mask is {}×{} but the record is {w}×{h}",
            text_mask.width(),
            text_mask.height()
        )));
    }
    let warped_text = warp_binary(text_mask, &record.params.homography)?;
    let hidden = warped_text.intersection_count(&record.block_mask)?;
    let text_area = warped_text.count() - hidden;
    QualityInputs::new(
        text_area,
        record.slide_mask.count(),
        record.block_mask.count(),
        (w * h) as u64,
    )
}
