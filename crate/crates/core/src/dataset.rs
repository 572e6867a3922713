//! On-disk dataset layout and the manifest format.
//!
//! A dataset root holds `manifest.txt` plus 8-bit lossless grayscale PNGs
//! for images and masks. The manifest is line-oriented structured text —
//! one `key value` header per line, then one `target …` or `query …`
//! record per line with `key=value` fields — chosen so datasets diff
//! cleanly and regenerate byte-identically from the same seed.
//!
//! Two pair relations derive from one manifest:
//!
//! * [`Manifest::training_index`] — **queries = slides, targets = training
//!   frames**. This is the orientation the boosting loader samples: each
//!   slide pairs positively with its own frames (α = frames per slide).
//! * [`Manifest::retrieval_truth`] — **queries = frames, targets =
//!   slides**, the direction evaluation ranks in.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loader::DatasetIndex;
use crate::quality::QualityInputs;
use crate::synth::{Mask, Mat3};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";
const FORMAT_LINE: &str = "format slidematch-dataset v1";

/// Which phase a query image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// One slide image (retrieval target).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub id: String,
    /// Image file, relative to the dataset root.
    pub file: String,
    /// Text-region mask file (annotation for quality scoring).
    pub text_mask: String,
}

/// One corrupted query frame.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub split: Split,
    pub file: String,
    /// Matching target ids (non-empty).
    pub matches: Vec<String>,
    pub noise_level: u8,
    pub block_count: usize,
    pub blocked_ratio: f64,
    /// Forward homography used by the warp (bottom-right entry 1).
    pub homography: Mat3,
    /// Seed that regenerates this query exactly.
    pub seed: u64,
    pub block_mask: String,
    pub slide_mask: String,
    pub quality: QualityInputs,
}

/// The dataset manifest: header plus per-image records.
#[derive(Debug, Clone)]
pub struct Manifest {
    root: PathBuf,
    pub seed: u64,
    pub image_size: usize,
    pub targets: Vec<TargetRecord>,
    pub queries: Vec<QueryRecord>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Data(format!("{what} must be non-empty")));
    }
    if s.chars().any(|c| c.is_whitespace() || c == '=' || c == ',') {
        return Err(Error::Data(format!(
            "{what} {s:?} contains whitespace, '=', or ',', which the manifest format reserves"
        )));
    }
    Ok(())
}

fn fmt_homography(h: &Mat3) -> String {
    // Eight coefficients; the ninth is pinned to 1 by construction.
    let c = [h[0][0], h[0][1], h[0][2], h[1][0], h[1][1], h[1][2], h[2][0], h[2][1]];
    c.map(|v| v.to_string()).join(",")
}

fn parse_homography(s: &str) -> Result<Mat3> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 8 {
        return Err(Error::Data(format!(
            "homography needs 8 comma-separated coefficients, got {}",
            parts.len()
        )));
    }
    let mut c = [0.0f64; 8];
    for (i, p) in parts.iter().enumerate() {
        c[i] = p
            .parse()
            .map_err(|e| Error::Data(format!("bad homography coefficient {p:?}: {e}")))?;
    }
    Ok([[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], 1.0]])
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, seed: u64, image_size: usize) -> Self {
        Manifest {
            root: root.into(),
            seed,
            image_size,
            targets: Vec::new(),
            queries: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    /// Checks id uniqueness, match resolution, non-empty match lists, and
    /// field sanity.
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Data("image_size must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        let mut target_ids = BTreeSet::new();
        for t in &self.targets {
            check_token("target id", &t.id)?;
            if !ids.insert(&t.id) {
                return Err(Error::Data(format!("duplicate id {:?}", t.id)));
            }
            target_ids.insert(t.id.as_str());
        }
        let area = (self.image_size * self.image_size) as u64;
        for q in &self.queries {
            check_token("query id", &q.id)?;
            if !ids.insert(&q.id) {
                return Err(Error::Data(format!("duplicate id {:?}", q.id)));
            }
            if q.matches.is_empty() {
                return Err(Error::Data(format!("query {:?} lists no matches", q.id)));
            }
            for m in &q.matches {
                if !target_ids.contains(m.as_str()) {
                    return Err(Error::Data(format!(
                        "query {:?} references unknown target {m:?}",
                        q.id
                    )));
                }
            }
            if !(1..=10).contains(&q.noise_level) {
                return Err(Error::Data(format!(
                    "query {:?} has noise level {} outside 1..=10",
                    q.id, q.noise_level
                )));
            }
            if !(0.0..1.0).contains(&q.blocked_ratio) {
                return Err(Error::Data(format!(
                    "query {:?} blocked_ratio {} outside [0, 1)",
                    q.id, q.blocked_ratio
                )));
            }
            if q.quality.image_size != area {
                return Err(Error::Data(format!(
                    "query {:?} quality C = {} disagrees with image_size {} squared",
                    q.id, q.quality.image_size, self.image_size
                )));
            }
        }
        Ok(())
    }

    /// Serializes the manifest text (fixed field order, platform-neutral).
    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        out.push_str(FORMAT_LINE);
        out.push('\n');
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "image_size {}", self.image_size);
        for t in &self.targets {
            let _ = writeln!(out, "target id={} file={} text_mask={}", t.id, t.file, t.text_mask);
        }
        for q in &self.queries {
            let _ = writeln!(
                out,
                "query id={} split={} file={} matches={} noise_level={} block_count={} \
                 blocked_ratio={} homography={} seed={} block_mask={} slide_mask={} \
                 quality_text={} quality_slide={} quality_blocked={} quality_image={}",
                q.id,
                q.split.as_str(),
                q.file,
                q.matches.join(","),
                q.noise_level,
                q.block_count,
                q.blocked_ratio,
                fmt_homography(&q.homography),
                q.seed,
                q.block_mask,
                q.slide_mask,
                q.quality.text_area,
                q.quality.slide_area,
                q.quality.blocked_area,
                q.quality.image_size,
            );
        }
        Ok(out)
    }

    /// Writes `manifest.txt` under the dataset root.
    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.manifest_path(), self.to_text()?)?;
        Ok(())
    }

    /// Parses manifest text; `root` is where relative file refs resolve.
    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |lineno: usize, msg: String| Error::Data(format!("manifest line {}: {msg}", lineno + 1));

        let (n0, first) = lines
            .next()
            .ok_or_else(|| Error::Data("manifest is empty".into()))?;
        if first != FORMAT_LINE {
            return Err(bad(n0, format!("expected {FORMAT_LINE:?}, got {first:?}")));
        }
        let mut header_u64 = |expected: &str| -> Result<u64> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::Data(format!("manifest ends before {expected} header")))?;
            let rest = line
                .strip_prefix(expected)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(n, format!("expected '{expected} <value>', got {line:?}")))?;
            rest.parse()
                .map_err(|e| bad(n, format!("bad {expected} value {rest:?}: {e}")))
        };
        let seed = header_u64("seed")?;
        let image_size = header_u64("image_size")? as usize;

        let mut manifest = Manifest::new(root, seed, image_size);
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split(' ');
            let kind = tokens.next().unwrap_or_default();
            let mut fields: Vec<(String, String)> = Vec::new();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(n, format!("field {tok:?} is not key=value")))?;
                fields.push((k.to_string(), v.to_string()));
            }
            let mut take = |key: &str| -> Result<String> {
                let pos = fields
                    .iter()
                    .position(|(k, _)| k == key)
                    .ok_or_else(|| bad(n, format!("missing field {key:?}")))?;
                Ok(fields.remove(pos).1)
            };
            match kind {
                "target" => {
                    let record = TargetRecord {
                        id: take("id")?,
                        file: take("file")?,
                        text_mask: take("text_mask")?,
                    };
                    if let Some((k, _)) = fields.first() {
                        return Err(bad(n, format!("unknown field {k:?}")));
                    }
                    manifest.targets.push(record);
                }
                "query" => {
                    let parse_u64 = |n: usize, key: &str, v: String| -> Result<u64> {
                        v.parse().map_err(|e| bad(n, format!("bad {key} {v:?}: {e}")))
                    };
                    let parse_f64 = |n: usize, key: &str, v: String| -> Result<f64> {
                        v.parse().map_err(|e| bad(n, format!("bad {key} {v:?}: {e}")))
                    };
                    let id = take("id")?;
                    let split = Split::parse(&take("split")?).map_err(|e| bad(n, e.to_string()))?;
                    let file = take("file")?;
                    let matches: Vec<String> =
                        take("matches")?.split(',').map(str::to_string).collect();
                    let noise_level = parse_u64(n, "noise_level", take("noise_level")?)? as u8;
                    let block_count = parse_u64(n, "block_count", take("block_count")?)? as usize;
                    let blocked_ratio = parse_f64(n, "blocked_ratio", take("blocked_ratio")?)?;
                    let homography =
                        parse_homography(&take("homography")?).map_err(|e| bad(n, e.to_string()))?;
                    let seed = parse_u64(n, "seed", take("seed")?)?;
                    let block_mask = take("block_mask")?;
                    let slide_mask = take("slide_mask")?;
                    let quality = QualityInputs::new(
                        parse_u64(n, "quality_text", take("quality_text")?)?,
                        parse_u64(n, "quality_slide", take("quality_slide")?)?,
                        parse_u64(n, "quality_blocked", take("quality_blocked")?)?,
                        parse_u64(n, "quality_image", take("quality_image")?)?,
                    )
                    .map_err(|e| bad(n, e.to_string()))?;
                    if let Some((k, _)) = fields.first() {
                        return Err(bad(n, format!("unknown field {k:?}")));
                    }
                    manifest.queries.push(QueryRecord {
                        id,
                        split,
                        file,
                        matches,
                        noise_level,
                        block_count,
                        blocked_ratio,
                        homography,
                        seed,
                        block_mask,
                        slide_mask,
                        quality,
                    });
                }
                other => return Err(bad(n, format!("unknown record kind {other:?}"))),
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads and validates `root/manifest.txt`.
    pub fn load(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Manifest::parse(root, &text)
    }

    pub fn queries_in(&self, split: Option<Split>) -> Vec<&QueryRecord> {
        self.queries
            .iter()
            .filter(|q| split.is_none_or(|s| q.split == s))
            .collect()
    }

    /// The training pair relation: loader queries are **slide ids**,
    /// loader targets are **train-split frame ids**, positives pair each
    /// slide with its own frames.
    pub fn training_index(&self) -> Result<DatasetIndex> {
        let slides: Vec<String> = self.targets.iter().map(|t| t.id.clone()).collect();
        let frames: Vec<String> = self
            .queries_in(Some(Split::Train))
            .iter()
            .map(|q| q.id.clone())
            .collect();
        let mut positives = Vec::new();
        for q in self.queries_in(Some(Split::Train)) {
            for m in &q.matches {
                positives.push((m.clone(), q.id.clone()));
            }
        }
        DatasetIndex::new(slides, frames, &positives)
    }

    /// The retrieval ground truth for a split: queries are frame ids,
    /// targets are slide ids.
    pub fn retrieval_truth(&self, split: Option<Split>) -> Result<DatasetIndex> {
        let slides: Vec<String> = self.targets.iter().map(|t| t.id.clone()).collect();
        let frames: Vec<String> = self
            .queries_in(split)
            .iter()
            .map(|q| q.id.clone())
            .collect();
        let mut positives = Vec::new();
        for q in self.queries_in(split) {
            for m in &q.matches {
                positives.push((q.id.clone(), m.clone()));
            }
        }
        DatasetIndex::new(frames, slides, &positives)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_image(&self, rel: &str) -> Result<Tensor<f32>> {
        load_gray_png(&self.resolve(rel))
    }

    pub fn load_mask(&self, rel: &str) -> Result<Mask> {
        load_mask_png(&self.resolve(rel))
    }

    pub fn target(&self, id: &str) -> Result<&TargetRecord> {
        self.targets
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Data(format!("unknown target id {id:?}")))
    }

    pub fn query(&self, id: &str) -> Result<&QueryRecord> {
        self.queries
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| Error::Data(format!("unknown query id {id:?}")))
    }
}

/// Writes a `[h, w]` intensity tensor as an 8-bit grayscale PNG
/// (values clamped to [0, 1] and quantized to 255 steps).
pub fn save_gray_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Shape(format!(
                "expected a [h, w] image to save, got {other:?}"
            )))
        }
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

/// Loads an 8-bit grayscale PNG into a `[h, w]` tensor with values in
/// [0, 1].
pub fn load_gray_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot load image {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[h as usize, w as usize], data)
}

/// Writes a binary mask as a black/white PNG.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer(
        path,
        &bytes,
        mask.width() as u32,
        mask.height() as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

/// Loads a mask PNG; any value above 127 counts as set.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot load mask {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Mask::from_data(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|b| b > 127).collect(),
    )
}
