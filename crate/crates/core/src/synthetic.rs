//! Synthetic text-rich scenes and a resolution-limited oracle backend.
//!
//! Scenes are flat-color rasters with rectangular text plates. The oracle
//! never looks at pixels: it identifies the image by digest (or by the
//! provenance attached to a crop) and answers from the scene's known
//! geometry. Text counts as readable when its glyph height, after the view
//! is downscaled so its longer side equals the model input side, reaches
//! the legibility threshold.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    encode_canonical_png, BackendError, Completion, ImagePayload, VisionBackend, VisionRequest,
};
use crate::dataset::{DatasetManifest, ManifestMeta, Sample};
use crate::geometry::{compute_crop, BboxConvention, CropConfig, ImageDims, PixelBox, RasterImage};
use crate::prompting::Stage;
use crate::store::Digest;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("suite size must be at least 1")]
    EmptySuite,
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad scene sidecar {}: {message}", path.display())]
    Sidecar { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SyntheticError + '_ {
    move |source| SyntheticError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub model_input_side: u32,
    pub legibility_threshold: f64,
    pub grounding_jitter: f64,
    pub seed: u64,
    pub bbox_convention: BboxConvention,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            model_input_side: 336,
            legibility_threshold: 12.0,
            grounding_jitter: 0.25,
            seed: 0,
            bbox_convention: BboxConvention::Fraction,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.legibility_threshold.is_nan() || self.legibility_threshold <= 0.0 {
            return Err("legibility threshold must be positive".into());
        }
        if !(0.0..1.0).contains(&self.grounding_jitter) {
            return Err("grounding jitter must lie in [0, 1)".into());
        }
        if self.model_input_side == 0 {
            return Err("model input side must be positive".into());
        }
        Ok(())
    }

    /// Glyph height as seen by the model for a view of the given extent.
    pub fn effective_glyph_height(&self, glyph_height: u32, view_w: u32, view_h: u32) -> f64 {
        glyph_height as f64 * self.model_input_side as f64 / view_w.max(view_h) as f64
    }

    pub fn is_legible(&self, glyph_height: u32, view_w: u32, view_h: u32) -> bool {
        self.effective_glyph_height(glyph_height, view_w, view_h) >= self.legibility_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Large image, small text: unreadable without zooming.
    LargeSmallText,
    /// Small image: readable as is.
    SmallImage,
    /// Target touching the image border, so the crop has to shift.
    NearBorder,
    /// Long text line, so the square expansion dominates.
    Elongated,
    /// The question only makes sense with the scene caption.
    ContextDependent,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::LargeSmallText,
        Archetype::SmallImage,
        Archetype::NearBorder,
        Archetype::Elongated,
        Archetype::ContextDependent,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub content: String,
    pub bbox: PixelBox,
    pub glyph_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub archetype: Archetype,
    pub dims: ImageDims,
    pub descriptor: String,
    pub instances: Vec<TextInstance>,
    pub target_index: usize,
    pub question: String,
    pub context_token: Option<String>,
    pub distractor_answer: String,
    pub image: PathBuf,
    pub image_sha256: Digest,
    #[serde(skip)]
    pub png: Vec<u8>,
}

impl SyntheticScene {
    pub fn target(&self) -> &TextInstance {
        &self.instances[self.target_index]
    }

    pub fn caption(&self) -> String {
        match &self.context_token {
            Some(token) => format!("A {} where the {} is clearly visible.", self.descriptor, token),
            None => format!("A {} with printed text.", self.descriptor),
        }
    }

    pub fn payload(&self) -> ImagePayload {
        ImagePayload::from_canonical_png(self.png.clone(), self.dims.width, self.dims.height)
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            question: self.question.clone(),
            answers: vec![self.target().content.clone()],
        }
    }
}

const OBJECTS: &[&str] = &[
    "license plate",
    "shop sign",
    "product label",
    "street sign",
    "price tag",
    "door plaque",
];
const DESCRIPTORS: &[&str] = &[
    "wide street scene",
    "crowded parking lot",
    "supermarket aisle",
    "train station hall",
    "city square",
];
const CONTEXT_TOKENS: &[&str] = &[
    "bakery", "pharmacy", "bookstore", "florist", "barbershop", "laundromat", "hardware store", "toy shop",
];
const ALNUM: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";

fn random_code(rng: &mut ChaCha8Rng, len: usize) -> String {
    loop {
        let s: String = (0..len)
            .map(|_| *ALNUM.choose(rng).expect("non-empty") as char)
            .collect();
        if s.bytes().any(|b| b.is_ascii_digit()) && s.bytes().any(|b| b.is_ascii_alphabetic()) {
            return s;
        }
    }
}

fn distinct_code(rng: &mut ChaCha8Rng, len: usize, taken: &[String]) -> String {
    loop {
        let s = random_code(rng, len);
        if taken.iter().all(|t| !t.contains(&s) && !s.contains(t.as_str())) {
            return s;
        }
    }
}

/// Plate geometry for `len` glyphs of height `g`.
fn plate_size(len: usize, g: u32) -> (u32, u32) {
    let char_w = (g * 3).div_ceil(5);
    let pad = (g / 4).max(2);
    (len as u32 * char_w + 2 * pad, g + 2 * pad)
}

fn place_plate(rng: &mut ChaCha8Rng, dims: ImageDims, w: u32, h: u32) -> PixelBox {
    let x = rng.random_range(0..=dims.width - w);
    let y = rng.random_range(0..=dims.height - h);
    PixelBox { x1: x, y1: y, x2: x + w, y2: y + h }
}

fn overlaps(a: &PixelBox, b: &PixelBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Offsets of the translated grounding box: each axis moves by at most
/// `jitter` of the box extent along that axis.
fn jitter_box(b: &PixelBox, dims: ImageDims, jitter: f64, rng: &mut ChaCha8Rng) -> PixelBox {
    let shift = |extent: u32, rng: &mut ChaCha8Rng| -> i64 {
        let max = jitter * extent as f64;
        (rng.random_range(-1.0..=1.0) * max).trunc() as i64
    };
    let dx = shift(b.width(), rng).clamp(-(b.x1 as i64), (dims.width - b.x2) as i64);
    let dy = shift(b.height(), rng).clamp(-(b.y1 as i64), (dims.height - b.y2) as i64);
    PixelBox {
        x1: (b.x1 as i64 + dx) as u32,
        y1: (b.y1 as i64 + dy) as u32,
        x2: (b.x2 as i64 + dx) as u32,
        y2: (b.y2 as i64 + dy) as u32,
    }
}

/// Largest-magnitude translations the oracle can produce for a box.
fn extreme_jitters(b: &PixelBox, dims: ImageDims, jitter: f64) -> Vec<PixelBox> {
    let max_dx = (jitter * b.width() as f64).trunc() as i64;
    let max_dy = (jitter * b.height() as f64).trunc() as i64;
    let mut out = Vec::new();
    for dx in [-max_dx, 0, max_dx] {
        for dy in [-max_dy, 0, max_dy] {
            let dx = dx.clamp(-(b.x1 as i64), (dims.width - b.x2) as i64);
            let dy = dy.clamp(-(b.y1 as i64), (dims.height - b.y2) as i64);
            out.push(PixelBox {
                x1: (b.x1 as i64 + dx) as u32,
                y1: (b.y1 as i64 + dy) as u32,
                x2: (b.x2 as i64 + dx) as u32,
                y2: (b.y2 as i64 + dy) as u32,
            });
        }
    }
    out
}

struct Draft {
    archetype: Archetype,
    dims: ImageDims,
    target: TextInstance,
    extra_targets: Vec<TextInstance>,
}

/// Whether the default zoom-in crop makes the target readable and fully
/// visible for every grounding jitter the oracle can produce.
fn zoom_recovers(draft: &Draft, params: &OracleParams, crop: &CropConfig) -> bool {
    let t = &draft.target;
    extreme_jitters(&t.bbox, draft.dims, params.grounding_jitter)
        .iter()
        .all(|j| match compute_crop(j, draft.dims, crop) {
            Ok(c) => {
                c.region.contains(&t.bbox)
                    && params.is_legible(t.glyph_height, c.region.width(), c.region.height())
            }
            Err(_) => false,
        })
}

fn draft_scene(archetype: Archetype, rng: &mut ChaCha8Rng, params: &OracleParams) -> Draft {
    let crop = CropConfig::default();
    loop {
        let dims = match archetype {
            Archetype::SmallImage => {
                ImageDims::new(rng.random_range(320..=640), rng.random_range(240..=480)).expect("positive")
            }
            _ => {
                let w = rng.random_range(2400..=4000u32);
                let h = (w as f64 * rng.random_range(0.6..=0.9)) as u32;
                ImageDims::new(w, h).expect("positive")
            }
        };
        let longest = dims.longest_side();
        let (g, len) = match archetype {
            Archetype::SmallImage => {
                let min_g = (params.legibility_threshold * longest as f64 / params.model_input_side as f64).ceil() as u32;
                (rng.random_range(min_g..=min_g + 8), rng.random_range(4..=6))
            }
            Archetype::Elongated => (rng.random_range(20..=36), rng.random_range(14..=22)),
            _ => (rng.random_range(16..=40), rng.random_range(5..=8)),
        };
        let (pw, ph) = plate_size(len, g);
        if pw >= dims.width || ph >= dims.height {
            continue;
        }
        let bbox = match archetype {
            Archetype::NearBorder => {
                let off = rng.random_range(0..=8u32);
                let (max_x, max_y) = (dims.width - pw, dims.height - ph);
                let (x, y) = match rng.random_range(0..8) {
                    0 => (off, off),
                    1 => (max_x - off, off),
                    2 => (off, max_y - off),
                    3 => (max_x - off, max_y - off),
                    4 => (rng.random_range(0..=max_x), off),
                    5 => (rng.random_range(0..=max_x), max_y - off),
                    6 => (off, rng.random_range(0..=max_y)),
                    _ => (max_x - off, rng.random_range(0..=max_y)),
                };
                PixelBox { x1: x, y1: y, x2: x + pw, y2: y + ph }
            }
            _ => place_plate(rng, dims, pw, ph),
        };
        let target = TextInstance {
            content: String::new(),
            bbox,
            glyph_height: g,
        };
        let draft = Draft {
            archetype,
            dims,
            target,
            extra_targets: Vec::new(),
        };
        let full_legible = params.is_legible(g, dims.width, dims.height);
        let wanted_legible = archetype == Archetype::SmallImage;
        if full_legible != wanted_legible || !zoom_recovers(&draft, params, &crop) {
            continue;
        }
        return draft;
    }
}

fn render(dims: ImageDims, index: usize, instances: &[TextInstance]) -> RasterImage {
    // The background encodes the scene index so crops of different scenes
    // never share bytes.
    let i = index as u32;
    let bg = image::Rgb([
        (160 + ((i >> 12) & 63)) as u8,
        (160 + ((i >> 6) & 63)) as u8,
        (160 + (i & 63)) as u8,
    ]);
    let mut img = RasterImage::from_pixel(dims.width, dims.height, bg);
    for inst in instances {
        let b = inst.bbox;
        for y in b.y1..b.y2 {
            for x in b.x1..b.x2 {
                img.put_pixel(x, y, image::Rgb([250, 250, 245]));
            }
        }
        let g = inst.glyph_height;
        let char_w = (g * 3).div_ceil(5);
        let pad = (g / 4).max(2);
        for (k, byte) in inst.content.bytes().enumerate() {
            // glyph shade carries the character code
            let shade = image::Rgb([byte / 2, byte / 3, byte / 4]);
            let x0 = b.x1 + pad + k as u32 * char_w;
            for y in b.y1 + pad..b.y1 + pad + g {
                for x in x0..x0 + char_w.saturating_sub(1).max(1) {
                    img.put_pixel(x, y, shade);
                }
            }
        }
    }
    img
}

/// Generate `n` scenes cycling through every archetype.
pub fn generate_suite(n: usize, params: &OracleParams, seed: u64) -> Result<Vec<SyntheticScene>, SyntheticError> {
    if n == 0 {
        return Err(SyntheticError::EmptySuite);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(n);
    for index in 0..n {
        let archetype = Archetype::ALL[index % Archetype::ALL.len()];
        let mut draft = draft_scene(archetype, &mut rng, params);
        let mut taken: Vec<String> = Vec::new();

        let target_len = {
            let g = draft.target.glyph_height;
            let pad = (g / 4).max(2);
            ((draft.target.bbox.width() - 2 * pad) / (g * 3).div_ceil(5)) as usize
        };
        draft.target.content = distinct_code(&mut rng, target_len, &taken);
        taken.push(draft.target.content.clone());

        // decoys, placed away from the target
        let decoy_count = if archetype == Archetype::ContextDependent { 1 } else { rng.random_range(1..=3) };
        for _ in 0..decoy_count {
            let g = draft.target.glyph_height;
            let len = target_len.min(8);
            let (pw, ph) = plate_size(len, g);
            let mut placed = None;
            for _ in 0..200 {
                if pw >= draft.dims.width || ph >= draft.dims.height {
                    break;
                }
                let b = place_plate(&mut rng, draft.dims, pw, ph);
                let clear = !overlaps(&b, &draft.target.bbox)
                    && draft.extra_targets.iter().all(|o| !overlaps(&b, &o.bbox));
                if clear {
                    placed = Some(b);
                    break;
                }
            }
            let Some(bbox) = placed else { continue };
            let content = distinct_code(&mut rng, len, &taken);
            taken.push(content.clone());
            draft.extra_targets.push(TextInstance {
                content,
                bbox,
                glyph_height: g,
            });
        }
        let descriptor = DESCRIPTORS.choose(&mut rng).expect("non-empty").to_string();
        let object = *OBJECTS.choose(&mut rng).expect("non-empty");
        let (question, context_token) = match archetype {
            Archetype::ContextDependent => (
                "What is written on the sign of the business mentioned in the scene description?".to_string(),
                Some(CONTEXT_TOKENS.choose(&mut rng).expect("non-empty").to_string()),
            ),
            Archetype::Elongated => ("What does the long banner say?".to_string(), None),
            _ => (format!("What is written on the {object}?"), None),
        };

        // every scene needs a wrong answer to give, even without room for a decoy
        let distractor_answer = match draft.extra_targets.first() {
            Some(d) => d.content.clone(),
            None => distinct_code(&mut rng, target_len, &taken),
        };
        let mut instances = vec![draft.target];
        instances.extend(draft.extra_targets);
        // shuffle the target position among the instances deterministically
        let target_index = rng.random_range(0..instances.len());
        instances.swap(0, target_index);

        let pixels = render(draft.dims, index, &instances);
        let png = encode_canonical_png(&pixels);
        let id = format!("scene-{index:04}");
        scenes.push(SyntheticScene {
            image: PathBuf::from("images").join(format!("{id}.png")),
            id,
            archetype: draft.archetype,
            dims: draft.dims,
            descriptor,
            instances,
            target_index,
            question,
            context_token,
            distractor_answer,
            image_sha256: Digest::of(&png),
            png,
        });
    }
    Ok(scenes)
}

/// Sidecar written next to a suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSidecar {
    pub seed: u64,
    pub oracle: OracleParams,
    pub scenes: Vec<SyntheticScene>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SIDECAR_FILE: &str = "scenes.json";

/// The suite as a canonical manifest; image paths are relative to `dir`.
pub fn suite_manifest(scenes: &[SyntheticScene], seed: u64, dir: &Path) -> DatasetManifest {
    DatasetManifest {
        meta: ManifestMeta {
            name: "synthetic".into(),
            split: format!("seed-{seed}"),
            source_notes: format!("{} generated scenes", scenes.len()),
        },
        samples: scenes.iter().map(SyntheticScene::to_sample).collect(),
        root: dir.to_path_buf(),
    }
}

/// Write images, `manifest.jsonl` and `scenes.json` into `dir`.
pub fn write_suite(dir: &Path, scenes: &[SyntheticScene], params: &OracleParams, seed: u64) -> Result<(), SyntheticError> {
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    for scene in scenes {
        let path = dir.join(&scene.image);
        fs::write(&path, &scene.png).map_err(io_err(&path))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, suite_manifest(scenes, seed, dir).to_jsonl()).map_err(io_err(&manifest_path))?;
    let sidecar = SuiteSidecar {
        seed,
        oracle: *params,
        scenes: scenes.to_vec(),
    };
    let sidecar_path = dir.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sidecar_path, text + "\n").map_err(io_err(&sidecar_path))?;
    Ok(())
}

pub fn load_sidecar(path: &Path) -> Result<SuiteSidecar, SyntheticError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SyntheticError::Sidecar {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// How the oracle judged a view; exposed for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub effective_glyph_height: f64,
    pub legible: bool,
    pub target_visible: bool,
    pub context_satisfied: bool,
}

impl Judgement {
    pub fn correct(&self) -> bool {
        self.legible && self.target_visible && self.context_satisfied
    }
}

/// Mock backend that knows the suite's ground truth.
pub struct OracleBackend {
    params: OracleParams,
    scenes: Vec<SyntheticScene>,
    by_digest: HashMap<Digest, usize>,
}

impl OracleBackend {
    pub fn new(params: OracleParams, scenes: Vec<SyntheticScene>) -> Self {
        let by_digest = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.image_sha256, i))
            .collect();
        Self {
            params,
            scenes,
            by_digest,
        }
    }

    pub fn from_sidecar(sidecar: SuiteSidecar) -> Self {
        Self::new(sidecar.oracle, sidecar.scenes)
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    pub fn scenes(&self) -> &[SyntheticScene] {
        &self.scenes
    }

    /// The grounding box the oracle reports for a scene, in pixels.
    pub fn grounded_box(&self, scene: &SyntheticScene) -> PixelBox {
        let mut seed_bytes = scene.image_sha256.0.to_vec();
        seed_bytes.extend_from_slice(&self.params.seed.to_le_bytes());
        let d = Digest::of(&seed_bytes);
        let mut rng = ChaCha8Rng::from_seed(d.0);
        jitter_box(&scene.target().bbox, scene.dims, self.params.grounding_jitter, &mut rng)
    }

    fn resolve(&self, request: &VisionRequest) -> Result<(&SyntheticScene, PixelBox), BackendError> {
        let image = &request.image;
        let unknown = || BackendError::UnknownImage(image.digest().to_hex());
        if let Some(&i) = self.by_digest.get(&image.digest()) {
            let scene = &self.scenes[i];
            return Ok((scene, scene.dims.full_box()));
        }
        let prov = image.provenance().ok_or_else(unknown)?;
        let &i = self.by_digest.get(&prov.source).ok_or_else(unknown)?;
        let scene = &self.scenes[i];
        let r = prov.region;
        if !r.fits_in(scene.dims) || r.width() != image.width() || r.height() != image.height() {
            return Err(unknown());
        }
        Ok((scene, r))
    }

    pub fn judge(&self, scene: &SyntheticScene, view: &PixelBox, prompt: &str) -> Judgement {
        let t = scene.target();
        let effective = self
            .params
            .effective_glyph_height(t.glyph_height, view.width(), view.height());
        Judgement {
            effective_glyph_height: effective,
            legible: effective >= self.params.legibility_threshold,
            target_visible: view.contains(&t.bbox),
            context_satisfied: scene
                .context_token
                .as_deref()
                .is_none_or(|token| prompt.contains(token)),
        }
    }

    fn format_box(&self, b: &PixelBox, dims: ImageDims) -> String {
        match self.params.bbox_convention {
            BboxConvention::Fraction => {
                let n = b.to_normalized(dims);
                format!("[{:.6}, {:.6}, {:.6}, {:.6}]", n.x1, n.y1, n.x2, n.y2)
            }
            BboxConvention::PerMille => {
                let n = b.to_normalized(dims);
                let m = |v: f64| (v * 999.0).round() as u32;
                format!("[{}, {}, {}, {}]", m(n.x1), m(n.y1), m(n.x2), m(n.y2))
            }
            BboxConvention::AbsolutePixels => format!("{b}"),
        }
    }
}

impl VisionBackend for OracleBackend {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn model_id(&self) -> &str {
        "synthetic-oracle"
    }

    fn bbox_convention(&self) -> BboxConvention {
        self.params.bbox_convention
    }

    fn complete(&self, request: &VisionRequest) -> Result<Completion, BackendError> {
        let (scene, view) = self.resolve(request)?;
        let answer = || {
            if self.judge(scene, &view, &request.prompt.text).correct() {
                scene.target().content.as_str()
            } else {
                scene.distractor_answer.as_str()
            }
        };
        let text = match request.prompt.stage {
            Stage::Overview => scene.caption(),
            Stage::Localization => {
                // grounding is reported in the coordinates of the image it was asked about
                let g = self.grounded_box(scene);
                let local = PixelBox {
                    x1: g.x1.clamp(view.x1, view.x2 - 1) - view.x1,
                    y1: g.y1.clamp(view.y1, view.y2 - 1) - view.y1,
                    x2: g.x2.clamp(view.x1 + 1, view.x2) - view.x1,
                    y2: g.y2.clamp(view.y1 + 1, view.y2) - view.y1,
                };
                let dims = ImageDims::new(view.width(), view.height()).expect("non-empty view");
                self.format_box(&local, dims)
            }
            Stage::ZscotReason => format!(
                "I look for the text the question refers to and read it character by character. It appears to say {}.",
                answer()
            ),
            Stage::Observation | Stage::BaselineDirect | Stage::ZscotExtract => {
                format!("The text reads {}.", answer())
            }
        };
        Ok(Completion { text, latency_ms: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legibility_arithmetic() {
        let p = OracleParams::default();
        assert!((p.effective_glyph_height(40, 4000, 3000) - 3.36).abs() < 1e-12);
        assert!(!p.is_legible(40, 4000, 3000));
        assert!((p.effective_glyph_height(40, 448, 448) - 30.0).abs() < 1e-12);
        assert!(p.is_legible(40, 448, 448));
    }

    #[test]
    fn params_validation() {
        assert!(OracleParams::default().validate().is_ok());
        let bad = OracleParams {
            grounding_jitter: 1.0,
            ..OracleParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jitter_stays_bounded() {
        let dims = ImageDims::new(1000, 800).unwrap();
        let b = PixelBox::new(100, 100, 180, 140).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let j = jitter_box(&b, dims, 0.25, &mut rng);
            assert_eq!((j.width(), j.height()), (80, 40));
            assert!((j.x1 as i64 - 100).abs() <= 20);
            assert!((j.y1 as i64 - 100).abs() <= 10);
        }
    }

    #[test]
    fn codes_have_letters_and_digits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = random_code(&mut rng, 6);
            assert_eq!(c.len(), 6);
            assert!(c.bytes().any(|b| b.is_ascii_digit()));
        }
    }

    #[test]
    fn empty_suite_rejected() {
        assert!(matches!(
            generate_suite(0, &OracleParams::default(), 1),
            Err(SyntheticError::EmptySuite)
        ));
    }

    #[test]
    fn suite_is_deterministic_and_well_formed() {
        let p = OracleParams::default();
        let a = generate_suite(10, &p, 42).unwrap();
        let b = generate_suite(10, &p, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_suite(10, &p, 43).unwrap();
        assert_ne!(a[0].image_sha256, c[0].image_sha256);
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.archetype, Archetype::ALL[i % 5]);
            let t = s.target();
            assert!(t.bbox.fits_in(s.dims));
            assert_ne!(s.distractor_answer, t.content);
            let legible = p.is_legible(t.glyph_height, s.dims.width, s.dims.height);
            assert_eq!(legible, s.archetype == Archetype::SmallImage, "{}", s.id);
            assert_eq!(s.context_token.is_some(), s.archetype == Archetype::ContextDependent);
            assert!(!s.question.contains(&t.content));
        }
    }

    #[test]
    fn oracle_answers_by_view() {
        use crate::backend::GenParams;
        use crate::prompting::AssembledPrompt;
        let p = OracleParams::default();
        let scenes = generate_suite(5, &p, 7).unwrap();
        let oracle = OracleBackend::new(p, scenes.clone());
        let scene = &scenes[0];
        let ask = |image: ImagePayload, stage: Stage, text: &str| {
            let req = VisionRequest {
                image,
                prompt: AssembledPrompt { stage, text: text.into() },
                params: GenParams::default(),
                backend_id: "oracle".into(),
                model_id: "synthetic-oracle".into(),
            };
            oracle.complete(&req).map(|c| c.text)
        };
        let full = scene.payload();
        let direct = ask(full.clone(), Stage::BaselineDirect, &scene.question).unwrap();
        assert!(direct.contains(&scene.distractor_answer));

        let g = oracle.grounded_box(scene);
        let crop = compute_crop(&g, scene.dims, &CropConfig::default()).unwrap();
        let pixels = image::load_from_memory(&scene.png).unwrap().to_rgb8();
        let cropped = crate::geometry::extract_crop(&pixels, &crop).unwrap();
        let payload = ImagePayload::from_rgb(&cropped).with_provenance(crate::backend::Provenance {
            source: scene.image_sha256,
            region: crop.region,
        });
        let zoomed = ask(payload, Stage::Observation, &scene.question).unwrap();
        assert!(zoomed.contains(&scene.target().content), "{zoomed}");

        let stranger = ImagePayload::from_rgb(&RasterImage::new(4, 4));
        assert!(matches!(
            ask(stranger, Stage::Overview, "x"),
            Err(BackendError::UnknownImage(_))
        ));
    }
}
