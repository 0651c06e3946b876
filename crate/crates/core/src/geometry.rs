//! Box parsing, normalization and the square zoom-in crop.
//!
//! All pixel boxes are half-open: a box covers columns `[x1, x2)` and rows
//! `[y1, y2)`, so `width = x2 - x1`.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decoded 8-bit RGB raster.
pub type RasterImage = RgbImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no bounding box found in model output")]
    NoBoxFound,
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("coordinate {value} outside the range of the {convention} convention")]
    OutOfRange { value: f64, convention: BboxConvention },
    #[error("box {0} lies outside the {1} image")]
    BoxOutsideImage(PixelBox, ImageDims),
    #[error("region {0} lies outside the {1} image")]
    RegionOutsideImage(PixelBox, ImageDims),
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("invalid crop configuration: {0}")]
    InvalidConfig(String),
    #[error("failed to load image {path}: {message}")]
    ImageLoad { path: String, message: String },
}

/// Width and height of an image in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn of(image: &RasterImage) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
        }
    }

    pub fn full_box(&self) -> PixelBox {
        PixelBox {
            x1: 0,
            y1: 0,
            x2: self.width,
            y2: self.height,
        }
    }

    pub fn longest_side(&self) -> u32 {
        self.width.max(self.height)
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Integer pixel rectangle, origin top-left, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl PixelBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self, GeometryError> {
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::DegenerateBox {
                x1: x1 as f64,
                y1: y1 as f64,
                x2: x2 as f64,
                y2: y2 as f64,
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn longest_side(&self) -> u32 {
        self.width().max(self.height())
    }

    /// Center doubled, so odd extents stay exact in integers.
    pub fn center_x2(&self) -> (u64, u64) {
        (
            self.x1 as u64 + self.x2 as u64,
            self.y1 as u64 + self.y2 as u64,
        )
    }

    pub fn fits_in(&self, dims: ImageDims) -> bool {
        self.x2 <= dims.width && self.y2 <= dims.height
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Whether the (possibly half-pixel) center of `other` lies inside `self`.
    pub fn contains_center_of(&self, other: &PixelBox) -> bool {
        let (cx, cy) = other.center_x2();
        2 * self.x1 as u64 <= cx
            && cx <= 2 * self.x2 as u64
            && 2 * self.y1 as u64 <= cy
            && cy <= 2 * self.y2 as u64
    }

    pub fn to_normalized(&self, dims: ImageDims) -> NormalizedBox {
        NormalizedBox {
            x1: self.x1 as f64 / dims.width as f64,
            y1: self.y1 as f64 / dims.height as f64,
            x2: self.x2 as f64 / dims.width as f64,
            y2: self.y2 as f64 / dims.height as f64,
        }
    }
}

impl fmt::Display for PixelBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Rectangle in image-relative coordinates, `0 <= x1 < x2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormalizedBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let convention = BboxConvention::Fraction;
        for value in [x1, y1, x2, y2] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GeometryError::OutOfRange { value, convention });
            }
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }
}

/// Coordinate convention a backend uses when it answers a grounding prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BboxConvention {
    #[default]
    #[serde(rename = "fraction_0_1")]
    Fraction,
    #[serde(rename = "per_mille_0_999")]
    PerMille,
    #[serde(rename = "absolute_pixels")]
    AbsolutePixels,
}

impl fmt::Display for BboxConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BboxConvention::Fraction => "fraction_0_1",
            BboxConvention::PerMille => "per_mille_0_999",
            BboxConvention::AbsolutePixels => "absolute_pixels",
        })
    }
}

impl std::str::FromStr for BboxConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fraction_0_1" => Ok(Self::Fraction),
            "per_mille_0_999" => Ok(Self::PerMille),
            "absolute_pixels" => Ok(Self::AbsolutePixels),
            other => Err(format!("unknown bbox convention '{other}'")),
        }
    }
}

/// Result of parsing a grounding answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParsedBox {
    Normalized(NormalizedBox),
    Pixel(PixelBox),
}

impl ParsedBox {
    /// Resolve against an image, clamping pixel boxes into bounds.
    pub fn to_pixel(&self, dims: ImageDims) -> PixelBox {
        match self {
            ParsedBox::Normalized(b) => to_pixel(b, dims),
            ParsedBox::Pixel(b) => {
                let (x1, x2) = repair_span(b.x1 as i64, b.x2 as i64, dims.width);
                let (y1, y2) = repair_span(b.y1 as i64, b.y2 as i64, dims.height);
                PixelBox { x1, y1, x2, y2 }
            }
        }
    }
}

const NUM: &str = r"(-?\d+(?:\.\d+)?)";

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let pattern = format!(r"\[\s*{NUM}\s*,\s*{NUM}\s*,\s*{NUM}\s*,\s*{NUM}\s*\]");
        Regex::new(&pattern).expect("static regex")
    })
}

fn paired_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let pattern = format!(r"\(\s*{NUM}\s*,\s*{NUM}\s*\)\s*,?\s*\(\s*{NUM}\s*,\s*{NUM}\s*\)");
        Regex::new(&pattern).expect("static regex")
    })
}

/// Extract the first box from a grounding answer.
///
/// Accepts `[a, b, c, d]` and `(a,b),(c,d)`; the latter may sit inside
/// `<box>...</box>` tags, which are simply skipped over. When both forms are
/// present the one that starts earlier wins.
pub fn parse_bbox_text(raw: &str, convention: BboxConvention) -> Result<ParsedBox, GeometryError> {
    let bracket = bracket_re().captures(raw);
    let paired = paired_re().captures(raw);
    let caps = match (bracket, paired) {
        (Some(a), Some(b)) => {
            if a.get(0).map(|m| m.start()) <= b.get(0).map(|m| m.start()) {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(GeometryError::NoBoxFound),
    };
    let mut values = [0.0f64; 4];
    for (slot, i) in values.iter_mut().zip(1..=4) {
        *slot = caps[i].parse::<f64>().map_err(|_| GeometryError::NoBoxFound)?;
    }
    let [x1, y1, x2, y2] = values;

    let (lo, hi) = match convention {
        BboxConvention::Fraction => (0.0, 1.0),
        BboxConvention::PerMille => (0.0, 999.0),
        BboxConvention::AbsolutePixels => (0.0, u32::MAX as f64),
    };
    if let Some(&value) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(GeometryError::OutOfRange { value, convention });
    }
    if x2 <= x1 || y2 <= y1 {
        return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
    }

    match convention {
        BboxConvention::Fraction => Ok(ParsedBox::Normalized(NormalizedBox { x1, y1, x2, y2 })),
        BboxConvention::PerMille => Ok(ParsedBox::Normalized(NormalizedBox {
            x1: x1 / 999.0,
            y1: y1 / 999.0,
            x2: x2 / 999.0,
            y2: y2 / 999.0,
        })),
        BboxConvention::AbsolutePixels => {
            let r = |v: f64| v.round() as u32;
            let (px1, py1, px2, py2) = (r(x1), r(y1), r(x2), r(y2));
            if px2 <= px1 || py2 <= py1 {
                return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
            }
            Ok(ParsedBox::Pixel(PixelBox {
                x1: px1,
                y1: py1,
                x2: px2,
                y2: py2,
            }))
        }
    }
}

/// Clamp a span into `[0, limit]` and widen it to at least one pixel.
fn repair_span(lo: i64, hi: i64, limit: u32) -> (u32, u32) {
    let limit = limit as i64;
    let mut lo = lo.clamp(0, limit);
    let mut hi = hi.clamp(0, limit);
    if hi <= lo {
        hi = lo + 1;
        if hi > limit {
            hi = limit;
            lo = limit - 1;
        }
    }
    (lo as u32, hi as u32)
}

/// Scale a normalized box to pixels, rounding to nearest and repairing any
/// sub-pixel collapse to a 1-px extent.
pub fn to_pixel(b: &NormalizedBox, dims: ImageDims) -> PixelBox {
    let sx = |v: f64| (v * dims.width as f64).round() as i64;
    let sy = |v: f64| (v * dims.height as f64).round() as i64;
    let (x1, x2) = repair_span(sx(b.x1), sx(b.x2), dims.width);
    let (y1, y2) = repair_span(sy(b.y1), sy(b.y2), dims.height);
    PixelBox { x1, y1, x2, y2 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Crop exactly the grounded box.
    StrictRect,
    /// Square on the longer side, no expansion and no size floor.
    Square,
    /// Square on the longer side, scaled by the expand ratio, with a size floor.
    #[default]
    SquareScaled,
    /// No crop at all.
    FullImage,
}

impl CropMode {
    pub const ALL: [CropMode; 4] = [
        CropMode::StrictRect,
        CropMode::Square,
        CropMode::SquareScaled,
        CropMode::FullImage,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CropMode::StrictRect => "strict_rect",
            CropMode::Square => "square",
            CropMode::SquareScaled => "square_scaled",
            CropMode::FullImage => "full_image",
        }
    }
}

impl fmt::Display for CropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CropMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CropMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown crop mode '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub expand_ratio: f64,
    pub min_side: u32,
    pub mode: CropMode,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            expand_ratio: 1.5,
            min_side: 448,
            mode: CropMode::SquareScaled,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.expand_ratio.is_finite() && self.expand_ratio > 0.0) {
            return Err(GeometryError::InvalidConfig(format!(
                "expand_ratio must be positive, got {}",
                self.expand_ratio
            )));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: CropMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Clamp flags attached to a crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropFlag {
    SideLimitedByImage,
    ShiftedX,
    ShiftedY,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CropFlags {
    pub side_limited_by_image: bool,
    pub shifted_x: bool,
    pub shifted_y: bool,
}

impl CropFlags {
    pub fn to_vec(&self) -> Vec<CropFlag> {
        let mut out = Vec::new();
        if self.side_limited_by_image {
            out.push(CropFlag::SideLimitedByImage);
        }
        if self.shifted_x {
            out.push(CropFlag::ShiftedX);
        }
        if self.shifted_y {
            out.push(CropFlag::ShiftedY);
        }
        out
    }
}

/// The region of the global image that becomes the local view.
///
/// Serializes flat: `{"x1":..,"y1":..,"x2":..,"y2":..,"flags":[..]}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "CropRegionRepr", into = "CropRegionRepr")]
pub struct CropRegion {
    pub region: PixelBox,
    pub flags: CropFlags,
}

#[derive(Serialize, Deserialize)]
struct CropRegionRepr {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
    flags: Vec<CropFlag>,
}

impl From<CropRegion> for CropRegionRepr {
    fn from(c: CropRegion) -> Self {
        Self {
            x1: c.region.x1,
            y1: c.region.y1,
            x2: c.region.x2,
            y2: c.region.y2,
            flags: c.flags.to_vec(),
        }
    }
}

impl From<CropRegionRepr> for CropRegion {
    fn from(r: CropRegionRepr) -> Self {
        Self {
            region: PixelBox {
                x1: r.x1,
                y1: r.y1,
                x2: r.x2,
                y2: r.y2,
            },
            flags: CropFlags {
                side_limited_by_image: r.flags.contains(&CropFlag::SideLimitedByImage),
                shifted_x: r.flags.contains(&CropFlag::ShiftedX),
                shifted_y: r.flags.contains(&CropFlag::ShiftedY),
            },
        }
    }
}

impl CropRegion {
    pub fn full(dims: ImageDims) -> Self {
        Self {
            region: dims.full_box(),
            flags: CropFlags::default(),
        }
    }

    pub fn is_full(&self, dims: ImageDims) -> bool {
        self.region == dims.full_box()
    }
}

/// `ceil(ratio * len)` tolerant of representation error in the product,
/// e.g. `1.1 * 10` must give 11 and not 12.
pub fn scaled_side(ratio: f64, len: u32) -> u32 {
    let product = ratio * len as f64;
    let tol = 1e-9 * product.abs().max(1.0);
    (product - tol).ceil().max(0.0) as u32
}

/// `round(v / 2)` with ties away from zero.
fn half_round_away(v: i64) -> i64 {
    if v % 2 == 0 {
        v / 2
    } else {
        (v + v.signum()) / 2
    }
}

/// Place a span of `side` pixels as close to `center_x2 / 2` as the image
/// allows. Returns the origin and whether clamping moved it.
fn place(center_x2: u64, side: u32, limit: u32) -> (u32, bool) {
    let raw = half_round_away(center_x2 as i64 - side as i64);
    let max_origin = (limit - side) as i64;
    let origin = raw.clamp(0, max_origin);
    // With no slack along this axis the placement is forced, not shifted.
    let shifted = origin != raw && side < limit;
    (origin as u32, shifted)
}

/// Compute the local view for a grounded box.
pub fn compute_crop(
    bbox: &PixelBox,
    dims: ImageDims,
    cfg: &CropConfig,
) -> Result<CropRegion, GeometryError> {
    cfg.validate()?;
    if bbox.x2 <= bbox.x1 || bbox.y2 <= bbox.y1 || !bbox.fits_in(dims) {
        return Err(GeometryError::BoxOutsideImage(*bbox, dims));
    }
    let (ratio, floor) = match cfg.mode {
        CropMode::StrictRect => {
            return Ok(CropRegion {
                region: *bbox,
                flags: CropFlags::default(),
            })
        }
        CropMode::FullImage => return Ok(CropRegion::full(dims)),
        CropMode::Square => (1.0, 0),
        CropMode::SquareScaled => (cfg.expand_ratio, cfg.min_side),
    };

    let side_raw = floor.max(scaled_side(ratio, bbox.longest_side()));
    let side = side_raw.min(dims.width).min(dims.height);
    let (cx, cy) = bbox.center_x2();
    let (sx, shifted_x) = place(cx, side, dims.width);
    let (sy, shifted_y) = place(cy, side, dims.height);
    Ok(CropRegion {
        region: PixelBox {
            x1: sx,
            y1: sy,
            x2: sx + side,
            y2: sy + side,
        },
        flags: CropFlags {
            side_limited_by_image: side < side_raw,
            shifted_x,
            shifted_y,
        },
    })
}

/// Cut the region out of the image without resampling.
pub fn extract_crop(image: &RasterImage, region: &CropRegion) -> Result<RasterImage, GeometryError> {
    let dims = ImageDims::of(image);
    let r = region.region;
    if r.x2 <= r.x1 || r.y2 <= r.y1 || !r.fits_in(dims) {
        return Err(GeometryError::RegionOutsideImage(r, dims));
    }
    if region.is_full(dims) {
        return Ok(image.clone());
    }
    Ok(image::imageops::crop_imm(image, r.x1, r.y1, r.width(), r.height()).to_image())
}

/// Decode a PNG or JPEG file to 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RasterImage, GeometryError> {
    let err = |message: String| GeometryError::ImageLoad {
        path: path.display().to_string(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?;
    let decoded = reader.decode().map_err(|e| err(e.to_string()))?;
    Ok(decoded.to_rgb8())
}
