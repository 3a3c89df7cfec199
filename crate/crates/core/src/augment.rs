//! Online augmentation stack: color jitter, JPEG artifacts, defocus blur,
//! random affine, D4 symmetry, coarse dropout, black border, plus the seeded
//! pipeline that composes them and hands the network a normalized tensor.
//!
//! Fixed application order: stain -> jitter -> JPEG -> blur -> affine -> D4
//! -> coarse dropout -> black border -> normalize. Every step draws from one
//! per-sample stream derived from (seed, sample index, epoch), so outputs are
//! bit-reproducible regardless of worker scheduling.

use crate::error::{Error, Result};
use crate::image::{d4_transform, normalize_imagenet, ImagePatch, NormalizedImage, D4};
use crate::rng::RngStream;
use crate::stain::{normalize_to_profile, sample_reference, StainParams, StainProfilePool};
use serde::{Deserialize, Serialize};
use serde_json::json;

fn range_ok(r: [f32; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StainAugConfig {
    pub enabled: bool,
    pub prob: f64,
}

impl Default for StainAugConfig {
    fn default() -> Self {
        StainAugConfig {
            enabled: true,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    pub enabled: bool,
    pub prob: f64,
    pub brightness: [f32; 2],
    pub contrast: [f32; 2],
    pub saturation: [f32; 2],
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            enabled: true,
            prob: 0.5,
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [0.8, 1.2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JpegConfig {
    pub enabled: bool,
    pub prob: f64,
    /// Inclusive quality range, 1..=100.
    pub quality: [u8; 2],
}

impl Default for JpegConfig {
    fn default() -> Self {
        JpegConfig {
            enabled: true,
            prob: 0.5,
            quality: [30, 90],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurConfig {
    pub enabled: bool,
    pub prob: f64,
    pub radius_px: [f32; 2],
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig {
            enabled: true,
            prob: 0.5,
            radius_px: [0.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineConfig {
    pub enabled: bool,
    pub prob: f64,
    pub rotate_deg: [f32; 2],
    pub scale: [f32; 2],
    /// Fraction of width/height, drawn independently per axis.
    pub translate_frac: [f32; 2],
    pub shear_deg: [f32; 2],
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig {
            enabled: true,
            prob: 0.5,
            rotate_deg: [-15.0, 15.0],
            scale: [0.9, 1.1],
            translate_frac: [-0.1, 0.1],
            shear_deg: [-5.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct D4Config {
    pub enabled: bool,
    pub prob: f64,
}

impl Default for D4Config {
    fn default() -> Self {
        D4Config {
            enabled: true,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub enabled: bool,
    pub prob: f64,
    /// Inclusive box side-length range in pixels.
    pub box_px: [u32; 2],
    pub max_boxes: u32,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            enabled: true,
            prob: 0.5,
            box_px: [8, 32],
            max_boxes: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BorderConfig {
    pub enabled: bool,
    /// Each of the four sides is blacked out independently with this probability.
    pub per_side_prob: f64,
    pub width_px: [u32; 2],
}

impl Default for BorderConfig {
    fn default() -> Self {
        BorderConfig {
            enabled: true,
            per_side_prob: 0.5,
            width_px: [1, 24],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub stain: StainAugConfig,
    pub jitter: JitterConfig,
    pub jpeg: JpegConfig,
    pub blur: BlurConfig,
    pub affine: AffineConfig,
    pub d4: D4Config,
    pub dropout: DropoutConfig,
    pub border: BorderConfig,
}

impl AugmentConfig {
    /// Everything disabled; the pipeline reduces to plain normalization.
    pub fn disabled() -> Self {
        let mut cfg = AugmentConfig::default();
        cfg.stain.enabled = false;
        cfg.jitter.enabled = false;
        cfg.jpeg.enabled = false;
        cfg.blur.enabled = false;
        cfg.affine.enabled = false;
        cfg.d4.enabled = false;
        cfg.dropout.enabled = false;
        cfg.border.enabled = false;
        cfg
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut prob = |name: &str, p: f64| {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} probability {p} outside [0, 1]"));
            }
        };
        prob("stain", self.stain.prob);
        prob("jitter", self.jitter.prob);
        prob("jpeg", self.jpeg.prob);
        prob("blur", self.blur.prob);
        prob("affine", self.affine.prob);
        prob("d4", self.d4.prob);
        prob("dropout", self.dropout.prob);
        prob("border per-side", self.border.per_side_prob);

        for (name, r) in [
            ("jitter brightness", self.jitter.brightness),
            ("jitter contrast", self.jitter.contrast),
            ("jitter saturation", self.jitter.saturation),
        ] {
            if !range_ok(r) || r[0] < 0.0 {
                out.push(format!("{name} range {r:?} must be non-negative with lo <= hi"));
            }
        }
        if self.jpeg.quality[0] < 1
            || self.jpeg.quality[1] > 100
            || self.jpeg.quality[0] > self.jpeg.quality[1]
        {
            out.push(format!(
                "jpeg quality range {:?} must satisfy 1 <= lo <= hi <= 100",
                self.jpeg.quality
            ));
        }
        if !range_ok(self.blur.radius_px) || self.blur.radius_px[0] < 0.0 {
            out.push(format!(
                "blur radius range {:?} must be non-negative with lo <= hi",
                self.blur.radius_px
            ));
        }
        if !range_ok(self.affine.rotate_deg) {
            out.push(format!("affine rotation range {:?} empty", self.affine.rotate_deg));
        }
        if !range_ok(self.affine.scale) || self.affine.scale[0] <= 0.0 {
            out.push(format!(
                "affine scale range {:?} must be positive with lo <= hi",
                self.affine.scale
            ));
        }
        if !range_ok(self.affine.translate_frac)
            || self.affine.translate_frac[0] < -1.0
            || self.affine.translate_frac[1] > 1.0
        {
            out.push(format!(
                "affine translate range {:?} must lie in [-1, 1]",
                self.affine.translate_frac
            ));
        }
        if !range_ok(self.affine.shear_deg)
            || self.affine.shear_deg[0] <= -90.0
            || self.affine.shear_deg[1] >= 90.0
        {
            out.push(format!(
                "affine shear range {:?} must lie in (-90, 90)",
                self.affine.shear_deg
            ));
        }
        if self.dropout.box_px[0] < 1 || self.dropout.box_px[0] > self.dropout.box_px[1] {
            out.push(format!(
                "dropout box range {:?} must satisfy 1 <= lo <= hi",
                self.dropout.box_px
            ));
        }
        if self.dropout.max_boxes > 2 {
            out.push(format!(
                "dropout max_boxes {} exceeds the limit of 2",
                self.dropout.max_boxes
            ));
        }
        if self.border.width_px[0] < 1 || self.border.width_px[0] > self.border.width_px[1] {
            out.push(format!(
                "border width range {:?} must satisfy 1 <= lo <= hi",
                self.border.width_px
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

/// Brightness, then contrast (pivot mid-gray 128), then saturation
/// (interpolation toward per-pixel luma); one clamp+round at the end.
pub fn apply_jitter(img: &ImagePatch, p: JitterParams) -> ImagePatch {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        let mut v = [0.0f32; 3];
        for c in 0..3 {
            let bright = f32::from(px[c]) * p.brightness;
            v[c] = (bright - 128.0) * p.contrast + 128.0;
        }
        let luma = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        for c in 0..3 {
            let sat = luma + p.saturation * (v[c] - luma);
            px[c] = sat.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn color_jitter(
    img: &ImagePatch,
    stream: &mut RngStream,
    cfg: &JitterConfig,
) -> (ImagePatch, JitterParams) {
    let params = JitterParams {
        brightness: stream.uniform(cfg.brightness[0], cfg.brightness[1]),
        contrast: stream.uniform(cfg.contrast[0], cfg.contrast[1]),
        saturation: stream.uniform(cfg.saturation[0], cfg.saturation[1]),
    };
    (apply_jitter(img, params), params)
}

/// Kernel support of a disk of the given radius: all integer offsets with
/// dx^2 + dy^2 <= r^2.
pub fn disk_offsets(radius: f32) -> Vec<(i32, i32)> {
    let r = radius.max(0.0);
    let reach = r.floor() as i32;
    let mut out = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if (dx * dx + dy * dy) as f32 <= r * r {
                out.push((dx, dy));
            }
        }
    }
    if out.is_empty() {
        out.push((0, 0));
    }
    out
}

/// Normalized disk-kernel convolution with clamp-to-edge boundary handling.
pub fn apply_disk_blur(img: &ImagePatch, radius: f32) -> ImagePatch {
    let offsets = disk_offsets(radius);
    if offsets.len() == 1 {
        return img.clone();
    }
    let (w, h) = (img.width() as i32, img.height() as i32);
    let weight = 1.0 / offsets.len() as f32;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for &(dx, dy) in &offsets {
                let sx = (x + dx).clamp(0, w - 1) as usize;
                let sy = (y + dy).clamp(0, h - 1) as usize;
                let p = img.get(sx, sy);
                for c in 0..3 {
                    acc[c] += f32::from(p[c]);
                }
            }
            out.set(
                x as usize,
                y as usize,
                [
                    (acc[0] * weight).round().clamp(0.0, 255.0) as u8,
                    (acc[1] * weight).round().clamp(0.0, 255.0) as u8,
                    (acc[2] * weight).round().clamp(0.0, 255.0) as u8,
                ],
            );
        }
    }
    out
}

pub fn defocus_blur(
    img: &ImagePatch,
    stream: &mut RngStream,
    cfg: &BlurConfig,
) -> (ImagePatch, f32) {
    let radius = stream.uniform(cfg.radius_px[0], cfg.radius_px[1]);
    (apply_disk_blur(img, radius), radius)
}

/// Annex-K base quantization tables.
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];
const CHROMA_QUANT: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// libjpeg quality scaling: entry = clamp(floor((base*S + 50)/100), 1, 255)
/// with S = 5000/q below 50 else 200 - 2q.
fn scaled_quant(base: &[u16; 64], quality: u8) -> [f32; 64] {
    let q = i64::from(quality.clamp(1, 100));
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0f32; 64];
    for (i, &b) in base.iter().enumerate() {
        let v = (i64::from(b) * s + 50) / 100;
        out[i] = v.clamp(1, 255) as f32;
    }
    out
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut c = [[0.0f32; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let scale = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            let angle = (2.0 * n as f64 + 1.0) * k as f64 * std::f64::consts::PI / 16.0;
            *v = (scale * libm::cos(angle)) as f32;
        }
    }
    c
}

/// One 8x8 block: forward DCT, quantize/dequantize, inverse DCT, in place.
fn jpeg_block(block: &mut [f32; 64], quant: &[f32; 64], basis: &[[f32; 8]; 8]) {
    let mut tmp = [0.0f32; 64];
    // coef = C * X * C^T
    for k in 0..8 {
        for n in 0..8 {
            let mut acc = 0.0f32;
            for m in 0..8 {
                acc += basis[k][m] * block[m * 8 + n];
            }
            tmp[k * 8 + n] = acc;
        }
    }
    let mut coef = [0.0f32; 64];
    for k in 0..8 {
        for l in 0..8 {
            let mut acc = 0.0f32;
            for n in 0..8 {
                acc += tmp[k * 8 + n] * basis[l][n];
            }
            let q = quant[k * 8 + l];
            coef[k * 8 + l] = (acc / q).round() * q;
        }
    }
    // X = C^T * coef * C
    for m in 0..8 {
        for l in 0..8 {
            let mut acc = 0.0f32;
            for k in 0..8 {
                acc += basis[k][m] * coef[k * 8 + l];
            }
            tmp[m * 8 + l] = acc;
        }
    }
    for m in 0..8 {
        for n in 0..8 {
            let mut acc = 0.0f32;
            for l in 0..8 {
                acc += tmp[m * 8 + l] * basis[l][n];
            }
            block[m * 8 + n] = acc;
        }
    }
}

/// In-memory JPEG round trip: full-range YCbCr, 8x8 block DCT quantization
/// with Annex-K tables at the given quality, no chroma subsampling, one final
/// clamp+round back to RGB.
pub fn apply_jpeg(img: &ImagePatch, quality: u8) -> ImagePatch {
    let (w, h) = (img.width(), img.height());
    let w8 = w.div_ceil(8) * 8;
    let h8 = h.div_ceil(8) * 8;
    let mut planes = vec![vec![0.0f32; w8 * h8]; 3];
    for y in 0..h8 {
        for x in 0..w8 {
            let p = img.get(x.min(w - 1), y.min(h - 1));
            let r = f32::from(p[0]);
            let g = f32::from(p[1]);
            let b = f32::from(p[2]);
            planes[0][y * w8 + x] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][y * w8 + x] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            planes[2][y * w8 + x] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
        }
    }

    let basis = dct_basis();
    let luma = scaled_quant(&LUMA_QUANT, quality);
    let chroma = scaled_quant(&CHROMA_QUANT, quality);
    for (pi, plane) in planes.iter_mut().enumerate() {
        let quant = if pi == 0 { &luma } else { &chroma };
        for by in (0..h8).step_by(8) {
            for bx in (0..w8).step_by(8) {
                let mut block = [0.0f32; 64];
                for r in 0..8 {
                    for c in 0..8 {
                        block[r * 8 + c] = plane[(by + r) * w8 + bx + c] - 128.0;
                    }
                }
                jpeg_block(&mut block, quant, &basis);
                for r in 0..8 {
                    for c in 0..8 {
                        plane[(by + r) * w8 + bx + c] = block[r * 8 + c] + 128.0;
                    }
                }
            }
        }
    }

    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let yv = planes[0][y * w8 + x];
            let cb = planes[1][y * w8 + x] - 128.0;
            let cr = planes[2][y * w8 + x] - 128.0;
            let r = yv + 1.402 * cr;
            let g = yv - 0.344_136 * cb - 0.714_136 * cr;
            let b = yv + 1.772 * cb;
            out.set(
                x,
                y,
                [
                    r.round().clamp(0.0, 255.0) as u8,
                    g.round().clamp(0.0, 255.0) as u8,
                    b.round().clamp(0.0, 255.0) as u8,
                ],
            );
        }
    }
    out
}

pub fn jpeg_artifact(
    img: &ImagePatch,
    stream: &mut RngStream,
    cfg: &JpegConfig,
) -> (ImagePatch, u8) {
    let quality = stream.uniform_i64(i64::from(cfg.quality[0]), i64::from(cfg.quality[1])) as u8;
    (apply_jpeg(img, quality), quality)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AffineParams {
    pub rotate_deg: f32,
    pub scale: f32,
    /// Pixel offsets (x, y).
    pub translate_px: [f32; 2],
    pub shear_deg: f32,
}

/// Inverse-mapped bilinear affine warp about the image center; samples
/// falling outside the source are filled with 0 (black). Positive rotation
/// is clockwise in (x right, y down) coordinates, so 90 degrees matches the
/// d4 r90 element.
pub fn apply_affine(img: &ImagePatch, p: AffineParams) -> ImagePatch {
    let (w, h) = (img.width(), img.height());
    let theta = f64::from(p.rotate_deg).to_radians();
    let phi = f64::from(p.shear_deg).to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let tan = libm::tan(phi);
    let s = f64::from(p.scale);
    // Forward map: A = R(theta) * diag(s) * Shear_x(phi).
    let a00 = cos * s;
    let a01 = cos * s * tan - sin * s;
    let a10 = sin * s;
    let a11 = sin * s * tan + cos * s;
    let det = a00 * a11 - a01 * a10;
    let (i00, i01, i10, i11) = (a11 / det, -a01 / det, -a10 / det, a00 / det);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut out = ImagePatch::filled(w, h, [0, 0, 0]).expect("same dims");
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f64 - cx - f64::from(p.translate_px[0]);
            let dy = oy as f64 - cy - f64::from(p.translate_px[1]);
            let sx = i00 * dx + i01 * dy + cx;
            let sy = i10 * dx + i11 * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let mut acc = [0.0f32; 3];
            for (tx, ty, wt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ] {
                if tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h {
                    let px = img.get(tx as usize, ty as usize);
                    for c in 0..3 {
                        acc[c] += wt * f32::from(px[c]);
                    }
                }
            }
            out.set(
                ox,
                oy,
                [
                    acc[0].round().clamp(0.0, 255.0) as u8,
                    acc[1].round().clamp(0.0, 255.0) as u8,
                    acc[2].round().clamp(0.0, 255.0) as u8,
                ],
            );
        }
    }
    out
}

pub fn random_affine(
    img: &ImagePatch,
    stream: &mut RngStream,
    cfg: &AffineConfig,
) -> (ImagePatch, AffineParams) {
    let params = AffineParams {
        rotate_deg: stream.uniform(cfg.rotate_deg[0], cfg.rotate_deg[1]),
        scale: stream.uniform(cfg.scale[0], cfg.scale[1]),
        translate_px: [
            stream.uniform(cfg.translate_frac[0], cfg.translate_frac[1]) * img.width() as f32,
            stream.uniform(cfg.translate_frac[0], cfg.translate_frac[1]) * img.height() as f32,
        ],
        shear_deg: stream.uniform(cfg.shear_deg[0], cfg.shear_deg[1]),
    };
    (apply_affine(img, params), params)
}

/// (x0, y0, width, height) before clipping to the image bounds.
pub type BoxRegion = [usize; 4];

/// Zero out the given boxes, clipped to bounds.
pub fn fill_boxes(img: &ImagePatch, boxes: &[BoxRegion]) -> ImagePatch {
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    for &[x0, y0, bw, bh] in boxes {
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                out.set(x, y, [0, 0, 0]);
            }
        }
    }
    out
}

/// n ~ uniform{0..=max_boxes} boxes with sides from the configured range.
/// Draw order per box: width, height, x0, y0.
pub fn coarse_dropout(
    img: &ImagePatch,
    stream: &mut RngStream,
    cfg: &DropoutConfig,
) -> (ImagePatch, Vec<BoxRegion>) {
    let n = stream.below(cfg.max_boxes as usize + 1);
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let bw = stream.uniform_i64(i64::from(cfg.box_px[0]), i64::from(cfg.box_px[1])) as usize;
        let bh = stream.uniform_i64(i64::from(cfg.box_px[0]), i64::from(cfg.box_px[1])) as usize;
        let x0 = stream.below(img.width());
        let y0 = stream.below(img.height());
        boxes.push([x0, y0, bw, bh]);
    }
    (fill_boxes(img, &boxes), boxes)
}

/// Widths for (left, right, top, bottom); 0 means the side stays untouched.
pub type BorderWidths = [usize; 4];

pub fn fill_border(img: &ImagePatch, widths: BorderWidths) -> ImagePatch {
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    let [left, right, top, bottom] = widths;
    for y in 0..h {
        for x in 0..w {
            if x < left || x >= w.saturating_sub(right) || y < top || y >= h.saturating_sub(bottom)
            {
                out.set(x, y, [0, 0, 0]);
            }
        }
    }
    out
}

/// Each side (left, right, top, bottom order) is blacked out independently
/// with cfg.per_side_prob at a width sampled from the configured range.
pub fn black_border(
    img: &ImagePatch,
    stream: &mut RngStream,
    cfg: &BorderConfig,
) -> (ImagePatch, BorderWidths) {
    let mut widths = [0usize; 4];
    for w in &mut widths {
        if stream.chance(cfg.per_side_prob) {
            *w = stream.uniform_i64(i64::from(cfg.width_px[0]), i64::from(cfg.width_px[1]))
                as usize;
        }
    }
    (fill_border(img, widths), widths)
}

/// One pipeline step as recorded for the preview sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub name: &'static str,
    pub applied: bool,
    pub params: serde_json::Value,
}

pub type AugmentTrace = Vec<TraceStep>;

/// The composed per-sample transform. Pure given (sample, epoch); safe to
/// call from parallel workers.
#[derive(Debug, Clone)]
pub struct AugmentPipeline {
    cfg: AugmentConfig,
    pool: Option<StainProfilePool>,
    stain_params: StainParams,
    seed: u64,
}

pub fn build_pipeline(
    cfg: AugmentConfig,
    pool: Option<StainProfilePool>,
    seed: u64,
) -> Result<AugmentPipeline> {
    let mut problems = cfg.problems();
    if cfg.stain.enabled && pool.as_ref().is_none_or(StainProfilePool::is_empty) {
        problems.push("stain augmentation enabled but no stain profile pool provided".into());
    }
    if let Some(p) = &pool {
        if let Err(e) = p.validate() {
            problems.push(e.to_string());
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    Ok(AugmentPipeline {
        cfg,
        pool,
        stain_params: StainParams::default(),
        seed,
    })
}

impl AugmentPipeline {
    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    /// Augment one image. Also returns the 8-bit image right before
    /// normalization, for contact sheets.
    pub fn augment_with_preview(
        &self,
        img: &ImagePatch,
        sample: u64,
        epoch: u64,
    ) -> Result<(NormalizedImage, ImagePatch, AugmentTrace)> {
        let mut stream = RngStream::new(self.seed, "augment", sample, epoch);
        let mut trace = Vec::new();
        let mut cur = img.clone();

        if self.cfg.stain.enabled {
            let applied = stream.chance(self.cfg.stain.prob);
            let mut params = json!(null);
            if applied {
                let pool = self.pool.as_ref().expect("validated at build");
                let (domain, target) = sample_reference(pool, &mut stream)?;
                match normalize_to_profile(&cur, &target, &self.stain_params) {
                    Ok(next) => {
                        cur = next;
                        params = json!({
                            "domain": domain,
                            "n_references": target.n_references,
                            "fallback": false,
                        });
                    }
                    Err(Error::Degenerate(msg)) | Err(Error::Numeric(msg)) => {
                        log::warn!("stain augmentation fell back to identity: {msg}");
                        params = json!({ "domain": domain, "fallback": true });
                    }
                    Err(e) => return Err(e),
                }
            }
            trace.push(TraceStep {
                name: "stain",
                applied,
                params,
            });
        }

        if self.cfg.jitter.enabled {
            let applied = stream.chance(self.cfg.jitter.prob);
            let mut params = json!(null);
            if applied {
                let (next, p) = color_jitter(&cur, &mut stream, &self.cfg.jitter);
                cur = next;
                params = serde_json::to_value(p).expect("serializable");
            }
            trace.push(TraceStep {
                name: "jitter",
                applied,
                params,
            });
        }

        if self.cfg.jpeg.enabled {
            let applied = stream.chance(self.cfg.jpeg.prob);
            let mut params = json!(null);
            if applied {
                let (next, quality) = jpeg_artifact(&cur, &mut stream, &self.cfg.jpeg);
                cur = next;
                params = json!({ "quality": quality });
            }
            trace.push(TraceStep {
                name: "jpeg",
                applied,
                params,
            });
        }

        if self.cfg.blur.enabled {
            let applied = stream.chance(self.cfg.blur.prob);
            let mut params = json!(null);
            if applied {
                let (next, radius) = defocus_blur(&cur, &mut stream, &self.cfg.blur);
                cur = next;
                params = json!({ "radius_px": radius });
            }
            trace.push(TraceStep {
                name: "blur",
                applied,
                params,
            });
        }

        if self.cfg.affine.enabled {
            let applied = stream.chance(self.cfg.affine.prob);
            let mut params = json!(null);
            if applied {
                let (next, p) = random_affine(&cur, &mut stream, &self.cfg.affine);
                cur = next;
                params = serde_json::to_value(p).expect("serializable");
            }
            trace.push(TraceStep {
                name: "affine",
                applied,
                params,
            });
        }

        if self.cfg.d4.enabled {
            let applied = stream.chance(self.cfg.d4.prob);
            let mut params = json!(null);
            if applied {
                let element = D4::ALL[stream.below(8)];
                cur = d4_transform(&cur, element)?;
                params = json!({ "element": format!("{element:?}") });
            }
            trace.push(TraceStep {
                name: "d4",
                applied,
                params,
            });
        }

        if self.cfg.dropout.enabled {
            let applied = stream.chance(self.cfg.dropout.prob);
            let mut params = json!(null);
            if applied {
                let (next, boxes) = coarse_dropout(&cur, &mut stream, &self.cfg.dropout);
                cur = next;
                params = json!({ "boxes": boxes });
            }
            trace.push(TraceStep {
                name: "dropout",
                applied,
                params,
            });
        }

        if self.cfg.border.enabled {
            let (next, widths) = black_border(&cur, &mut stream, &self.cfg.border);
            cur = next;
            trace.push(TraceStep {
                name: "border",
                applied: widths.iter().any(|&w| w > 0),
                params: json!({ "widths": widths }),
            });
        }

        Ok((normalize_imagenet(&cur), cur, trace))
    }

    pub fn augment(
        &self,
        img: &ImagePatch,
        sample: u64,
        epoch: u64,
    ) -> Result<(NormalizedImage, AugmentTrace)> {
        let (norm, _, trace) = self.augment_with_preview(img, sample, epoch)?;
        Ok((norm, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stain::testutil::{beer_lambert_image, RUIFROK_HE};
    use crate::stain::{fit_profile, StainProfilePool};

    fn textured(side: usize, seed: u64) -> ImagePatch {
        let mut stream = RngStream::for_purpose(seed, "texture");
        let mut img = ImagePatch::filled(side, side, [0, 0, 0]).unwrap();
        // Smooth gradients plus mild noise: natural-statistics stand-in.
        for y in 0..side {
            for x in 0..side {
                let base = [
                    180.0 - 0.3 * x as f32 - 0.2 * y as f32,
                    120.0 + 0.25 * x as f32,
                    160.0 + 0.15 * y as f32,
                ];
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let noise = stream.uniform(-6.0, 6.0);
                    px[c] = (base[c] + noise).round().clamp(0.0, 255.0) as u8;
                }
                img.set(x, y, px);
            }
        }
        img
    }

    fn psnr(a: &ImagePatch, b: &ImagePatch) -> f64 {
        let mse: f64 = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| {
                let d = f64::from(*x) - f64::from(*y);
                d * d
            })
            .sum::<f64>()
            / a.pixels().len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (255.0f64 * 255.0 / mse).log10()
        }
    }

    #[test]
    fn jitter_identity_clamp_and_gray() {
        let img = textured(16, 1);
        let identity = apply_jitter(
            &img,
            JitterParams {
                brightness: 1.0,
                contrast: 1.0,
                saturation: 1.0,
            },
        );
        assert_eq!(identity, img);

        let bright = apply_jitter(
            &ImagePatch::filled(2, 2, [128, 128, 128]).unwrap(),
            JitterParams {
                brightness: 2.0,
                contrast: 1.0,
                saturation: 1.0,
            },
        );
        assert!(bright.pixels().iter().all(|&v| v == 255));

        let gray = apply_jitter(
            &img,
            JitterParams {
                brightness: 1.0,
                contrast: 1.0,
                saturation: 0.0,
            },
        );
        for (i, px) in gray.pixels().chunks(3).enumerate() {
            assert_eq!(px[0], px[1], "pixel {i}");
            assert_eq!(px[1], px[2], "pixel {i}");
            let src = img.get(i % 16, i / 16);
            let luma = 0.299 * f32::from(src[0])
                + 0.587 * f32::from(src[1])
                + 0.114 * f32::from(src[2]);
            assert_eq!(px[0], luma.round() as u8, "pixel {i}");
        }
    }

    #[test]
    fn jitter_samples_within_ranges() {
        let img = textured(8, 2);
        let cfg = JitterConfig::default();
        let mut stream = RngStream::for_purpose(3, "jit");
        for _ in 0..50 {
            let (_, p) = color_jitter(&img, &mut stream, &cfg);
            assert!(p.brightness >= 0.8 && p.brightness <= 1.2);
            assert!(p.contrast >= 0.8 && p.contrast <= 1.2);
            assert!(p.saturation >= 0.8 && p.saturation <= 1.2);
        }
    }

    #[test]
    fn blur_identity_constant_and_impulse_support() {
        let img = textured(16, 4);
        assert_eq!(apply_disk_blur(&img, 0.0), img);
        assert_eq!(apply_disk_blur(&img, 0.99), img);

        let flat = ImagePatch::filled(16, 16, [90, 140, 20]).unwrap();
        assert_eq!(apply_disk_blur(&flat, 2.5), flat);

        let mut impulse = ImagePatch::filled(17, 17, [0, 0, 0]).unwrap();
        impulse.set(8, 8, [255, 255, 255]);
        let blurred = apply_disk_blur(&impulse, 2.5);
        for y in 0..17i32 {
            for x in 0..17i32 {
                let inside = ((x - 8).pow(2) + (y - 8).pow(2)) as f32 <= 2.5 * 2.5;
                let lit = blurred.get(x as usize, y as usize)[0] > 0;
                assert_eq!(lit, inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn blur_radius_sampled_from_range() {
        let img = textured(8, 5);
        let cfg = BlurConfig::default();
        let mut stream = RngStream::for_purpose(6, "blur");
        for _ in 0..20 {
            let (out, r) = defocus_blur(&img, &mut stream, &cfg);
            assert!((0.0..=3.0).contains(&r));
            assert_eq!((out.width(), out.height()), (8, 8));
        }
    }

    #[test]
    fn jpeg_quality_extremes_and_monotonicity() {
        let img = textured(32, 7);
        let q100 = apply_jpeg(&img, 100);
        assert_eq!((q100.width(), q100.height()), (32, 32));
        assert!(psnr(&img, &q100) >= 40.0, "q100 PSNR {}", psnr(&img, &q100));

        let q10 = apply_jpeg(&img, 10);
        let q90 = apply_jpeg(&img, 90);
        assert!(
            psnr(&img, &q10) < psnr(&img, &q90),
            "q10 {} vs q90 {}",
            psnr(&img, &q10),
            psnr(&img, &q90)
        );

        let twice = apply_jpeg(&q100, 100);
        assert!(psnr(&q100, &twice) >= 45.0, "idempotence PSNR {}", psnr(&q100, &twice));
    }

    #[test]
    fn jpeg_handles_non_multiple_of_8_sizes() {
        let img = {
            let mut stream = RngStream::for_purpose(8, "pad");
            let pixels = (0..13 * 9 * 3)
                .map(|_| stream.below(256) as u8)
                .collect();
            ImagePatch::new(13, 9, pixels).unwrap()
        };
        let out = apply_jpeg(&img, 75);
        assert_eq!((out.width(), out.height()), (13, 9));
    }

    #[test]
    fn dropout_boxes_zero_inside_untouched_outside() {
        let img = ImagePatch::filled(64, 64, [200, 150, 100]).unwrap();
        let cfg = DropoutConfig::default();
        let mut stream = RngStream::for_purpose(9, "drop");
        let mut saw_zero = false;
        let mut saw_two = false;
        for _ in 0..40 {
            let (out, boxes) = coarse_dropout(&img, &mut stream, &cfg);
            assert!(boxes.len() <= 2);
            saw_zero |= boxes.is_empty();
            saw_two |= boxes.len() == 2;
            if boxes.is_empty() {
                assert_eq!(out, img);
            }
            let mut zeros = 0usize;
            for y in 0..64 {
                for x in 0..64 {
                    let in_box = boxes.iter().any(|&[x0, y0, bw, bh]| {
                        x >= x0 && x < x0 + bw && y >= y0 && y < y0 + bh
                    });
                    let px = out.get(x, y);
                    if in_box {
                        assert_eq!(px, [0, 0, 0], "({x},{y}) inside a box");
                        zeros += 1;
                    } else {
                        assert_eq!(px, [200, 150, 100], "({x},{y}) outside all boxes");
                    }
                }
            }
            assert!(zeros <= 2 * 32 * 32, "boxes cover {zeros} pixels");
            for &[_, _, bw, bh] in &boxes {
                assert!((8..=32).contains(&bw) && (8..=32).contains(&bh));
            }
        }
        assert!(saw_zero && saw_two, "box-count draws never hit 0 and 2");
    }

    #[test]
    fn border_widths_and_interior() {
        let img = ImagePatch::filled(64, 64, [255, 255, 255]).unwrap();
        assert_eq!(fill_border(&img, [0, 0, 0, 0]), img);

        let out = fill_border(&img, [3, 1, 5, 2]);
        for y in 0..64 {
            for x in 0..64 {
                let expect_black = x < 3 || x >= 63 || y < 5 || y >= 62;
                let black = out.get(x, y) == [0, 0, 0];
                assert_eq!(black, expect_black, "({x},{y})");
            }
        }

        let mut always = BorderConfig::default();
        always.per_side_prob = 1.0;
        let mut stream = RngStream::for_purpose(10, "border");
        let (_, widths) = black_border(&img, &mut stream, &always);
        assert!(widths.iter().all(|&w| (1..=24).contains(&w)));

        let mut never = BorderConfig::default();
        never.per_side_prob = 0.0;
        let (out, widths) = black_border(&img, &mut stream, &never);
        assert_eq!(widths, [0, 0, 0, 0]);
        assert_eq!(out, img);
    }

    #[test]
    fn affine_identity_is_bitwise() {
        let img = textured(32, 11);
        let out = apply_affine(
            &img,
            AffineParams {
                rotate_deg: 0.0,
                scale: 1.0,
                translate_px: [0.0, 0.0],
                shear_deg: 0.0,
            },
        );
        assert_eq!(out, img);

        let mut zero = AffineConfig::default();
        zero.rotate_deg = [0.0, 0.0];
        zero.scale = [1.0, 1.0];
        zero.translate_frac = [0.0, 0.0];
        zero.shear_deg = [0.0, 0.0];
        let mut stream = RngStream::for_purpose(12, "aff");
        let (out, _) = random_affine(&img, &mut stream, &zero);
        assert_eq!(out, img);
    }

    #[test]
    fn affine_quarter_turn_matches_d4() {
        let img = textured(32, 13);
        let rotated = apply_affine(
            &img,
            AffineParams {
                rotate_deg: 90.0,
                scale: 1.0,
                translate_px: [0.0, 0.0],
                shear_deg: 0.0,
            },
        );
        let d4 = d4_transform(&img, D4::R90).unwrap();
        for (a, b) in rotated.pixels().iter().zip(d4.pixels()) {
            assert!((i16::from(*a) - i16::from(*b)).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn config_validation_reports_every_problem() {
        assert!(AugmentConfig::default().validate().is_ok());
        let mut cfg = AugmentConfig::default();
        cfg.jitter.prob = 1.5;
        cfg.jpeg.quality = [0, 120];
        cfg.dropout.max_boxes = 5;
        let err = cfg.validate().unwrap_err();
        assert!(err.is_validation());
        let msg = err.to_string();
        assert!(msg.contains("jitter probability"), "{msg}");
        assert!(msg.contains("jpeg quality"), "{msg}");
        assert!(msg.contains("max_boxes"), "{msg}");
    }

    #[test]
    fn pipeline_disabled_equals_plain_normalize() {
        let img = textured(32, 14);
        let pipe = build_pipeline(AugmentConfig::disabled(), None, 5).unwrap();
        let (norm, trace) = pipe.augment(&img, 0, 0).unwrap();
        assert!(trace.is_empty());
        assert_eq!(norm.data, normalize_imagenet(&img).data);
    }

    #[test]
    fn pipeline_requires_pool_when_stain_enabled() {
        let err = build_pipeline(AugmentConfig::default(), None, 5).unwrap_err();
        assert!(err.to_string().contains("stain"), "{err}");
        assert!(err.is_validation());
    }

    fn stain_pool(seed: u64) -> StainProfilePool {
        let mut stream = RngStream::for_purpose(seed, "pool");
        let mut pool = StainProfilePool::new();
        for (i, domain) in ["lab-a", "lab-b"].iter().enumerate() {
            let mut s = RUIFROK_HE;
            s[2][0] += 0.07 * i as f32;
            for _ in 0..2 {
                let img = beer_lambert_image(&s, 48, &mut stream);
                pool.insert(fit_profile(&img, domain, &StainParams::default()).unwrap());
            }
        }
        pool
    }

    #[test]
    fn pipeline_is_deterministic_per_key() {
        let mut stream = RngStream::for_purpose(15, "det");
        let img = beer_lambert_image(&RUIFROK_HE, 32, &mut stream);
        let pipe = build_pipeline(AugmentConfig::default(), Some(stain_pool(16)), 99).unwrap();
        let (a, trace_a) = pipe.augment(&img, 7, 3).unwrap();
        let (b, trace_b) = pipe.augment(&img, 7, 3).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(
            serde_json::to_string(&trace_a).unwrap(),
            serde_json::to_string(&trace_b).unwrap()
        );
        let (c, _) = pipe.augment(&img, 8, 3).unwrap();
        assert_ne!(a.data, c.data, "different samples should diverge");
    }

    #[test]
    fn pipeline_separates_epochs() {
        let mut stream = RngStream::for_purpose(17, "sep");
        // 64x64: large enough that the border augmentation cannot black out
        // the whole image, which would alias otherwise-distinct draws.
        let img = beer_lambert_image(&RUIFROK_HE, 64, &mut stream);
        let mut cfg = AugmentConfig::default();
        cfg.stain.enabled = false;
        cfg.jpeg.enabled = false; // keep the 1000-sample sweep fast
        let pipe = build_pipeline(cfg, None, 123).unwrap();
        let mut collisions = 0;
        for sample in 0..1000 {
            let (e0, _) = pipe.augment(&img, sample, 0).unwrap();
            let (e1, _) = pipe.augment(&img, sample, 1).unwrap();
            if e0.data == e1.data {
                collisions += 1;
            }
        }
        // Both epochs drawing an effective identity for every transform has
        // probability ~1.5e-5 per sample.
        assert!(collisions <= 5, "{collisions} identical of 1000");
    }

    #[test]
    fn pipeline_trace_records_every_enabled_step() {
        let mut stream = RngStream::for_purpose(19, "trace");
        let img = beer_lambert_image(&RUIFROK_HE, 32, &mut stream);
        let pipe = build_pipeline(AugmentConfig::default(), Some(stain_pool(20)), 7).unwrap();
        let (_, preview, trace) = pipe.augment_with_preview(&img, 0, 0).unwrap();
        let names: Vec<&str> = trace.iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            vec!["stain", "jitter", "jpeg", "blur", "affine", "d4", "dropout", "border"]
        );
        assert_eq!((preview.width(), preview.height()), (32, 32));
        for step in &trace {
            if step.applied {
                assert!(!step.params.is_null(), "{} applied without params", step.name);
            }
        }
    }

    #[test]
    fn pipeline_preserves_dimensions_across_draws() {
        let mut stream = RngStream::for_purpose(21, "dims");
        let img = beer_lambert_image(&RUIFROK_HE, 24, &mut stream);
        let pipe = build_pipeline(AugmentConfig::default(), Some(stain_pool(22)), 3).unwrap();
        for sample in 0..20 {
            let (norm, preview, _) = pipe.augment_with_preview(&img, sample, 0).unwrap();
            assert_eq!((preview.width(), preview.height()), (24, 24));
            assert_eq!(norm.data.len(), 3 * 24 * 24);
        }
    }
}
