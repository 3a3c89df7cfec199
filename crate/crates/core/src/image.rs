//! 8-bit RGB patches, PNG io, D4 symmetries, bilinear resize, and the
//! ImageNet normalization that feeds the network.

use crate::error::{Error, Result};
use image::ImageReader;
use std::path::Path;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatch {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<ImagePatch> {
        if width == 0 || height == 0 {
            return Err(Error::Dim(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Dim(format!(
                "{} bytes for a {width}x{height} RGB image (expected {})",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(ImagePatch {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<ImagePatch> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        ImagePatch::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let base = (y * self.width + x) * 3;
        [self.pixels[base], self.pixels[base + 1], self.pixels[base + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let base = (y * self.width + x) * 3;
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: &Path) -> Result<ImagePatch> {
        let reader =
            ImageReader::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let img = reader
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .into_rgb8();
        ImagePatch::new(img.width() as usize, img.height() as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .expect("buffer length matches dimensions");
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        crate::fsutil::atomic_write(path, &bytes)
    }
}

/// The eight symmetries of the square: a horizontal flip (or not) followed
/// by a clockwise rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D4 {
    R0,
    R90,
    R180,
    R270,
    FR0,
    FR90,
    FR180,
    FR270,
}

impl D4 {
    pub const ALL: [D4; 8] = [
        D4::R0,
        D4::R90,
        D4::R180,
        D4::R270,
        D4::FR0,
        D4::FR90,
        D4::FR180,
        D4::FR270,
    ];

    fn parts(self) -> (bool, u8) {
        match self {
            D4::R0 => (false, 0),
            D4::R90 => (false, 1),
            D4::R180 => (false, 2),
            D4::R270 => (false, 3),
            D4::FR0 => (true, 0),
            D4::FR90 => (true, 1),
            D4::FR180 => (true, 2),
            D4::FR270 => (true, 3),
        }
    }
}

/// Apply one symmetry of the square. Rotations are clockwise; r90 maps
/// out[i][j] = in[N-1-j][i].
pub fn d4_transform(img: &ImagePatch, element: D4) -> Result<ImagePatch> {
    let n = img.width();
    if img.height() != n {
        return Err(Error::Contract(format!(
            "d4 on a non-square {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let (flip, quarter_turns) = element.parts();
    let mut current = img.clone();
    if flip {
        let mut out = current.clone();
        for y in 0..n {
            for x in 0..n {
                out.set(x, y, current.get(n - 1 - x, y));
            }
        }
        current = out;
    }
    for _ in 0..quarter_turns {
        let mut out = current.clone();
        for i in 0..n {
            for j in 0..n {
                out.set(j, i, current.get(i, n - 1 - j));
            }
        }
        current = out;
    }
    Ok(current)
}

/// Align-corners bilinear resize with round-to-nearest output intensities.
pub fn resize_bilinear(img: &ImagePatch, out_w: usize, out_h: usize) -> Result<ImagePatch> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Contract(format!(
            "resize target {out_w}x{out_h} must be at least 1x1"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let src_x = |ox: usize| -> f32 {
        if out_w == 1 {
            0.0
        } else {
            ox as f32 * (w - 1) as f32 / (out_w - 1) as f32
        }
    };
    let src_y = |oy: usize| -> f32 {
        if out_h == 1 {
            0.0
        } else {
            oy as f32 * (h - 1) as f32 / (out_h - 1) as f32
        }
    };
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for oy in 0..out_h {
        let sy = src_y(oy);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx = src_x(ox);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            let p00 = img.get(x0, y0);
            let p10 = img.get(x1, y0);
            let p01 = img.get(x0, y1);
            let p11 = img.get(x1, y1);
            for c in 0..3 {
                let top = f32::from(p00[c]) * (1.0 - fx) + f32::from(p10[c]) * fx;
                let bottom = f32::from(p01[c]) * (1.0 - fx) + f32::from(p11[c]) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImagePatch::new(out_w, out_h, pixels)
}

/// Channel-first float image, normalized for the network.
#[derive(Debug, Clone)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    /// Layout [3, height, width].
    pub data: Vec<f32>,
}

/// x = (I/255 - mean_c) / std_c per channel, channel-first output.
pub fn normalize_imagenet(img: &ImagePatch) -> NormalizedImage {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0f32; 3 * h * w];
    let px = img.pixels();
    for c in 0..3 {
        let mean = IMAGENET_MEAN[c];
        let std = IMAGENET_STD[c];
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        for (i, out) in plane.iter_mut().enumerate() {
            *out = (f32::from(px[i * 3 + c]) / 255.0 - mean) / std;
        }
    }
    NormalizedImage {
        width: w,
        height: h,
        data,
    }
}
