//! Macenko stain-matrix estimation, concentration unmixing, stain
//! normalization/transfer, and multi-reference domain profiles.
//!
//! Optical density uses log base 10 with I0 = 255 and a floor at I = 1.
//! Stain matrices are 3x2 (rows R,G,B; columns hematoxylin, eosin) with
//! unit-norm non-negative columns, hematoxylin first (larger blue OD).

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Rows are R,G,B; columns are (hematoxylin, eosin).
pub type StainMatrix = [[f32; 2]; 3];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StainParams {
    /// OD L2-norm threshold separating tissue from background.
    pub od_threshold: f32,
    /// Extreme-direction quantile in percent (uses p and 100-p).
    pub angle_percentile: f32,
}

impl Default for StainParams {
    fn default() -> Self {
        StainParams {
            od_threshold: 0.15,
            angle_percentile: 1.0,
        }
    }
}

impl StainParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.od_threshold > 0.0) {
            problems.push(format!("od_threshold must be > 0, got {}", self.od_threshold));
        }
        if !(self.angle_percentile > 0.0 && self.angle_percentile < 50.0) {
            problems.push(format!(
                "angle_percentile must be in (0, 50), got {}",
                self.angle_percentile
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Reference stain appearance of one image or an aggregate of several.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StainProfile {
    pub domain: String,
    /// 3x2, rows R,G,B as [[h_r,e_r],[h_g,e_g],[h_b,e_b]].
    pub stain_matrix: StainMatrix,
    /// 99th-percentile concentration per stain (hematoxylin, eosin).
    pub max_conc: [f32; 2],
    pub n_references: u32,
}

impl StainProfile {
    pub fn validate(&self) -> Result<()> {
        if self.domain.is_empty() {
            return Err(Error::Contract("stain profile has an empty domain".into()));
        }
        for col in 0..2 {
            let mut sq = 0.0f64;
            for row in 0..3 {
                let v = self.stain_matrix[row][col];
                if v < 0.0 {
                    return Err(Error::Contract(format!(
                        "stain matrix entry [{row}][{col}] = {v} is negative"
                    )));
                }
                sq += f64::from(v) * f64::from(v);
            }
            if (sq.sqrt() - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "stain column {col} has norm {:.6}, expected 1",
                    sq.sqrt()
                )));
            }
        }
        if !(self.max_conc[0] > 0.0 && self.max_conc[1] > 0.0) {
            return Err(Error::Contract(format!(
                "max_conc must be positive, got {:?}",
                self.max_conc
            )));
        }
        if self.n_references == 0 {
            return Err(Error::Contract("n_references must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-domain lists of reference profiles.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StainProfilePool {
    pub domains: BTreeMap<String, Vec<StainProfile>>,
}

impl StainProfilePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, profile: StainProfile) {
        self.domains
            .entry(profile.domain.clone())
            .or_default()
            .push(profile);
    }

    pub fn is_empty(&self) -> bool {
        self.domains.values().all(Vec::is_empty)
    }

    pub fn validate(&self) -> Result<()> {
        for (domain, profiles) in &self.domains {
            if domain.is_empty() {
                return Err(Error::Contract("pool has an empty domain key".into()));
            }
            for p in profiles {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("pool encode: {e}")))?;
        crate::fsutil::atomic_write(path, &bytes)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let pool: StainProfilePool = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        pool.validate()?;
        Ok(pool)
    }
}

/// OD = -log10(max(I,1)/255) per channel; one [r,g,b] triple per pixel.
pub fn rgb_to_od(img: &ImagePatch) -> Vec<[f32; 3]> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| {
            let mut od = [0.0f32; 3];
            for c in 0..3 {
                let i = f32::from(p[c].max(1));
                od[c] = -libm::log10f(i / 255.0);
            }
            od
        })
        .collect()
}

/// I = round(255 * 10^(-OD)) clamped to [0, 255].
pub fn od_to_rgb(od: &[[f32; 3]], width: usize, height: usize) -> Result<ImagePatch> {
    if od.len() != width * height {
        return Err(Error::Dim(format!(
            "{} OD pixels for a {width}x{height} image",
            od.len()
        )));
    }
    let mut pixels = Vec::with_capacity(od.len() * 3);
    for p in od {
        for c in 0..3 {
            let i = 255.0 * libm::powf(10.0, -p[c]);
            pixels.push(i.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImagePatch::new(width, height, pixels)
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues (descending) and matching unit eigenvectors as columns.
pub fn jacobi_eigen_3x3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for _ in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off <= 1e-14 * scale {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() <= 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            let tau = s / (1.0 + c);
            let apq = a[p][q];
            a[p][p] -= t * apq;
            a[q][q] += t * apq;
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            for r in 0..3 {
                if r != p && r != q {
                    let arp = a[r][p];
                    let arq = a[r][q];
                    a[r][p] = arp - s * (arq + tau * arp);
                    a[p][r] = a[r][p];
                    a[r][q] = arq + s * (arp - tau * arq);
                    a[q][r] = a[r][q];
                }
            }
            for row in &mut v {
                let vrp = row[p];
                let vrq = row[q];
                row[p] = vrp - s * (vrq + tau * vrp);
                row[q] = vrq + s * (vrp - tau * vrq);
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut vecs = [[0.0; 3]; 3];
    for (k, &src) in order.iter().enumerate() {
        for r in 0..3 {
            vecs[r][k] = v[r][src];
        }
    }
    (vals, vecs)
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Linear-interpolation percentile of a sorted slice; p in [0, 100].
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn tissue_od(img: &ImagePatch, od_threshold: f32) -> (Vec<[f32; 3]>, usize) {
    let od = rgb_to_od(img);
    let total = od.len();
    let tissue: Vec<[f32; 3]> = od
        .into_iter()
        .filter(|p| {
            let sq = p.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>();
            sq.sqrt() > f64::from(od_threshold)
        })
        .collect();
    (tissue, total)
}

/// Estimate the 3x2 stain matrix of an H&E image by the Macenko method:
/// tissue OD pixels are projected onto the top-2 eigenvector plane of their
/// covariance and the extreme angular directions become the stain vectors.
pub fn estimate_stain_matrix(img: &ImagePatch, params: &StainParams) -> Result<StainMatrix> {
    params.validate()?;
    let (tissue, total) = tissue_od(img, params.od_threshold);
    if tissue.len() * 200 < total || tissue.len() < 16 {
        return Err(Error::Degenerate(format!(
            "insufficient tissue: {} of {} pixels above OD threshold {}",
            tissue.len(),
            total,
            params.od_threshold
        )));
    }

    let mut mean = [0.0f64; 3];
    for p in &tissue {
        for c in 0..3 {
            mean[c] += f64::from(p[c]);
        }
    }
    for m in &mut mean {
        *m /= tissue.len() as f64;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for p in &tissue {
        let d = [
            f64::from(p[0]) - mean[0],
            f64::from(p[1]) - mean[1],
            f64::from(p[2]) - mean[2],
        ];
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= tissue.len() as f64;
        }
    }

    let (vals, vecs) = jacobi_eigen_3x3(cov);
    // The second eigenvalue of a genuine two-stain cloud carries a sizable
    // share of the variance; quantization noise alone stays well below 1e-4.
    if vals[0] <= 1e-12 || vals[1] <= 1e-4 * vals[0] {
        return Err(Error::Degenerate(format!(
            "OD cloud is rank-deficient (eigenvalues {:.3e}, {:.3e}): single stain direction",
            vals[0], vals[1]
        )));
    }
    let mut e1 = [vecs[0][0], vecs[1][0], vecs[2][0]];
    let e2 = [vecs[0][1], vecs[1][1], vecs[2][1]];
    // Point e1 at the tissue cloud so projection angles stay in (-pi/2, pi/2).
    if dot3(mean, e1) < 0.0 {
        for v in &mut e1 {
            *v = -*v;
        }
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|p| {
            let od = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
            libm::atan2(dot3(od, e2), dot3(od, e1))
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p = f64::from(params.angle_percentile);
    let lo = percentile_sorted(&angles, p);
    let hi = percentile_sorted(&angles, 100.0 - p);

    let direction = |phi: f64| -> Result<[f32; 3]> {
        let (s, c) = (libm::sin(phi), libm::cos(phi));
        let mut v = [
            c * e1[0] + s * e2[0],
            c * e1[1] + s * e2[1],
            c * e1[2] + s * e2[2],
        ];
        if v[0] + v[1] + v[2] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        for x in &mut v {
            *x = x.max(0.0);
        }
        let norm = dot3(v, v).sqrt();
        if norm < 1e-6 {
            return Err(Error::Degenerate(
                "extreme stain direction vanished after non-negativity clamp".into(),
            ));
        }
        Ok([
            (v[0] / norm) as f32,
            (v[1] / norm) as f32,
            (v[2] / norm) as f32,
        ])
    };
    let a = direction(lo)?;
    let b = direction(hi)?;
    // Hematoxylin carries the larger blue-channel OD; it goes first.
    let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };
    Ok([[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]])
}

/// Least-squares unmixing OD ~ S*C per pixel via 2x2 normal equations,
/// negatives clamped to zero.
pub fn compute_concentrations(od: &[[f32; 3]], s: &StainMatrix) -> Result<Vec<[f32; 2]>> {
    let mut a00 = 0.0f64;
    let mut a01 = 0.0f64;
    let mut a11 = 0.0f64;
    for row in s {
        a00 += f64::from(row[0]) * f64::from(row[0]);
        a01 += f64::from(row[0]) * f64::from(row[1]);
        a11 += f64::from(row[1]) * f64::from(row[1]);
    }
    let det = a00 * a11 - a01 * a01;
    if det <= 1e-9 * (a00 * a11).max(1e-300) {
        return Err(Error::Numeric(format!(
            "stain matrix is rank-deficient (normal-equation determinant {det:.3e})"
        )));
    }
    Ok(od
        .iter()
        .map(|p| {
            let mut b0 = 0.0f64;
            let mut b1 = 0.0f64;
            for (r, row) in s.iter().enumerate() {
                b0 += f64::from(row[0]) * f64::from(p[r]);
                b1 += f64::from(row[1]) * f64::from(p[r]);
            }
            let c0 = (a11 * b0 - a01 * b1) / det;
            let c1 = (a00 * b1 - a01 * b0) / det;
            [c0.max(0.0) as f32, c1.max(0.0) as f32]
        })
        .collect())
}

fn fit_stats(img: &ImagePatch, params: &StainParams) -> Result<(StainMatrix, [f32; 2])> {
    let matrix = estimate_stain_matrix(img, params)?;
    let (tissue, _) = tissue_od(img, params.od_threshold);
    let conc = compute_concentrations(&tissue, &matrix)?;
    let mut max_conc = [0.0f32; 2];
    for stain in 0..2 {
        let mut col: Vec<f64> = conc.iter().map(|c| f64::from(c[stain])).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        max_conc[stain] = percentile_sorted(&col, 99.0) as f32;
    }
    if !(max_conc[0] > 1e-6 && max_conc[1] > 1e-6) {
        return Err(Error::Degenerate(format!(
            "tissue carries no measurable stain (max_conc {max_conc:?})"
        )));
    }
    Ok((matrix, max_conc))
}

/// Stain matrix plus 99th-percentile concentrations of one image.
pub fn fit_profile(img: &ImagePatch, domain: &str, params: &StainParams) -> Result<StainProfile> {
    let (stain_matrix, max_conc) = fit_stats(img, params)?;
    let profile = StainProfile {
        domain: domain.to_string(),
        stain_matrix,
        max_conc,
        n_references: 1,
    };
    profile.validate()?;
    Ok(profile)
}

/// Pool several references of one domain: mean unit stain vectors
/// (re-normalized) and mean max_conc.
pub fn aggregate_profiles(profiles: &[StainProfile]) -> Result<StainProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Contract("aggregate_profiles on an empty list".into()))?;
    if profiles.iter().any(|p| p.domain != first.domain) {
        return Err(Error::Contract(
            "aggregate_profiles mixes profiles from different domains".into(),
        ));
    }
    let n = profiles.len() as f64;
    let mut stain_matrix = [[0.0f32; 2]; 3];
    for col in 0..2 {
        let mut sum = [0.0f64; 3];
        for p in profiles {
            for r in 0..3 {
                sum[r] += f64::from(p.stain_matrix[r][col]);
            }
        }
        let norm = dot3(sum, sum).sqrt();
        if norm < 1e-9 {
            return Err(Error::Numeric(format!(
                "aggregated stain column {col} has zero norm"
            )));
        }
        for r in 0..3 {
            stain_matrix[r][col] = (sum[r] / norm) as f32;
        }
    }
    let mut max_conc = [0.0f32; 2];
    for stain in 0..2 {
        let sum: f64 = profiles.iter().map(|p| f64::from(p.max_conc[stain])).sum();
        max_conc[stain] = (sum / n) as f32;
    }
    let out = StainProfile {
        domain: first.domain.clone(),
        stain_matrix,
        max_conc,
        n_references: profiles.len() as u32,
    };
    out.validate()?;
    Ok(out)
}

/// Re-render the image through the target profile: unmix with the source's
/// own stains, rescale concentrations by target/source max_conc, rebuild
/// OD through the target stain matrix.
pub fn normalize_to_profile(
    img: &ImagePatch,
    target: &StainProfile,
    params: &StainParams,
) -> Result<ImagePatch> {
    target.validate()?;
    let (src_matrix, src_max) = fit_stats(img, params)?;
    let od = rgb_to_od(img);
    let conc = compute_concentrations(&od, &src_matrix)?;
    let scale = [
        target.max_conc[0] / src_max[0],
        target.max_conc[1] / src_max[1],
    ];
    let out_od: Vec<[f32; 3]> = conc
        .iter()
        .map(|c| {
            let ch = c[0] * scale[0];
            let ce = c[1] * scale[1];
            let mut p = [0.0f32; 3];
            for r in 0..3 {
                p[r] = target.stain_matrix[r][0] * ch + target.stain_matrix[r][1] * ce;
            }
            p
        })
        .collect();
    od_to_rgb(&out_od, img.width(), img.height())
}

/// Draw a random domain, a random reference count k, and k profiles without
/// replacement; return the aggregated target. Draw order is fixed:
/// domain index, k, then the subset.
pub fn sample_reference(
    pool: &StainProfilePool,
    stream: &mut RngStream,
) -> Result<(String, StainProfile)> {
    let domains: Vec<(&String, &Vec<StainProfile>)> = pool
        .domains
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if domains.is_empty() {
        return Err(Error::Contract(
            "stain augmentation needs a non-empty profile pool".into(),
        ));
    }
    let (domain, profiles) = domains[stream.below(domains.len())];
    let k = stream.uniform_i64(1, profiles.len() as i64) as usize;
    let picks = stream.sample_without_replacement(profiles.len(), k);
    let chosen: Vec<StainProfile> = picks.iter().map(|&i| profiles[i].clone()).collect();
    Ok((domain.clone(), aggregate_profiles(&chosen)?))
}

/// Transfer the image to a randomly sampled multi-reference target.
/// Degenerate crops fall back to the untouched input rather than failing.
pub fn sample_stain_augmentation(
    img: &ImagePatch,
    pool: &StainProfilePool,
    stream: &mut RngStream,
    params: &StainParams,
) -> Result<ImagePatch> {
    let (_, target) = sample_reference(pool, stream)?;
    match normalize_to_profile(img, &target, params) {
        Ok(out) => Ok(out),
        Err(Error::Degenerate(msg)) | Err(Error::Numeric(msg)) => {
            log::warn!("stain augmentation fell back to identity: {msg}");
            Ok(img.clone())
        }
        Err(e) => Err(e),
    }
}
