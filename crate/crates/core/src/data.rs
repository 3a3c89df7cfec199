//! Dataset manifests, exact-duplicate removal, stratified fold planning
//! with held-out datasets, per-dataset statistics, and a synthetic
//! two-class H&E-like crop generator used by the end-to-end tests.

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

pub const LABEL_NORMAL: u8 = 0;
pub const LABEL_ATYPICAL: u8 = 1;

pub fn label_name(label: u8) -> &'static str {
    if label == LABEL_ATYPICAL {
        "atypical"
    } else {
        "normal"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    /// 0 = normal, 1 = atypical.
    pub label: u8,
    pub domain: String,
    pub dataset: String,
}

/// Read a `path,label,domain,dataset` CSV. Labels normalize
/// case-insensitively: normal -> 0, atypical -> 1.
pub fn parse_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: format!("unreadable header: {e}"),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing column '{name}' in header {headers:?}"),
            })
    };
    let c_path = column("path")?;
    let c_label = column("label")?;
    let c_domain = column("domain")?;
    let c_dataset = column("dataset")?;

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e
                .position()
                .map_or(0, |p| p.line() as usize),
            msg: format!("malformed row: {e}"),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |idx: usize| -> Result<&str> {
            row.get(idx).ok_or_else(|| Error::Parse {
                line,
                msg: format!("row has {} fields, expected at least {}", row.len(), idx + 1),
            })
        };
        let raw_path = field(c_path)?.trim();
        if raw_path.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty path".into(),
            });
        }
        let raw_label = field(c_label)?.trim();
        let label = if raw_label.eq_ignore_ascii_case("normal") {
            LABEL_NORMAL
        } else if raw_label.eq_ignore_ascii_case("atypical") {
            LABEL_ATYPICAL
        } else {
            return Err(Error::Parse {
                line,
                msg: format!("unknown label '{raw_label}' (expected normal or atypical)"),
            });
        };
        records.push(SampleRecord {
            path: PathBuf::from(raw_path),
            label,
            domain: field(c_domain)?.trim().to_string(),
            dataset: field(c_dataset)?.trim().to_string(),
        });
    }
    Ok(records)
}

/// Write records as `path,label,domain,dataset` CSV (UTF-8, LF) atomically.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("manifest serialization: {e}"));
    writer
        .write_record(["path", "label", "domain", "dataset"])
        .map_err(fail)?;
    for r in records {
        writer
            .write_record([
                r.path.display().to_string().as_str(),
                label_name(r.label),
                &r.domain,
                &r.dataset,
            ])
            .map_err(fail)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    crate::fsutil::atomic_write(path, &bytes)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Drop records whose decoded pixel bytes exactly match an earlier record.
/// Candidates are bucketed by a 64-bit hash, then confirmed byte-for-byte.
/// The first occurrence wins and input order is preserved.
pub fn dedup_exact(records: Vec<SampleRecord>) -> Result<(Vec<SampleRecord>, usize)> {
    let decoded: Vec<(u64, Vec<u8>)> = records
        .par_iter()
        .map(|r| {
            let img = ImagePatch::load_png(&r.path)?;
            let mut bytes = Vec::with_capacity(16 + img.pixels().len());
            bytes.extend_from_slice(&(img.width() as u64).to_le_bytes());
            bytes.extend_from_slice(&(img.height() as u64).to_le_bytes());
            bytes.extend_from_slice(img.pixels());
            Ok((fnv1a(&bytes), bytes))
        })
        .collect::<Result<_>>()?;

    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut kept = Vec::with_capacity(records.len());
    let mut removed = 0usize;
    for (i, record) in records.into_iter().enumerate() {
        let (hash, bytes) = &decoded[i];
        let bucket = buckets.entry(*hash).or_default();
        if bucket.iter().any(|&j| decoded[j].1 == *bytes) {
            removed += 1;
        } else {
            bucket.push(i);
            kept.push(record);
        }
    }
    Ok((kept, removed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Parallel to the input records; None marks a held-out sample.
    pub assignments: Vec<Option<u32>>,
    pub holdout: Vec<String>,
}

impl FoldPlan {
    pub fn val_indices(&self, fold: u32) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, fold: u32) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_some() && **a != Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Seeded stratified k-fold plan. Samples from held-out datasets get no
/// fold; each class is shuffled and dealt round-robin, which bounds every
/// fold's class counts within one sample of perfect proportion.
pub fn stratified_kfold(
    records: &[SampleRecord],
    k: usize,
    seed: u64,
    holdout_datasets: &[String],
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Contract(format!("fold count {k} must be at least 2")));
    }
    let mut assignments: Vec<Option<u32>> = vec![None; records.len()];
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        if holdout_datasets.contains(&r.dataset) {
            continue;
        }
        by_class[usize::from(r.label)].push(i);
    }
    for (class, indices) in by_class.iter_mut().enumerate() {
        if indices.len() < k {
            return Err(Error::Contract(format!(
                "class {class} has {} non-holdout samples, needs at least k={k}",
                indices.len()
            )));
        }
        let mut stream = RngStream::new(seed, "kfold", class as u64, 0);
        stream.shuffle(indices);
        for (j, &sample) in indices.iter().enumerate() {
            assignments[sample] = Some((j % k) as u32);
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        holdout: holdout_datasets.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: u64,
    pub atypical: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.normal + self.atypical
    }

    pub fn atypical_frac(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.atypical as f64 / self.total() as f64
        }
    }

    fn bump(&mut self, label: u8) {
        if label == LABEL_ATYPICAL {
            self.atypical += 1;
        } else {
            self.normal += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_dataset: BTreeMap<String, ClassCounts>,
    pub total: ClassCounts,
}

pub fn dataset_stats(records: &[SampleRecord]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for r in records {
        stats
            .per_dataset
            .entry(r.dataset.clone())
            .or_default()
            .bump(r.label);
        stats.total.bump(r.label);
    }
    stats
}

/// Hand-tuned per-domain stain tints; every pair differs by at least 12
/// levels in some channel so domain shift stays detectable in channel means.
const DOMAIN_TINTS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [-18, 6, -10],
    [12, -14, 8],
    [-8, -20, 14],
    [16, 10, -16],
    [-24, -4, 4],
    [28, -28, -8],
    [-14, 22, 20],
];

const SYNTH_SIDE: usize = 128;

/// Generate `n` synthetic 128x128 H&E-like crops under `out_dir` plus a
/// `manifest.csv`: pink textured background with a per-domain tint and a
/// dark-purple central blob whose shape carries the class. Class 0 blobs
/// are round; class 1 blobs are elongated chains of lobes. Deterministic
/// per seed, exactly round(n * atypical_frac) atypical samples.
pub fn synth_generate(
    n: usize,
    atypical_frac: f64,
    n_domains: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    if !(atypical_frac > 0.0 && atypical_frac < 1.0) {
        return Err(Error::Contract(format!(
            "atypical fraction {atypical_frac} outside (0, 1)"
        )));
    }
    if n_domains == 0 || n_domains > DOMAIN_TINTS.len() {
        return Err(Error::Contract(format!(
            "domain count {n_domains} outside 1..={}",
            DOMAIN_TINTS.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let n_atypical = (n as f64 * atypical_frac).round() as usize;
    let mut labels = vec![LABEL_NORMAL; n];
    for l in labels.iter_mut().take(n_atypical) {
        *l = LABEL_ATYPICAL;
    }
    RngStream::for_purpose(seed, "synth-labels").shuffle(&mut labels);

    let records: Vec<SampleRecord> = labels
        .into_par_iter()
        .enumerate()
        .map(|(i, label)| {
            let domain_id = i % n_domains;
            let img = synth_crop(label, domain_id, seed, i as u64);
            let filename = format!("crop_{i:05}.png");
            let path = out_dir.join(&filename);
            img.save_png(&path)?;
            Ok(SampleRecord {
                path,
                label,
                domain: format!("domain_{domain_id}"),
                dataset: "synthetic".into(),
            })
        })
        .collect::<Result<_>>()?;

    write_manifest(&out_dir.join("manifest.csv"), &records)?;
    Ok(records)
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn synth_crop(label: u8, domain_id: usize, seed: u64, index: u64) -> ImagePatch {
    let mut stream = RngStream::new(seed, "synth", index, 0);
    let side = SYNTH_SIDE;
    let tint = DOMAIN_TINTS[domain_id];
    let base = [
        (232 + tint[0]) as f32,
        (185 + tint[1]) as f32,
        (205 + tint[2]) as f32,
    ];

    // Smooth blotches give the background a tissue-like texture.
    let n_blobs = 6 + stream.below(4) as usize;
    let blotches: Vec<(f32, f32, f32, f32)> = (0..n_blobs)
        .map(|_| {
            (
                stream.uniform(0.0, side as f32),
                stream.uniform(0.0, side as f32),
                stream.uniform(12.0, 30.0),
                stream.uniform(-9.0, 9.0),
            )
        })
        .collect();

    let nucleus = [
        stream.uniform(70.0, 95.0),
        stream.uniform(30.0, 55.0),
        stream.uniform(100.0, 130.0),
    ];
    let center = (
        side as f32 / 2.0 + stream.uniform(-8.0, 8.0),
        side as f32 / 2.0 + stream.uniform(-8.0, 8.0),
    );
    let theta = stream.uniform(0.0, std::f32::consts::PI);

    // Lobes are (cx, cy, radius); class 0 is one near-circular lobe,
    // class 1 a chain of smaller lobes along a random axis.
    let lobes: Vec<(f32, f32, f32)> = if label == LABEL_ATYPICAL {
        let count = 2 + stream.below(2) as usize;
        let span = stream.uniform(22.0, 30.0);
        (0..count)
            .map(|j| {
                let frac = if count == 1 {
                    0.0
                } else {
                    j as f32 / (count - 1) as f32 - 0.5
                };
                let along = frac * 2.0 * span;
                (
                    center.0 + along * theta.cos() + stream.uniform(-2.0, 2.0),
                    center.1 + along * theta.sin() + stream.uniform(-2.0, 2.0),
                    stream.uniform(9.0, 13.0),
                )
            })
            .collect()
    } else {
        vec![(center.0, center.1, stream.uniform(15.0, 20.0))]
    };

    let mut img = ImagePatch::filled(side, side, [0, 0, 0]).expect("nonzero side");
    for y in 0..side {
        for x in 0..side {
            let fx = x as f32;
            let fy = y as f32;
            let mut texture = 0.0f32;
            for &(bx, by, r, amp) in &blotches {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                texture += amp * (-d2 / (2.0 * r * r)).exp();
            }
            let noise = stream.uniform(-7.0, 7.0);

            // Signed distance to the nearest lobe edge, in pixels.
            let mut dist = f32::MAX;
            for &(cx, cy, r) in &lobes {
                let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() - r;
                dist = dist.min(d);
            }
            let alpha = (0.5 - dist / 3.0).clamp(0.0, 1.0);

            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let bg = base[c] + texture + noise;
                let v = alpha * nucleus[c] + (1.0 - alpha) * bg;
                rgb[c] = clamp_u8(v);
            }
            img.set(x, y, rgb);
        }
    }
    img
}
