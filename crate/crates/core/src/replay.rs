//! Gaussian pseudo-feature replay.
//!
//! After a task, the most confident query features per image are harvested
//! with their predicted class as pseudo label, one Gaussian is fitted per
//! (class, stage), and later tasks regularize the classification heads with
//! samples drawn from those Gaussians instead of stored images. Covariances
//! carry a trace-scaled ridge so the Cholesky factor always exists;
//! single-observation classes fall back to a small isotropic ball.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const STATS_MANIFEST_FILE: &str = "stats_manifest.json";
pub const STATS_FILE: &str = "stats.bin";
pub const STATS_FORMAT_VERSION: u32 = 1;

/// Relative ridge added to fitted covariance diagonals.
pub const COV_RIDGE: f64 = 1e-3;
/// Isotropic variance used when a class has a single observation.
pub const SINGLETON_VAR: f64 = 1e-4;

/// Gaussian over one (class, stage) feature population, stored as the mean
/// and the lower Cholesky factor of the covariance.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub class: u16,
    pub stage: u8,
    pub count: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major lower-triangular L with covariance L Lᵀ.
    pub chol: Vec<f64>,
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky(mat: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = mat[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Contract(format!(
                        "covariance is not positive definite at pivot {i} ({s})"
                    )));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

impl FeatureStats {
    /// Fits the Gaussian from raw feature rows with an unbiased covariance
    /// estimate plus the stabilizing ridge.
    pub fn fit(class: u16, stage: u8, rows: &[Vec<f64>]) -> Result<FeatureStats> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Contract(format!(
                "cannot fit class {class} stage {stage} from zero rows"
            )));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract(format!(
                "inconsistent feature width fitting class {class} stage {stage}"
            )));
        }
        let mut mean = vec![0.0f64; d];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0f64; d * d];
        if n == 1 {
            for i in 0..d {
                cov[i * d + i] = SINGLETON_VAR;
            }
        } else {
            for row in rows {
                for i in 0..d {
                    let di = row[i] - mean[i];
                    for j in 0..d {
                        cov[i * d + j] += di * (row[j] - mean[j]);
                    }
                }
            }
            let denom = (n - 1) as f64;
            for v in &mut cov {
                *v /= denom;
            }
            let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
            let ridge = COV_RIDGE * (trace / d as f64 + 1e-8);
            for i in 0..d {
                cov[i * d + i] += ridge;
            }
        }
        let chol = cholesky(&cov, d)?;
        Ok(FeatureStats { class, stage, count: n, dim: d, mean, chol })
    }

    /// Draws `n` samples `mean + L u` with iid standard normal `u`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        let d = self.dim;
        (0..n)
            .map(|_| {
                let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                (0..d)
                    .map(|i| {
                        let mut v = self.mean[i];
                        for k in 0..=i {
                            v += self.chol[i * d + k] * u[k];
                        }
                        v
                    })
                    .collect()
            })
            .collect()
    }
}

/// A harvested feature row with its pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRow {
    pub features: Vec<f64>,
    pub slot: usize,
}

/// The `n` most confident rows of a head output, each labeled with its
/// arg-max column. Confidence order is by maximum logit, ties toward the
/// lower row; label ties resolve toward the lower column.
pub fn top_confident_rows<F: Scalar>(
    cls_logits: &Tensor<F>,
    features: &Tensor<F>,
    n: usize,
) -> Result<Vec<PseudoRow>> {
    let ls = cls_logits.shape();
    let fs = features.shape();
    if ls.len() != 2 || fs.len() != 2 || ls[0] != fs[0] {
        return Err(Error::shape(
            "top_confident_rows",
            format!("logits {ls:?} vs features {fs:?}"),
        ));
    }
    let (rows, width) = (ls[0], ls[1]);
    let logit_rows: Vec<Vec<f64>> = cls_logits.with_data(|d| {
        (0..rows)
            .map(|i| d[i * width..(i + 1) * width].iter().map(|v| v.as_f64()).collect())
            .collect()
    });
    let mut order: Vec<usize> = (0..rows).collect();
    let row_max = |i: usize| logit_rows[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    order.sort_by(|&a, &b| {
        row_max(b)
            .partial_cmp(&row_max(a))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n.min(rows));
    let fw = fs[1];
    Ok(order
        .into_iter()
        .map(|i| {
            let row = &logit_rows[i];
            let mut slot = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[slot] {
                    slot = j;
                }
            }
            let features =
                features.with_data(|d| d[i * fw..(i + 1) * fw].iter().map(|v| v.as_f64()).collect());
            PseudoRow { features, slot }
        })
        .collect())
}

/// Pseudo samples drawn per old class for one batch: the batch's annotated
/// object count split evenly across old classes, rounded up.
pub fn replay_count(annotated: usize, old_classes: usize) -> usize {
    if old_classes == 0 {
        return 0;
    }
    annotated.div_ceil(old_classes)
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    class: u16,
    stage: u8,
    count: usize,
    dim: usize,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct StatsManifest {
    format_version: u32,
    entries: Vec<StatsEntry>,
}

/// Writes the fitted statistics: per entry the mean then the Cholesky
/// factor, as little-endian f32.
pub fn save_stats(dir: &Path, stats: &[FeatureStats]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, a) in stats.iter().enumerate() {
        for b in &stats[i + 1..] {
            if a.class == b.class && a.stage == b.stage {
                return Err(Error::Contract(format!(
                    "duplicate statistics for class {} stage {}",
                    a.class, a.stage
                )));
            }
        }
    }
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(stats.len());
    for s in stats {
        let offset = blob.len() as u64;
        for v in s.mean.iter().chain(&s.chol) {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(StatsEntry {
            class: s.class,
            stage: s.stage,
            count: s.count,
            dim: s.dim,
            byte_offset: offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let manifest = StatsManifest { format_version: STATS_FORMAT_VERSION, entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("stats manifest serialization failed: {e}")))?;
    fs::write(dir.join(STATS_MANIFEST_FILE), json)?;
    fs::write(dir.join(STATS_FILE), blob)?;
    Ok(())
}

pub fn load_stats(dir: &Path) -> Result<Vec<FeatureStats>> {
    let manifest_path = dir.join(STATS_MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: StatsManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed stats manifest: {e}")))?;
    if manifest.format_version != STATS_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported stats format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(STATS_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read stats.bin: {e}")))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let values = e.dim + e.dim * e.dim;
        if e.byte_len as usize != values * 4 {
            return Err(Error::Checkpoint(format!(
                "stats entry class {} stage {} has byte length {}, dim {} implies {}",
                e.class,
                e.stage,
                e.byte_len,
                e.dim,
                values * 4
            )));
        }
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "stats entry class {} stage {} exceeds stats.bin size {}",
                e.class,
                e.stage,
                blob.len()
            )));
        }
        let mut vals = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mean: Vec<f64> = (&mut vals).take(e.dim).collect();
        let chol: Vec<f64> = vals.collect();
        out.push(FeatureStats {
            class: e.class,
            stage: e.stage,
            count: e.count,
            dim: e.dim,
            mean,
            chol,
        });
    }
    Ok(out)
}
