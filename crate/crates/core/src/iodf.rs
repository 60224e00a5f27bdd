//! Flat binary interchange format for collected query features.
//!
//! Layout, all little-endian: magic `IODF`, u32 format version, u32 feature
//! width `d`, u32 row count, then per row `d` f32 features, a u16 class id,
//! and a u8 stage tag (1 or 2). Any structural mismatch on read is a
//! checkpoint error.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const IODF_MAGIC: [u8; 4] = *b"IODF";
pub const IODF_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub features: Vec<f32>,
    pub class: u16,
    pub stage: u8,
}

pub fn write_iodf(path: &Path, d: usize, rows: &[FeatureRow]) -> Result<()> {
    let d32 = u32::try_from(d)
        .map_err(|_| Error::Contract(format!("feature width {d} exceeds u32")))?;
    let n32 = u32::try_from(rows.len())
        .map_err(|_| Error::Contract(format!("row count {} exceeds u32", rows.len())))?;
    let mut blob = Vec::with_capacity(16 + rows.len() * (d * 4 + 3));
    blob.extend_from_slice(&IODF_MAGIC);
    blob.extend_from_slice(&IODF_VERSION.to_le_bytes());
    blob.extend_from_slice(&d32.to_le_bytes());
    blob.extend_from_slice(&n32.to_le_bytes());
    for (i, row) in rows.iter().enumerate() {
        if row.features.len() != d {
            return Err(Error::Contract(format!(
                "row {i} has {} features, expected {d}",
                row.features.len()
            )));
        }
        if row.stage != 1 && row.stage != 2 {
            return Err(Error::Contract(format!("row {i} has stage {}, expected 1 or 2", row.stage)));
        }
        for v in &row.features {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        blob.extend_from_slice(&row.class.to_le_bytes());
        blob.push(row.stage);
    }
    fs::write(path, blob)?;
    Ok(())
}

/// Reads a feature file, returning the width and rows.
pub fn read_iodf(path: &Path) -> Result<(usize, Vec<FeatureRow>)> {
    let blob = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if blob.len() < 16 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes is shorter than the header",
            path.display(),
            blob.len()
        )));
    }
    if blob[0..4] != IODF_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let word = |at: usize| u32::from_le_bytes([blob[at], blob[at + 1], blob[at + 2], blob[at + 3]]);
    let version = word(4);
    if version != IODF_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported feature format version {version}",
            path.display()
        )));
    }
    let d = word(8) as usize;
    let n = word(12) as usize;
    if d == 0 {
        return Err(Error::Checkpoint(format!("{}: zero feature width", path.display())));
    }
    let row_bytes = d * 4 + 3;
    let expected = 16 + n * row_bytes;
    if blob.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} rows of width {d} imply {expected} bytes, file has {}",
            path.display(),
            n,
            blob.len()
        )));
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let at = 16 + i * row_bytes;
        let features = blob[at..at + d * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let class = u16::from_le_bytes([blob[at + d * 4], blob[at + d * 4 + 1]]);
        let stage = blob[at + d * 4 + 2];
        if stage != 1 && stage != 2 {
            return Err(Error::Checkpoint(format!(
                "{}: row {i} has stage {stage}, expected 1 or 2",
                path.display()
            )));
        }
        rows.push(FeatureRow { features, class, stage });
    }
    Ok((d, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<FeatureRow> {
        vec![
            FeatureRow { features: vec![1.0, -2.5, 0.25], class: 3, stage: 1 },
            FeatureRow { features: vec![0.0, f32::MIN_POSITIVE, 1e8], class: 11, stage: 2 },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.iodf");
        let rows = sample_rows();
        write_iodf(&path, 3, &rows).unwrap();
        let (d, back) = read_iodf(&path).unwrap();
        assert_eq!(d, 3);
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.iodf");
        write_iodf(&path, 5, &[]).unwrap();
        let (d, back) = read_iodf(&path).unwrap();
        assert_eq!(d, 5);
        assert!(back.is_empty());
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.iodf");
        assert!(matches!(
            write_iodf(&path, 4, &sample_rows()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn corruption_is_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.iodf");
        write_iodf(&path, 3, &sample_rows()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_iodf(&path), Err(Error::Checkpoint(_))));

        std::fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_iodf(&path), Err(Error::Checkpoint(_))));

        let mut long = good.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(read_iodf(&path), Err(Error::Checkpoint(_))));

        let mut wrong_version = good.clone();
        wrong_version[4] = 9;
        std::fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(read_iodf(&path), Err(Error::Checkpoint(_))));

        let mut bad_stage = good;
        let last = bad_stage.len() - 1;
        bad_stage[last] = 7;
        std::fs::write(&path, &bad_stage).unwrap();
        assert!(matches!(read_iodf(&path), Err(Error::Checkpoint(_))));
    }
}
