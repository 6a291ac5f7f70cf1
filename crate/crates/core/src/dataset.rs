//! Persistence, splitting, and integrity of landscape samples.
//!
//! On disk a dataset is a pair of files: `<name>` holds the binary records
//! (little-endian, layout below) and `<name>.manifest.json` mirrors the
//! header plus run provenance.
//!
//! Binary layout:
//!
//! ```text
//! magic "QCLS" | u8 version=1 | u32 L | u32 N | f64 T_J | f64 g_over_J
//! | u8 boundary (0=open, 1=periodic) | u64 record_count
//! | record_count x [u32 seed_id, u32 iterate_index, N x f64 controls, f64 infidelity]
//! | u32 CRC32 of all preceding bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::rng::tagged_stream;
use crate::spin::{Boundary, Pulse};

const MAGIC: &[u8; 4] = b"QCLS";
const FORMAT_VERSION: u8 = 1;

/// Run metadata persisted alongside the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u8,
    #[serde(rename = "L")]
    pub l: u32,
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "T_J")]
    pub t_j: f64,
    #[serde(rename = "g_over_J")]
    pub g_over_j: f64,
    pub boundary: Boundary,
    #[serde(rename = "u_max_over_J")]
    pub u_max_over_j: f64,
    pub record_count: u64,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub duration_index: Option<u32>,
    #[serde(default)]
    pub skipped_seeds: Vec<u32>,
    pub tool_version: String,
}

impl Manifest {
    pub fn new(l: u32, n: u32, t_j: f64, g_over_j: f64, boundary: Boundary, u_max_over_j: f64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            l,
            n,
            t_j,
            g_over_j,
            boundary,
            u_max_over_j,
            record_count: 0,
            master_seed: None,
            duration_index: None,
            skipped_seeds: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// One logged GRAPE iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub seed_id: u32,
    pub iterate_index: u32,
    pub controls: Vec<f64>,
    pub infidelity: f64,
}

/// Immutable bundle of records sharing one (L, N, T) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    manifest: Manifest,
    records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn new(mut manifest: Manifest, records: Vec<TrajectoryRecord>) -> Result<Self> {
        for rec in &records {
            if rec.controls.len() != manifest.n as usize {
                return Err(AtlasError::Dataset(format!(
                    "record (seed {}, iterate {}) has {} controls, expected N = {}",
                    rec.seed_id,
                    rec.iterate_index,
                    rec.controls.len(),
                    manifest.n
                )));
            }
            if !(0.0..=1.0).contains(&rec.infidelity) {
                return Err(AtlasError::Dataset(format!(
                    "record (seed {}, iterate {}) has infidelity {} outside [0, 1]",
                    rec.seed_id, rec.iterate_index, rec.infidelity
                )));
            }
        }
        manifest.record_count = records.len() as u64;
        Ok(Self { manifest, records })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_controls(&self) -> usize {
        self.manifest.n as usize
    }

    pub fn u_max(&self) -> f64 {
        self.manifest.u_max_over_j
    }

    pub fn duration(&self) -> f64 {
        self.manifest.t_j
    }

    /// Reconstructs the pulse of a record.
    pub fn record_pulse(&self, record: &TrajectoryRecord) -> Result<Pulse> {
        Pulse::new(record.controls.clone(), self.manifest.t_j, self.manifest.u_max_over_j)
    }

    fn manifest_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        path.with_file_name(name)
    }

    /// Writes the binary file and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(38 + self.records.len() * (16 + self.n_controls() * 8));
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        buf.extend_from_slice(&self.manifest.l.to_le_bytes());
        buf.extend_from_slice(&self.manifest.n.to_le_bytes());
        buf.extend_from_slice(&self.manifest.t_j.to_le_bytes());
        buf.extend_from_slice(&self.manifest.g_over_j.to_le_bytes());
        buf.push(match self.manifest.boundary {
            Boundary::Open => 0,
            Boundary::Periodic => 1,
        });
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            buf.extend_from_slice(&rec.seed_id.to_le_bytes());
            buf.extend_from_slice(&rec.iterate_index.to_le_bytes());
            for &c in &rec.controls {
                buf.extend_from_slice(&c.to_le_bytes());
            }
            buf.extend_from_slice(&rec.infidelity.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());

        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        file.flush()?;

        let json = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(Self::manifest_path(path), json)?;
        Ok(())
    }

    /// Loads a dataset, verifying magic, version, length, CRC, and the
    /// infidelity range of every record.
    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let err = |offset: usize, message: &str| AtlasError::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        if buf.len() < 42 {
            return Err(err(buf.len(), "file truncated before header end"));
        }
        if &buf[0..4] != MAGIC {
            return Err(err(0, "bad magic, expected \"QCLS\""));
        }
        if buf[4] != FORMAT_VERSION {
            return Err(err(4, &format!("unsupported format version {}", buf[4])));
        }
        let l = u32::from_le_bytes(buf[5..9].try_into().unwrap());
        let n = u32::from_le_bytes(buf[9..13].try_into().unwrap());
        let t_j = f64::from_le_bytes(buf[13..21].try_into().unwrap());
        let g_over_j = f64::from_le_bytes(buf[21..29].try_into().unwrap());
        let boundary = match buf[29] {
            0 => Boundary::Open,
            1 => Boundary::Periodic,
            other => return Err(err(29, &format!("invalid boundary tag {other}"))),
        };
        let record_count = u64::from_le_bytes(buf[30..38].try_into().unwrap()) as usize;
        let rec_size = 16 + n as usize * 8;
        let expected = 38 + record_count * rec_size + 4;
        if buf.len() != expected {
            return Err(err(buf.len().min(expected), &format!(
                "file has {} bytes, expected {expected} for {record_count} records",
                buf.len()
            )));
        }
        let crc_offset = buf.len() - 4;
        let stored = u32::from_le_bytes(buf[crc_offset..].try_into().unwrap());
        let actual = crc32fast::hash(&buf[..crc_offset]);
        if stored != actual {
            return Err(err(crc_offset, &format!(
                "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
            )));
        }

        let mut records = Vec::with_capacity(record_count);
        let mut off = 38;
        for _ in 0..record_count {
            let seed_id = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
            let iterate_index = u32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap());
            let mut controls = Vec::with_capacity(n as usize);
            let mut coff = off + 8;
            for _ in 0..n {
                controls.push(f64::from_le_bytes(buf[coff..coff + 8].try_into().unwrap()));
                coff += 8;
            }
            let infidelity = f64::from_le_bytes(buf[coff..coff + 8].try_into().unwrap());
            if !(0.0..=1.0).contains(&infidelity) {
                return Err(err(coff, &format!("infidelity {infidelity} outside [0, 1]")));
            }
            records.push(TrajectoryRecord { seed_id, iterate_index, controls, infidelity });
            off += rec_size;
        }

        let manifest_path = Self::manifest_path(path);
        let manifest: Manifest = if manifest_path.exists() {
            serde_json::from_slice(&fs::read(&manifest_path)?)?
        } else {
            let mut m = Manifest::new(l, n, t_j, g_over_j, boundary, 1.0);
            m.record_count = record_count as u64;
            m
        };
        if (manifest.l, manifest.n) != (l, n) {
            return Err(AtlasError::Dataset("manifest disagrees with binary header".into()));
        }
        Self::new(manifest, records)
    }

    /// CSV export with header `seed,iter,u1..uN,infidelity`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("seed,iter");
        for k in 1..=self.n_controls() {
            out.push_str(&format!(",u{k}"));
        }
        out.push_str(",infidelity\n");
        for rec in &self.records {
            out.push_str(&format!("{},{}", rec.seed_id, rec.iterate_index));
            for &c in &rec.controls {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(&format!(",{}\n", rec.infidelity));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Deterministic train/validation split. Under `Trajectory` granularity
    /// every iterate of a seed lands on the same side.
    pub fn split(
        &self,
        train_fraction: f64,
        split_seed: u64,
        granularity: SplitGranularity,
    ) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(AtlasError::Dataset(format!(
                "train fraction {train_fraction} must lie strictly between 0 and 1"
            )));
        }
        let mut rng = tagged_stream(split_seed, "split");
        let assign = |unit_count: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<bool>> {
            if unit_count < 2 {
                return Err(AtlasError::Dataset(format!(
                    "cannot split a dataset with {unit_count} unit(s)"
                )));
            }
            let mut order: Vec<usize> = (0..unit_count).collect();
            for i in (1..unit_count).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let n_train =
                ((train_fraction * unit_count as f64).round() as usize).clamp(1, unit_count - 1);
            let mut is_train = vec![false; unit_count];
            for &idx in order.iter().take(n_train) {
                is_train[idx] = true;
            }
            Ok(is_train)
        };

        let (train_recs, valid_recs): (Vec<_>, Vec<_>) = match granularity {
            SplitGranularity::Trajectory => {
                let mut seeds: Vec<u32> = self.records.iter().map(|r| r.seed_id).collect();
                seeds.sort_unstable();
                seeds.dedup();
                let is_train = assign(seeds.len(), &mut rng)?;
                let lookup: std::collections::HashMap<u32, bool> =
                    seeds.iter().copied().zip(is_train).collect();
                self.records.iter().cloned().partition(|r| lookup[&r.seed_id])
            }
            SplitGranularity::Point => {
                let is_train = assign(self.records.len(), &mut rng)?;
                let mut train = Vec::new();
                let mut valid = Vec::new();
                for (i, rec) in self.records.iter().cloned().enumerate() {
                    if is_train[i] {
                        train.push(rec);
                    } else {
                        valid.push(rec);
                    }
                }
                (train, valid)
            }
        };

        let train = Dataset::new(self.manifest.clone(), train_recs)?;
        let valid = Dataset::new(self.manifest.clone(), valid_recs)?;
        Ok((train, valid))
    }

    /// Uniform subsample of `k` records without replacement.
    pub fn subsample(&self, k: usize, subsample_seed: u64) -> Result<Dataset> {
        if k > self.records.len() {
            return Err(AtlasError::Dataset(format!(
                "cannot subsample {k} records from {}",
                self.records.len()
            )));
        }
        let mut rng = tagged_stream(subsample_seed, "subsample");
        let mut indices: Vec<usize> = (0..self.records.len()).collect();
        // Partial Fisher-Yates: the first k entries are a uniform sample.
        for i in 0..k {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        let records = indices[..k].iter().map(|&i| self.records[i].clone()).collect();
        Dataset::new(self.manifest.clone(), records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitGranularity {
    Trajectory,
    Point,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(seeds: u32, iterates_per_seed: u32) -> Dataset {
        let manifest = Manifest::new(2, 3, 1.5, 0.0, Boundary::Periodic, 1.0);
        let mut records = Vec::new();
        for s in 0..seeds {
            for i in 0..iterates_per_seed {
                records.push(TrajectoryRecord {
                    seed_id: s,
                    iterate_index: i,
                    controls: vec![0.1 * s as f64 - 0.5, 0.2, -0.3 + 0.01 * i as f64],
                    infidelity: 1.0 / (1.0 + s as f64 + i as f64),
                });
            }
        }
        Dataset::new(manifest, records).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = toy_dataset(5, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(ds, loaded);
        // Saving again produces identical bytes.
        let first = fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let manifest = Manifest::new(2, 3, 1.5, 0.0, Boundary::Open, 1.0);
        let ds = Dataset::new(manifest, vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.len(), 0);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let ds = toy_dataset(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        ds.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = 38 + 10; // inside the first record
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        match Dataset::load(&path) {
            Err(AtlasError::Format { message, .. }) => {
                assert!(message.contains("checksum") || message.contains("infidelity"), "{message}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ds = toy_dataset(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        ds.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(AtlasError::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, vec![0u8; 64]).unwrap();
        match Dataset::load(&path) {
            Err(AtlasError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_infidelity_is_rejected() {
        let manifest = Manifest::new(2, 1, 1.0, 0.0, Boundary::Open, 1.0);
        let rec = TrajectoryRecord {
            seed_id: 0,
            iterate_index: 0,
            controls: vec![0.0],
            infidelity: 1.5,
        };
        assert!(Dataset::new(manifest, vec![rec]).is_err());
    }

    #[test]
    fn trajectory_split_keeps_seeds_together() {
        let ds = toy_dataset(10, 7);
        let (train, valid) = ds.split(0.8, 42, SplitGranularity::Trajectory).unwrap();
        let train_seeds: std::collections::BTreeSet<u32> =
            train.records().iter().map(|r| r.seed_id).collect();
        let valid_seeds: std::collections::BTreeSet<u32> =
            valid.records().iter().map(|r| r.seed_id).collect();
        assert_eq!(train_seeds.len(), 8);
        assert_eq!(valid_seeds.len(), 2);
        assert!(train_seeds.is_disjoint(&valid_seeds));
        assert_eq!(train.len() + valid.len(), ds.len());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = toy_dataset(9, 3);
        let (t1, v1) = ds.split(0.8, 5, SplitGranularity::Point).unwrap();
        let (t2, _v2) = ds.split(0.8, 5, SplitGranularity::Point).unwrap();
        assert_eq!(t1, t2);
        let ids = |d: &Dataset| -> std::collections::BTreeSet<(u32, u32)> {
            d.records().iter().map(|r| (r.seed_id, r.iterate_index)).collect()
        };
        assert!(ids(&t1).is_disjoint(&ids(&v1)));
        let mut all = ids(&t1);
        all.extend(ids(&v1));
        assert_eq!(all, ids(&ds));
    }

    #[test]
    fn point_split_fraction_is_tight() {
        let ds = toy_dataset(100, 10); // 1000 points
        let (train, _) = ds.split(0.8, 11, SplitGranularity::Point).unwrap();
        let frac = train.len() as f64 / ds.len() as f64;
        assert!((0.799..=0.801).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn tiny_dataset_split_is_an_error() {
        let ds = toy_dataset(1, 1);
        assert!(ds.split(0.8, 0, SplitGranularity::Trajectory).is_err());
        assert!(ds.split(0.8, 0, SplitGranularity::Point).is_err());
    }

    #[test]
    fn subsample_full_set_is_a_permutation() {
        let ds = toy_dataset(4, 3);
        let sub = ds.subsample(ds.len(), 9).unwrap();
        let mut a: Vec<(u32, u32)> = ds.records().iter().map(|r| (r.seed_id, r.iterate_index)).collect();
        let mut b: Vec<(u32, u32)> = sub.records().iter().map(|r| (r.seed_id, r.iterate_index)).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_has_no_duplicates_and_rejects_oversize() {
        let ds = toy_dataset(20, 5);
        let sub = ds.subsample(30, 3).unwrap();
        let ids: std::collections::BTreeSet<(u32, u32)> =
            sub.records().iter().map(|r| (r.seed_id, r.iterate_index)).collect();
        assert_eq!(ids.len(), 30);
        assert!(ds.subsample(ds.len() + 1, 3).is_err());
    }

    #[test]
    fn subsample_frequencies_are_uniform() {
        // Chi-squared test over 10^4 draws of 1 record from a 10-record set.
        let ds = toy_dataset(10, 1);
        let mut counts = [0usize; 10];
        for rep in 0..10_000u64 {
            let sub = ds.subsample(1, rep).unwrap();
            counts[sub.records()[0].seed_id as usize] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 9 dof; chi2 < 21.67 keeps p > 0.01.
        assert!(chi2 < 21.67, "chi2 = {chi2}, counts = {counts:?}");
    }
}
