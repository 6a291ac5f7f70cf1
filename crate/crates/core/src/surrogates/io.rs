//! Model persistence. One binary format for all three families:
//!
//! ```text
//! magic "QCLM" | u8 family (0=linear, 1=gp, 2=nn) | u32 N | family block
//! ```
//!
//! All numbers little-endian. Family blocks:
//!
//! - linear: N x f64 weights, f64 bias
//! - gp: f64 length_scale, f64 mean, f64 jitter, u64 M,
//!   M x N x f64 training inputs (row-major), M x f64 training targets
//! - nn: f64 u_max, u32 layer_count, per layer: u32 fan_in, u32 fan_out,
//!   u8 relu flag, fan_in x fan_out x f64 weights (row-major), fan_out x f64 biases
//!
//! A u32 CRC32 of all preceding bytes closes the file.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};

use super::{GpModel, LinearModel, Model, NeuralNet, Surrogate};

const MAGIC: &[u8; 4] = b"QCLM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Linear,
    Gp,
    Nn,
}

impl ModelFamily {
    fn tag(self) -> u8 {
        match self {
            ModelFamily::Linear => 0,
            ModelFamily::Gp => 1,
            ModelFamily::Nn => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelFamily::Linear),
            1 => Some(ModelFamily::Gp),
            2 => Some(ModelFamily::Nn),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelFamily::Linear => "linear",
            ModelFamily::Gp => "gp",
            ModelFamily::Nn => "nn",
        })
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = AtlasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelFamily::Linear),
            "gp" => Ok(ModelFamily::Gp),
            "nn" => Ok(ModelFamily::Nn),
            other => Err(AtlasError::Model(format!(
                "unknown model family {other:?}; expected linear, gp, or nn"
            ))),
        }
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(model.family().tag());
    buf.extend_from_slice(&(model.n_controls() as u32).to_le_bytes());
    match model {
        Model::Linear(m) => {
            for &w in m.weights() {
                buf.extend_from_slice(&w.to_le_bytes());
            }
            buf.extend_from_slice(&m.bias().to_le_bytes());
        }
        Model::Gp(m) => {
            let (x, y, length_scale, mean, jitter) = m.parts();
            buf.extend_from_slice(&length_scale.to_le_bytes());
            buf.extend_from_slice(&mean.to_le_bytes());
            buf.extend_from_slice(&jitter.to_le_bytes());
            buf.extend_from_slice(&(x.nrows() as u64).to_le_bytes());
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    buf.extend_from_slice(&x[(i, j)].to_le_bytes());
                }
            }
            for i in 0..y.len() {
                buf.extend_from_slice(&y[i].to_le_bytes());
            }
        }
        Model::Nn(m) => {
            let (weights, biases) = m.layers();
            buf.extend_from_slice(&m.u_max().to_le_bytes());
            buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
            for ((w, b), &relu) in weights.iter().zip(biases).zip(m.relu_flags()) {
                buf.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
                buf.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
                buf.push(relu as u8);
                for row in w.rows() {
                    for &v in row {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                for &v in b {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> AtlasError {
        AtlasError::Format { offset: self.off as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(self.err(format!("file truncated: need {n} more bytes")));
        }
        let slice = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Loads a model, verifying magic, CRC, and — when `expected` is given —
/// the family tag.
pub fn load_model(path: &Path, expected: Option<ModelFamily>) -> Result<Model> {
    let buf = fs::read(path)?;
    if buf.len() < 13 {
        return Err(AtlasError::Format {
            offset: buf.len() as u64,
            message: "file truncated before header end".into(),
        });
    }
    let crc_offset = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[crc_offset..].try_into().unwrap());
    let actual = crc32fast::hash(&buf[..crc_offset]);
    if stored != actual {
        return Err(AtlasError::Format {
            offset: crc_offset as u64,
            message: format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        });
    }

    let mut r = Reader { buf: &buf[..crc_offset], off: 0 };
    if r.take(4)? != MAGIC {
        return Err(AtlasError::Format { offset: 0, message: "bad magic, expected \"QCLM\"".into() });
    }
    let tag = r.u8()?;
    let family = ModelFamily::from_tag(tag)
        .ok_or_else(|| r.err(format!("unknown family tag {tag}")))?;
    if let Some(want) = expected {
        if want != family {
            return Err(AtlasError::Model(format!(
                "model file holds a {family} model, expected {want}"
            )));
        }
    }
    let n = r.u32()? as usize;

    let model = match family {
        ModelFamily::Linear => {
            let w = r.f64_vec(n)?;
            let b = r.f64()?;
            Model::Linear(LinearModel::from_parts(w, b))
        }
        ModelFamily::Gp => {
            let length_scale = r.f64()?;
            let mean = r.f64()?;
            let jitter = r.f64()?;
            let m = r.u64()? as usize;
            let mut x = DMatrix::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    x[(i, j)] = r.f64()?;
                }
            }
            let y = DVector::from_vec(r.f64_vec(m)?);
            Model::Gp(GpModel::from_parts(x, y, length_scale, mean, jitter)?)
        }
        ModelFamily::Nn => {
            let u_max = r.f64()?;
            let layer_count = r.u32()? as usize;
            let mut weights = Vec::with_capacity(layer_count);
            let mut biases = Vec::with_capacity(layer_count);
            let mut relu = Vec::with_capacity(layer_count);
            for _ in 0..layer_count {
                let fan_in = r.u32()? as usize;
                let fan_out = r.u32()? as usize;
                relu.push(r.u8()? != 0);
                let w = Array2::from_shape_vec((fan_in, fan_out), r.f64_vec(fan_in * fan_out)?)
                    .map_err(|e| AtlasError::Model(e.to_string()))?;
                weights.push(w);
                biases.push(Array1::from_vec(r.f64_vec(fan_out)?));
            }
            Model::Nn(NeuralNet::from_layers(weights, biases, relu, u_max)?)
        }
    };
    if r.off != r.buf.len() {
        return Err(r.err(format!("{} trailing bytes after model body", r.buf.len() - r.off)));
    }
    if model.n_controls() != n {
        return Err(AtlasError::Model("header N disagrees with model body".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogates::test_support::synthetic_dataset;
    use crate::surrogates::{fit_gp, fit_linear, fit_nn, TrainConfig};

    fn roundtrip(model: Model) -> Model {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&model, &path).unwrap();
        load_model(&path, Some(model.family())).unwrap()
    }

    #[test]
    fn linear_roundtrip_is_bit_exact() {
        let ds = synthetic_dataset(3, 30, 40, |u| 0.4 + 0.2 * u[0]);
        let model = fit_linear(&ds).unwrap();
        let probe = [0.3, -0.7, 0.1];
        let before = model.predict_one(&probe).unwrap();
        let loaded = roundtrip(Model::Linear(model));
        assert_eq!(loaded.predict_one(&probe).unwrap(), before);
    }

    #[test]
    fn gp_roundtrip_is_bit_exact() {
        let ds = synthetic_dataset(2, 15, 41, |u| 0.5 + 0.1 * u[0] * u[1]);
        let model = fit_gp(&ds, 2, 0).unwrap();
        let probe = [0.2, 0.4];
        let before = model.predict_one(&probe).unwrap();
        let loaded = roundtrip(Model::Gp(model));
        assert_eq!(loaded.predict_one(&probe).unwrap(), before);
    }

    #[test]
    fn nn_roundtrip_is_bit_exact() {
        let ds = synthetic_dataset(2, 30, 42, |u| 0.5 + 0.2 * u[0]);
        let config = TrainConfig { max_epochs: 3, ..Default::default() };
        let model = fit_nn(&ds, &config).unwrap();
        let probe = [0.6, -0.3];
        let before = model.predict_one(&probe).unwrap();
        let loaded = roundtrip(Model::Nn(model));
        assert_eq!(loaded.predict_one(&probe).unwrap(), before);
        // Saving the loaded model reproduces the file byte for byte.
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        save_model(&loaded, &p1).unwrap();
        save_model(&roundtrip(loaded), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let ds = synthetic_dataset(2, 20, 43, |u| 0.5 + 0.1 * u[0]);
        let model = Model::Linear(fit_linear(&ds).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&model, &path).unwrap();
        assert!(load_model(&path, Some(ModelFamily::Nn)).is_err());
        assert!(load_model(&path, None).is_ok());
    }

    #[test]
    fn corruption_is_detected() {
        let ds = synthetic_dataset(2, 20, 44, |u| 0.5 + 0.1 * u[0]);
        let model = Model::Linear(fit_linear(&ds).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path, None), Err(AtlasError::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        let mut bytes = vec![0u8; 16];
        let crc = crc32fast::hash(&bytes[..12]);
        bytes[12..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path, None) {
            Err(AtlasError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
