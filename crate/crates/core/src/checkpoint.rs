//! Checkpoint serialization.
//!
//! Layout (little-endian): magic "PINGCKPT", version u32, two encoder
//! blocks (modality u8, 3 reserved zero bytes, four u32 stage widths,
//! parameter count u64, f64 values), two adapter blocks (modality u8,
//! enabled u8, 2 reserved zero bytes, in/out widths u32, parameter count
//! u64, f64 values), then `log(1/tau)` and the temperature cap as f64.
//! Parameters are stored at full precision so a written and re-read
//! checkpoint is bit-identical.

use crate::bank::Modality;
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::models::{Adapter, AdapterPair, EncoderDims, StudentEncoder};
use crate::objectives::TemperatureParam;
use crate::trainer::TrainOutput;
use std::path::Path;

const MAGIC: &[u8; 8] = b"PINGCKPT";
const VERSION: u32 = 1;

/// Trained parameters of one run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub image_encoder: StudentEncoder,
    pub text_encoder: StudentEncoder,
    pub adapters: AdapterPair,
    pub temperature: TemperatureParam,
}

impl Checkpoint {
    pub fn from_output(out: &TrainOutput) -> Self {
        Self {
            image_encoder: out.image_encoder.clone(),
            text_encoder: out.text_encoder.clone(),
            adapters: out.adapters.clone(),
            temperature: out.temperature.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        write_encoder(&mut w, &self.image_encoder);
        write_encoder(&mut w, &self.text_encoder);
        write_adapter(&mut w, &self.adapters.image);
        write_adapter(&mut w, &self.adapters.text);
        w.f64(self.temperature.log_inv_tau());
        w.f64(self.temperature.max_inv_tau());
        w.into_bytes()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let image_encoder = read_encoder(&mut r)?;
        let text_encoder = read_encoder(&mut r)?;
        if image_encoder.modality() != Modality::Image
            || text_encoder.modality() != Modality::Text
        {
            return Err(Error::Format(
                "checkpoint encoder blocks are out of order".into(),
            ));
        }
        let image_adapter = read_adapter(&mut r)?;
        let text_adapter = read_adapter(&mut r)?;
        let log_inv_tau = r.f64()?;
        let max_inv_tau = r.f64()?;
        r.expect_end()?;
        Ok(Self {
            image_encoder,
            text_encoder,
            adapters: AdapterPair {
                image: image_adapter,
                text: text_adapter,
            },
            temperature: TemperatureParam::from_log_inv_tau(log_inv_tau, max_inv_tau)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_encoder(w: &mut ByteWriter, e: &StudentEncoder) {
    w.u8(e.modality().code());
    w.bytes(&[0, 0, 0]);
    let d = e.dims();
    for v in [d.d_raw, d.d_hidden, d.d_proj_hidden, d.d_out] {
        w.u32(v as u32);
    }
    let params = e.flat_params();
    w.u64(params.len() as u64);
    for v in params {
        w.f64(v);
    }
}

fn read_encoder(r: &mut ByteReader) -> Result<StudentEncoder> {
    let modality = Modality::from_code(r.u8()?)?;
    r.reserved(3)?;
    let dims = EncoderDims {
        d_raw: r.u32()? as usize,
        d_hidden: r.u32()? as usize,
        d_proj_hidden: r.u32()? as usize,
        d_out: r.u32()? as usize,
    };
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(r.f64()?);
    }
    let mut encoder = StudentEncoder::new(modality, dims, 0)?;
    encoder.set_flat_params(&params)?;
    Ok(encoder)
}

fn write_adapter(w: &mut ByteWriter, a: &Adapter) {
    w.u8(a.modality().code());
    w.u8(u8::from(a.enabled()));
    w.bytes(&[0, 0]);
    w.u32(a.in_dim() as u32);
    w.u32(a.out_dim() as u32);
    let params = a.flat_params();
    w.u64(params.len() as u64);
    for v in params {
        w.f64(v);
    }
}

fn read_adapter(r: &mut ByteReader) -> Result<Adapter> {
    let modality = Modality::from_code(r.u8()?)?;
    let enabled_raw = r.u8()?;
    if enabled_raw > 1 {
        return Err(Error::Format(format!(
            "adapter enabled flag must be 0 or 1, got {enabled_raw}"
        )));
    }
    r.reserved(2)?;
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(r.f64()?);
    }
    let mut adapter = Adapter::with_enabled(modality, in_dim, out_dim, 0, enabled_raw == 1)?;
    adapter.set_flat_params(&params)?;
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::FeatureBatch;
    use crate::seeding::seeded_rng;
    use rand::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let dims = EncoderDims {
            d_raw: 6,
            d_hidden: 5,
            d_proj_hidden: 4,
            d_out: 3,
        };
        let text_dims = EncoderDims { d_raw: 7, ..dims };
        Checkpoint {
            image_encoder: StudentEncoder::new(Modality::Image, dims, 21).unwrap(),
            text_encoder: StudentEncoder::new(Modality::Text, text_dims, 22).unwrap(),
            adapters: AdapterPair {
                image: Adapter::new(Modality::Image, 5, 3, 23).unwrap(),
                text: Adapter::with_enabled(Modality::Text, 3, 3, 24, false).unwrap(),
            },
            temperature: TemperatureParam::new(0.07).unwrap(),
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, back.to_bytes());
        assert_eq!(
            ckpt.image_encoder.flat_params(),
            back.image_encoder.flat_params()
        );
        assert_eq!(
            ckpt.adapters.image.flat_params(),
            back.adapters.image.flat_params()
        );
        assert!(!back.adapters.text.enabled());
        assert_eq!(ckpt.temperature.log_inv_tau(), back.temperature.log_inv_tau());
    }

    #[test]
    fn restored_encoder_reproduces_forward_outputs() {
        let ckpt = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let mut rng = seeded_rng(3);
        let x = FeatureBatch::new(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let (a, _) = ckpt.image_encoder.forward(&x).unwrap();
        let (b, _) = back.image_encoder.forward(&x).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.pingckpt");
        let ckpt = sample_checkpoint();
        ckpt.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(ckpt.to_bytes(), back.to_bytes());
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let ckpt = sample_checkpoint();
        let mut bytes = ckpt.to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        let truncated = &bytes[..bytes.len() - 4];
        assert!(Checkpoint::from_bytes(truncated).is_err());
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err(), "trailing bytes");
        let mut bad_version = ckpt.to_bytes();
        bad_version[8] = 9;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());
    }
}
