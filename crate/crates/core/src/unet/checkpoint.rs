//! Versioned checkpoint files: magic, format version, JSON header, then
//! little-endian `f32` blobs (parameters, optionally optimiser state).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, UNet};
use crate::error::{Error, Result};
use crate::optimizer::{LookaheadState, RAdamParams, RAdamState, Ranger};

const FORMAT: &str = "checkpoint";
pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: RAdamParams,
    step: u64,
    k: u64,
    alpha: f64,
    counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    param_count: usize,
    config_hash: String,
    source: String,
    epoch: usize,
    val_dsc: Option<f64>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<f32>,
    /// Hash of the resolved training configuration.
    pub config_hash: String,
    /// Training source: a dataset ID or `combined`.
    pub source: String,
    pub epoch: usize,
    pub val_dsc: Option<f64>,
    pub optimizer: Option<Ranger>,
}

impl Checkpoint {
    pub fn from_model(model: &UNet, config_hash: &str, source: &str, epoch: usize) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            params: model.params().to_vec(),
            config_hash: config_hash.to_string(),
            source: source.to_string(),
            epoch,
            val_dsc: None,
            optimizer: None,
        }
    }

    pub fn model(&self) -> Result<UNet> {
        UNet::from_params(&self.spec, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            spec: self.spec.clone(),
            param_count: self.params.len(),
            config_hash: self.config_hash.clone(),
            source: self.source.clone(),
            epoch: self.epoch,
            val_dsc: self.val_dsc,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                hyper: o.radam.hyper,
                step: o.radam.step,
                k: o.lookahead.k,
                alpha: o.lookahead.alpha,
                counter: o.lookahead.counter,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&tmp, e));
        put(MAGIC)?;
        put(&VERSION.to_le_bytes())?;
        put(&(json.len() as u64).to_le_bytes())?;
        put(&json)?;
        let mut blob = |v: &[f32]| -> Result<()> {
            let mut buf = vec![0u8; v.len() * 4];
            LittleEndian::write_f32_into(v, &mut buf);
            put(&buf)
        };
        blob(&self.params)?;
        if let Some(o) = &self.optimizer {
            blob(&o.radam.m)?;
            blob(&o.radam.v)?;
            blob(&o.lookahead.slow)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::parse(FORMAT, "magic", "not a checkpoint file"));
        }
        let version = LittleEndian::read_u32(&bytes[8..12]);
        if version != VERSION {
            return Err(Error::parse(FORMAT, "version", format!("unsupported version {version}")));
        }
        let hlen = LittleEndian::read_u64(&bytes[12..20]) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::parse(FORMAT, "header", "truncated"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let n = header.param_count;
        let blobs = if header.optimizer.is_some() { 4 } else { 1 };
        let data = &body[hlen..];
        if data.len() != blobs * n * 4 {
            return Err(Error::parse(
                FORMAT,
                "parameters",
                format!("expected {} bytes of blobs, found {}", blobs * n * 4, data.len()),
            ));
        }
        let read = |i: usize| -> Vec<f32> {
            let mut v = vec![0f32; n];
            LittleEndian::read_f32_into(&data[i * n * 4..(i + 1) * n * 4], &mut v);
            v
        };
        let params = read(0);
        let optimizer = header.optimizer.as_ref().map(|o| Ranger {
            radam: RAdamState {
                hyper: o.hyper,
                step: o.step,
                m: read(1),
                v: read(2),
            },
            lookahead: LookaheadState {
                slow: read(3),
                k: o.k,
                alpha: o.alpha,
                counter: o.counter,
            },
        });
        let ckpt = Checkpoint {
            spec: header.spec,
            params,
            config_hash: header.config_hash,
            source: header.source,
            epoch: header.epoch,
            val_dsc: header.val_dsc,
            optimizer,
        };
        // Rebuilding validates that the spec matches the blob.
        ckpt.model()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::RangerParams;
    use tempfile::tempdir;

    fn spec() -> ModelSpec {
        ModelSpec {
            depth: 2,
            base_channels: 4,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn roundtrip_with_and_without_optimizer() {
        let dir = tempdir().unwrap();
        let net = UNet::new(&spec(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&net, "abc", "promise12", 4);
        ck.val_dsc = Some(0.5);
        let p = dir.path().join("a.bin");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);

        let mut opt = Ranger::new(net.params(), RangerParams::default()).unwrap();
        opt.radam.step = 7;
        opt.radam.m[0] = 0.25;
        opt.lookahead.counter = 7;
        ck.optimizer = Some(opt);
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap().param_count(), net.param_count());
    }

    #[test]
    fn rejects_garbage_and_mismatched_spec() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        fs::write(&p, b"hello world, this is not a checkpoint").unwrap();
        assert!(Checkpoint::load(&p).is_err());

        let net = UNet::new(&spec(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&net, "abc", "combined", 0);
        ck.spec.base_channels = 8;
        ck.save(&p).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
