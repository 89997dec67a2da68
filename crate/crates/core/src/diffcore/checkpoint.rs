//! Checkpoint container: a self-describing binary file with a JSON
//! header (network specs, shapes, counters, free-form metadata) followed
//! by the raw little-endian f64 payload, so values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::adam::{AdamConfig, AdamState};
use crate::diffcore::mlp::MlpSpec;
use crate::diffcore::params::{ParamSet, ParamShape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub specs: Vec<MlpSpec>,
    pub params: ParamSet,
    pub adam: AdamState,
    pub iter: u64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    specs: Vec<MlpSpec>,
    params: Vec<ParamShape>,
    adam_config: AdamConfig,
    adam_step: u64,
    iter: u64,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            specs: self.specs.clone(),
            params: self.params.shapes(),
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            iter: self.iter,
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("checkpoint header encode: {e}")))?;

        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(&mut file);
        let put = |w: &mut std::io::BufWriter<&mut std::fs::File>, b: &[u8]| {
            w.write_all(b).map_err(|e| Error::io(path, e))
        };
        put(&mut w, MAGIC)?;
        put(&mut w, &VERSION.to_le_bytes())?;
        put(&mut w, &(header_bytes.len() as u64).to_le_bytes())?;
        put(&mut w, &header_bytes)?;
        for set in [&self.params, &self.adam.m, &self.adam.v] {
            for (_, t) in set.iter() {
                for &v in t.data() {
                    put(&mut w, &v.to_le_bytes())?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Config(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| Error::Config(format!("checkpoint header decode: {e}")))?;

        let mut cursor = 16 + hlen;
        let mut read_set = |shapes: &[ParamShape]| -> Result<ParamSet> {
            let mut set = ParamSet::new();
            for s in shapes {
                let n = s.rows * s.cols;
                let end = cursor + 8 * n;
                if end > bytes.len() {
                    return Err(Error::Config("checkpoint payload truncated".into()));
                }
                let mut data = Vec::with_capacity(n);
                for chunk in bytes[cursor..end].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
                cursor = end;
                set.insert(s.name.clone(), Tensor::from_vec(s.rows, s.cols, data))?;
            }
            Ok(set)
        };

        let params = read_set(&header.params)?;
        let m = read_set(&header.params)?;
        let v = read_set(&header.params)?;
        Ok(Checkpoint {
            specs: header.specs,
            params,
            adam: AdamState {
                config: header.adam_config,
                m,
                v,
                step: header.adam_step,
            },
            iter: header.iter,
            meta: header.meta,
        })
    }
}
