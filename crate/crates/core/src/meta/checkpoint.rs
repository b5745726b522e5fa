//! Binary checkpoints: `SMUP1`, a little-endian `u64` header length, a JSON
//! header, then the little-endian `f32` arrays the header lists.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};

use super::config::TrainConfig;
use super::optim::Adam;

const MAGIC: &[u8; 5] = b"SMUP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Best meta-validation acc@1 seen so far.
    pub best_val: Option<f64>,
    pub omega: Vec<f32>,
    pub ft: Vec<f32>,
    /// Regulariser weights, one per invariant-head parameter.
    pub psi: Vec<f32>,
    pub opt_omega: Adam,
    pub opt_hyper: Adam,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    best_val: Option<f64>,
    arrays: Vec<(String, usize)>,
    opt_omega: Adam,
    opt_hyper: Adam,
}

fn stripped(a: &Adam) -> Adam {
    Adam { m: Vec::new(), v: Vec::new(), ..a.clone() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays: [(&str, &[f32]); 7] = [
            ("omega", &self.omega),
            ("ft", &self.ft),
            ("psi", &self.psi),
            ("opt_omega.m", &self.opt_omega.m),
            ("opt_omega.v", &self.opt_omega.v),
            ("opt_hyper.m", &self.opt_hyper.m),
            ("opt_hyper.v", &self.opt_hyper.v),
        ];
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            arrays: arrays.iter().map(|(n, a)| (n.to_string(), a.len())).collect(),
            opt_omega: stripped(&self.opt_omega),
            opt_hyper: stripped(&self.opt_hyper),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * self.omega.len() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hl = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(13..13usize.saturating_add(hl)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut rest = &bytes[13 + hl..];
        let mut arrays = Vec::new();
        for (name, len) in &header.arrays {
            let n = len.checked_mul(4).filter(|&n| n <= rest.len()).ok_or_else(|| bad(&format!("truncated array {name}")))?;
            arrays.push(rest[..n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect::<Vec<f32>>());
            rest = &rest[n..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if arrays.len() != 7 {
            return Err(bad("unexpected array count"));
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("checked count");
        let (omega, ft, psi) = (next(), next(), next());
        let opt_omega = Adam { m: next(), v: next(), ..header.opt_omega };
        let opt_hyper = Adam { m: next(), v: next(), ..header.opt_hyper };
        let ck = Self { config: header.config, epoch: header.epoch, best_val: header.best_val, omega, ft, psi, opt_omega, opt_hyper };
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        let arch = Architecture::new(self.config.model())?;
        if self.omega.len() != arch.omega.len() || self.ft.len() != arch.ft.len() {
            return Err(Error::Checkpoint(format!(
                "parameter lengths {}/{} do not match the configured model {}/{}",
                self.omega.len(),
                self.ft.len(),
                arch.omega.len(),
                arch.ft.len()
            )));
        }
        if !self.psi.is_empty() && self.psi.len() != arch.inv_range().len() {
            return Err(Error::Checkpoint("regulariser length does not match the invariant head".into()));
        }
        if self.omega.iter().chain(&self.ft).chain(&self.psi).any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(())
    }

    /// Writes via a temporary file so an interrupted save never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model { arch: Architecture::new(self.config.model())?, omega: self.omega.clone(), ft: self.ft.clone() })
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
