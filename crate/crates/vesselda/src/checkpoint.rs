//! Parameter archives (`params.bin`) with a JSON manifest.
//!
//! `params.bin` layout, all little-endian: magic `VDAPARAM`, u64 count, then
//! per tensor a u32 name length, the UTF-8 name, a u32 rank, u64 dims and
//! f32 values.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vesselda_core::nets::{ArchConfig, Networks};
use vesselda_core::nn::ParamStore;
use vesselda_core::tensor::Tensor;

use crate::manifest::write_atomic;

const MAGIC: &[u8; 8] = b"VDAPARAM";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    /// `phase1` or `phase2`.
    pub phase: String,
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub iteration: u64,
    /// Phase 2 updates behind these parameters; 0 for Phase 1 checkpoints.
    pub phase2_steps: u64,
    pub seed: u64,
    pub params_sha256: String,
    pub config: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of parameter names, groups and shapes plus the architecture.
pub fn arch_hash(nets: &Networks, store: &ParamStore<f32>) -> String {
    sha256_hex(nets.descriptor(store).as_bytes())
}

pub fn encode_params(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), "parameter archive truncated at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

/// Overwrites every tensor of `store` from an archive; names, order and
/// shapes must match exactly.
pub fn decode_params_into(bytes: &[u8], store: &mut ParamStore<f32>) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    ensure!(r.take(8)? == MAGIC, "not a parameter archive");
    let n = r.u64()? as usize;
    ensure!(n == store.len(), "archive holds {} tensors, model has {}", n, store.len());
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)?;
        ensure!(got == name, "archive tensor {got:?} where model expects {name:?}");
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        ensure!(dims == shape, "{name}: archive shape {dims:?}, model shape {shape:?}");
        let count: usize = dims.iter().product();
        let data: Vec<f32> = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *store.get_mut(id) = Tensor::from_vec(&dims, data)?;
    }
    ensure!(r.pos == bytes.len(), "trailing bytes in parameter archive");
    Ok(())
}

pub fn save(dir: &Path, nets: &Networks, store: &ParamStore<f32>, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let bytes = encode_params(store);
    let mut m = manifest.clone();
    m.arch = nets.arch.clone();
    m.arch_hash = arch_hash(nets, store);
    m.params_sha256 = sha256_hex(&bytes);
    write_atomic(&dir.join(PARAMS_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), (serde_json::to_string_pretty(&m)? + "\n").as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Rebuilds the networks described by the manifest and loads the archive.
/// With `expect_arch`, the architecture hash must match the one implied by
/// that configuration.
pub fn load(dir: &Path, expect_arch: Option<&ArchConfig>) -> Result<(Networks, ParamStore<f32>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let (nets, mut store) = Networks::new::<f32>(&m.arch, m.seed)?;
    let hash = arch_hash(&nets, &store);
    if hash != m.arch_hash {
        bail!("{}: architecture hash {} does not match its arch section ({hash})", dir.display(), m.arch_hash);
    }
    if let Some(a) = expect_arch {
        let (n2, s2) = Networks::new::<f32>(a, 0)?;
        let want = arch_hash(&n2, &s2);
        ensure!(want == hash, "checkpoint architecture {hash} does not match configured architecture {want}");
    }
    let p = dir.join(PARAMS_FILE);
    let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
    ensure!(sha256_hex(&bytes) == m.params_sha256, "{}: checksum mismatch", p.display());
    decode_params_into(&bytes, &mut store)?;
    Ok((nets, store, m))
}
