//! Policy checkpoints: a versioned flat binary of weight arrays plus a JSON
//! sidecar carrying the shape, episode index, and training settings needed to
//! resume or to validate compatibility before reuse.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::net::{Adam, NetShape, PolicyNet};

const MAGIC: &[u8; 8] = b"FMCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub agent: String,
    pub agent_index: usize,
    pub episode: u64,
    pub input: usize,
    pub hidden: usize,
    pub head_sizes: Vec<usize>,
    pub total_episodes: u64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn shape(&self) -> NetShape {
        NetShape::new(self.input, self.hidden, self.head_sizes.clone())
    }
}

pub fn bin_path(dir: &Path, agent: &str) -> PathBuf {
    dir.join(format!("{agent}.bin"))
}

pub fn sidecar_path(dir: &Path, agent: &str) -> PathBuf {
    dir.join(format!("{agent}.json"))
}

fn write_array(out: &mut impl Write, data: &[f64]) -> Result<()> {
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    for value in data {
        out.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(input: &mut impl Read) -> Result<Vec<f64>> {
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    if len > 1 << 28 {
        return Err(Error::Checkpoint(format!(
            "array length {len} is implausibly large"
        )));
    }
    let mut buf = vec![0u8; len * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write `<agent>.bin` (params, Adam m, Adam v, Adam step) and the sidecar.
pub fn save(dir: &Path, meta: &CheckpointMeta, net: &PolicyNet, opt: &Adam) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin: Vec<u8> = Vec::new();
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&4u32.to_le_bytes());
    write_array(&mut bin, &net.params)?;
    write_array(&mut bin, &opt.m)?;
    write_array(&mut bin, &opt.v)?;
    write_array(&mut bin, &[opt.t as f64])?;
    fs::write(bin_path(dir, &meta.agent), &bin)?;
    let sidecar = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Data(format!("sidecar serialization: {e}")))?;
    fs::write(sidecar_path(dir, &meta.agent), sidecar)?;
    Ok(())
}

/// Load one agent's checkpoint pair from a directory.
pub fn load(dir: &Path, agent: &str) -> Result<(CheckpointMeta, PolicyNet, Adam)> {
    let sidecar = fs::read_to_string(sidecar_path(dir, agent))?;
    let meta: CheckpointMeta = serde_json::from_str(&sidecar)
        .map_err(|e| Error::Checkpoint(format!("sidecar for `{agent}`: {e}")))?;
    if meta.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            meta.format_version
        )));
    }

    let bytes = fs::read(bin_path(dir, agent))?;
    let mut cursor = &bytes[..];
    let mut magic = [0u8; 8];
    cursor.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in checkpoint for `{agent}`"
        )));
    }
    let mut count_bytes = [0u8; 4];
    cursor.read_exact(&mut count_bytes)?;
    if u32::from_le_bytes(count_bytes) != 4 {
        return Err(Error::Checkpoint("unexpected array count".into()));
    }
    let params = read_array(&mut cursor)?;
    let m = read_array(&mut cursor)?;
    let v = read_array(&mut cursor)?;
    let t = read_array(&mut cursor)?;

    let shape = meta.shape();
    let expected = shape.param_count();
    if params.len() != expected || m.len() != expected || v.len() != expected || t.len() != 1 {
        return Err(Error::Checkpoint(format!(
            "checkpoint for `{agent}` has inconsistent array sizes"
        )));
    }
    let net = PolicyNet { shape, params };
    net.check_finite()
        .map_err(|_| Error::Checkpoint(format!("checkpoint for `{agent}` holds non-finite weights")))?;
    let mut opt = Adam::new(expected, meta.learning_rate);
    opt.m = m;
    opt.v = v;
    opt.t = t[0] as u64;
    Ok((meta, net, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let shape = NetShape::new(7, 8, vec![5, 3]);
        let net = PolicyNet::init(shape.clone(), &mut derive_rng(1, &[2]));
        let mut opt = Adam::new(shape.param_count(), 3e-4);
        opt.t = 17;
        opt.m[3] = 0.25;
        let meta = CheckpointMeta {
            format_version: 1,
            agent: "P1".into(),
            agent_index: 0,
            episode: 42,
            input: 7,
            hidden: 8,
            head_sizes: vec![5, 3],
            total_episodes: 100,
            learning_rate: 3e-4,
            seed: 9,
        };
        save(dir.path(), &meta, &net, &opt).unwrap();
        let (meta2, net2, opt2) = load(dir.path(), "P1").unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(net.params, net2.params);
        assert_eq!(opt.m, opt2.m);
        assert_eq!(opt.t, opt2.t);
    }

    #[test]
    fn corrupt_and_missing_checkpoints_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load(dir.path(), "nope").is_err());

        let shape = NetShape::new(7, 8, vec![5]);
        let net = PolicyNet::init(shape.clone(), &mut derive_rng(3, &[4]));
        let opt = Adam::new(shape.param_count(), 1e-3);
        let meta = CheckpointMeta {
            format_version: 1,
            agent: "P2".into(),
            agent_index: 1,
            episode: 0,
            input: 7,
            hidden: 8,
            head_sizes: vec![5],
            total_episodes: 10,
            learning_rate: 1e-3,
            seed: 0,
        };
        save(dir.path(), &meta, &net, &opt).unwrap();
        // Truncate the binary.
        let path = bin_path(dir.path(), "P2");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(dir.path(), "P2").is_err());

        // Shape mismatch between sidecar and binary.
        save(dir.path(), &meta, &net, &opt).unwrap();
        let sidecar = sidecar_path(dir.path(), "P2");
        let mut meta_bad = meta.clone();
        meta_bad.hidden = 16;
        std::fs::write(&sidecar, serde_json::to_string(&meta_bad).unwrap()).unwrap();
        assert!(load(dir.path(), "P2").is_err());
    }
}
