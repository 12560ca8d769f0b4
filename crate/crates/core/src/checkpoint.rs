//! Checkpoint files: a JSON header line (format version + model config),
//! a raw little-endian f32 payload of parameters and normalization
//! statistics in declaration order, and an optional optimizer section with
//! its own header line.

use crate::engine::{AdamWConfig, OptimState};
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    param_elems: usize,
    stat_elems: usize,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    section: String,
    step: u64,
    elems: usize,
}

fn write_f32s(out: &mut impl Write, arrays: &[ArrayD<f32>]) -> Result<()> {
    for a in arrays {
        let flat = a
            .as_slice()
            .ok_or_else(|| Error::Checkpoint("non-contiguous parameter".into()))?;
        let mut buf = Vec::with_capacity(flat.len() * 4);
        for v in flat {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_f32s(reader: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    reader.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save(path: &Path, model: &Model<f32>, optim: Option<&OptimState<f32>>) -> Result<()> {
    let param_elems: usize = model.params.iter().map(|p| p.len()).sum();
    let stat_elems: usize = model
        .running_mean
        .iter()
        .chain(model.running_var.iter())
        .map(|a| a.len())
        .sum();
    let header = Header {
        version: CHECKPOINT_VERSION,
        model: model.cfg.clone(),
        param_elems,
        stat_elems,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    write_f32s(&mut out, &model.params)?;
    let stats: Vec<ArrayD<f32>> = model
        .running_mean
        .iter()
        .chain(model.running_var.iter())
        .map(|a| a.clone().into_dyn())
        .collect();
    write_f32s(&mut out, &stats)?;
    if let Some(state) = optim {
        let elems: usize = state.m.iter().chain(state.v.iter()).map(|a| a.len()).sum();
        let oh = OptHeader {
            section: "optimizer".into(),
            step: state.step,
            elems,
        };
        serde_json::to_writer(&mut out, &oh)?;
        out.write_all(b"\n")?;
        write_f32s(&mut out, &state.m)?;
        write_f32s(&mut out, &state.v)?;
    }
    Ok(())
}

/// Load a checkpoint. When `expected` is given, the stored model config must
/// match exactly.
pub fn load(
    path: &Path,
    expected: Option<&ModelConfig>,
    optim_config: Option<AdamWConfig>,
) -> Result<(Model<f32>, Option<OptimState<f32>>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if let Some(exp) = expected {
        if *exp != header.model {
            return Err(Error::Checkpoint(format!(
                "model config mismatch: checkpoint {:?} vs expected {:?}",
                header.model, exp
            )));
        }
    }
    let mut model = Model::<f32>::new(header.model.clone())?;
    let param_elems: usize = model.params.iter().map(|p| p.len()).sum();
    let stat_elems: usize = model
        .running_mean
        .iter()
        .chain(model.running_var.iter())
        .map(|a| a.len())
        .sum();
    if param_elems != header.param_elems || stat_elems != header.stat_elems {
        return Err(Error::Checkpoint(format!(
            "payload size mismatch: {param_elems}+{stat_elems} vs header {}+{}",
            header.param_elems, header.stat_elems
        )));
    }
    let vals = read_f32s(&mut reader, param_elems)?;
    let mut off = 0;
    for p in model.params.iter_mut() {
        let n = p.len();
        *p = ArrayD::from_shape_vec(IxDyn(p.shape()), vals[off..off + n].to_vec()).unwrap();
        off += n;
    }
    let stats = read_f32s(&mut reader, stat_elems)?;
    let mut off = 0;
    for m in model
        .running_mean
        .iter_mut()
        .chain(model.running_var.iter_mut())
    {
        let n = m.len();
        *m = ndarray::Array1::from_vec(stats[off..off + n].to_vec());
        off += n;
    }
    // optional optimizer section
    let mut opt_line = String::new();
    let n = reader.read_line(&mut opt_line)?;
    let optim = if n > 0 && !opt_line.trim().is_empty() {
        let oh: OptHeader = serde_json::from_str(opt_line.trim_end())
            .map_err(|e| Error::Checkpoint(format!("bad optimizer header: {e}")))?;
        if oh.section != "optimizer" {
            return Err(Error::Checkpoint(format!(
                "unknown section {:?}",
                oh.section
            )));
        }
        let shapes = model.param_shapes();
        let mut state = OptimState::<f32>::new(&shapes, optim_config.unwrap_or_default());
        state.step = oh.step;
        let vals = read_f32s(&mut reader, oh.elems)?;
        let mut off = 0;
        for m in state.m.iter_mut().chain(state.v.iter_mut()) {
            let k = m.len();
            *m = ArrayD::from_shape_vec(IxDyn(m.shape()), vals[off..off + k].to_vec()).unwrap();
            off += k;
        }
        Some(state)
    } else {
        None
    };
    Ok((model, optim))
}

/// SHA-like content hash for determinism checks (FNV-1a over the file).
pub fn file_hash(path: &Path) -> Result<u64> {
    let mut f = File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in buf {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            decoder_width: 8,
            patch: 32,
            seed: 2,
        }
    }

    #[test]
    fn roundtrip_params_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::<f32>::new(small_cfg()).unwrap();
        model.params[0].fill(0.123);
        model.running_mean[0][0] = 9.0;
        save(&path, &model, None).unwrap();
        let (back, opt) = load(&path, Some(&small_cfg()), None).unwrap();
        assert!(opt.is_none());
        for (a, b) in model.params.iter().zip(back.params.iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.running_mean[0][0], 9.0);
    }

    #[test]
    fn config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(small_cfg()).unwrap();
        save(&path, &model, None).unwrap();
        let other = ModelConfig {
            base_width: 8,
            ..small_cfg()
        };
        assert!(load(&path, Some(&other), None).is_err());
    }

    #[test]
    fn optimizer_section_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(small_cfg()).unwrap();
        let shapes = model.param_shapes();
        let mut state = OptimState::<f32>::new(&shapes, AdamWConfig::default());
        state.step = 17;
        state.m[3].fill(0.5);
        save(&path, &model, Some(&state)).unwrap();
        let (_, opt) = load(&path, None, Some(AdamWConfig::default())).unwrap();
        let opt = opt.unwrap();
        assert_eq!(opt.step, 17);
        assert!(opt.m[3].iter().all(|&v| v == 0.5));
    }
}
