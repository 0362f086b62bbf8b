use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, OptimizerConfig, Params};
use crate::synth::PRNG_ALGORITHM;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CNTLAB\0\x01";

/// Sidecar written next to each checkpoint as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub prng: String,
    pub optimizer: Option<OptimizerConfig>,
    /// Adam first and second moments, stored in the same tensor format.
    pub moments_file: Option<String>,
    pub last_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn bare(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            step: 0,
            epoch: 0,
            seed,
            prng: PRNG_ALGORITHM.into(),
            optimizer: None,
            moments_file: None,
            last_loss: None,
        }
    }
}

fn config_fields(c: &ModelConfig) -> [usize; 9] {
    [c.n_layers, c.n_heads, c.d_model, c.d_head, c.mlp_mult, c.vocab_size, c.max_seq, c.patch_px, c.canvas_px]
}

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v).map(u32::to_le_bytes).map_err(|_| Error::Data(format!("{v} does not fit in u32")))
}

/// Write tensors in the checkpoint wire format.
pub(crate) fn encode(cfg: &ModelConfig, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let fields = config_fields(cfg);
    out.extend(u32_of(fields.len())?);
    for f in fields {
        out.extend(u32_of(f)?);
    }
    out.extend(u32_of(tensors.len())?);
    for (name, dims, data) in tensors {
        out.extend(u32_of(name.len())?);
        out.extend(name.as_bytes());
        out.extend(u32_of(dims.len())?);
        for &d in dims {
            out.extend(u32_of(d)?);
        }
        for &v in data.iter() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Data(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub(crate) type Tensors = Vec<(String, Vec<usize>, Vec<f64>)>;

pub(crate) fn decode(buf: &[u8], path: &Path) -> Result<(ModelConfig, Tensors)> {
    let mut c = Cursor { buf, at: 0, path };
    if c.take(8)? != MAGIC {
        return Err(Error::Data(format!("{}: not a countlab checkpoint", path.display())));
    }
    let n_fields = c.u32()?;
    if n_fields != 9 {
        return Err(Error::Data(format!("{}: unexpected config block of {n_fields} fields", path.display())));
    }
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = c.u32()?;
    }
    let cfg = ModelConfig {
        n_layers: f[0],
        n_heads: f[1],
        d_model: f[2],
        d_head: f[3],
        mlp_mult: f[4],
        vocab_size: f[5],
        max_seq: f[6],
        patch_px: f[7],
        canvas_px: f[8],
    };
    let n = c.u32()?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: tensor name is not utf-8", path.display())))?;
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = c.take(count * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        tensors.push((name, dims, data));
    }
    if c.at != buf.len() {
        return Err(Error::Data(format!("{}: trailing bytes after tensors", path.display())));
    }
    Ok((cfg, tensors))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn named(p: &Params, prefix: &str, data: &[f64]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    p.layout
        .slots
        .iter()
        .map(|s| (format!("{prefix}{}", s.name), s.shape.clone(), data[s.range.clone()].to_vec()))
        .collect()
}

fn encode_named(p: &Params, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Vec<u8>> {
    let refs: Vec<_> = tensors.iter().map(|(n, d, v)| (n.clone(), d.clone(), v.as_slice())).collect();
    encode(&p.cfg, &refs)
}

/// Save weights (as 32-bit floats) and the JSON sidecar.
pub fn save_checkpoint(path: &Path, params: &Params, meta: &CheckpointMeta) -> Result<()> {
    write_file(path, &encode_named(params, &named(params, "", &params.data))?)?;
    write_file(&sidecar_path(path), serde_json::to_string_pretty(meta)?.as_bytes())
}

pub(crate) fn save_moments(path: &Path, params: &Params, m: &[f64], v: &[f64]) -> Result<()> {
    let mut t = named(params, "m.", m);
    t.extend(named(params, "v.", v));
    write_file(path, &encode_named(params, &t)?)
}

fn fill(p: &mut Params, tensors: Tensors, prefix: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; p.data.len()];
    for (name, dims, data) in tensors {
        let Some(stripped) = name.strip_prefix(prefix) else { continue };
        let slot = p
            .slot(stripped)
            .ok_or_else(|| Error::Data(format!("{}: unknown tensor {name}", path.display())))?;
        if slot.shape != dims {
            return Err(Error::Data(format!("{}: tensor {name} has shape {dims:?}, expected {:?}", path.display(), slot.shape)));
        }
        out[slot.range.clone()].copy_from_slice(&data);
    }
    if let Some(s) = p.layout.slots.iter().find(|s| out[s.range.clone()].iter().any(|v| v.is_nan())) {
        return Err(Error::Data(format!("{}: tensor {prefix}{} missing", path.display(), s.name)));
    }
    Ok(out)
}

/// Load weights and, when present, the sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(Params, Option<CheckpointMeta>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let (cfg, tensors) = decode(&buf, path)?;
    let mut p = Params::zeros(cfg).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    p.data = fill(&mut p, tensors, "", path)?;
    p.check_finite()?;
    let side = sidecar_path(path);
    let meta = if side.exists() { Some(serde_json::from_slice(&fs::read(side)?)?) } else { None };
    Ok((p, meta))
}

pub fn load_moments(path: &Path, params: &Params) -> Result<(Vec<f64>, Vec<f64>)> {
    let buf = fs::read(path)?;
    let (cfg, tensors) = decode(&buf, path)?;
    if cfg != params.cfg {
        return Err(Error::Data(format!("{}: optimizer state is for a different model", path.display())));
    }
    let mut scratch = params.zeros_like();
    let (m_t, v_t): (Tensors, Tensors) = tensors.into_iter().partition(|t| t.0.starts_with("m."));
    let m = fill(&mut scratch, m_t, "m.", path)?;
    let v = fill(&mut scratch, v_t, "v.", path)?;
    Ok((m, v))
}
