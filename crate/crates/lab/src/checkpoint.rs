//! Binary trainer checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DPDCKPT1" | version u32 | config hash (u32 len + utf8) | step u64
//! rng: seed [u8; 32] | stream u64 | word_pos u128
//! params: count u32, then blobs
//! 2 x optimizer: t u64 | skipped u64 | count u32 | m blobs | v blobs
//! blob: name (u32 len + utf8) | ndim u32 | dims u64... | values f64...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use dpd_core::losses::Adam;
use dpd_core::train::Trainer;
use dpd_core::{ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{io_err, LabError, Result};

pub const MAGIC: &[u8; 8] = b"DPDCKPT1";
pub const VERSION: u32 = 1;

/// A named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub skipped: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    fn of(adam: &Adam) -> Self {
        let (m, v) = adam.moments();
        Self {
            t: adam.t,
            skipped: adam.skipped,
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }
}

/// Everything needed to continue training bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub params: Vec<Blob>,
    pub main_opt: OptimizerState,
    pub dpd_opt: OptimizerState,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config_hash: &str) -> Self {
        let mut params = Vec::new();
        trainer.params.visit(&mut |p| {
            params.push(Blob {
                name: p.name.clone(),
                tensor: p.value.clone(),
            })
        });
        Self {
            config_hash: config_hash.to_string(),
            step: trainer.step as u64,
            rng_seed: trainer.rng.get_seed(),
            rng_stream: trainer.rng.get_stream(),
            rng_word_pos: trainer.rng.get_word_pos(),
            params,
            main_opt: OptimizerState::of(&trainer.main_opt),
            dpd_opt: OptimizerState::of(&trainer.dpd_opt),
        }
    }

    /// Writes parameters, optimizer moments, step and RNG position into
    /// `trainer`, whose configuration must produce the same parameter layout.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        let mut idx = 0;
        let mut bad = None;
        trainer.params.visit_mut(&mut |p| {
            match self.params.get(idx) {
                Some(b) if b.name == p.name && b.tensor.shape() == p.value.shape() => p.value = b.tensor.clone(),
                _ => bad = bad.take().or(Some(p.name.clone())),
            }
            idx += 1;
        });
        if let Some(name) = bad {
            return Err(LabError::Config(format!("checkpoint does not fit parameter {}", name)));
        }
        if idx != self.params.len() {
            return Err(LabError::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                idx
            )));
        }
        let adam = |s: &OptimizerState| Adam::from_state(trainer.config.adam, s.t, s.skipped, s.m.clone(), s.v.clone());
        let main_opt = adam(&self.main_opt)?;
        let dpd_opt = adam(&self.dpd_opt)?;
        trainer.main_opt = main_opt;
        trainer.dpd_opt = dpd_opt;
        trainer.step = self.step as usize;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        trainer.rng = rng;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.config_hash);
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.rng_seed);
        w.extend_from_slice(&self.rng_stream.to_le_bytes());
        w.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for b in &self.params {
            put_blob(&mut w, &b.name, &b.tensor);
        }
        for (label, opt) in [("main", &self.main_opt), ("dpd", &self.dpd_opt)] {
            w.extend_from_slice(&opt.t.to_le_bytes());
            w.extend_from_slice(&opt.skipped.to_le_bytes());
            w.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
            for (kind, list) in [("m", &opt.m), ("v", &opt.v)] {
                for (i, t) in list.iter().enumerate() {
                    put_blob(&mut w, &format!("opt.{}.{}.{}", label, kind, i), t);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(format!("unsupported version {}", version));
        }
        let config_hash = get_str(&mut r)?;
        let step = get_u64(&mut r)?;
        let mut rng_seed = [0u8; 32];
        read_exact(&mut r, &mut rng_seed)?;
        let rng_stream = get_u64(&mut r)?;
        let mut wp = [0u8; 16];
        read_exact(&mut r, &mut wp)?;
        let rng_word_pos = u128::from_le_bytes(wp);
        let n = get_u32(&mut r)? as usize;
        let params = (0..n).map(|_| get_blob(&mut r)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut opts = Vec::new();
        for _ in 0..2 {
            let t = get_u64(&mut r)?;
            let skipped = get_u64(&mut r)?;
            let k = get_u32(&mut r)? as usize;
            let m = (0..k).map(|_| get_blob(&mut r).map(|b| b.tensor)).collect::<std::result::Result<Vec<_>, _>>()?;
            let v = (0..k).map(|_| get_blob(&mut r).map(|b| b.tensor)).collect::<std::result::Result<Vec<_>, _>>()?;
            opts.push(OptimizerState { t, skipped, m, v });
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        let dpd_opt = opts.pop().expect("two optimizers");
        let main_opt = opts.pop().expect("two optimizers");
        Ok(Self {
            config_hash,
            step,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            main_opt,
            dpd_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&self.to_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|detail| LabError::Format {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// Loads a checkpoint for resuming and refuses it when it was written
    /// under a different configuration.
    pub fn load_for_resume(path: &Path, expected_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config_hash != expected_hash {
            return Err(LabError::HashMismatch {
                path: path.to_path_buf(),
                found: ck.config_hash,
                expected: expected_hash.to_string(),
            });
        }
        Ok(ck)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_blob(w: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(w, name);
    w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> std::result::Result<(), String> {
    r.read_exact(buf).map_err(|_| "unexpected end of file".to_string())
}

fn get_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> std::result::Result<String, String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return Err("string length past end of file".into());
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| e.to_string())
}

fn get_blob(r: &mut &[u8]) -> std::result::Result<Blob, String> {
    let name = get_str(r)?;
    let ndim = get_u32(r)? as usize;
    let shape = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    if n.checked_mul(8).is_none_or(|bytes| bytes > r.len()) {
        return Err(format!("tensor {} runs past end of file", name));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(get_u64(r)?));
    }
    let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok(Blob { name, tensor })
}
