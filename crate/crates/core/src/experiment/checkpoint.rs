//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TLAB" | u32 version
//! str config            rendered key = value run configuration
//! u8 mode | u8 has_unk | [str unk] | u32 n | n * str token
//! u64 seed | f64 best_val_nll
//! u32 n | n * (str name | u32 rank | rank * u64 dim | numel * f32)
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::{Path, PathBuf};

use crate::data::{TokenMode, Vocab};
use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TLAB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub vocab: Vocab,
    pub seed: u64,
    pub best_val_nll: f64,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        config: &ExperimentConfig,
        vocab: &Vocab,
        best_val_nll: f64,
    ) -> Self {
        let mut config = config.clone();
        config.model = model.config().clone();
        Self {
            seed: config.train.seed,
            config,
            vocab: vocab.clone(),
            best_val_nll,
            params: model
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).unwrap(),
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds the model from the config echo and checks that every stored
    /// record matches the expected name and shape.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), self.seed)?;
        let expected: Vec<(&str, &[usize])> = model
            .params()
            .iter()
            .map(|p| (p.name.as_str(), p.tensor.shape()))
            .collect();
        let stored: Vec<(&str, &[usize])> = self
            .params
            .iter()
            .map(|(n, t)| (n.as_str(), t.shape()))
            .collect();
        if expected != stored {
            return Err(Error::Checkpoint(
                "parameter records do not match the configured architecture".into(),
            ));
        }
        model.restore(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.render());
        w.u8(match self.vocab.mode() {
            TokenMode::Char => 0,
            TokenMode::Word => 1,
        });
        match self.vocab.unk_token() {
            Some(u) => {
                w.u8(1);
                w.str(u);
            }
            None => w.u8(0),
        }
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        w.u64(self.seed);
        w.0.extend_from_slice(&self.best_val_nll.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for x in t.data() {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.0
    }

    /// `origin` labels relative paths in the config echo and error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing TLAB magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {VERSION})"
            )));
        }
        let config = ExperimentConfig::parse(&r.str()?, origin, "checkpoint", PathBuf::new())?;
        let mode = match r.u8()? {
            0 => TokenMode::Char,
            1 => TokenMode::Word,
            m => return Err(Error::Checkpoint(format!("unknown vocabulary mode {m}"))),
        };
        let unk = match r.u8()? {
            0 => None,
            _ => Some(r.str()?),
        };
        let n = r.u32()? as usize;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(mode, tokens, unk.as_deref())?;
        let seed = r.u64()?;
        let best_val_nll = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
            let blob = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("blob too large".into()))?,
            )?;
            let data = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t =
                Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            vocab,
            seed,
            best_val_nll,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
