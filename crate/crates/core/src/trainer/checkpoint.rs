use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::TrainConfig;
use crate::blockworld::Vocab;
use crate::error::{ClaspError, Result};
use crate::substrate::{Adam, AdamConfig, ParamStore, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";
pub const CKPT_VERSION: u32 = 1;

/// Everything needed to continue training or evaluate: parameters of every
/// head, the run configuration, the vocabulary, the step counter and the
/// optimizer moments. Noise is keyed by `(seed, step)`, so the step counter
/// is the whole random state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    pub step: u64,
    pub adam: Option<Adam<f32>>,
    pub prior_step: u64,
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.write_u32::<LE>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    if n > r.get_ref().len() {
        return Err(ClaspError::Corrupt("string length past end".into()));
    }
    let mut b = vec![0; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| ClaspError::Corrupt("string is not utf-8".into()))
}

fn put_floats(out: &mut Vec<u8>, v: &[f32]) -> Result<()> {
    for &x in v {
        out.write_f32::<LE>(x)?;
    }
    Ok(())
}

fn get_floats(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f32>> {
    if n * 4 > r.get_ref().len() {
        return Err(ClaspError::Corrupt("array length past end".into()));
    }
    let mut v = vec![0.0; n];
    r.read_f32_into::<LE>(&mut v)?;
    Ok(v)
}

impl Checkpoint {
    /// `"CKPT" | u32 version | u64 body length | body | u32 crc32(everything before)`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        put_str(&mut body, &self.config.to_text())?;
        body.write_u32::<LE>(self.vocab.len() as u32)?;
        for w in self.vocab.words() {
            put_str(&mut body, w)?;
        }
        body.write_u64::<LE>(self.step)?;
        body.write_u64::<LE>(self.prior_step)?;
        body.write_u32::<LE>(self.store.len() as u32)?;
        for p in self.store.iter() {
            put_str(&mut body, &p.name)?;
            body.write_u32::<LE>(p.value.rows as u32)?;
            body.write_u32::<LE>(p.value.cols as u32)?;
            put_floats(&mut body, &p.value.data)?;
        }
        match &self.adam {
            None => body.write_u8(0)?,
            Some(a) => {
                body.write_u8(1)?;
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    body.write_f64::<LE>(v)?;
                }
                body.write_u64::<LE>(a.step)?;
                body.write_u32::<LE>(a.m.len() as u32)?;
                for (m, v) in a.m.iter().zip(&a.v) {
                    body.write_u32::<LE>(m.len() as u32)?;
                    put_floats(&mut body, m)?;
                    put_floats(&mut body, v)?;
                }
            }
        }
        let mut out = Vec::with_capacity(body.len() + 20);
        out.extend_from_slice(&CKPT_MAGIC);
        out.write_u32::<LE>(CKPT_VERSION)?;
        out.write_u64::<LE>(body.len() as u64)?;
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.write_u32::<LE>(crc)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(ClaspError::Truncated(
                "checkpoint shorter than its magic".into(),
            ));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if magic != CKPT_MAGIC {
            return Err(ClaspError::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(ClaspError::Truncated("checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != CKPT_VERSION {
            return Err(ClaspError::VersionMismatch {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let end = 16usize
            .checked_add(body_len)
            .ok_or_else(|| ClaspError::Corrupt("body length overflows".into()))?;
        if bytes.len() < end + 4 {
            return Err(ClaspError::Truncated(format!(
                "checkpoint body needs {} bytes, file has {}",
                end + 4,
                bytes.len()
            )));
        }
        if bytes.len() > end + 4 {
            return Err(ClaspError::Corrupt(
                "trailing bytes after checkpoint".into(),
            ));
        }
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("four bytes"));
        let computed = crc32fast::hash(&bytes[..end]);
        if stored != computed {
            return Err(ClaspError::Checksum { stored, computed });
        }
        Self::parse_body(&bytes[16..end]).map_err(|e| match e {
            ClaspError::Io(_) => ClaspError::Corrupt("checkpoint body ends early".into()),
            other => other,
        })
    }

    fn parse_body(body: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(body);
        let config = TrainConfig::from_text(&get_str(&mut r)?)?;
        let n_words = r.read_u32::<LE>()? as usize;
        let words = (0..n_words)
            .map(|_| get_str(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_words(words)
            .map_err(|e| ClaspError::Corrupt(format!("vocabulary: {e}")))?;
        let step = r.read_u64::<LE>()?;
        let prior_step = r.read_u64::<LE>()?;
        let n_params = r.read_u32::<LE>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name = get_str(&mut r)?;
            let rows = r.read_u32::<LE>()? as usize;
            let cols = r.read_u32::<LE>()? as usize;
            let data = get_floats(&mut r, rows.saturating_mul(cols))?;
            if store.lookup(&name).is_some() {
                return Err(ClaspError::Corrupt(format!("parameter `{name}` repeated")));
            }
            store.register(name, Tensor::from_vec(rows, cols, data));
        }
        let adam = match r.read_u8()? {
            0 => None,
            1 => {
                let mut c = [0.0; 4];
                for v in &mut c {
                    *v = r.read_f64::<LE>()?;
                }
                let config = AdamConfig {
                    lr: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    eps: c[3],
                };
                let astep = r.read_u64::<LE>()?;
                let n = r.read_u32::<LE>()? as usize;
                if n > n_params {
                    return Err(ClaspError::Corrupt(
                        "more optimizer slots than parameters".into(),
                    ));
                }
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let len = r.read_u32::<LE>()? as usize;
                    m.push(get_floats(&mut r, len)?);
                    v.push(get_floats(&mut r, len)?);
                }
                Some(Adam {
                    config,
                    step: astep,
                    m,
                    v,
                })
            }
            t => return Err(ClaspError::Corrupt(format!("bad optimizer tag {t}"))),
        };
        if (r.position() as usize) != body.len() {
            return Err(ClaspError::Corrupt(
                "unread bytes in checkpoint body".into(),
            ));
        }
        Ok(Self {
            config,
            vocab,
            store,
            step,
            adam,
            prior_step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
