use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::hand_prior::HandTemplate;
use crate::nn::Params;

use super::model::init_params;
use super::RunConfig;

const MAGIC: &[u8; 8] = b"HANDPCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters with the config and template they belong to.
///
/// On disk: magic, version, then length-prefixed config text, template
/// JSON and named arrays, all little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub template: HandTemplate,
    pub params: Params,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Compatibility("checkpoint is truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Compatibility("checkpoint is truncated".into()))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Compatibility(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        put_bytes(&mut out, self.template.to_json().as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, a) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(a.shape().len() as u64).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Compatibility("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config = RunConfig::parse(&r.text()?)?;
        let template = HandTemplate::from_json(&r.text()?)?;
        let count = r.u64()?;
        let mut params = Params::new();
        for _ in 0..count {
            let name = r.text()?;
            let rank = r.len()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Compatibility("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Array::new(shape, data)?);
        }
        if !r.buf.is_empty() {
            return Err(Error::Compatibility(
                "trailing bytes after checkpoint".into(),
            ));
        }
        let ck = Self {
            config,
            template,
            params,
        };
        ck.check_layout()?;
        Ok(ck)
    }

    /// Parameter names and shapes must match what the config builds.
    pub fn check_layout(&self) -> Result<()> {
        let want = init_params(&self.config, &self.template);
        let shapes = |p: &Params| {
            p.iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if shapes(&want) != shapes(&self.params) {
            return Err(Error::Compatibility(
                "parameter layout does not match the stored config".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
