//! Bit-exact checkpoint archive.
//!
//! Little-endian layout:
//!   "MMCK" | version u32 | config digest 32B | step u64
//!   | tensor table | optimizer-moment table | ema flag u8 [+ table]
//! Each table: count u32, then per entry name_len u32, utf8 name,
//! rank u32, dims as u64, payload as f64 bits. Tables are sorted by name at
//! save time so save -> load -> save is byte-identical.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub opt_moments: Vec<(String, Tensor)>,
    pub ema: Option<Vec<(String, Tensor)>>,
}

impl Checkpoint {
    pub fn new(
        config_digest: [u8; 32],
        step: u64,
        mut tensors: Vec<(String, Tensor)>,
        mut opt_moments: Vec<(String, Tensor)>,
        ema: Option<Vec<(String, Tensor)>>,
    ) -> Self {
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        opt_moments.sort_by(|a, b| a.0.cmp(&b.0));
        let ema = ema.map(|mut e| {
            e.sort_by(|a, b| a.0.cmp(&b.0));
            e
        });
        Self {
            config_digest,
            step,
            tensors,
            opt_moments,
            ema,
        }
    }

    /// Tensors whose name starts with any of the given prefixes. Stage
    /// handoff loads only the backbone names from a stage-1 file.
    pub fn tensors_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Refuse resumption when the resolved config differs.
    pub fn ensure_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_digest != expected {
            return Err(Error::Integrity(
                "config digest mismatch: refusing to resume with a different configuration"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_digest);
        buf.extend_from_slice(&self.step.to_le_bytes());
        write_table(&mut buf, &self.tensors);
        write_table(&mut buf, &self.opt_moments);
        match &self.ema {
            Some(ema) => {
                buf.push(1);
                write_table(&mut buf, ema);
            }
            None => buf.push(0),
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut cur = Cursor {
            inner: std::io::BufReader::new(file),
            pos: 0,
        };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:0x?}, expected \"MMCK\""),
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let digest_bytes = cur.take(32, "config digest")?;
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(&digest_bytes);
        let step = cur.u64("step counter")?;
        let tensors = read_table(&mut cur)?;
        let opt_moments = read_table(&mut cur)?;
        let ema = match cur.u8("ema flag")? {
            0 => None,
            1 => Some(read_table(&mut cur)?),
            other => {
                return Err(Error::Format {
                    offset: cur.pos - 1,
                    reason: format!("bad ema flag {other}"),
                })
            }
        };
        Ok(Self {
            config_digest,
            step,
            tensors,
            opt_moments,
            ema,
        })
    }
}

fn write_table(buf: &mut Vec<u8>, table: &[(String, Tensor)]) {
    buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Cursor<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let start = self.pos;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: start,
            reason: format!("truncated while reading {what}"),
        })?;
        self.pos += n as u64;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn read_table<R: Read>(cur: &mut Cursor<R>) -> Result<Vec<(String, Tensor)>> {
    let count = cur.u32("table length")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_off = cur.pos;
        let name = String::from_utf8(cur.take(name_len, "tensor name")?).map_err(|_| {
            Error::Format {
                offset: name_off,
                reason: "tensor name is not utf8".into(),
            }
        })?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload_off = cur.pos;
        let bytes = cur.take(numel * 8, "tensor payload")?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = Tensor::from_vec(shape, data).map_err(|_| Error::Format {
            offset: payload_off,
            reason: format!("invalid tensor payload for '{name}'"),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = DetRng::new(8);
        Checkpoint::new(
            [7u8; 32],
            123,
            vec![
                ("mllm.embed".into(), Tensor::randn(vec![4, 3], 1.0, &mut rng)),
                ("dit.head".into(), Tensor::randn(vec![2, 2], 1.0, &mut rng)),
            ],
            vec![("opt.m.mllm.embed".into(), Tensor::zeros(vec![4, 3]))],
            Some(vec![("mllm.embed".into(), Tensor::randn(vec![4, 3], 1.0, &mut rng))]),
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mmck");
        let p2 = dir.path().join("b.mmck");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(ck, loaded);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn digest_mismatch_refused() {
        let ck = sample_checkpoint();
        assert!(ck.ensure_digest(&[7u8; 32]).is_ok());
        assert!(ck.ensure_digest(&[8u8; 32]).is_err());
    }

    #[test]
    fn prefix_filter_selects_backbone() {
        let ck = sample_checkpoint();
        let names: Vec<String> = ck
            .tensors_with_prefix(&["mllm.", "query."])
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["mllm.embed".to_string()]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mmck");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
