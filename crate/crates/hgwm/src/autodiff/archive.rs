//! Named-tensor archive: a text header (metadata key/value pairs, then one
//! `name ndim dims...` line per tensor) followed by the raw little-endian f64
//! payloads in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "HGWM-ARCHIVE 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\nmeta {}\n", self.meta.len());
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata entry `{k}` cannot be stored on one line")));
            }
            head.push_str(&format!("{k}={v}\n"));
        }
        head.push_str(&format!("tensors {}\n", self.tensors.len()));
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor name `{name}` must be non-empty without whitespace")));
            }
            head.push_str(&format!("{name} {}", t.shape().len()));
            for d in t.shape() {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated archive header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("archive header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(Error::Format("not a tensor archive".into()));
        }
        let count = |line: &str, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("expected `{key} <n>`, found `{line}`")))
        };
        let n_meta = count(next_line()?, "meta")?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let line = next_line()?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n_tensors = count(next_line()?, "tensors")?;
        let mut headers = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let line = next_line()?;
            let mut it = line.split(' ');
            let name = it.next().unwrap_or_default().to_string();
            let nums: Vec<usize> = it
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad tensor header `{line}`"))))
                .collect::<Result<_>>()?;
            if nums.is_empty() || nums[0] != nums.len() - 1 {
                return Err(Error::Format(format!("bad tensor header `{line}`")));
            }
            headers.push((name, nums[1..].to_vec()));
        }
        if next_line()? != "data" {
            return Err(Error::Format("missing data marker".into()));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        let mut body = &bytes[pos..];
        for (name, shape) in headers {
            let n: usize = shape.iter().product();
            if body.len() < 8 * n {
                return Err(Error::Format(format!("payload for `{name}` is truncated")));
            }
            let data = body[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            body = &body[8 * n..];
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !body.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after payloads", body.len())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
