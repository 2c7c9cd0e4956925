//! Model checkpoints.
//!
//! Layout: a UTF-8 header of `key=value` lines opened by the magic line
//! `overdilute-checkpoint 1` and closed by `end`, followed by the tensors in
//! name order. Each tensor record is
//! `u32 name length | name bytes | u64 rows | u64 cols | rows·cols f64`,
//! all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::{Model, ModelConfig, Task};
use crate::tensor::Tensor;

const MAGIC: &str = "overdilute-checkpoint 1";

pub fn encode(model: &Model) -> Vec<u8> {
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    let mut kv = model.config.to_kv();
    match model.task {
        Task::Link => kv.push(("task".into(), "link".into())),
        Task::NodeClass { classes } => {
            kv.push(("task".into(), "nodeclass".into()));
            kv.push(("classes".into(), classes.to_string()));
        }
    }
    kv.push(("num_attributes".into(), model.num_attributes.to_string()));
    kv.push(("tensors".into(), model.params.len().to_string()));
    for (k, v) in kv {
        head.push_str(&format!("{k}={v}\n"));
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
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
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("unterminated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let mut kv = BTreeMap::new();
    loop {
        let line = r.line()?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_kv(&kv)?;
    let num = |k: &str| -> Result<usize> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("missing or bad `{k}`")))
    };
    let task = match kv.get("task").map(String::as_str) {
        Some("link") => Task::Link,
        Some("nodeclass") => Task::NodeClass {
            classes: num("classes")?,
        },
        other => return Err(Error::Format(format!("bad task {other:?}"))),
    };
    let num_attributes = num("num_attributes")?;
    let count = num("tensors")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    let reference = Model::new(config.clone(), task, num_attributes, 0)?;
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Some(p) if p.same_shape(t) => {}
            _ => return Err(Error::Format(format!("tensor {name} missing or misshapen"))),
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::Format("unexpected tensors in checkpoint".into()));
    }
    Ok(Model {
        config,
        task,
        num_attributes,
        params,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn roundtrip_bitwise() {
        let cfg = ModelConfig {
            hidden: 8,
            d_ffn: 16,
            heads: 2,
            ..ModelConfig::new(ModelKind::NatrGcn)
        };
        let m = Model::new(cfg, Task::NodeClass { classes: 3 }, 5, 11).unwrap();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_truncation() {
        let m = Model::new(
            ModelConfig {
                hidden: 4,
                ..ModelConfig::new(ModelKind::Gcn)
            },
            Task::Link,
            3,
            0,
        )
        .unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"hello\n").is_err());
    }
}
