//! Portable checkpoint container: a text manifest followed by one
//! little-endian `f64` payload. The layout is described in
//! `docs/checkpoint-format.md`.
//!
//! ```text
//! nmt-ablation-checkpoint 1
//! section <name> <byte-length>
//! <byte-length bytes of UTF-8 text>
//! tensor <name> <trainable:0|1> <rank> <extent>... <offset>
//! payload <element-count>
//! <element-count * 8 bytes, little-endian f64>
//! ```
//!
//! Tensor offsets count `f64` elements from the start of the payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "nmt-ablation-checkpoint 1";

/// Named text sections plus a parameter store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_str())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (name, text) in &self.sections {
            writeln!(w, "section {name} {}", text.len())?;
            w.write_all(text.as_bytes())?;
        }
        let mut offset = 0usize;
        for (_, name, t) in self.params.iter() {
            write!(w, "tensor {name} {} {}", u8::from(t.requires_grad()), t.shape().len())?;
            for d in t.shape() {
                write!(w, " {d}")?;
            }
            writeln!(w, " {offset}")?;
            offset += t.len();
        }
        writeln!(w, "payload {offset}")?;
        for (_, _, t) in self.params.iter() {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let bad = |msg: String| Error::Data(format!("checkpoint: {msg}"));
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r
                .read_line(line)
                .map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
            if n == 0 {
                return Err(Error::Data("checkpoint: unexpected end of file".into()));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad(format!("bad header {:?}", line.trim_end())));
        }
        let mut sections = Vec::new();
        let mut manifest: Vec<(String, bool, Vec<usize>, usize)> = Vec::new();
        let total = loop {
            next_line(&mut r, &mut line)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["section", name, len] => {
                    let len: usize = len.parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
                    let text = String::from_utf8(buf).map_err(|_| bad(format!("section {name} is not UTF-8")))?;
                    sections.push((name.to_string(), text));
                }
                ["tensor", name, trainable, rank, rest @ ..] => {
                    let rank: usize = rank.parse().map_err(|_| bad(format!("bad rank in {line:?}")))?;
                    if rest.len() != rank + 1 {
                        return Err(bad(format!("malformed tensor line {line:?}")));
                    }
                    let nums: Vec<usize> = rest
                        .iter()
                        .map(|s| s.parse().map_err(|_| bad(format!("bad number in {line:?}"))))
                        .collect::<Result<_>>()?;
                    manifest.push((name.to_string(), *trainable == "1", nums[..rank].to_vec(), nums[rank]));
                }
                ["payload", n] => break n.parse::<usize>().map_err(|_| bad(format!("bad payload count {n}")))?,
                _ => return Err(bad(format!("unexpected line {:?}", line.trim_end()))),
            }
        };
        let mut raw = vec![0u8; total * 8];
        r.read_exact(&mut raw).map_err(|e| bad(format!("payload: {e}")))?;
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut params = ParamStore::new();
        for (name, trainable, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            if offset + n > total {
                return Err(bad(format!("tensor {name} overruns payload")));
            }
            let t = Tensor::new(&shape, payload[offset..offset + n].to_vec())?;
            let id = params.insert(&name, t)?;
            params.set_frozen(id, !trainable);
        }
        Ok(Self { sections, params })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}
