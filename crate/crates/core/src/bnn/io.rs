//! Network containers.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic   b"FBNN"
//! version u8        (= 1)
//! mode    u8        0 = bayesian, 1 = deterministic
//! count   u32       number of tensor entries
//! entry*  layer u32 | tag u8 | rank u8 | dims u32×rank | values f64×Π(dims)
//! ```
//!
//! Tags: 0 = muW, 1 = rhoW, 2 = mub, 3 = rhob. The text form carries the same
//! entries, one per line, with shortest round-trip decimal values.

use super::{Mode, VariationalLayer, VariationalNet};
use crate::numkernel::{Tensor1, Tensor2};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FBNN";
pub const VERSION: u8 = 1;
const TEXT_HEADER: &str = "fedbayes-net v1";

const TAGS: [&str; 4] = ["muW", "rhoW", "mub", "rhob"];

struct Entry {
    layer: u32,
    tag: u8,
    dims: Vec<u32>,
    values: Vec<f64>,
}

fn entries(net: &VariationalNet) -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let (r, c) = (l.outputs() as u32, l.inputs() as u32);
        for (tag, s) in l.slices().into_iter().enumerate() {
            let dims = if tag < 2 { vec![r, c] } else { vec![r] };
            out.push(Entry {
                layer: i as u32,
                tag: tag as u8,
                dims,
                values: s.to_vec(),
            });
        }
    }
    out
}

fn assemble(mode: Mode, entries: Vec<Entry>) -> Result<VariationalNet> {
    let n_layers = entries.iter().map(|e| e.layer as usize + 1).max().unwrap_or(0);
    let mut slots: Vec<[Option<Entry>; 4]> = (0..n_layers).map(|_| Default::default()).collect();
    for e in entries {
        let slot = &mut slots[e.layer as usize][e.tag as usize];
        if slot.is_some() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("duplicate {} for layer {}", TAGS[e.tag as usize], e.layer),
            });
        }
        *slot = Some(e);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, slot) in slots.into_iter().enumerate() {
        let [mw, rw, mb, rb] = slot.map(|e| {
            e.ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("layer {i} is missing a tensor"),
            })
        });
        let (mw, rw, mb, rb) = (mw?, rw?, mb?, rb?);
        let mat = |e: Entry| -> Result<Tensor2> {
            match e.dims[..] {
                [r, c] => Tensor2::from_vec(r as usize, c as usize, e.values),
                _ => Err(Error::Format {
                    offset: 0,
                    msg: format!("{} of layer {i} must be rank 2", TAGS[e.tag as usize]),
                }),
            }
        };
        let vec1 = |e: Entry| -> Result<Tensor1> {
            match e.dims[..] {
                [n] if n as usize == e.values.len() => Ok(Tensor1::from(e.values)),
                _ => Err(Error::Format {
                    offset: 0,
                    msg: format!("{} of layer {i} must be rank 1", TAGS[e.tag as usize]),
                }),
            }
        };
        layers.push(VariationalLayer::new(mat(mw)?, mat(rw)?, vec1(mb)?, vec1(rb)?)?);
    }
    VariationalNet::from_layers(layers, mode)
}

pub fn to_bytes(net: &VariationalNet) -> Vec<u8> {
    let entries = entries(net);
    let mut buf = Vec::with_capacity(16 + net.num_params() * 8 + entries.len() * 16);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(match net.mode() {
        Mode::Bayesian => 0,
        Mode::Deterministic => 1,
    });
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&e.layer.to_le_bytes());
        buf.push(e.tag);
        buf.push(e.dims.len() as u8);
        for d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
}

/// Parse a net; returns it with the number of bytes consumed.
pub fn read_bytes(buf: &[u8]) -> Result<(VariationalNet, usize)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic, expected {MAGIC:?}"),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let mode = match r.u8("mode")? {
        0 => Mode::Bayesian,
        1 => Mode::Deterministic,
        m => return Err(r.err(format!("unknown mode byte {m}"))),
    };
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let layer = r.u32("layer index")?;
        let tag = r.u8("tag")?;
        if tag > 3 {
            return Err(r.err(format!("unknown tensor tag {tag}")));
        }
        let rank = r.u8("rank")?;
        if !(1..=2).contains(&rank) {
            return Err(r.err(format!("bad rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if n > (buf.len() - r.pos) / 8 {
            return Err(r.err("tensor larger than remaining input"));
        }
        let values = (0..n).map(|_| r.f64("values")).collect::<Result<Vec<_>>>()?;
        entries.push(Entry {
            layer,
            tag,
            dims,
            values,
        });
    }
    Ok((assemble(mode, entries)?, r.pos))
}

pub fn from_bytes(buf: &[u8]) -> Result<VariationalNet> {
    let (net, used) = read_bytes(buf)?;
    if used != buf.len() {
        return Err(Error::Format {
            offset: used as u64,
            msg: "trailing bytes after network".into(),
        });
    }
    Ok(net)
}

pub fn to_text(net: &VariationalNet) -> String {
    let entries = entries(net);
    let mut s = format!(
        "{TEXT_HEADER}\nmode {}\nentries {}\n",
        net.mode().as_str(),
        entries.len()
    );
    for e in entries {
        s.push_str(&format!("{} {} {}", e.layer, TAGS[e.tag as usize], e.dims.len()));
        for d in &e.dims {
            s.push_str(&format!(" {d}"));
        }
        for v in &e.values {
            s.push_str(&format!(" {v:?}"));
        }
        s.push('\n');
    }
    s
}

pub fn from_text(text: &str) -> Result<VariationalNet> {
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, TEXT_HEADER)) => {}
        _ => return Err(perr(1, format!("expected header '{TEXT_HEADER}'"))),
    }
    let (ln, mode_line) = lines.next().ok_or_else(|| perr(2, "missing mode".into()))?;
    let mode = match mode_line.strip_prefix("mode ") {
        Some("bayesian") => Mode::Bayesian,
        Some("deterministic") => Mode::Deterministic,
        _ => return Err(perr(ln, format!("bad mode line '{mode_line}'"))),
    };
    let (ln, count_line) = lines.next().ok_or_else(|| perr(3, "missing entry count".into()))?;
    let count: usize = count_line
        .strip_prefix("entries ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| perr(ln, format!("bad entry count '{count_line}'")))?;
    let mut entries = Vec::with_capacity(count);
    for (ln, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let mut tok = line.split_ascii_whitespace();
        let mut next = |what: &str| tok.next().ok_or_else(|| perr(ln, format!("missing {what}")));
        let layer: u32 = next("layer")?.parse().map_err(|_| perr(ln, "bad layer index".into()))?;
        let tag_s = next("tag")?;
        let tag = TAGS
            .iter()
            .position(|&t| t == tag_s)
            .ok_or_else(|| perr(ln, format!("unknown tag '{tag_s}'")))? as u8;
        let rank: usize = next("rank")?.parse().map_err(|_| perr(ln, "bad rank".into()))?;
        if !(1..=2).contains(&rank) {
            return Err(perr(ln, format!("bad rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| next("dim")?.parse::<u32>().map_err(|_| perr(ln, "bad dim".into())))
            .collect::<Result<Vec<_>>>()?;
        let values = tok
            .map(|v| v.parse::<f64>().map_err(|_| perr(ln, format!("bad value '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if values.len() != n {
            return Err(perr(ln, format!("expected {n} values, found {}", values.len())));
        }
        entries.push(Entry {
            layer,
            tag,
            dims,
            values,
        });
    }
    if entries.len() != count {
        return Err(perr(0, format!("expected {count} entries, found {}", entries.len())));
    }
    assemble(mode, entries)
}
