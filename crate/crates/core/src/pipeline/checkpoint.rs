//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ONGC"            4 bytes
//! version           u32   (currently 1)
//! kind              u32   (1 = network, 2 = named tensor bundle)
//! payload           ...
//! crc32             u32   over every preceding byte
//! ```
//!
//! Dimensions and counts are `u64`, reals are raw `f64` bits. A tensor is
//! `rows u64, cols u64, rows*cols f64`; a string is `len u64` + UTF-8.
//!
//! Network payload: `seed`, input shape `(c, h, w)`, `n_specs`, then per spec
//! `tag, p0..p5, prunable` (tags 0 linear, 1 conv2d, 2 relu, 3 flatten), then
//! `n_weighted` blocks of `id, weights, bias (1 x out), has_mask, [mask]`.
//!
//! Tensor bundle payload: `count`, then `name, tensor` pairs.

use std::fs;
use std::path::Path;

use crate::error::{OngError, Result};
use crate::matrix::Matrix;
use crate::network::{LayerKind, LayerSpec, Network, Shape3};

pub const MAGIC: &[u8; 4] = b"ONGC";
pub const VERSION: u32 = 1;
const KIND_NETWORK: u32 = 1;
const KIND_TENSORS: u32 = 2;
const HEADER_LEN: usize = 12;

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u32) -> Self {
        let mut v = MAGIC.to_vec();
        v.extend(VERSION.to_le_bytes());
        v.extend(kind.to_le_bytes());
        Writer(v)
    }

    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for v in m.data() {
            self.0.extend(v.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.0.extend(crc.to_le_bytes());
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| OngError::Format(format!("truncated payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| OngError::Format("count overflows usize".into()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| OngError::Format("invalid UTF-8 in string".into()))
    }

    fn tensor(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| OngError::Format("tensor size overflow".into()))?;
        let bytes = self.take(n)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| OngError::Format(e.to_string()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(OngError::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Validate header and checksum; returns the payload.
fn open(bytes: &[u8], expect_kind: u32) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(OngError::Format(format!(
            "truncated file: {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(OngError::Format(format!(
            "bad magic {:?}, expected \"ONGC\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(OngError::Format(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(OngError::Format(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file is corrupt or truncated"
        )));
    }
    let kind = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if kind != expect_kind {
        return Err(OngError::Format(format!(
            "container holds kind {kind}, expected {expect_kind}"
        )));
    }
    Ok(&body[HEADER_LEN..])
}

fn spec_words(spec: &LayerSpec) -> [u64; 7] {
    let w = |v: usize| v as u64;
    match spec.kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => [0, w(in_features), w(out_features), 0, 0, 0, 0],
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => [
            1,
            w(in_channels),
            w(out_channels),
            w(kernel_h),
            w(kernel_w),
            w(stride),
            w(padding),
        ],
        LayerKind::Relu => [2, 0, 0, 0, 0, 0, 0],
        LayerKind::Flatten => [3, 0, 0, 0, 0, 0, 0],
    }
}

fn spec_from_words(w: [usize; 7], prunable: bool) -> Result<LayerSpec> {
    let kind = match w[0] {
        0 => LayerKind::Linear {
            in_features: w[1],
            out_features: w[2],
        },
        1 => LayerKind::Conv2d {
            in_channels: w[1],
            out_channels: w[2],
            kernel_h: w[3],
            kernel_w: w[4],
            stride: w[5],
            padding: w[6],
        },
        2 => LayerKind::Relu,
        3 => LayerKind::Flatten,
        t => return Err(OngError::Format(format!("unknown layer tag {t}"))),
    };
    Ok(LayerSpec { kind, prunable })
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut w = Writer::new(KIND_NETWORK);
    w.u64(net.seed());
    let s = net.input_shape();
    w.usize(s.channels);
    w.usize(s.height);
    w.usize(s.width);
    w.usize(net.specs().len());
    for spec in net.specs() {
        for word in spec_words(spec) {
            w.u64(word);
        }
        w.u64(u64::from(spec.prunable));
    }
    let layers: Vec<_> = net.weighted_layers().collect();
    w.usize(layers.len());
    for l in layers {
        w.str(l.id());
        w.tensor(&l.weights);
        w.tensor(&Matrix::from_vec(1, l.bias.len(), l.bias.clone()).expect("finite bias"));
        match l.mask() {
            Some(m) => {
                w.u64(1);
                w.tensor(m.bits());
            }
            None => w.u64(0),
        }
    }
    w.finish()
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader {
        buf: open(bytes, KIND_NETWORK)?,
        pos: 0,
    };
    let seed = r.u64()?;
    let shape = Shape3::image(r.usize()?, r.usize()?, r.usize()?);
    let n_specs = r.usize()?;
    let mut specs = Vec::new();
    for _ in 0..n_specs {
        let mut words = [0usize; 7];
        for w in &mut words {
            *w = r.usize()?;
        }
        let prunable = match r.u64()? {
            0 => false,
            1 => true,
            v => return Err(OngError::Format(format!("bad prunable flag {v}"))),
        };
        specs.push(spec_from_words(words, prunable)?);
    }
    let n_weighted = r.usize()?;
    let mut params = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..n_weighted {
        ids.push(r.str()?);
        let w = r.tensor()?;
        let b = r.tensor()?.into_vec();
        let mask = match r.u64()? {
            0 => None,
            1 => Some(r.tensor()?),
            v => return Err(OngError::Format(format!("bad mask flag {v}"))),
        };
        params.push((w, b, mask));
    }
    r.done()?;
    let net = Network::from_parts(&specs, shape, seed, params)
        .map_err(|e| OngError::Format(e.to_string()))?;
    for (id, l) in ids.iter().zip(net.weighted_layers()) {
        if id != l.id() {
            return Err(OngError::Format(format!(
                "stored layer id {id} does not match rebuilt id {}",
                l.id()
            )));
        }
    }
    Ok(net)
}

pub fn encode_tensors<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    let items: Vec<_> = tensors.into_iter().collect();
    let mut w = Writer::new(KIND_TENSORS);
    w.usize(items.len());
    for (name, m) in items {
        w.str(name);
        w.tensor(m);
    }
    w.finish()
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader {
        buf: open(bytes, KIND_TENSORS)?,
        pos: 0,
    };
    let n = r.usize()?;
    let mut out = Vec::new();
    for _ in 0..n {
        out.push((r.str()?, r.tensor()?));
    }
    r.done()?;
    Ok(out)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode_network(net)).map_err(|e| OngError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_network(&fs::read(path).map_err(|e| OngError::io(path, e))?)
}

pub fn save_tensors<'a, I>(path: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    fs::write(path, encode_tensors(tensors)).map_err(|e| OngError::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Matrix)>> {
    decode_tensors(&fs::read(path).map_err(|e| OngError::io(path, e))?)
}
