//! Length-prefixed binary framing shared with adapter processes.
//!
//! All integers are little-endian.
//!
//! ```text
//! tensor   := rank:u32  dim:u32 * rank  value:f32 * product(dims)   (row-major)
//! message  := body_len:u32  body
//! request  := op:u8  count:u32  tensor * count
//! response := 0x00  count:u32  tensor * count        (success)
//!           | 0x01  utf-8 error text                 (failure)
//! ```
//!
//! Scalars (timesteps, losses) travel as rank-0 tensors. Latents and images
//! are rank-3 `channels × height × width`; parse maps are rank-2
//! `height × width` holding label values; embeddings are rank-1.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};

/// Upper bound on a single message body, guarding against corrupt prefixes.
pub const MAX_MESSAGE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Op {
    /// `[] -> [concurrent flag]`
    Info = 0,
    /// `[image] -> [latent]`
    Encode = 1,
    /// `[latent] -> [image]`
    Decode = 2,
    /// `[z_t, t, c] or [z_t, t, c, mask] -> [eps]`
    PredictNoise = 3,
    /// `[z_tilde0, target] -> [loss, grad]`
    LossAndGrad = 4,
    /// `[image] -> [labels]`
    Parse = 5,
    /// `[image] -> [embedding]`
    Embed = 6,
    /// `[image] -> [activations]`
    Activations = 7,
    /// `[image] -> [latent shape as rank-1 (c, h, w)]`
    LatentShape = 8,
}

impl TryFrom<u8> for Op {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Op::Info,
            1 => Op::Encode,
            2 => Op::Decode,
            3 => Op::PredictNoise,
            4 => Op::LossAndGrad,
            5 => Op::Parse,
            6 => Op::Embed,
            7 => Op::Activations,
            8 => Op::LatentShape,
            other => return Err(Error::Protocol(format!("unknown opcode {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Protocol(format!(
                "tensor dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![v as f32],
        }
    }

    pub fn vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().map(|x| *x as f32).collect(),
        }
    }

    pub fn from_grid(g: &Grid<f64>) -> Self {
        let s = g.shape();
        Self {
            dims: vec![s.channels, s.height, s.width],
            data: g.as_slice().iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn from_labels(g: &Grid<u8>) -> Self {
        let s = g.shape();
        Self {
            dims: vec![s.height, s.width],
            data: g.as_slice().iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        match (self.dims.len(), self.data.as_slice()) {
            (0, [v]) => Ok(*v as f64),
            _ => Err(Error::Protocol(format!(
                "expected a scalar, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    /// Rank-3 tensors map directly; rank-2 become a single channel.
    pub fn to_grid(&self) -> Result<Grid<f64>> {
        let shape = match self.dims.as_slice() {
            [c, h, w] => Shape::new(*c, *h, *w),
            [h, w] => Shape::plane(*h, *w),
            _ => {
                return Err(Error::Protocol(format!(
                    "expected rank 2 or 3, got {:?}",
                    self.dims
                )))
            }
        };
        Grid::new(shape, self.to_vec())
    }

    pub fn to_labels(&self) -> Result<Grid<u8>> {
        let [h, w] = self.dims.as_slice() else {
            return Err(Error::Protocol(format!(
                "expected rank-2 labels, got {:?}",
                self.dims
            )));
        };
        let labels = self
            .data
            .iter()
            .map(|v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(v) {
                    Ok(*v as u8)
                } else {
                    Err(Error::Protocol(format!("label value {v} is not a byte")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Grid::new(Shape::plane(*h, *w), labels)
    }

    fn encoded_len(&self) -> usize {
        4 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn decode_from(cur: &mut Cursor<'_>) -> Result<Self> {
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::Protocol(format!("tensor rank {rank} too large")));
        }
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .filter(|n| n.saturating_mul(4) <= cur.remaining())
            .ok_or_else(|| Error::Protocol(format!("tensor dims {dims:?} exceed the message")))?;
        let data = (0..n).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, data })
    }
}

/// Forward-only reader over a message body.
pub struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Protocol("message truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

fn encode_tensors(lead: u8, tensors: &[Tensor]) -> Vec<u8> {
    let len = 5 + tensors.iter().map(Tensor::encoded_len).sum::<usize>();
    let mut body = Vec::with_capacity(len);
    body.push(lead);
    body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        t.encode_into(&mut body);
    }
    body
}

fn decode_tensors(cur: &mut Cursor<'_>) -> Result<Vec<Tensor>> {
    let count = cur.u32()? as usize;
    let tensors = (0..count.min(64))
        .map(|_| Tensor::decode_from(cur))
        .collect::<Result<Vec<_>>>()?;
    if tensors.len() != count || cur.remaining() != 0 {
        return Err(Error::Protocol("malformed tensor list".into()));
    }
    Ok(tensors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub op: Op,
    pub tensors: Vec<Tensor>,
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        encode_tensors(self.op as u8, &self.tensors)
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(body);
        let op = Op::try_from(cur.u8()?)?;
        Ok(Self {
            op,
            tensors: decode_tensors(&mut cur)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok(Vec<Tensor>),
    Err(String),
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Ok(tensors) => encode_tensors(0, tensors),
            Response::Err(msg) => {
                let mut body = vec![1u8];
                body.extend_from_slice(msg.as_bytes());
                body
            }
        }
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(body);
        match cur.u8()? {
            0 => Ok(Response::Ok(decode_tensors(&mut cur)?)),
            1 => Ok(Response::Err(
                String::from_utf8_lossy(cur.rest()).into_owned(),
            )),
            s => Err(Error::Protocol(format!("unknown response status {s}"))),
        }
    }
}

pub fn write_message(w: &mut impl Write, body: &[u8]) -> Result<()> {
    if body.len() > MAX_MESSAGE_BYTES {
        return Err(Error::Protocol(format!(
            "message of {} bytes too large",
            body.len()
        )));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one message body; `Ok(None)` on a clean end of stream.
pub fn read_message(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE_BYTES {
        return Err(Error::Protocol(format!("message of {len} bytes too large")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}
