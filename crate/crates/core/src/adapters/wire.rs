//! Flat binary layout for adapter payloads and checkpoints.
//!
//! ```text
//! magic   b"FSB1"
//! method  u8           (Method::tag)
//! blocks  u32 LE
//! per block:
//!   kind  u8           (BlockKind)
//!   site  u32 LE
//!   rows  u32 LE
//!   cols  u32 LE
//!   data  rows*cols f64 LE, row-major
//! ```
//!
//! The communication ledger meters messages by parsing the block headers, so
//! parameter counts always come from bytes that were actually produced.

use thiserror::Error;

use super::{Adapter, LoraPair, Method, SbTriple};
use crate::linalg::{LinalgError, Matrix};

pub const MAGIC: &[u8; 4] = b"FSB1";
const HEADER_LEN: usize = 4 + 1 + 4;
const BLOCK_HEADER_LEN: usize = 1 + 4 + 4 + 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown method tag {0}")]
    UnknownMethod(u8),
    #[error("unknown block kind {0}")]
    UnknownKind(u8),
    #[error("message truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("payload does not describe a valid adapter set: {0}")]
    Layout(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BlockKind {
    LoraB = 0,
    LoraA = 1,
    SbB = 2,
    SbR = 3,
    SbA = 4,
    /// Dense site-shaped matrix (residual or exact mean update).
    Dense = 5,
    /// Client `B` factors concatenated horizontally.
    StackedB = 6,
    /// Client `A` factors concatenated vertically.
    StackedA = 7,
}

impl BlockKind {
    fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => BlockKind::LoraB,
            1 => BlockKind::LoraA,
            2 => BlockKind::SbB,
            3 => BlockKind::SbR,
            4 => BlockKind::SbA,
            5 => BlockKind::Dense,
            6 => BlockKind::StackedB,
            7 => BlockKind::StackedA,
            other => return Err(WireError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub site: u32,
    pub matrix: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub method: Method,
    pub blocks: Vec<Block>,
}

/// Which adapter parts go into a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parts {
    Trainable,
    Frozen,
    All,
}

impl Message {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, kind: BlockKind, site: usize, matrix: Matrix) {
        self.blocks.push(Block {
            kind,
            site: site as u32,
            matrix,
        });
    }

    pub fn from_adapters(method: Method, adapters: &[Adapter], parts: Parts) -> Self {
        let mut msg = Message::new(method);
        let trainable = matches!(parts, Parts::Trainable | Parts::All);
        let frozen = matches!(parts, Parts::Frozen | Parts::All);
        for (site, adapter) in adapters.iter().enumerate() {
            match adapter {
                Adapter::Lora(p) => {
                    if trainable {
                        msg.push(BlockKind::LoraB, site, p.b.clone());
                        msg.push(BlockKind::LoraA, site, p.a.clone());
                    }
                }
                Adapter::FrozenA(p) => {
                    if trainable {
                        msg.push(BlockKind::LoraB, site, p.b.clone());
                    }
                    if frozen {
                        msg.push(BlockKind::LoraA, site, p.a.clone());
                    }
                }
                Adapter::Sb(t) => {
                    if frozen {
                        msg.push(BlockKind::SbB, site, t.b.clone());
                    }
                    if trainable {
                        msg.push(BlockKind::SbR, site, t.r.clone());
                    }
                    if frozen {
                        msg.push(BlockKind::SbA, site, t.a.clone());
                    }
                }
            }
        }
        msg
    }

    /// Rebuilds a complete adapter set from a [`Parts::All`] message.
    pub fn to_adapters(&self, alpha: f64) -> Result<Vec<Adapter>, WireError> {
        let sites = self.blocks.iter().map(|b| b.site as usize + 1).max().unwrap_or(0);
        let mut out = Vec::with_capacity(sites);
        for site in 0..sites {
            let find = |kind: BlockKind| {
                self.blocks
                    .iter()
                    .find(|b| b.site as usize == site && b.kind == kind)
                    .map(|b| b.matrix.clone())
                    .ok_or_else(|| WireError::Layout(format!("site {site} lacks {kind:?}")))
            };
            let adapter = match self.method {
                Method::FedSb => Adapter::Sb(SbTriple {
                    b: find(BlockKind::SbB)?,
                    r: find(BlockKind::SbR)?,
                    a: find(BlockKind::SbA)?,
                }),
                Method::FfaLora => Adapter::FrozenA(LoraPair {
                    b: find(BlockKind::LoraB)?,
                    a: find(BlockKind::LoraA)?,
                    alpha,
                }),
                _ => Adapter::Lora(LoraPair {
                    b: find(BlockKind::LoraB)?,
                    a: find(BlockKind::LoraA)?,
                    alpha,
                }),
            };
            out.push(adapter);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.matrix.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .blocks
            .iter()
            .map(|b| BLOCK_HEADER_LEN + 8 * b.matrix.len())
            .sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(MAGIC);
        out.push(self.method.tag());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.push(b.kind as u8);
            out.extend_from_slice(&b.site.to_le_bytes());
            out.extend_from_slice(&(b.matrix.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(b.matrix.cols() as u32).to_le_bytes());
            for v in b.matrix.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader { bytes, pos: 0 };
        let (method, n_blocks) = r.header()?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let (kind, site, rows, cols) = r.block_header()?;
            let data = (0..rows * cols)
                .map(|_| r.take::<8>().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>, _>>()?;
            blocks.push(Block {
                kind,
                site,
                matrix: Matrix::new(rows, cols, data)?,
            });
        }
        r.finish()?;
        Ok(Message { method, blocks })
    }
}

/// Number of `f64` parameters in an encoded message, read from block headers.
pub fn param_count(bytes: &[u8]) -> Result<usize, WireError> {
    let mut r = Reader { bytes, pos: 0 };
    let (_, n_blocks) = r.header()?;
    let mut total = 0;
    for _ in 0..n_blocks {
        let (_, _, rows, cols) = r.block_header()?;
        r.skip(8 * rows * cols)?;
        total += rows * cols;
    }
    r.finish()?;
    Ok(total)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let end = self.pos.checked_add(N).ok_or(WireError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length is N"))
    }

    fn skip(&mut self, n: usize) -> Result<(), WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        if end > self.bytes.len() {
            return Err(WireError::Truncated);
        }
        self.pos = end;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn header(&mut self) -> Result<(Method, usize), WireError> {
        if &self.take::<4>()? != MAGIC {
            return Err(WireError::BadMagic);
        }
        let [tag] = self.take::<1>()?;
        let method = Method::from_tag(tag).ok_or(WireError::UnknownMethod(tag))?;
        Ok((method, self.u32()? as usize))
    }

    fn block_header(&mut self) -> Result<(BlockKind, u32, usize, usize), WireError> {
        let [kind] = self.take::<1>()?;
        let kind = BlockKind::from_u8(kind)?;
        let site = self.u32()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Ok((kind, site, rows, cols))
    }

    fn finish(&self) -> Result<(), WireError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}
