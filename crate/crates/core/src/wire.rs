//! Message framing and payload codecs.
//!
//! Envelope (little-endian): magic `FHNM`, version `u16`, message type `u8`,
//! round `u32`, sender `u32`, payload length `u64`, payload, CRC-32 of the
//! payload.
//!
//! UPDATE payload: layout `u8` (0 per-class, 1 shared), moment kind `u8`
//! (0 plain, 1 encrypted), class count `u32`, sample count `u64`, then the
//! factors and moments. A factor is `u32 d`, `u32 r`, `U` as `d·r` row-major
//! `f64`, then `S` as `r` `f64`. Per-class layout interleaves one factor and
//! one moment per class; shared layout stores one factor then every moment.
//! A plain moment is `d` `f64`; an encrypted one is a `u32` length followed by
//! the serialized ciphertext.
//!
//! MODEL payload: kind `u8` (0 plain, 1 encrypted), activation `u8`, bias flag
//! `u8`, `u32 d`, `u32 C`, then `W` row-major or `C` length-prefixed
//! ciphertexts.

use fedhenet_ckks::{deserialize_ct, Ciphertext, HeParams};
use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::rolann::{ActivationKind, EncryptedModel, Factor, Factors, GlobalModel, Moment, Solution, Statistics};

pub const ENVELOPE_MAGIC: &[u8; 4] = b"FHNM";
pub const ENVELOPE_VERSION: u16 = 1;
pub const ENVELOPE_HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 8;
/// Header plus trailing CRC.
pub const ENVELOPE_OVERHEAD: usize = ENVELOPE_HEADER_LEN + 4;
pub const UPDATE_HEADER_LEN: usize = 1 + 1 + 4 + 8;
pub const MODEL_HEADER_LEN: usize = 1 + 1 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    Update = 1,
    Model = 2,
    Abort = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::Update),
            2 => Some(MsgType::Model),
            3 => Some(MsgType::Abort),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MsgType::Update => "UPDATE",
            MsgType::Model => "MODEL",
            MsgType::Abort => "ABORT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub round: u32,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(msg_type: MsgType, round: u32, sender: u32, payload: Vec<u8>) -> Self {
        Self { msg_type, round, sender, payload }
    }

    pub fn encoded_len(&self) -> usize {
        ENVELOPE_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(self.encoded_len()));
        w.bytes(ENVELOPE_MAGIC);
        w.u16(ENVELOPE_VERSION);
        w.u8(self.msg_type as u8);
        w.u32(self.round);
        w.u32(self.sender);
        w.u64(self.payload.len() as u64);
        w.bytes(&self.payload);
        w.u32(crc32fast::hash(&self.payload));
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != ENVELOPE_MAGIC {
            return Err(CoreError::Format("bad envelope magic".into()));
        }
        let version = r.u16()?;
        if version != ENVELOPE_VERSION {
            return Err(CoreError::Format(format!("unsupported envelope version {version}")));
        }
        let raw_type = r.u8()?;
        let msg_type =
            MsgType::from_u8(raw_type).ok_or_else(|| CoreError::Format(format!("unknown message type {raw_type}")))?;
        let round = r.u32()?;
        let sender = r.u32()?;
        let len = r.u64()?;
        if len != r.remaining().saturating_sub(4) as u64 {
            return Err(CoreError::Format(format!(
                "payload length {len} disagrees with {} bytes on the wire",
                r.remaining().saturating_sub(4)
            )));
        }
        let payload = r.take(len as usize)?.to_vec();
        let crc = r.u32()?;
        if crc != crc32fast::hash(&payload) {
            return Err(CoreError::Format("payload CRC mismatch".into()));
        }
        Ok(Self { msg_type, round, sender, payload })
    }
}

/// Peeks at the message type without verifying the payload.
pub fn peek_msg_type(bytes: &[u8]) -> Option<MsgType> {
    (bytes.len() >= ENVELOPE_HEADER_LEN && &bytes[..4] == ENVELOPE_MAGIC)
        .then(|| MsgType::from_u8(bytes[6]))
        .flatten()
}

/// Message type, round and sender from an unverified header.
pub fn peek_header(bytes: &[u8]) -> Option<(MsgType, u32, u32)> {
    let msg_type = peek_msg_type(bytes)?;
    let round = u32::from_le_bytes(bytes[7..11].try_into().ok()?);
    let sender = u32::from_le_bytes(bytes[11..15].try_into().ok()?);
    Some((msg_type, round, sender))
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, vals: impl IntoIterator<Item = f64>) {
        for v in vals {
            self.bytes(&v.to_le_bytes());
        }
    }
    fn row_major(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            self.f64s(m.row(i).iter().copied());
        }
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CoreError::Format(format!(
                "truncated: need {n} bytes at offset {}, {} available",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CoreError::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let vals = self.f64s(rows.checked_mul(cols).ok_or_else(|| CoreError::Format("length overflow".into()))?)?;
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }
    fn ciphertext(&mut self, params: Option<&HeParams>) -> Result<Ciphertext> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        Ok(match params {
            Some(p) => deserialize_ct(bytes, p)?,
            None => Ciphertext::from_bytes(bytes)?,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(CoreError::Format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn write_factor(w: &mut Writer, f: &Factor) {
    w.u32(f.u.nrows() as u32);
    w.u32(f.u.ncols() as u32);
    w.row_major(&f.u);
    w.f64s(f.s.iter().copied());
}

fn read_factor(r: &mut Reader<'_>) -> Result<Factor> {
    let d = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let u = r.row_major(d, rank)?;
    let s = DVector::from_vec(r.f64s(rank)?);
    Ok(Factor { u, s })
}

fn write_moment(w: &mut Writer, m: &Moment) {
    match m {
        Moment::Plain(v) => w.f64s(v.iter().copied()),
        Moment::Encrypted(ct) => w.blob(&ct.to_bytes()),
    }
}

fn read_moment(r: &mut Reader<'_>, encrypted: bool, dim: usize, params: Option<&HeParams>) -> Result<Moment> {
    Ok(if encrypted {
        Moment::Encrypted(r.ciphertext(params)?)
    } else {
        Moment::Plain(DVector::from_vec(r.f64s(dim)?))
    })
}

pub fn encode_update(stats: &Statistics) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u8(u8::from(stats.is_shared()));
    w.u8(u8::from(stats.is_encrypted()));
    w.u32(stats.classes() as u32);
    w.u64(stats.sample_count);
    match &stats.factors {
        Factors::Shared(f) => {
            write_factor(&mut w, f);
            for m in &stats.moments {
                write_moment(&mut w, m);
            }
        }
        Factors::PerClass(fs) => {
            for (f, m) in fs.iter().zip(&stats.moments) {
                write_factor(&mut w, f);
                write_moment(&mut w, m);
            }
        }
    }
    w.0
}

/// Inverse of [`encode_update`]. Ciphertexts are checked against `params`
/// when given.
pub fn decode_update(bytes: &[u8], params: Option<&HeParams>) -> Result<Statistics> {
    let mut r = Reader::new(bytes);
    let layout = r.u8()?;
    let kind = r.u8()?;
    if layout > 1 || kind > 1 {
        return Err(CoreError::Format(format!("unknown update layout {layout} / moment kind {kind}")));
    }
    let encrypted = kind == 1;
    let classes = r.u32()? as usize;
    if classes == 0 {
        return Err(CoreError::Format("update with zero classes".into()));
    }
    let sample_count = r.u64()?;
    let (dim, factors, moments) = if layout == 1 {
        let f = read_factor(&mut r)?;
        let dim = f.u.nrows();
        let moments = (0..classes).map(|_| read_moment(&mut r, encrypted, dim, params)).collect::<Result<_>>()?;
        (dim, Factors::Shared(f), moments)
    } else {
        let mut fs = Vec::new();
        let mut ms = Vec::new();
        for _ in 0..classes {
            let f = read_factor(&mut r)?;
            ms.push(read_moment(&mut r, encrypted, f.u.nrows(), params)?);
            fs.push(f);
        }
        (fs[0].u.nrows(), Factors::PerClass(fs), ms)
    };
    r.finish()?;
    let stats = Statistics { dim, sample_count, factors, moments };
    if let Factors::PerClass(fs) = &stats.factors {
        if fs.iter().any(|f| f.u.nrows() != dim) {
            return Err(CoreError::Format("per-class factors disagree on dimension".into()));
        }
    }
    Ok(stats)
}

fn activation_code(a: ActivationKind) -> u8 {
    match a {
        ActivationKind::Identity => 0,
        ActivationKind::Logistic => 1,
    }
}

pub fn encode_model(solution: &Solution) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match solution {
        Solution::Plain(m) => {
            w.u8(0);
            w.u8(activation_code(m.activation));
            w.u8(u8::from(m.include_bias));
            w.u32(m.w.nrows() as u32);
            w.u32(m.w.ncols() as u32);
            w.row_major(&m.w);
        }
        Solution::Encrypted(e) => {
            w.u8(1);
            w.u8(activation_code(e.activation));
            w.u8(u8::from(e.include_bias));
            w.u32(e.dim as u32);
            w.u32(e.columns.len() as u32);
            for ct in &e.columns {
                w.blob(&ct.to_bytes());
            }
        }
    }
    w.0
}

pub fn decode_model(bytes: &[u8], params: Option<&HeParams>) -> Result<Solution> {
    let mut r = Reader::new(bytes);
    let kind = r.u8()?;
    let activation = match r.u8()? {
        0 => ActivationKind::Identity,
        1 => ActivationKind::Logistic,
        other => return Err(CoreError::Format(format!("unknown activation code {other}"))),
    };
    let include_bias = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(CoreError::Format(format!("bad bias flag {other}"))),
    };
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let solution = match kind {
        0 => Solution::Plain(GlobalModel { w: r.row_major(dim, classes)?, activation, include_bias }),
        1 => {
            let columns = (0..classes).map(|_| r.ciphertext(params)).collect::<Result<_>>()?;
            Solution::Encrypted(EncryptedModel { dim, columns, activation, include_bias })
        }
        other => return Err(CoreError::Format(format!("unknown model kind {other}"))),
    };
    r.finish()?;
    Ok(solution)
}

/// Baseline weight exchange: the bare row-major matrix, shape implied by
/// the experiment configuration.
pub fn encode_weights(w: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Writer(Vec::with_capacity(w.len() * 8));
    out.row_major(w);
    out.0
}

pub fn decode_weights(bytes: &[u8], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut r = Reader::new(bytes);
    let w = r.row_major(rows, cols)?;
    r.finish()?;
    Ok(w)
}

/// ABORT payload: UTF-8 reason.
pub fn decode_abort(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_overhead_is_27_bytes() {
        let env = Envelope::new(MsgType::Update, 3, 7, vec![1, 2, 3]);
        assert_eq!(env.encode().len(), 30);
        assert_eq!(ENVELOPE_OVERHEAD, 27);
    }

    #[test]
    fn envelope_rejects_corruption() {
        let mut bytes = Envelope::new(MsgType::Model, 1, 0, vec![9; 16]).encode();
        assert_eq!(peek_msg_type(&bytes), Some(MsgType::Model));
        bytes[ENVELOPE_HEADER_LEN + 2] ^= 1;
        assert!(matches!(Envelope::decode(&bytes), Err(CoreError::Format(_))));
        assert!(Envelope::decode(&bytes[..10]).is_err());
    }
}
