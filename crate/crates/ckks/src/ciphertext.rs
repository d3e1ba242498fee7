//! Ciphertext types and their wire format.
//!
//! CKKS layout (little-endian): magic `FHEC`, version `u16`, level `u8`,
//! scale `f64`, N `u32`, prime count `u8`, then the `c0` limbs followed by
//! the `c1` limbs as `u64` coefficient arrays.
//!
//! Mock layout: magic `FHEM`, version `u16`, slot count `u32`, scale `f64`,
//! value count `u32`, then that many `f64`s (trailing zeros omitted).

use crate::error::{HeError, Result};
use crate::keys::RnsPoly;
use crate::params::HeParams;
use crate::wire::{Reader, Writer};

const CT_MAGIC: &[u8; 4] = b"FHEC";
const MOCK_MAGIC: &[u8; 4] = b"FHEM";
const CT_VERSION: u16 = 1;
/// Bytes preceding the coefficient arrays of a CKKS ciphertext.
pub const CKKS_HEADER_LEN: usize = 4 + 2 + 1 + 8 + 4 + 1;
pub const MOCK_HEADER_LEN: usize = 4 + 2 + 4 + 8 + 4;

/// RLWE ciphertext `(c0, c1)` in coefficient form, decrypting as `c0 + c1·s`.
#[derive(Debug, Clone, PartialEq)]
pub struct CkksCiphertext {
    pub c0: RnsPoly,
    pub c1: RnsPoly,
    pub scale: f64,
    /// Index of the top prime in use; no rescaling happens, so this is
    /// always `moduli.len() - 1`.
    pub level: u8,
}

/// Plaintext stand-in sharing the CKKS slot semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct MockCiphertext {
    pub slots: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ciphertext {
    Ckks(CkksCiphertext),
    Mock(MockCiphertext),
}

impl Ciphertext {
    pub fn scale(&self) -> f64 {
        match self {
            Ciphertext::Ckks(ct) => ct.scale,
            Ciphertext::Mock(ct) => ct.scale,
        }
    }

    pub fn ring_degree(&self) -> usize {
        match self {
            Ciphertext::Ckks(ct) => ct.c0.first().map_or(0, Vec::len),
            Ciphertext::Mock(ct) => 2 * ct.slots.len(),
        }
    }

    pub fn serialized_len(&self) -> usize {
        match self {
            Ciphertext::Ckks(ct) => {
                CKKS_HEADER_LEN + 2 * ct.c0.len() * ct.c0.first().map_or(0, Vec::len) * 8
            }
            Ciphertext::Mock(ct) => MOCK_HEADER_LEN + 8 * mock_used_len(&ct.slots),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.serialized_len());
        match self {
            Ciphertext::Ckks(ct) => {
                let n = ct.c0.first().map_or(0, Vec::len);
                w.bytes(CT_MAGIC);
                w.u16(CT_VERSION);
                w.u8(ct.level);
                w.f64(ct.scale);
                w.u32(n as u32);
                w.u8(ct.c0.len() as u8);
                for limb in ct.c0.iter().chain(&ct.c1) {
                    for &c in limb {
                        w.u64(c);
                    }
                }
            }
            Ciphertext::Mock(ct) => {
                let used = mock_used_len(&ct.slots);
                w.bytes(MOCK_MAGIC);
                w.u16(CT_VERSION);
                w.u32(ct.slots.len() as u32);
                w.f64(ct.scale);
                w.u32(used as u32);
                for &v in &ct.slots[..used] {
                    w.f64(v);
                }
            }
        }
        w.into_inner()
    }

    /// Structural parse; see [`deserialize_ct`] for validation against params.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        let version = r.u16()?;
        if version != CT_VERSION {
            return Err(HeError::Format(format!("unsupported ciphertext version {version}")));
        }
        let ct = if magic == CT_MAGIC {
            let level = r.u8()?;
            let scale = r.f64()?;
            let n = r.u32()? as usize;
            let limbs = r.u8()? as usize;
            if limbs == 0 || n == 0 || level as usize + 1 != limbs {
                return Err(HeError::Format(format!(
                    "inconsistent ciphertext header: level {level}, {limbs} primes, N = {n}"
                )));
            }
            let expected = 2 * limbs * n * 8;
            if r.remaining() != expected {
                return Err(HeError::Format(format!(
                    "ciphertext body is {} bytes, header implies {expected}",
                    r.remaining()
                )));
            }
            let read_poly = |r: &mut Reader<'_>| -> Result<RnsPoly> {
                (0..limbs).map(|_| (0..n).map(|_| r.u64()).collect()).collect()
            };
            let c0 = read_poly(&mut r)?;
            let c1 = read_poly(&mut r)?;
            Ciphertext::Ckks(CkksCiphertext { c0, c1, scale, level })
        } else if magic == MOCK_MAGIC {
            let slot_count = r.u32()? as usize;
            let scale = r.f64()?;
            let used = r.u32()? as usize;
            if used > slot_count || r.remaining() != used * 8 {
                return Err(HeError::Format("mock ciphertext length mismatch".into()));
            }
            let mut slots = vec![0.0; slot_count];
            for s in slots.iter_mut().take(used) {
                *s = r.f64()?;
            }
            Ciphertext::Mock(MockCiphertext { slots, scale })
        } else {
            return Err(HeError::Format("bad ciphertext magic".into()));
        };
        if !(ct.scale() > 0.0 && ct.scale().is_finite()) {
            return Err(HeError::Format(format!("invalid scale {}", ct.scale())));
        }
        Ok(ct)
    }
}

fn mock_used_len(slots: &[f64]) -> usize {
    slots.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1)
}

pub fn serialize_ct(ct: &Ciphertext) -> Vec<u8> {
    ct.to_bytes()
}

/// Parse and check that the ciphertext belongs to `params`.
pub fn deserialize_ct(bytes: &[u8], params: &HeParams) -> Result<Ciphertext> {
    let ct = Ciphertext::from_bytes(bytes)?;
    check_params(&ct, params)?;
    Ok(ct)
}

pub(crate) fn check_params(ct: &Ciphertext, params: &HeParams) -> Result<()> {
    if ct.ring_degree() != params.ring_degree {
        return Err(HeError::Format(format!(
            "ciphertext ring degree {} does not match params ({})",
            ct.ring_degree(),
            params.ring_degree
        )));
    }
    if let Ciphertext::Ckks(c) = ct {
        if c.c0.len() != params.moduli.len() {
            return Err(HeError::Format(format!(
                "ciphertext has {} primes, params have {}",
                c.c0.len(),
                params.moduli.len()
            )));
        }
        for (limb0, limb1, &q) in c.c0.iter().zip(&c.c1).zip(&params.moduli).map(|((a, b), q)| (a, b, q)) {
            if limb0.iter().chain(limb1).any(|&x| x >= q) {
                return Err(HeError::Format("coefficient exceeds its modulus".into()));
            }
        }
    }
    Ok(())
}

/// Serialized ciphertext bytes divided by the `dim · 8` bytes of the
/// plaintext `f64` vector it carries.
pub fn inflation_ratio(ct: &Ciphertext, dim: usize) -> f64 {
    ct.serialized_len() as f64 / (dim.max(1) * 8) as f64
}
