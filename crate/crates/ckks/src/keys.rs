//! Key material and its binary key-file format.
//!
//! Layout (little-endian): magic `FHEK`, version `u16`, a params block, then
//! the secret, public and rotation sections, each introduced by a presence
//! byte and a `u64` byte length.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{HeError, Result};
use crate::params::HeParams;
use crate::wire::{Reader, Writer};

/// Residues of one polynomial, one vector of `N` words per modulus.
pub type RnsPoly = Vec<Vec<u64>>;

/// Ternary secret `s ∈ {-1, 0, 1}^N`.
#[derive(Clone, PartialEq)]
pub struct SecretKey {
    pub coeffs: Vec<i8>,
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecretKey").field("degree", &self.coeffs.len()).finish_non_exhaustive()
    }
}

/// `(b, a)` with `b = -a·s + e` over the ciphertext moduli, NTT form.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicKey {
    pub b: RnsPoly,
    pub a: RnsPoly,
}

/// Key-switching key from `σ_g(s)` to `s`, one `(b, a)` pair per ciphertext
/// prime, over the ciphertext moduli plus the special prime, NTT form.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationKey {
    pub step: usize,
    pub galois_element: usize,
    pub digits: Vec<(RnsPoly, RnsPoly)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RotationKeys {
    pub keys: BTreeMap<usize, RotationKey>,
}

impl RotationKeys {
    pub fn steps(&self) -> Vec<usize> {
        self.keys.keys().copied().collect()
    }

    pub fn get(&self, step: usize) -> Option<&RotationKey> {
        self.keys.get(&step)
    }
}

/// Everything a key file can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    pub params: HeParams,
    pub secret: Option<SecretKey>,
    pub public: Option<PublicKey>,
    pub rotation: Option<RotationKeys>,
}

const KEY_MAGIC: &[u8; 4] = b"FHEK";
const KEY_VERSION: u16 = 1;

impl KeySet {
    /// Copy without the secret section, as handed to the coordinator.
    pub fn without_secret(&self) -> Self {
        Self { secret: None, ..self.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(KEY_MAGIC);
        w.u16(KEY_VERSION);
        write_params(&mut w, &self.params);

        section(&mut w, self.secret.as_ref(), |w, sk| {
            for &c in &sk.coeffs {
                w.u8(c as u8);
            }
        });
        section(&mut w, self.public.as_ref(), |w, pk| {
            write_poly(w, &pk.b);
            write_poly(w, &pk.a);
        });
        section(&mut w, self.rotation.as_ref(), |w, rk| {
            w.u32(rk.keys.len() as u32);
            for key in rk.keys.values() {
                w.u32(key.step as u32);
                w.u32(key.galois_element as u32);
                w.u8(key.digits.len() as u8);
                for (b, a) in &key.digits {
                    write_poly(w, b);
                    write_poly(w, a);
                }
            }
        });
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != KEY_MAGIC {
            return Err(HeError::Format("bad key file magic".into()));
        }
        let version = r.u16()?;
        if version != KEY_VERSION {
            return Err(HeError::Format(format!("unsupported key file version {version}")));
        }
        let params = read_params(&mut r)?;
        params.validate()?;
        let n = params.ring_degree;
        let limbs = params.moduli.len();

        let secret = read_section(&mut r, |r| {
            let raw = r.take(n)?;
            let coeffs: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
            if coeffs.iter().any(|c| !(-1..=1).contains(c)) {
                return Err(HeError::Format("secret key is not ternary".into()));
            }
            Ok(SecretKey { coeffs })
        })?;
        let public = read_section(&mut r, |r| {
            Ok(PublicKey { b: read_poly(r, limbs, n)?, a: read_poly(r, limbs, n)? })
        })?;
        let rotation = read_section(&mut r, |r| {
            let count = r.u32()? as usize;
            let mut keys = BTreeMap::new();
            for _ in 0..count {
                let step = r.u32()? as usize;
                let galois_element = r.u32()? as usize;
                let digit_count = r.u8()? as usize;
                if digit_count != limbs {
                    return Err(HeError::Format(format!(
                        "rotation key has {digit_count} digits, expected {limbs}"
                    )));
                }
                let mut digits = Vec::with_capacity(digit_count);
                for _ in 0..digit_count {
                    digits.push((read_poly(r, limbs + 1, n)?, read_poly(r, limbs + 1, n)?));
                }
                keys.insert(step, RotationKey { step, galois_element, digits });
            }
            Ok(RotationKeys { keys })
        })?;
        if !r.is_empty() {
            return Err(HeError::Format(format!("{} trailing bytes in key file", r.remaining())));
        }
        Ok(Self { params, secret, public, rotation })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| HeError::Format(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_params(w: &mut Writer, p: &HeParams) {
    w.u32(p.ring_degree as u32);
    w.u8(p.moduli.len() as u8);
    for &q in &p.moduli {
        w.u64(q);
    }
    w.u64(p.special_prime);
    w.f64(p.scale);
    w.f64(p.noise_std);
}

pub(crate) fn read_params(r: &mut Reader<'_>) -> Result<HeParams> {
    let ring_degree = r.u32()? as usize;
    let count = r.u8()? as usize;
    let mut moduli = Vec::with_capacity(count);
    for _ in 0..count {
        moduli.push(r.u64()?);
    }
    Ok(HeParams {
        ring_degree,
        moduli,
        special_prime: r.u64()?,
        scale: r.f64()?,
        noise_std: r.f64()?,
    })
}

fn write_poly(w: &mut Writer, poly: &RnsPoly) {
    for limb in poly {
        for &c in limb {
            w.u64(c);
        }
    }
}

fn read_poly(r: &mut Reader<'_>, limbs: usize, n: usize) -> Result<RnsPoly> {
    (0..limbs).map(|_| (0..n).map(|_| r.u64()).collect()).collect()
}

fn section<T>(w: &mut Writer, item: Option<&T>, body: impl FnOnce(&mut Writer, &T)) {
    match item {
        None => w.u8(0),
        Some(item) => {
            w.u8(1);
            let mut inner = Writer::default();
            body(&mut inner, item);
            let inner = inner.into_inner();
            w.u64(inner.len() as u64);
            w.bytes(&inner);
        }
    }
}

fn read_section<T>(
    r: &mut Reader<'_>,
    body: impl FnOnce(&mut Reader<'_>) -> Result<T>,
) -> Result<Option<T>> {
    match r.u8()? {
        0 => Ok(None),
        1 => {
            let len = r.u64()? as usize;
            let mut inner = Reader::new(r.take(len)?);
            let item = body(&mut inner)?;
            if !inner.is_empty() {
                return Err(HeError::Format("key section length mismatch".into()));
            }
            Ok(Some(item))
        }
        flag => Err(HeError::Format(format!("invalid presence flag {flag}"))),
    }
}
