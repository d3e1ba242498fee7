//! Backend-independent entry point for every homomorphic operation.

use std::sync::Arc;

use rand::RngCore;

use crate::ciphertext::{check_params, Ciphertext, MockCiphertext};
use crate::engine::{bsgs_split, check_matvec_shape, compose_steps, CkksEngine};
use crate::error::{HeError, Result};
use crate::keys::{KeySet, PublicKey, RotationKeys, SecretKey};
use crate::params::{HeParams, MAX_ENCODE_MAGNITUDE, MUL_HEADROOM_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Ckks,
    /// Exact plaintext arithmetic behind the same interface.
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Holds the shared secret key (clients).
    KeyHolder,
    /// Evaluates only; never holds a secret key.
    Coordinator,
}

#[derive(Debug, Clone)]
enum Keys {
    Ckks {
        engine: Arc<CkksEngine>,
        public: Option<Arc<PublicKey>>,
        secret: Option<Arc<SecretKey>>,
        rotation: Option<Arc<RotationKeys>>,
    },
    Mock {
        steps: Vec<usize>,
        can_decrypt: bool,
    },
}

/// Parameters, keys and backend. Immutable and cheap to clone.
#[derive(Debug, Clone)]
pub struct EncryptionContext {
    params: HeParams,
    role: Role,
    keys: Keys,
}

impl EncryptionContext {
    /// Context over CKKS key material. A coordinator context refuses a key
    /// set that carries a secret key.
    pub fn from_keys(keys: &KeySet, role: Role) -> Result<Self> {
        if role == Role::Coordinator && keys.secret.is_some() {
            return Err(HeError::Role(
                "coordinator context must not be given a secret key".into(),
            ));
        }
        let engine = CkksEngine::new(&keys.params)?;
        Ok(Self {
            params: keys.params.clone(),
            role,
            keys: Keys::Ckks {
                engine: Arc::new(engine),
                public: keys.public.clone().map(Arc::new),
                secret: keys.secret.clone().map(Arc::new),
                rotation: keys.rotation.clone().map(Arc::new),
            },
        })
    }

    /// Mock context; coordinators still cannot decrypt.
    pub fn mock(params: HeParams, rotation_steps: &[usize], role: Role) -> Result<Self> {
        params.validate()?;
        let mut steps = rotation_steps.to_vec();
        steps.sort_unstable();
        steps.dedup();
        Ok(Self {
            params,
            role,
            keys: Keys::Mock { steps, can_decrypt: role == Role::KeyHolder },
        })
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn backend(&self) -> Backend {
        match self.keys {
            Keys::Ckks { .. } => Backend::Ckks,
            Keys::Mock { .. } => Backend::Mock,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.params.slot_count()
    }

    pub fn can_decrypt(&self) -> bool {
        match &self.keys {
            Keys::Ckks { secret, .. } => secret.is_some(),
            Keys::Mock { can_decrypt, .. } => *can_decrypt,
        }
    }

    pub fn rotation_steps(&self) -> Vec<usize> {
        match &self.keys {
            Keys::Ckks { rotation, .. } => rotation.as_ref().map(|r| r.steps()).unwrap_or_default(),
            Keys::Mock { steps, .. } => steps.clone(),
        }
    }

    pub fn encrypt(&self, values: &[f64], rng: &mut impl RngCore) -> Result<Ciphertext> {
        match &self.keys {
            Keys::Ckks { engine, public, .. } => {
                let pk = public.as_ref().ok_or(HeError::MissingKey("public key"))?;
                Ok(Ciphertext::Ckks(engine.encrypt(pk, values, rng)?))
            }
            Keys::Mock { .. } => {
                check_encodable(values, self.slot_count())?;
                let mut slots = vec![0.0; self.slot_count()];
                slots[..values.len()].copy_from_slice(values);
                Ok(Ciphertext::Mock(MockCiphertext { slots, scale: self.params.scale }))
            }
        }
    }

    /// Encrypt `v` in the layout expected by [`matvec_plain`](Self::matvec_plain):
    /// `v ‖ v` for CKKS, plain `v` for the mock.
    pub fn encrypt_for_matvec(&self, values: &[f64], rng: &mut impl RngCore) -> Result<Ciphertext> {
        if 2 * values.len() > self.slot_count() {
            return Err(HeError::Overflow(format!(
                "length {} needs {} slots for the matrix-vector layout",
                values.len(),
                2 * values.len()
            )));
        }
        match self.backend() {
            Backend::Ckks => {
                let mut doubled = values.to_vec();
                doubled.extend_from_slice(values);
                self.encrypt(&doubled, rng)
            }
            Backend::Mock => self.encrypt(values, rng),
        }
    }

    /// All slots; callers truncate to the vector length they encrypted.
    pub fn decrypt(&self, ct: &Ciphertext) -> Result<Vec<f64>> {
        if self.role == Role::Coordinator {
            return Err(HeError::Role("coordinator contexts cannot decrypt".into()));
        }
        match (&self.keys, ct) {
            (Keys::Ckks { engine, secret, .. }, Ciphertext::Ckks(c)) => {
                let sk = secret.as_ref().ok_or(HeError::MissingKey("secret key"))?;
                self.check(ct)?;
                Ok(engine.decrypt(sk, c))
            }
            (Keys::Mock { can_decrypt, .. }, Ciphertext::Mock(c)) => {
                if !can_decrypt {
                    return Err(HeError::MissingKey("secret key"));
                }
                Ok(c.slots.clone())
            }
            _ => Err(backend_mismatch()),
        }
    }

    fn check(&self, ct: &Ciphertext) -> Result<()> {
        check_params(ct, &self.params)
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        match (&self.keys, a, b) {
            (Keys::Ckks { engine, .. }, Ciphertext::Ckks(x), Ciphertext::Ckks(y)) => {
                Ok(Ciphertext::Ckks(engine.add(x, y)?))
            }
            (Keys::Mock { .. }, Ciphertext::Mock(x), Ciphertext::Mock(y)) => {
                if x.scale != y.scale {
                    return Err(HeError::Mismatch(format!("scales {} and {}", x.scale, y.scale)));
                }
                let slots = x.slots.iter().zip(&y.slots).map(|(p, q)| p + q).collect();
                Ok(Ciphertext::Mock(MockCiphertext { slots, scale: x.scale }))
            }
            _ => Err(backend_mismatch()),
        }
    }

    /// Balanced pairwise fold.
    pub fn add_many(&self, cts: &[Ciphertext]) -> Result<Ciphertext> {
        match cts {
            [] => Err(HeError::Mismatch("add_many of an empty list".into())),
            [single] => {
                self.check(single)?;
                Ok(single.clone())
            }
            _ => {
                let (left, right) = cts.split_at(cts.len() / 2);
                self.add(&self.add_many(left)?, &self.add_many(right)?)
            }
        }
    }

    /// Left rotation by a step declared at key generation (or 0).
    pub fn rotate(&self, ct: &Ciphertext, step: usize) -> Result<Ciphertext> {
        self.check(ct)?;
        if step == 0 {
            return Ok(ct.clone());
        }
        if !self.rotation_steps().contains(&step) {
            return Err(HeError::UndeclaredRotation(step));
        }
        self.rotate_any(ct, step)
    }

    /// Left rotation by any step composable from the declared ones.
    pub fn rotate_any(&self, ct: &Ciphertext, step: usize) -> Result<Ciphertext> {
        self.check(ct)?;
        match (&self.keys, ct) {
            (Keys::Ckks { engine, rotation, .. }, Ciphertext::Ckks(c)) => {
                let keys = rotation.as_ref().ok_or(HeError::MissingKey("rotation keys"))?;
                Ok(Ciphertext::Ckks(engine.rotate_composed(c, step, keys)?))
            }
            (Keys::Mock { steps, .. }, Ciphertext::Mock(c)) => {
                let n = c.slots.len();
                compose_steps(step % n, steps)?;
                let mut slots = c.slots.clone();
                slots.rotate_left(step % n);
                Ok(Ciphertext::Mock(MockCiphertext { slots, scale: c.scale }))
            }
            _ => Err(backend_mismatch()),
        }
    }

    /// Slot-wise product with a plaintext vector; the scale becomes `scale·Δ`.
    pub fn mul_plain(&self, ct: &Ciphertext, plain: &[f64]) -> Result<Ciphertext> {
        self.check(ct)?;
        match (&self.keys, ct) {
            (Keys::Ckks { engine, .. }, Ciphertext::Ckks(c)) => {
                Ok(Ciphertext::Ckks(engine.mul_plain(c, plain)?))
            }
            (Keys::Mock { .. }, Ciphertext::Mock(c)) => {
                self.check_mock_level(c.scale)?;
                check_encodable(plain, c.slots.len())?;
                let mut slots: Vec<f64> = c.slots.clone();
                for (i, s) in slots.iter_mut().enumerate() {
                    *s *= plain.get(i).copied().unwrap_or(0.0);
                }
                Ok(Ciphertext::Mock(MockCiphertext { slots, scale: c.scale * self.params.scale }))
            }
            _ => Err(backend_mismatch()),
        }
    }

    fn check_mock_level(&self, scale: f64) -> Result<()> {
        if scale.log2() + self.params.scale.log2() + MUL_HEADROOM_BITS >= self.params.log2_modulus() {
            return Err(HeError::LevelExhausted(scale.log2()));
        }
        Ok(())
    }

    /// `A·v` for a row-major `dim × dim` plaintext matrix and a ciphertext
    /// produced by [`encrypt_for_matvec`](Self::encrypt_for_matvec) (or a sum
    /// of such). The result holds `A·v` in slots `[0, dim)`.
    pub fn matvec_plain(&self, matrix: &[f64], dim: usize, ct: &Ciphertext) -> Result<Ciphertext> {
        self.check(ct)?;
        match (&self.keys, ct) {
            (Keys::Ckks { engine, rotation, .. }, Ciphertext::Ckks(c)) => {
                let keys = rotation.as_ref().ok_or(HeError::MissingKey("rotation keys"))?;
                Ok(Ciphertext::Ckks(engine.matvec(matrix, dim, c, keys)?))
            }
            (Keys::Mock { steps, .. }, Ciphertext::Mock(c)) => {
                check_matvec_shape(matrix, dim, c.slots.len())?;
                self.check_mock_level(c.scale)?;
                let (baby, giant) = bsgs_split(dim);
                for s in (1..baby).chain((1..giant).map(|k| k * baby)) {
                    compose_steps(s, steps)?;
                }
                let mut slots = vec![0.0; c.slots.len()];
                for (t, out) in slots.iter_mut().take(dim).enumerate() {
                    *out = (0..dim).map(|j| matrix[t * dim + j] * c.slots[j]).sum();
                }
                Ok(Ciphertext::Mock(MockCiphertext { slots, scale: c.scale * self.params.scale }))
            }
            _ => Err(backend_mismatch()),
        }
    }

    /// Parse a ciphertext and check it against this context's parameters.
    pub fn deserialize(&self, bytes: &[u8]) -> Result<Ciphertext> {
        crate::ciphertext::deserialize_ct(bytes, &self.params)
    }
}

fn check_encodable(values: &[f64], slots: usize) -> Result<()> {
    if values.len() > slots {
        return Err(HeError::Overflow(format!("{} values exceed {slots} slots", values.len())));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || v.abs() > MAX_ENCODE_MAGNITUDE) {
        return Err(HeError::Overflow(format!("value {bad} outside the encodable range ±2^20")));
    }
    Ok(())
}

fn backend_mismatch() -> HeError {
    HeError::Mismatch("ciphertext backend does not match the context".into())
}

/// Generate CKKS keys for `params`.
pub fn keygen(params: &HeParams, rotation_steps: &[usize], seed: u64) -> Result<KeySet> {
    CkksEngine::new(params)?.keygen(rotation_steps, seed)
}
