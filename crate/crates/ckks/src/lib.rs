//! Approximate-arithmetic homomorphic encryption (RNS-CKKS) restricted to what
//! encrypted ROLANN aggregation needs: encryption of real vectors, ciphertext
//! addition, slot rotation, plaintext multiplication and plaintext-matrix ×
//! ciphertext-vector products. A mock backend with exact plaintext
//! semantics shares the interface and serves as a differential oracle.
//!
//! Ciphertexts carry a single plaintext-multiplication level: there is no
//! relinearization, rescaling or bootstrapping.

pub mod arith;
mod ciphertext;
mod context;
mod encoding;
mod engine;
mod error;
mod keys;
pub mod ntt;
mod params;
mod wire;

pub use ciphertext::{
    deserialize_ct, inflation_ratio, serialize_ct, Ciphertext, CkksCiphertext, MockCiphertext,
    CKKS_HEADER_LEN, MOCK_HEADER_LEN,
};
pub use context::{keygen, Backend, EncryptionContext, Role};
pub use encoding::Encoder;
pub use error::{HeError, Result};
pub use keys::{KeySet, PublicKey, RotationKey, RotationKeys, SecretKey};
pub use params::{HeParams, DEFAULT_RING_DEGREE, MAX_ENCODE_MAGNITUDE};
