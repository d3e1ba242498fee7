use crate::arith::{is_prime, ntt_primes};
use crate::error::HeError;

/// CKKS parameter set.
///
/// `moduli` is the ciphertext modulus chain `Q = q_0 · … · q_{L-1}`;
/// `special_prime` is only used inside key switching and never appears in a
/// ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub struct HeParams {
    pub ring_degree: usize,
    pub moduli: Vec<u64>,
    pub special_prime: u64,
    pub scale: f64,
    pub noise_std: f64,
}

pub const DEFAULT_RING_DEGREE: usize = 8192;
pub const DEFAULT_SCALE_BITS: i32 = 40;
pub const DEFAULT_NOISE_STD: f64 = 3.2;
const MODULUS_BITS: u32 = 55;
const SPECIAL_PRIME_BITS: u32 = 60;
/// Bits of headroom required above `Δ²` for one plaintext multiplication.
pub const MUL_HEADROOM_BITS: f64 = 20.0;
/// Largest magnitude accepted by the encoder.
pub const MAX_ENCODE_MAGNITUDE: f64 = (1u64 << 20) as f64;

impl Default for HeParams {
    fn default() -> Self {
        Self::with_ring_degree(DEFAULT_RING_DEGREE)
    }
}

impl HeParams {
    /// Two ~55-bit primes, a ~60-bit special prime, `Δ = 2^40`, `σ = 3.2`.
    pub fn with_ring_degree(ring_degree: usize) -> Self {
        let moduli = ntt_primes(MODULUS_BITS, ring_degree, 2);
        let special_prime = ntt_primes(SPECIAL_PRIME_BITS, ring_degree, 1)
            .first()
            .copied()
            .unwrap_or(0);
        Self {
            ring_degree,
            moduli,
            special_prime,
            scale: 2f64.powi(DEFAULT_SCALE_BITS),
            noise_std: DEFAULT_NOISE_STD,
        }
    }

    /// Smallest power-of-two ring (at least 16) whose slots hold two copies
    /// of a length-`dim` vector, as the matrix-vector product requires.
    pub fn for_dimension(dim: usize) -> Self {
        let slots = (2 * dim.max(1)).next_power_of_two();
        Self::with_ring_degree((2 * slots).max(16))
    }

    pub fn slot_count(&self) -> usize {
        self.ring_degree / 2
    }

    pub fn log2_modulus(&self) -> f64 {
        self.moduli.iter().map(|&q| (q as f64).log2()).sum()
    }

    pub fn validate(&self) -> Result<(), HeError> {
        let n = self.ring_degree;
        if n < 4 || !n.is_power_of_two() {
            return Err(HeError::InvalidParams(format!(
                "ring degree {n} is not a power of two >= 4"
            )));
        }
        if self.moduli.is_empty() || self.log2_modulus() >= 126.0 {
            return Err(HeError::InvalidParams(format!(
                "modulus chain must be non-empty with Q below 2^126, got {} primes",
                self.moduli.len()
            )));
        }
        let two_n = 2 * n as u64;
        for &q in self.moduli.iter().chain(std::iter::once(&self.special_prime)) {
            if q >= 1 << 62 || !is_prime(q) || q % two_n != 1 {
                return Err(HeError::InvalidParams(format!(
                    "{q} is not an NTT-friendly prime below 2^62 for N = {n}"
                )));
            }
        }
        for (i, &q) in self.moduli.iter().enumerate() {
            if self.moduli[..i].contains(&q) || q == self.special_prime {
                return Err(HeError::InvalidParams(format!("prime {q} repeated")));
            }
            if q >= self.special_prime {
                return Err(HeError::InvalidParams(
                    "special prime must exceed every ciphertext prime".into(),
                ));
            }
        }
        if !(self.scale > 1.0 && self.scale.is_finite()) {
            return Err(HeError::InvalidParams(format!("scale {} must be > 1", self.scale)));
        }
        if 2.0 * self.scale.log2() + MUL_HEADROOM_BITS >= self.log2_modulus() {
            return Err(HeError::InvalidParams(format!(
                "scale^2 = 2^{:.1} leaves less than 2^{MUL_HEADROOM_BITS} headroom under Q = 2^{:.1}",
                2.0 * self.scale.log2(),
                self.log2_modulus()
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(HeError::InvalidParams("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Powers of two up to the next power of two `>= dim`, capped below the
    /// slot count.
    pub fn default_rotation_steps(&self, dim: usize) -> Vec<usize> {
        let top = dim.max(1).next_power_of_two();
        let mut steps = Vec::new();
        let mut s = 1;
        while s <= top && s < self.slot_count() {
            steps.push(s);
            s <<= 1;
        }
        steps
    }
}
