//! Canonical-embedding encoder for real slot vectors.
//!
//! A length-`N/2` slot vector `z` maps to the real polynomial `m` with
//! `m(ζ^{5^j}) = z_j`, `ζ = exp(iπ/N)`. The forward map uses the special FFT
//! over the rotation group generated by 5, so slot rotation by `r` corresponds
//! to the ring automorphism `X ↦ X^{5^r}`.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{HeError, Result};
use crate::params::MAX_ENCODE_MAGNITUDE;

#[derive(Debug, Clone)]
pub struct Encoder {
    n: usize,
    slots: usize,
    m: usize,
    rot_group: Vec<usize>,
    ksi_pows: Vec<Complex64>,
}

impl Encoder {
    pub fn new(ring_degree: usize) -> Self {
        let n = ring_degree;
        let slots = n / 2;
        let m = 2 * n;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let ksi_pows = (0..=m)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * j as f64 / m as f64))
            .collect();
        Self { n, slots, m, rot_group, ksi_pows }
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    fn bit_reverse(vals: &mut [Complex64]) {
        let n = vals.len();
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j ^= bit;
            if i < j {
                vals.swap(i, j);
            }
        }
    }

    fn fft_special(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        Self::bit_reverse(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * self.m / lenq;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.ksi_pows[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - (self.rot_group[j] % lenq)) * self.m / lenq;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.ksi_pows[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        Self::bit_reverse(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v *= inv;
        }
    }

    /// Integer coefficients of `round(scale · m)`. Shorter inputs are
    /// zero-padded to the slot count.
    pub fn encode(&self, values: &[f64], scale: f64) -> Result<Vec<i128>> {
        if values.len() > self.slots {
            return Err(HeError::Overflow(format!(
                "{} values exceed {} slots",
                values.len(),
                self.slots
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || v.abs() > MAX_ENCODE_MAGNITUDE) {
            return Err(HeError::Overflow(format!(
                "value {bad} outside the encodable range ±2^20"
            )));
        }
        let mut vals = vec![Complex64::new(0.0, 0.0); self.slots];
        for (slot, &v) in vals.iter_mut().zip(values) {
            slot.re = v;
        }
        self.fft_special_inv(&mut vals);
        let mut coeffs = vec![0i128; self.n];
        for (i, v) in vals.iter().enumerate() {
            coeffs[i] = (v.re * scale).round() as i128;
            coeffs[i + self.slots] = (v.im * scale).round() as i128;
        }
        Ok(coeffs)
    }

    /// Real parts of the slots of a polynomial given by centered coefficients.
    pub fn decode(&self, coeffs: &[f64], scale: f64) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.n);
        let mut vals: Vec<Complex64> = (0..self.slots)
            .map(|i| Complex64::new(coeffs[i] / scale, coeffs[i + self.slots] / scale))
            .collect();
        self.fft_special(&mut vals);
        vals.into_iter().map(|c| c.re).collect()
    }

    /// Galois element realising a left rotation of the slots by `step`.
    pub fn galois_element(&self, step: usize) -> usize {
        self.rot_group[step % self.slots]
    }
}

/// `X ↦ X^g` on a coefficient vector modulo `X^N + 1`.
pub fn automorphism(coeffs: &[u64], g: usize, q: u64) -> Vec<u64> {
    let n = coeffs.len();
    let two_n = 2 * n;
    let mut out = vec![0u64; n];
    for (i, &c) in coeffs.iter().enumerate() {
        let idx = i * g % two_n;
        if idx < n {
            out[idx] = c;
        } else {
            out[idx - n] = if c == 0 { 0 } else { q - c };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Direct evaluation of `m(ζ^{5^j})`: the oracle for the special FFT.
    fn naive_decode(coeffs: &[f64], scale: f64) -> Vec<f64> {
        let n = coeffs.len();
        let m = 2 * n;
        let mut g = 1usize;
        let mut out = Vec::new();
        for _ in 0..n / 2 {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, &c) in coeffs.iter().enumerate() {
                let e = (g * k) % m;
                acc += Complex64::from_polar(c, 2.0 * PI * e as f64 / m as f64);
            }
            out.push(acc.re / scale);
            g = g * 5 % m;
        }
        out
    }

    #[test]
    fn decode_matches_direct_evaluation() {
        let enc = Encoder::new(32);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let coeffs: Vec<f64> = (0..32).map(|_| rng.gen_range(-1000.0..1000.0)).collect();
        let fast = enc.decode(&coeffs, 1.0);
        let slow = naive_decode(&coeffs, 1.0);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zeros_encode_to_zero_polynomial() {
        let enc = Encoder::new(64);
        assert!(enc.encode(&[0.0; 10], 2f64.powi(40)).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn roundtrip_short_vector() {
        let enc = Encoder::new(8192);
        let scale = 2f64.powi(40);
        let v = [1.0, -2.5, 3.25];
        let coeffs = enc.encode(&v, scale).unwrap();
        let back = enc.decode(&coeffs.iter().map(|&c| c as f64).collect::<Vec<_>>(), scale);
        for (i, &x) in v.iter().enumerate() {
            assert!((back[i] - x).abs() <= 1e-7 * x.abs(), "{} vs {x}", back[i]);
        }
        assert!(back[3..].iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn automorphism_rotates_slots_left() {
        let enc = Encoder::new(64);
        let q = crate::arith::ntt_primes(55, 64, 1)[0];
        let v: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let coeffs = enc.encode(&v, 1e12).unwrap();
        let as_mod: Vec<u64> = coeffs.iter().map(|&c| crate::arith::reduce_i128(c, q)).collect();
        let rotated = automorphism(&as_mod, enc.galois_element(3), q);
        let centered: Vec<f64> = rotated.iter().map(|&c| crate::arith::center(c, q) as f64).collect();
        let back = enc.decode(&centered, 1e12);
        for j in 0..32 {
            assert!((back[j] - v[(j + 3) % 32]).abs() < 1e-6, "slot {j}: {}", back[j]);
        }
    }

    #[test]
    fn rejects_oversized_input() {
        let enc = Encoder::new(16);
        assert!(enc.encode(&[0.0; 9], 1.0).is_err());
        assert!(enc.encode(&[2e6], 1.0).is_err());
    }
}
