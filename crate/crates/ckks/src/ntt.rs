//! Negacyclic number-theoretic transform over `Z_q[X]/(X^N + 1)`.
//!
//! Forward output is in bit-reversed order; pointwise products are taken in
//! that order and the inverse transform restores natural coefficient order.

use crate::arith::{inv_mod, mul_mod, mul_shoup, pow_mod, primitive_root_of_unity, shoup_precompute};

#[derive(Debug, Clone)]
pub struct NttTable {
    pub q: u64,
    pub n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(x: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        x.reverse_bits() >> (usize::BITS - bits)
    }
}

impl NttTable {
    /// Returns `None` when `q` has no primitive `2n`-th root of unity.
    pub fn new(n: usize, q: u64) -> Option<Self> {
        debug_assert!(n.is_power_of_two());
        let psi = primitive_root_of_unity(2 * n as u64, q)?;
        let psi_inv = inv_mod(psi, q);
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0u64; n];
        let mut psi_inv_rev = vec![0u64; n];
        for i in 0..n {
            let r = bit_reverse(i, bits) as u64;
            psi_rev[i] = pow_mod(psi, r, q);
            psi_inv_rev[i] = pow_mod(psi_inv, r, q);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| shoup_precompute(w, q)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| shoup_precompute(w, q)).collect();
        let n_inv = inv_mod(n as u64, q);
        Some(Self {
            q,
            n,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: shoup_precompute(n_inv, q),
        })
    }

    pub fn forward(&self, a: &mut [u64]) {
        let q = self.q;
        let n = self.n;
        debug_assert_eq!(a.len(), n);
        let mut t = n;
        let mut m = 1;
        while m < n {
            t >>= 1;
            for i in 0..m {
                let j1 = 2 * i * t;
                let w = self.psi_rev[m + i];
                let ws = self.psi_rev_shoup[m + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = mul_shoup(a[j + t], w, ws, q);
                    a[j] = if u + v >= q { u + v - q } else { u + v };
                    a[j + t] = if u >= v { u - v } else { u + q - v };
                }
            }
            m <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        let q = self.q;
        let n = self.n;
        debug_assert_eq!(a.len(), n);
        let mut t = 1;
        let mut m = n;
        while m > 1 {
            let h = m >> 1;
            let mut j1 = 0;
            for i in 0..h {
                let w = self.psi_inv_rev[h + i];
                let ws = self.psi_inv_rev_shoup[h + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = a[j + t];
                    a[j] = if u + v >= q { u + v - q } else { u + v };
                    let diff = if u >= v { u - v } else { u + q - v };
                    a[j + t] = mul_shoup(diff, w, ws, q);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = mul_shoup(*x, self.n_inv, self.n_inv_shoup, q);
        }
    }

    /// Pointwise product of two transformed operands.
    pub fn mul_pointwise(&self, a: &[u64], b: &[u64], out: &mut [u64]) {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = mul_mod(x, y, self.q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{ntt_primes, sub_mod};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Schoolbook negacyclic product, the reference for the transform.
    fn negacyclic_naive(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for i in 0..n {
            for j in 0..n {
                let p = mul_mod(a[i], b[j], q);
                let k = i + j;
                if k < n {
                    out[k] = (out[k] + p) % q;
                } else {
                    out[k - n] = sub_mod(out[k - n], p, q);
                }
            }
        }
        out
    }

    #[test]
    fn roundtrip_is_exact_for_every_prime() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for &n in &[16usize, 256, 8192] {
            let mut primes = ntt_primes(55, n, 2);
            primes.extend(ntt_primes(60, n, 1));
            for q in primes {
                let table = NttTable::new(n, q).unwrap();
                let original: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
                let mut a = original.clone();
                table.forward(&mut a);
                table.inverse(&mut a);
                assert_eq!(a, original, "n={n} q={q}");
            }
        }
    }

    #[test]
    fn product_matches_schoolbook() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 64;
        let q = ntt_primes(55, n, 1)[0];
        let table = NttTable::new(n, q).unwrap();
        let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
        let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
        let expected = negacyclic_naive(&a, &b, q);
        let (mut fa, mut fb) = (a.clone(), b.clone());
        table.forward(&mut fa);
        table.forward(&mut fb);
        let mut prod = vec![0; n];
        table.mul_pointwise(&fa, &fb, &mut prod);
        table.inverse(&mut prod);
        assert_eq!(prod, expected);
    }
}
