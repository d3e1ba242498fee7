//! Word-sized modular arithmetic for primes below 2^62.

#[inline]
pub fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

#[inline]
pub fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

#[inline]
pub fn neg_mod(a: u64, q: u64) -> u64 {
    if a == 0 {
        0
    } else {
        q - a
    }
}

#[inline]
pub fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

/// Precomputed `floor(w * 2^64 / q)` for Shoup multiplication by a fixed `w`.
#[inline]
pub fn shoup_precompute(w: u64, q: u64) -> u64 {
    (((w as u128) << 64) / q as u128) as u64
}

/// `a * w mod q` using the Shoup companion of `w`. Requires `q < 2^63`.
#[inline]
pub fn mul_shoup(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let hi = ((a as u128 * w_shoup as u128) >> 64) as u64;
    let r = a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(q));
    if r >= q {
        r - q
    } else {
        r
    }
}

pub fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1 % q;
    base %= q;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, q);
        }
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    acc
}

/// Inverse modulo a prime via Fermat.
pub fn inv_mod(a: u64, q: u64) -> u64 {
    pow_mod(a, q - 2, q)
}

/// Reduce a signed integer into `[0, q)`.
#[inline]
pub fn reduce_i64(x: i64, q: u64) -> u64 {
    let r = x.rem_euclid(q as i64);
    r as u64
}

#[inline]
pub fn reduce_i128(x: i128, q: u64) -> u64 {
    x.rem_euclid(q as i128) as u64
}

/// Centered representative of `a mod q` in `(-q/2, q/2]`.
#[inline]
pub fn center(a: u64, q: u64) -> i64 {
    if a > q / 2 {
        a as i64 - q as i64
    } else {
        a as i64
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &p in &BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// The `count` largest primes `p < 2^bits` with `p ≡ 1 (mod 2n)`, descending.
pub fn ntt_primes(bits: u32, n: usize, count: usize) -> Vec<u64> {
    let step = 2 * n as u64;
    let top = 1u64 << bits;
    let mut candidate = top - (top % step) + 1;
    if candidate >= top {
        candidate -= step;
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count && candidate > step {
        if is_prime(candidate) {
            out.push(candidate);
        }
        candidate -= step;
    }
    out
}

/// A primitive `order`-th root of unity modulo prime `q` (requires `order | q - 1`,
/// `order` a power of two).
pub fn primitive_root_of_unity(order: u64, q: u64) -> Option<u64> {
    if (q - 1) % order != 0 {
        return None;
    }
    let cofactor = (q - 1) / order;
    for g in 2..q.min(1 << 20) {
        let root = pow_mod(g, cofactor, q);
        if pow_mod(root, order / 2, q) != 1 {
            return Some(root);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primality_small_cases() {
        let primes: Vec<u64> = (0..50).filter(|&n| is_prime(n)).collect();
        assert_eq!(primes, vec![2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47]);
        assert!(is_prime(0xffff_ffff_ffff_ffc5));
        assert!(!is_prime(0xffff_ffff_ffff_ffc3));
    }

    #[test]
    fn ntt_primes_are_congruent() {
        for p in ntt_primes(55, 8192, 3) {
            assert!(is_prime(p));
            assert_eq!(p % (2 * 8192), 1);
            assert!(p < 1 << 55);
        }
    }

    #[test]
    fn shoup_matches_u128() {
        let q = ntt_primes(60, 16, 1)[0];
        let w = 123_456_789_012_345 % q;
        let ws = shoup_precompute(w, q);
        for a in [0, 1, q - 1, q / 3, 987_654_321] {
            assert_eq!(mul_shoup(a, w, ws, q), mul_mod(a, w, q));
        }
    }

    #[test]
    fn root_has_exact_order() {
        let q = ntt_primes(55, 1024, 1)[0];
        let psi = primitive_root_of_unity(2048, q).unwrap();
        assert_eq!(pow_mod(psi, 2048, q), 1);
        assert_eq!(pow_mod(psi, 1024, q), q - 1);
    }
}
