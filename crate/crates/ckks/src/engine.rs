//! RNS-CKKS primitives: key generation, encryption, decryption, addition,
//! slot rotation with hybrid key switching, plaintext multiplication and the
//! baby-step/giant-step diagonal matrix-vector product.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::arith::{add_mod, center, inv_mod, mul_mod, neg_mod, reduce_i128, reduce_i64, sub_mod};
use crate::ciphertext::CkksCiphertext;
use crate::encoding::{automorphism, Encoder};
use crate::error::{HeError, Result};
use crate::keys::{KeySet, PublicKey, RnsPoly, RotationKey, RotationKeys, SecretKey};
use crate::ntt::NttTable;
use crate::params::{HeParams, MUL_HEADROOM_BITS};

#[derive(Debug, Clone)]
pub struct CkksEngine {
    params: HeParams,
    /// One table per ciphertext prime, then the special prime.
    tables: Vec<NttTable>,
    encoder: Encoder,
    p_mod_q: Vec<u64>,
    p_inv_mod_q: Vec<u64>,
    /// `(q_0 · … · q_{i-1})^{-1} mod q_i` for Garner reconstruction.
    garner_inv: Vec<u64>,
}

impl CkksEngine {
    pub fn new(params: &HeParams) -> Result<Self> {
        params.validate()?;
        let n = params.ring_degree;
        let tables = params
            .moduli
            .iter()
            .chain(std::iter::once(&params.special_prime))
            .map(|&q| {
                NttTable::new(n, q).ok_or_else(|| {
                    HeError::InvalidParams(format!("no 2N-th root of unity modulo {q}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = params.special_prime;
        let p_mod_q: Vec<u64> = params.moduli.iter().map(|&q| p % q).collect();
        let p_inv_mod_q = params.moduli.iter().zip(&p_mod_q).map(|(&q, &pm)| inv_mod(pm, q)).collect();
        let mut garner_inv = vec![1u64];
        for i in 1..params.moduli.len() {
            let qi = params.moduli[i];
            let prefix = params.moduli[..i].iter().fold(1u64, |acc, &q| mul_mod(acc, q % qi, qi));
            garner_inv.push(inv_mod(prefix, qi));
        }
        Ok(Self {
            params: params.clone(),
            tables,
            encoder: Encoder::new(n),
            p_mod_q,
            p_inv_mod_q,
            garner_inv,
        })
    }

    fn n(&self) -> usize {
        self.params.ring_degree
    }

    fn limbs(&self) -> usize {
        self.params.moduli.len()
    }

    fn special(&self) -> usize {
        self.limbs()
    }

    fn zero_poly(&self, limbs: usize) -> RnsPoly {
        vec![vec![0u64; self.n()]; limbs]
    }

    /// Residues of a small signed polynomial on the first `limbs` moduli.
    fn lift_small(&self, small: &[i64], limbs: usize) -> RnsPoly {
        (0..limbs)
            .map(|l| {
                let q = self.tables[l].q;
                small.iter().map(|&x| reduce_i64(x, q)).collect()
            })
            .collect()
    }

    fn forward(&self, poly: &mut RnsPoly) {
        for (limb, table) in poly.iter_mut().zip(&self.tables) {
            table.forward(limb);
        }
    }

    fn inverse(&self, poly: &mut RnsPoly) {
        for (limb, table) in poly.iter_mut().zip(&self.tables) {
            table.inverse(limb);
        }
    }

    fn sample_ternary(&self, rng: &mut impl RngCore) -> Vec<i64> {
        (0..self.n()).map(|_| rng.gen_range(-1i64..=1)).collect()
    }

    fn sample_error(&self, rng: &mut impl RngCore) -> Vec<i64> {
        let sigma = self.params.noise_std;
        if sigma == 0.0 {
            return vec![0; self.n()];
        }
        let normal = Normal::new(0.0, sigma).expect("validated noise_std");
        let bound = 6.0 * sigma;
        (0..self.n())
            .map(|_| normal.sample(rng).clamp(-bound, bound).round() as i64)
            .collect()
    }

    fn sample_uniform_ntt(&self, rng: &mut impl RngCore, limbs: usize) -> RnsPoly {
        (0..limbs)
            .map(|l| {
                let q = self.tables[l].q;
                (0..self.n()).map(|_| rng.gen_range(0..q)).collect()
            })
            .collect()
    }

    fn secret_ntt(&self, sk: &SecretKey, limbs: usize) -> RnsPoly {
        let small: Vec<i64> = sk.coeffs.iter().map(|&c| c as i64).collect();
        let mut s = self.lift_small(&small, limbs);
        self.forward(&mut s);
        s
    }

    /// Deterministic for a fixed seed.
    pub fn keygen(&self, rotation_steps: &[usize], seed: u64) -> Result<KeySet> {
        let slots = self.params.slot_count();
        if let Some(&bad) = rotation_steps.iter().find(|&&s| s == 0 || s >= slots) {
            return Err(HeError::InvalidParams(format!(
                "rotation step {bad} outside [1, {slots})"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let l = self.limbs();
        let coeffs: Vec<i8> = self.sample_ternary(&mut rng).iter().map(|&c| c as i8).collect();
        let sk = SecretKey { coeffs };

        let s_q = self.secret_ntt(&sk, l);
        let a = self.sample_uniform_ntt(&mut rng, l);
        let mut e = self.lift_small(&self.sample_error(&mut rng), l);
        self.forward(&mut e);
        let mut b = self.zero_poly(l);
        for j in 0..l {
            let q = self.tables[j].q;
            for t in 0..self.n() {
                b[j][t] = add_mod(neg_mod(mul_mod(a[j][t], s_q[j][t], q), q), e[j][t], q);
            }
        }
        let pk = PublicKey { b, a };

        let mut steps: Vec<usize> = rotation_steps.to_vec();
        steps.sort_unstable();
        steps.dedup();
        let mut rotation = RotationKeys::default();
        let s_qp = self.secret_ntt(&sk, l + 1);
        for step in steps {
            let g = self.encoder.galois_element(step);
            let key = self.switching_key(&sk, &s_qp, g, &mut rng);
            rotation.keys.insert(step, RotationKey { step, galois_element: g, digits: key });
        }

        Ok(KeySet {
            params: self.params.clone(),
            secret: Some(sk),
            public: Some(pk),
            rotation: Some(rotation),
        })
    }

    fn switching_key(
        &self,
        sk: &SecretKey,
        s_qp: &RnsPoly,
        galois: usize,
        rng: &mut impl RngCore,
    ) -> Vec<(RnsPoly, RnsPoly)> {
        let l = self.limbs();
        let n = self.n();
        // σ_g(s) in NTT form over the ciphertext primes.
        let permuted: RnsPoly = (0..l)
            .map(|j| {
                let q = self.tables[j].q;
                let base: Vec<u64> = sk.coeffs.iter().map(|&c| reduce_i64(c as i64, q)).collect();
                let mut limb = automorphism(&base, galois, q);
                self.tables[j].forward(&mut limb);
                limb
            })
            .collect();
        (0..l)
            .map(|digit| {
                let a = self.sample_uniform_ntt(rng, l + 1);
                let mut e = self.lift_small(&self.sample_error(rng), l + 1);
                self.forward(&mut e);
                let mut b = self.zero_poly(l + 1);
                for j in 0..=l {
                    let q = self.tables[j].q;
                    for t in 0..n {
                        let mut v = add_mod(neg_mod(mul_mod(a[j][t], s_qp[j][t], q), q), e[j][t], q);
                        if j == digit {
                            v = add_mod(v, mul_mod(self.p_mod_q[j], permuted[j][t], q), q);
                        }
                        b[j][t] = v;
                    }
                }
                (b, a)
            })
            .collect()
    }

    fn reduce_coeffs(&self, coeffs: &[i128], limbs: usize) -> RnsPoly {
        (0..limbs)
            .map(|l| {
                let q = self.tables[l].q;
                coeffs.iter().map(|&c| reduce_i128(c, q)).collect()
            })
            .collect()
    }

    /// Plaintext polynomial of `values` at `scale`, NTT form.
    fn encode_ntt(&self, values: &[f64], scale: f64) -> Result<RnsPoly> {
        let coeffs = self.encoder.encode(values, scale)?;
        let mut pt = self.reduce_coeffs(&coeffs, self.limbs());
        self.forward(&mut pt);
        Ok(pt)
    }

    pub fn encrypt(&self, pk: &PublicKey, values: &[f64], rng: &mut impl RngCore) -> Result<CkksCiphertext> {
        let l = self.limbs();
        let scale = self.params.scale;
        let m = self.encoder.encode(values, scale)?;
        let m = self.reduce_coeffs(&m, l);
        let mut u = self.lift_small(&self.sample_ternary(rng), l);
        self.forward(&mut u);
        let e1 = self.lift_small(&self.sample_error(rng), l);
        let e2 = self.lift_small(&self.sample_error(rng), l);

        let mut c0 = self.zero_poly(l);
        let mut c1 = self.zero_poly(l);
        for j in 0..l {
            self.tables[j].mul_pointwise(&u[j], &pk.b[j], &mut c0[j]);
            self.tables[j].mul_pointwise(&u[j], &pk.a[j], &mut c1[j]);
        }
        self.inverse(&mut c0);
        self.inverse(&mut c1);
        for j in 0..l {
            let q = self.tables[j].q;
            for t in 0..self.n() {
                c0[j][t] = add_mod(add_mod(c0[j][t], e1[j][t], q), m[j][t], q);
                c1[j][t] = add_mod(c1[j][t], e2[j][t], q);
            }
        }
        Ok(CkksCiphertext { c0, c1, scale, level: (l - 1) as u8 })
    }

    pub fn decrypt(&self, sk: &SecretKey, ct: &CkksCiphertext) -> Vec<f64> {
        let l = self.limbs();
        let s = self.secret_ntt(sk, l);
        let mut m = ct.c1.clone();
        self.forward(&mut m);
        for j in 0..l {
            let src = m[j].clone();
            self.tables[j].mul_pointwise(&src, &s[j], &mut m[j]);
        }
        self.inverse(&mut m);
        for j in 0..l {
            let q = self.tables[j].q;
            for t in 0..self.n() {
                m[j][t] = add_mod(m[j][t], ct.c0[j][t], q);
            }
        }
        let centered = self.crt_centered(&m);
        self.encoder.decode(&centered, ct.scale)
    }

    /// Garner reconstruction to centered values in `(-Q/2, Q/2]`, as `f64`.
    fn crt_centered(&self, poly: &RnsPoly) -> Vec<f64> {
        let moduli = &self.params.moduli;
        let big_q: u128 = moduli.iter().map(|&q| q as u128).product();
        (0..self.n())
            .map(|t| {
                let mut x: u128 = poly[0][t] as u128;
                let mut prefix: u128 = moduli[0] as u128;
                for i in 1..moduli.len() {
                    let qi = moduli[i];
                    let xi = (x % qi as u128) as u64;
                    let diff = sub_mod(poly[i][t], xi, qi);
                    let k = mul_mod(diff, self.garner_inv[i], qi);
                    x += k as u128 * prefix;
                    prefix *= qi as u128;
                }
                if x > big_q / 2 {
                    -((big_q - x) as f64)
                } else {
                    x as f64
                }
            })
            .collect()
    }

    pub fn add(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext> {
        self.check_compatible(a, b)?;
        let mut out = a.clone();
        for j in 0..self.limbs() {
            let q = self.tables[j].q;
            for t in 0..self.n() {
                out.c0[j][t] = add_mod(a.c0[j][t], b.c0[j][t], q);
                out.c1[j][t] = add_mod(a.c1[j][t], b.c1[j][t], q);
            }
        }
        Ok(out)
    }

    fn check_compatible(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<()> {
        if a.level != b.level || a.c0.len() != b.c0.len() {
            return Err(HeError::Mismatch(format!("levels {} and {}", a.level, b.level)));
        }
        if a.scale != b.scale {
            return Err(HeError::Mismatch(format!("scales {} and {}", a.scale, b.scale)));
        }
        Ok(())
    }

    /// Hybrid key switching of `c` (coefficient form over the ciphertext
    /// primes) under `key`; returns the coefficient-form pair to add.
    fn key_switch(&self, c: &RnsPoly, key: &[(RnsPoly, RnsPoly)]) -> (RnsPoly, RnsPoly) {
        let l = self.limbs();
        let n = self.n();
        let mut acc0 = self.zero_poly(l + 1);
        let mut acc1 = self.zero_poly(l + 1);
        let mut lifted = vec![0u64; n];
        for (i, (kb, ka)) in key.iter().enumerate() {
            let qi = self.tables[i].q;
            let digit: Vec<i64> = c[i].iter().map(|&x| center(x, qi)).collect();
            for j in 0..=l {
                let table = &self.tables[j];
                let q = table.q;
                for (dst, &d) in lifted.iter_mut().zip(&digit) {
                    *dst = reduce_i64(d, q);
                }
                table.forward(&mut lifted);
                for t in 0..n {
                    acc0[j][t] = add_mod(acc0[j][t], mul_mod(lifted[t], kb[j][t], q), q);
                    acc1[j][t] = add_mod(acc1[j][t], mul_mod(lifted[t], ka[j][t], q), q);
                }
            }
        }
        self.inverse(&mut acc0);
        self.inverse(&mut acc1);
        (self.mod_down(&acc0), self.mod_down(&acc1))
    }

    /// Divide by the special prime with rounding, dropping its limb.
    fn mod_down(&self, x: &RnsPoly) -> RnsPoly {
        let l = self.limbs();
        let p = self.tables[self.special()].q;
        (0..l)
            .map(|j| {
                let q = self.tables[j].q;
                let p_inv = self.p_inv_mod_q[j];
                (0..self.n())
                    .map(|t| {
                        let rp = reduce_i64(center(x[l][t], p), q);
                        mul_mod(sub_mod(x[j][t], rp, q), p_inv, q)
                    })
                    .collect()
            })
            .collect()
    }

    /// Apply `X ↦ X^g` and switch back to the original secret.
    pub fn apply_galois(&self, ct: &CkksCiphertext, key: &RotationKey) -> CkksCiphertext {
        let g = key.galois_element;
        let moduli = &self.params.moduli;
        let c0: RnsPoly = ct.c0.iter().zip(moduli).map(|(limb, &q)| automorphism(limb, g, q)).collect();
        let c1: RnsPoly = ct.c1.iter().zip(moduli).map(|(limb, &q)| automorphism(limb, g, q)).collect();
        let (k0, k1) = self.key_switch(&c1, &key.digits);
        let mut out0 = c0;
        for j in 0..self.limbs() {
            let q = moduli[j];
            for t in 0..self.n() {
                out0[j][t] = add_mod(out0[j][t], k0[j][t], q);
            }
        }
        CkksCiphertext { c0: out0, c1: k1, scale: ct.scale, level: ct.level }
    }

    /// Left rotation by any amount expressible as a sum of declared steps.
    pub fn rotate_composed(
        &self,
        ct: &CkksCiphertext,
        step: usize,
        keys: &RotationKeys,
    ) -> Result<CkksCiphertext> {
        let plan = compose_steps(step % self.params.slot_count(), &keys.steps())?;
        let mut out = ct.clone();
        for s in plan {
            out = self.apply_galois(&out, keys.get(s).expect("planned from declared steps"));
        }
        Ok(out)
    }

    pub fn check_mul_level(&self, scale: f64) -> Result<()> {
        if scale.log2() + self.params.scale.log2() + MUL_HEADROOM_BITS >= self.params.log2_modulus() {
            return Err(HeError::LevelExhausted(scale.log2()));
        }
        Ok(())
    }

    pub fn mul_plain(&self, ct: &CkksCiphertext, values: &[f64]) -> Result<CkksCiphertext> {
        self.check_mul_level(ct.scale)?;
        let pt = self.encode_ntt(values, self.params.scale)?;
        let mut c0 = ct.c0.clone();
        let mut c1 = ct.c1.clone();
        self.forward(&mut c0);
        self.forward(&mut c1);
        for j in 0..self.limbs() {
            let (a0, a1) = (c0[j].clone(), c1[j].clone());
            self.tables[j].mul_pointwise(&a0, &pt[j], &mut c0[j]);
            self.tables[j].mul_pointwise(&a1, &pt[j], &mut c1[j]);
        }
        self.inverse(&mut c0);
        self.inverse(&mut c1);
        Ok(CkksCiphertext { c0, c1, scale: ct.scale * self.params.scale, level: ct.level })
    }

    /// `A·v` for a row-major `dim × dim` matrix and a ciphertext whose first
    /// `2·dim` slots hold `v ‖ v`. Output slots `[0, dim)` carry the product,
    /// the rest are zero.
    pub fn matvec(
        &self,
        matrix: &[f64],
        dim: usize,
        ct: &CkksCiphertext,
        keys: &RotationKeys,
    ) -> Result<CkksCiphertext> {
        let slots = self.params.slot_count();
        check_matvec_shape(matrix, dim, slots)?;
        self.check_mul_level(ct.scale)?;
        let out_scale = ct.scale * self.params.scale;
        let (baby, giant) = bsgs_split(dim);
        let l = self.limbs();

        // Baby steps: rot_j = rot_{hb}(rot_{j - hb}) with hb the top bit of j.
        let mut babies: Vec<CkksCiphertext> = Vec::with_capacity(baby);
        babies.push(ct.clone());
        for j in 1..baby {
            let hb = 1usize << (usize::BITS - 1 - j.leading_zeros());
            let key = keys.get(hb).ok_or(HeError::UndeclaredRotation(hb))?;
            let next = self.apply_galois(&babies[j - hb], key);
            babies.push(next);
        }
        let babies_ntt: Vec<(RnsPoly, RnsPoly)> = babies
            .into_iter()
            .map(|mut b| {
                self.forward(&mut b.c0);
                self.forward(&mut b.c1);
                (b.c0, b.c1)
            })
            .collect();

        let mut result: Option<CkksCiphertext> = None;
        for k in 0..giant {
            let shift = k * baby;
            let mut acc0 = self.zero_poly(l);
            let mut acc1 = self.zero_poly(l);
            let mut any = false;
            for (j, (b0, b1)) in babies_ntt.iter().enumerate() {
                let i = shift + j;
                if i >= dim {
                    break;
                }
                let mut pdiag = vec![0.0; slots];
                let mut nonzero = false;
                for t in 0..dim {
                    let v = matrix[t * dim + (t + i) % dim];
                    pdiag[(t + shift) % slots] = v;
                    nonzero |= v != 0.0;
                }
                if !nonzero {
                    continue;
                }
                any = true;
                let pt = self.encode_ntt(&pdiag, self.params.scale)?;
                for jj in 0..l {
                    let q = self.tables[jj].q;
                    for t in 0..self.n() {
                        acc0[jj][t] = add_mod(acc0[jj][t], mul_mod(b0[jj][t], pt[jj][t], q), q);
                        acc1[jj][t] = add_mod(acc1[jj][t], mul_mod(b1[jj][t], pt[jj][t], q), q);
                    }
                }
            }
            if !any {
                continue;
            }
            self.inverse(&mut acc0);
            self.inverse(&mut acc1);
            let partial = CkksCiphertext { c0: acc0, c1: acc1, scale: out_scale, level: ct.level };
            let rotated = if shift == 0 { partial } else { self.rotate_composed(&partial, shift, keys)? };
            result = Some(match result {
                None => rotated,
                Some(acc) => self.add(&acc, &rotated)?,
            });
        }
        Ok(result.unwrap_or_else(|| CkksCiphertext {
            c0: self.zero_poly(l),
            c1: self.zero_poly(l),
            scale: out_scale,
            level: ct.level,
        }))
    }
}

/// Baby-step count `⌈√dim⌉` rounded up to a power of two, and the giant-step
/// count covering `dim` diagonals.
pub(crate) fn bsgs_split(dim: usize) -> (usize, usize) {
    let baby = ((dim as f64).sqrt().ceil() as usize).max(1).next_power_of_two().min(dim.max(1));
    (baby, dim.div_ceil(baby))
}

pub(crate) fn check_matvec_shape(matrix: &[f64], dim: usize, slots: usize) -> Result<()> {
    if dim == 0 || matrix.len() != dim * dim {
        return Err(HeError::Mismatch(format!(
            "matrix has {} entries, expected {dim}×{dim}",
            matrix.len()
        )));
    }
    if 2 * dim > slots {
        return Err(HeError::Mismatch(format!(
            "dimension {dim} needs {} slots, only {slots} available",
            2 * dim
        )));
    }
    Ok(())
}

/// Greedy decomposition of `step` into declared steps (largest first).
pub(crate) fn compose_steps(step: usize, declared: &[usize]) -> Result<Vec<usize>> {
    let mut remaining = step;
    let mut plan = Vec::new();
    for &s in declared.iter().rev() {
        while s <= remaining {
            plan.push(s);
            remaining -= s;
        }
    }
    if remaining != 0 {
        return Err(HeError::UndeclaredRotation(step));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_powers_of_two() {
        let declared = [1, 2, 4, 8];
        assert_eq!(compose_steps(13, &declared).unwrap(), vec![8, 4, 1]);
        assert_eq!(compose_steps(0, &declared).unwrap(), Vec::<usize>::new());
        assert_eq!(compose_steps(5, &[2, 4]), Err(HeError::UndeclaredRotation(5)));
    }

    #[test]
    fn bsgs_covers_dimension() {
        for dim in 1..600 {
            let (b, g) = bsgs_split(dim);
            assert!(b * g >= dim && b <= dim.next_power_of_two());
            assert!(b.is_power_of_two());
        }
        assert_eq!(bsgs_split(16), (4, 4));
    }

    #[test]
    fn mod_down_inverts_scaling_by_special_prime() {
        let params = HeParams::with_ring_degree(16);
        let engine = CkksEngine::new(&params).unwrap();
        let l = params.moduli.len();
        let p = params.special_prime;
        // x = P·y + r with small r; mod_down must return y.
        let y: Vec<i64> = (0..16).map(|i| i as i64 * 1_000 - 7_000).collect();
        let r: Vec<i64> = (0..16).map(|i| (i as i64 % 5) - 2).collect();
        let mut x = engine.zero_poly(l + 1);
        for j in 0..=l {
            let q = engine.tables[j].q;
            for t in 0..16 {
                let v = (p as i128) * y[t] as i128 + r[t] as i128;
                x[j][t] = reduce_i128(v, q);
            }
        }
        let down = engine.mod_down(&x);
        for j in 0..l {
            let q = params.moduli[j];
            for t in 0..16 {
                assert_eq!(down[j][t], reduce_i64(y[t], q));
            }
        }
    }
}
