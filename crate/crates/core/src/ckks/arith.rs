//! Modular arithmetic over u64 primes and NTT-friendly prime search.

use crate::error::{Error, Result};

#[inline(always)]
pub fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

#[inline(always)]
pub fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

#[inline(always)]
pub fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

#[inline(always)]
pub fn neg_mod(a: u64, q: u64) -> u64 {
    if a == 0 {
        0
    } else {
        q - a
    }
}

pub fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1u64;
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

/// Inverse modulo a prime.
pub fn inv_mod(a: u64, q: u64) -> u64 {
    pow_mod(a, q - 2, q)
}

/// Deterministic Miller-Rabin for u64.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let mut d = n - 1;
    let mut r = 0u32;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..r - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Finds `count` primes `== 1 (mod m)` nearest to `target`, skipping any in
/// `taken`. Searching outward keeps rescale primes tight around the scale,
/// which bounds the scale-drift the evaluator has to track.
pub fn nearest_ntt_primes(target: u64, m: u64, count: usize, taken: &[u64]) -> Result<Vec<u64>> {
    let base = target - (target % m) + 1; // == 1 mod m, near target
    let mut found = Vec::with_capacity(count);
    let mut step = 0u64;
    let limit = 1u64 << 22; // generous search radius in multiples of m
    while found.len() < count && step < limit {
        for cand in [base.wrapping_add(step * m), base.wrapping_sub(step * m)] {
            if found.len() >= count {
                break;
            }
            if cand <= m || cand < 3 {
                continue;
            }
            if taken.contains(&cand) || found.contains(&cand) {
                continue;
            }
            if is_prime(cand) {
                found.push(cand);
            }
        }
        step += 1;
    }
    if found.len() < count {
        return Err(Error::InvalidParams(format!(
            "could not find {count} NTT primes == 1 mod {m} near {target}"
        )));
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primality_spot_checks() {
        assert!(is_prime(2));
        assert!(is_prime(998244353)); // 119 * 2^23 + 1
        assert!(!is_prime(1));
        assert!(!is_prime(3215031751)); // strong pseudoprime to bases 2,3,5,7
        assert!(is_prime((1u64 << 61) - 1));
    }

    #[test]
    fn pow_and_inv() {
        let q = 998244353u64;
        let a = 123456789u64;
        assert_eq!(mul_mod(a, inv_mod(a, q), q), 1);
        assert_eq!(pow_mod(3, q - 1, q), 1);
    }

    #[test]
    fn nearest_primes_bracket_target() {
        let m = 2048u64;
        let found = nearest_ntt_primes(1 << 40, m, 8, &[]).unwrap();
        assert_eq!(found.len(), 8);
        for &q in &found {
            assert_eq!(q % m, 1);
            assert!(is_prime(q));
        }
    }
}
