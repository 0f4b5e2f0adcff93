//! Exact counts of joint degrees of freedom versus the free conditionals an
//! MLM can specify.
//!
//! For sequences of length `L` over a vocabulary `V`:
//!
//! - a joint distribution has `|V|^L - 1` degrees of freedom;
//! - an MLM predicting one masked token from the other `L - 1` specifies
//!   `L * (|V|^L - |V|^(L-1))` free conditionals;
//! - predicting `k` tokens (as independent marginals) specifies
//!   `C(L, k) * |V|^(L-k) * (|V| - 1)^k`.
//!
//! Everything is computed with arbitrary precision. [`brute_force_enumerate`]
//! recounts the `k` case by walking every mask set and context assignment.

use itertools::Itertools;
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `|V|^L` the enumerator accepts.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub v: u64,
    pub l: u64,
    pub k: u64,
    #[serde(with = "decimal")]
    pub d_joint: BigUint,
    #[serde(with = "decimal")]
    pub n_mlm: BigUint,
    /// `n_mlm / d_joint` in lowest terms.
    pub excess: ExactRatio,
    /// The same ratio as a decimal string.
    pub excess_decimal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactRatio {
    #[serde(with = "decimal")]
    pub numerator: BigUint,
    #[serde(with = "decimal")]
    pub denominator: BigUint,
}

impl ExactRatio {
    pub fn reduced(numerator: BigUint, denominator: BigUint) -> Self {
        let g = numerator.gcd(&denominator);
        ExactRatio {
            numerator: &numerator / &g,
            denominator: &denominator / &g,
        }
    }

    /// Truncated decimal expansion with `digits` fractional digits.
    pub fn to_decimal(&self, digits: usize) -> String {
        let (int, mut rem) = self.numerator.div_rem(&self.denominator);
        if digits == 0 {
            return int.to_string();
        }
        let ten = BigUint::from(10u32);
        let mut frac = String::with_capacity(digits);
        for _ in 0..digits {
            rem *= &ten;
            let (d, r) = rem.div_rem(&self.denominator);
            frac.push_str(&d.to_string());
            rem = r;
        }
        format!("{int}.{frac}")
    }
}

mod decimal {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn check_v_l(v: u64, l: u64) -> Result<()> {
    if v < 2 {
        return Err(Error::Domain(format!("vocabulary size {v} < 2")));
    }
    if l < 1 {
        return Err(Error::Domain("sequence length must be >= 1".into()));
    }
    Ok(())
}

fn check_k(l: u64, k: u64) -> Result<()> {
    if k < 1 || k > l {
        return Err(Error::Domain(format!("masked count {k} outside [1, {l}]")));
    }
    Ok(())
}

fn pow(base: u64, exp: u64) -> BigUint {
    num_traits::pow(BigUint::from(base), exp as usize)
}

fn binomial(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Degrees of freedom of a joint over `v^l` sequences: `v^l - 1`.
pub fn joint_dof(v: u64, l: u64) -> Result<BigUint> {
    check_v_l(v, l)?;
    Ok(pow(v, l) - 1u32)
}

/// Free single-token conditionals: `l * (v^l - v^(l-1))`.
pub fn mlm_count_single(v: u64, l: u64) -> Result<BigUint> {
    check_v_l(v, l)?;
    Ok(BigUint::from(l) * (pow(v, l) - pow(v, l - 1)))
}

/// Free conditionals with `k` masked tokens: `C(l,k) * v^(l-k) * (v-1)^k`.
pub fn mlm_count_k(v: u64, l: u64, k: u64) -> Result<BigUint> {
    check_v_l(v, l)?;
    check_k(l, k)?;
    Ok(binomial(l, k) * pow(v, l - k) * pow(v - 1, k))
}

/// Counts free conditionals by walking every size-`k` set of masked
/// positions and every assignment of the `l - k` visible positions, adding
/// `(v-1)^k` free entries for each such marginal.
pub fn brute_force_enumerate(v: u64, l: u64, k: u64) -> Result<BigUint> {
    check_v_l(v, l)?;
    check_k(l, k)?;
    let feasible = v.checked_pow(l as u32).is_some_and(|n| n <= ENUMERATION_LIMIT);
    if !feasible {
        return Err(Error::Infeasible(format!(
            "{v}^{l} exceeds the enumeration limit of {ENUMERATION_LIMIT}"
        )));
    }
    let free_per_marginal = pow(v - 1, k);
    let mut total = BigUint::zero();
    for masked in (0..l).combinations(k as usize) {
        let visible: Vec<u64> = (0..l).filter(|p| !masked.contains(p)).collect();
        // odometer over assignments of the visible positions
        let mut digits = vec![0u64; visible.len()];
        loop {
            total += &free_per_marginal;
            let mut i = 0;
            while i < digits.len() {
                digits[i] += 1;
                if digits[i] < v {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == digits.len() {
                break;
            }
        }
    }
    Ok(total)
}

/// Counts for `(v, l, k)`; `k = 1` is the single-token case.
pub fn report(v: u64, l: u64, k: u64) -> Result<CountReport> {
    let d_joint = joint_dof(v, l)?;
    let n_mlm = mlm_count_k(v, l, k)?;
    let excess = ExactRatio::reduced(n_mlm.clone(), d_joint.clone());
    let excess_decimal = excess.to_decimal(6);
    Ok(CountReport {
        v,
        l,
        k,
        d_joint,
        n_mlm,
        excess,
        excess_decimal,
    })
}
