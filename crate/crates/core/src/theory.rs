//! Counting arguments for dense versus modular layers.
//!
//! Upper bounds on linear regions of a bias-free ReLU network, and the
//! number of nearly orthogonal directions that fit in a space of given
//! dimension.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact non-negative integer with its base-2 logarithm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BigCount {
    value: BigUint,
}

impl BigCount {
    pub fn new(value: BigUint) -> Self {
        Self { value }
    }

    /// `2^exp`.
    pub fn pow2(exp: u64) -> Self {
        Self::new(BigUint::from(1u8) << exp)
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    /// `log2` of the value (`-inf` for zero). Exact for powers of two;
    /// otherwise accurate to double precision from the leading 64 bits.
    pub fn log2(&self) -> f64 {
        let bits = self.value.bits();
        if bits == 0 {
            return f64::NEG_INFINITY;
        }
        if bits <= 64 {
            let v = u64::try_from(&self.value).expect("fits in 64 bits");
            return (v as f64).log2();
        }
        let shift = bits - 64;
        let top = u64::try_from(&(&self.value >> shift)).expect("64 leading bits");
        (top as f64).log2() + shift as f64
    }

    pub fn ln(&self) -> f64 {
        self.log2() * std::f64::consts::LN_2
    }

    /// Decimal digits of the exact value.
    pub fn to_decimal(&self) -> String {
        self.value.to_str_radix(10)
    }
}

impl std::fmt::Display for BigCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.value)
    }
}

/// Split of a layer's output width (and optionally its input width) into
/// `k` modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModularPartition {
    out_parts: Vec<usize>,
    in_parts: Option<Vec<usize>>,
}

impl ModularPartition {
    pub fn new(out_parts: Vec<usize>) -> Result<Self> {
        check_parts("partition", &out_parts)?;
        Ok(Self {
            out_parts,
            in_parts: None,
        })
    }

    /// Partition of both sides; the two lists must have the same length.
    pub fn with_inputs(out_parts: Vec<usize>, in_parts: Vec<usize>) -> Result<Self> {
        check_parts("partition", &out_parts)?;
        check_parts("input partition", &in_parts)?;
        if in_parts.len() != out_parts.len() {
            return Err(Error::domain(format!(
                "input partition has {} parts but the output partition has {}",
                in_parts.len(),
                out_parts.len()
            )));
        }
        Ok(Self {
            out_parts,
            in_parts: Some(in_parts),
        })
    }

    /// `k` equal parts of `width`.
    pub fn equal(width: usize, k: usize) -> Result<Self> {
        if k == 0 || !width.is_multiple_of(k) {
            return Err(Error::domain(format!("{width} does not split into {k} equal parts")));
        }
        Self::new(vec![width / k; k])
    }

    pub fn k(&self) -> usize {
        self.out_parts.len()
    }

    pub fn out_parts(&self) -> &[usize] {
        &self.out_parts
    }

    pub fn in_parts(&self) -> Option<&[usize]> {
        self.in_parts.as_deref()
    }

    pub fn width(&self) -> usize {
        self.out_parts.iter().sum()
    }

    pub fn in_width(&self) -> Option<usize> {
        self.in_parts.as_ref().map(|p| p.iter().sum())
    }
}

fn check_parts(what: &str, parts: &[usize]) -> Result<()> {
    if parts.is_empty() {
        return Err(Error::domain(format!("{what} is empty")));
    }
    if parts.contains(&0) {
        return Err(Error::domain(format!("{what} {parts:?} has a zero-width part")));
    }
    Ok(())
}

/// `Π 2^{n_l}` over the hidden widths: the activation-pattern bound of a
/// dense network.
pub fn polytope_bound_dense(hidden_widths: &[usize]) -> Result<BigCount> {
    if hidden_widths.is_empty() {
        return Err(Error::domain("no hidden widths given"));
    }
    if hidden_widths.contains(&0) {
        return Err(Error::domain("hidden widths must be positive"));
    }
    Ok(BigCount::pow2(hidden_widths.iter().map(|&n| n as u64).sum()))
}

/// `2^{n_prev} · 2^{n_l}`: joint sign patterns of two adjacent dense layers.
pub fn polytope_pair_count_dense(n_prev: usize, n_l: usize) -> Result<BigCount> {
    if n_prev == 0 || n_l == 0 {
        return Err(Error::domain("layer widths must be positive"));
    }
    Ok(BigCount::pow2((n_prev + n_l) as u64))
}

/// `Σ_i 2^{n_prev} · 2^{n_l^i}`: the input layer is left whole and only the
/// output side is split into modules.
pub fn polytope_pair_count_modular(n_prev: usize, partition: &ModularPartition) -> Result<BigCount> {
    if n_prev == 0 {
        return Err(Error::domain("n_prev must be positive"));
    }
    let total = partition
        .out_parts()
        .iter()
        .map(|&n| BigUint::from(1u8) << (n_prev + n) as u64)
        .sum();
    Ok(BigCount::new(total))
}

/// `Σ_i 2^{n_prev^i} · 2^{n_l^i}`: both sides split into matching modules.
/// This variant is not the verbatim formula; see
/// [`polytope_pair_count_modular`] for that.
pub fn polytope_pair_count_fully_modular(partition: &ModularPartition) -> Result<BigCount> {
    let inputs = partition
        .in_parts()
        .ok_or_else(|| Error::domain("the fully modular count needs input sub-widths"))?;
    let total = inputs
        .iter()
        .zip(partition.out_parts())
        .map(|(&a, &b)| BigUint::from(1u8) << (a + b) as u64)
        .sum();
    Ok(BigCount::new(total))
}

fn jl_holds(m: u128, n: usize, eps: f64) -> bool {
    (m as f64).ln() < n as f64 * eps * eps / 8.0
}

/// Largest `m ≥ 1` with `ln m < n·eps²/8`: how many points a linear map
/// into `n` dimensions can keep within `eps` relative distortion.
pub fn jl_capacity(n: usize, eps: f64) -> Result<u128> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!("eps must lie in (0, 1), got {eps}")));
    }
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    let bound = n as f64 * eps * eps / 8.0;
    if bound >= (u128::MAX as f64).ln() {
        return Err(Error::domain(format!(
            "capacity e^{bound} does not fit in 128 bits"
        )));
    }
    // ln of the float image is monotone in m, so bisection finds the
    // boundary even where neighbouring integers round to the same float.
    let (mut lo, mut hi) = (1u128, (bound.exp().ceil() as u128).saturating_mul(2).max(2));
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if jl_holds(mid, n, eps) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    debug_assert!(!jl_holds(lo + 1, n, eps));
    Ok(lo)
}

/// Log capacities of a split layer versus the same width kept dense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityComparison {
    /// `ln Σ_i e^{n^i}`.
    pub modular_log: f64,
    /// `ln e^{Σ_i n^i} = Σ_i n^i`.
    pub dense_log: f64,
}

impl CapacityComparison {
    pub fn gap(&self) -> f64 {
        self.dense_log - self.modular_log
    }
}

pub fn modular_capacity_comparison(parts: &[usize]) -> Result<CapacityComparison> {
    check_parts("partition", parts)?;
    let max = *parts.iter().max().unwrap() as f64;
    let tail: f64 = parts.iter().map(|&n| (n as f64 - max).exp()).sum();
    Ok(CapacityComparison {
        modular_log: max + tail.ln(),
        dense_log: parts.iter().sum::<usize>() as f64,
    })
}
