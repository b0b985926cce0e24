//! Outcome probabilities and expected lengths, in `f64` or exact rationals.

use std::fmt;
use std::ops::{Add, Div, Mul, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::procedure::{Node, Procedure};
use crate::model::{full_mask, Outcome, OutcomeSet, Permutation, MAX_SAMPLES};

/// Largest n for which expected lengths are summed term by term.
pub const EXPLICIT_EVAL_LIMIT: usize = 12;

pub trait Scalar:
    Clone
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + 'static
{
    fn prior(priors: &PriorVector, i: usize) -> Self;
    fn from_u32(v: u32) -> Self;
    fn to_f64(&self) -> f64;
    /// `self > other`, ignoring float rounding noise.
    fn exceeds(&self, other: &Self) -> bool {
        self > other
    }
}

impl Scalar for f64 {
    fn prior(priors: &PriorVector, i: usize) -> Self {
        priors.approx[i]
    }
    fn from_u32(v: u32) -> Self {
        v as f64
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn exceeds(&self, other: &Self) -> bool {
        *self > *other + 1e-12 * other.abs().max(1.0)
    }
}

impl Scalar for BigRational {
    fn prior(priors: &PriorVector, i: usize) -> Self {
        priors.exact[i].clone()
    }
    fn from_u32(v: u32) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
    fn to_f64(&self) -> f64 {
        ratio_to_f64(self)
    }
}

pub(crate) fn ratio_to_f64(r: &BigRational) -> f64 {
    ToPrimitive::to_f64(r).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Float,
    Exact,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(EvalMode::Float),
            "exact" => Ok(EvalMode::Exact),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected float or exact)"
            ))),
        }
    }
}

/// A computed value in either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Exact(BigRational),
}

impl Value {
    pub fn to_f64(&self) -> f64 {
        match self {
            Value::Float(v) => *v,
            Value::Exact(r) => ratio_to_f64(r),
        }
    }

    pub fn exact(&self) -> Option<&BigRational> {
        match self {
            Value::Float(_) => None,
            Value::Exact(r) => Some(r),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(v) => write!(f, "{v}"),
            Value::Exact(r) => write!(f, "{r}"),
        }
    }
}

/// Per-sample infection probabilities, kept both exactly and as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorVector {
    exact: Vec<BigRational>,
    approx: Vec<f64>,
}

impl PriorVector {
    /// Each float is read through its shortest decimal form, so `0.17` is exactly 17/100.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        let mut exact = Vec::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::PriorOutOfRange {
                    index: i + 1,
                    value: v.to_string(),
                });
            }
            exact.push(parse_prior_component(i + 1, &v.to_string())?.0);
        }
        Self::from_exact(exact)
    }

    pub fn from_exact(exact: Vec<BigRational>) -> Result<Self> {
        if exact.is_empty() || exact.len() > MAX_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "prior vector must have 1..={MAX_SAMPLES} entries, got {}",
                exact.len()
            )));
        }
        for (i, r) in exact.iter().enumerate() {
            if r < &BigRational::zero() || r > &BigRational::one() {
                return Err(Error::PriorOutOfRange {
                    index: i + 1,
                    value: r.to_string(),
                });
            }
        }
        let approx = exact.iter().map(ratio_to_f64).collect();
        Ok(PriorVector { exact, approx })
    }

    /// Parses a comma-separated list of decimals (`0.17`, `1e-3`) or fractions (`17/100`).
    /// The flag is true when any component was written as a fraction.
    pub fn parse(text: &str) -> Result<(Self, bool)> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        Self::parse_components(&parts)
    }

    pub fn parse_components<S: AsRef<str>>(parts: &[S]) -> Result<(Self, bool)> {
        let mut exact = Vec::with_capacity(parts.len());
        let mut any_fraction = false;
        for (i, part) in parts.iter().enumerate() {
            let (r, fraction) = parse_prior_component(i + 1, part.as_ref())?;
            any_fraction |= fraction;
            exact.push(r);
        }
        Ok((Self::from_exact(exact)?, any_fraction))
    }

    pub fn n(&self) -> usize {
        self.exact.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.approx
    }

    pub fn exact_values(&self) -> &[BigRational] {
        &self.exact
    }

    pub fn get(&self, i: usize) -> f64 {
        self.approx[i]
    }

    /// `(σ·p)[i] = p[σ(i)]`.
    pub fn permuted(&self, sigma: &Permutation) -> Result<PriorVector> {
        if sigma.len() != self.n() {
            return Err(Error::SizeMismatch {
                expected: self.n(),
                actual: sigma.len(),
            });
        }
        Ok(PriorVector {
            exact: sigma.act_on(&self.exact),
            approx: sigma.act_on(&self.approx),
        })
    }

    /// Keeps the coordinates selected by `mask`, in index order.
    pub fn restrict(&self, mask: u64) -> PriorVector {
        let keep = |i: usize| mask >> i & 1 == 1;
        PriorVector {
            exact: (0..self.n()).filter(|&i| keep(i)).map(|i| self.exact[i].clone()).collect(),
            approx: (0..self.n()).filter(|&i| keep(i)).map(|i| self.approx[i]).collect(),
        }
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.exact.iter().map(ratio_to_decimal_or_fraction).collect()
    }
}

/// Decimal text when the denominator is a power of ten, `p/q` otherwise.
pub fn ratio_to_decimal_or_fraction(r: &BigRational) -> String {
    let mut den = r.denom().clone();
    let ten = BigInt::from(10);
    let mut places = 0usize;
    while (&den % &ten).is_zero() {
        den /= &ten;
        places += 1;
    }
    if !den.is_one() {
        return r.to_string();
    }
    let digits = r.numer().to_string();
    if places == 0 {
        return digits;
    }
    let padded = format!("{digits:0>width$}", width = places + 1);
    let (int, frac) = padded.split_at(padded.len() - places);
    format!("{int}.{frac}")
}

fn parse_prior_component(index: usize, text: &str) -> Result<(BigRational, bool)> {
    let bad = || Error::PriorOutOfRange {
        index,
        value: text.to_string(),
    };
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let num: BigInt = num.trim().parse().map_err(|_| bad())?;
        let den: BigInt = den.trim().parse().map_err(|_| bad())?;
        if den.is_zero() {
            return Err(bad());
        }
        return Ok((BigRational::new(num, den), true));
    }
    Ok((parse_decimal(text).ok_or_else(bad)?, false))
}

/// Exact value of a plain or scientific decimal literal.
pub fn parse_decimal(text: &str) -> Option<BigRational> {
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(pos) => (&text[..pos], text[pos + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (negative, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits: BigInt = format!("{int}{frac}").parse().ok()?;
    let scale = exponent - frac.len() as i32;
    let ten = BigInt::from(10);
    let mut value = BigRational::from_integer(digits);
    if scale >= 0 {
        value *= BigRational::from_integer(num_traits::pow(ten, scale as usize));
    } else {
        value /= BigRational::from_integer(num_traits::pow(ten, (-scale) as usize));
    }
    Some(if negative { -value } else { value })
}

fn check_n(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::SizeMismatch { expected, actual });
    }
    Ok(())
}

/// `∏ (p_i if sample i infected else 1 − p_i)`.
pub fn outcome_probability<S: Scalar>(omega: Outcome, priors: &PriorVector) -> Result<S> {
    check_n(priors.n(), omega.n())?;
    Ok(mask_probability(omega.mask(), priors))
}

pub(crate) fn mask_probability<S: Scalar>(mask: u64, priors: &PriorVector) -> S {
    let mut acc = S::one();
    for i in 0..priors.n() {
        let p = S::prior(priors, i);
        acc = acc
            * if mask >> i & 1 == 1 {
                p
            } else {
                S::one() - p
            };
    }
    acc
}

/// Probability of every outcome, indexed by mask. Needs n within the explicit limit.
pub fn probability_table<S: Scalar>(priors: &PriorVector) -> Result<Vec<S>> {
    let n = priors.n();
    if n > EXPLICIT_EVAL_LIMIT + 4 {
        return Err(Error::UnsupportedSize {
            what: "probability table",
            n,
            limit: EXPLICIT_EVAL_LIMIT + 4,
            hint: None,
        });
    }
    let mut table = vec![S::one()];
    for i in 0..n {
        let p = S::prior(priors, i);
        let q = S::one() - p.clone();
        let mut next = Vec::with_capacity(table.len() * 2);
        next.extend(table.iter().map(|t| t.clone() * q.clone()));
        next.extend(table.iter().map(|t| t.clone() * p.clone()));
        table = next;
    }
    Ok(table)
}

/// Outcome probabilities from plain floats, without building a [`PriorVector`].
pub fn probability_table_f64(priors: &[f64]) -> Vec<f64> {
    let mut table = vec![1.0];
    for &p in priors {
        let len = table.len();
        table.extend_from_within(..);
        for (k, t) in table.iter_mut().enumerate() {
            *t *= if k < len { 1.0 - p } else { p };
        }
    }
    table
}

pub fn set_probability<S: Scalar>(outcomes: &OutcomeSet, priors: &PriorVector) -> Result<S> {
    check_n(priors.n(), outcomes.n())?;
    Ok(outcomes
        .masks()
        .fold(S::zero(), |acc, m| acc + mask_probability::<S>(m, priors)))
}

/// Leaf depths indexed by outcome mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LengthVector {
    n: usize,
    depths: Vec<u32>,
}

impl LengthVector {
    pub fn new(n: usize, depths: Vec<u32>) -> Result<Self> {
        if n > EXPLICIT_EVAL_LIMIT + 4 || depths.len() != 1usize << n {
            return Err(Error::InvalidArgument(format!(
                "length vector for n = {n} needs {} entries",
                1u64.checked_shl(n as u32).unwrap_or(0)
            )));
        }
        Ok(LengthVector { n, depths })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depths(&self) -> &[u32] {
        &self.depths
    }

    pub fn depth(&self, omega: Outcome) -> u32 {
        self.depths[omega.mask() as usize]
    }

    pub fn is_constant(&self) -> bool {
        self.depths.windows(2).all(|w| w[0] == w[1])
    }

    pub fn evaluate<S: Scalar>(&self, priors: &PriorVector) -> Result<S> {
        check_n(self.n, priors.n())?;
        if self.n > EXPLICIT_EVAL_LIMIT {
            return Err(explicit_limit(self.n));
        }
        let table = probability_table::<S>(priors)?;
        Ok(self.evaluate_with(&table))
    }

    pub(crate) fn evaluate_with<S: Scalar>(&self, table: &[S]) -> S {
        self.depths
            .iter()
            .zip(table)
            .fold(S::zero(), |acc, (&d, p)| acc + S::from_u32(d) * p.clone())
    }

    /// Length vector of `σ·T`: the leaf `σ(ω)` sits at the depth of `ω`.
    pub fn permuted(&self, sigma: &Permutation) -> LengthVector {
        let mut depths = vec![0; self.depths.len()];
        for (mask, &d) in self.depths.iter().enumerate() {
            depths[sigma.apply_mask(mask as u64) as usize] = d;
        }
        LengthVector { n: self.n, depths }
    }
}

fn explicit_limit(n: usize) -> Error {
    Error::UnsupportedSize {
        what: "explicit expected-length evaluation",
        n,
        limit: EXPLICIT_EVAL_LIMIT,
        hint: Some("use simulation to estimate the expected number of tests"),
    }
}

pub fn length_vector(proc: &Procedure) -> LengthVector {
    let n = proc.n();
    let mut depths = vec![0u32; 1usize << n];
    proc.root()
        .for_each_leaf(&mut |o, d| depths[o.mask() as usize] = d);
    LengthVector { n, depths }
}

pub fn expected_length<S: Scalar>(proc: &Procedure, priors: &PriorVector) -> Result<S> {
    check_n(proc.n(), priors.n())?;
    if proc.n() > EXPLICIT_EVAL_LIMIT {
        return Err(explicit_limit(proc.n()));
    }
    length_vector(proc).evaluate(priors)
}

pub fn expected_length_in(proc: &Procedure, priors: &PriorVector, mode: EvalMode) -> Result<Value> {
    Ok(match mode {
        EvalMode::Float => Value::Float(expected_length::<f64>(proc, priors)?),
        EvalMode::Exact => Value::Exact(expected_length::<BigRational>(proc, priors)?),
    })
}

/// `Σ depth·Pr` over the leaves of a subtree, depths counted from `node`. Unnormalized.
pub fn subtree_weighted_length<S: Scalar>(node: &Node, priors: &PriorVector) -> Result<S> {
    let mut first_n = None;
    let mut acc = S::zero();
    let mut err = None;
    node.for_each_leaf(&mut |o, d| {
        if err.is_some() {
            return;
        }
        if *first_n.get_or_insert(o.n()) != priors.n() {
            err = Some(Error::SizeMismatch {
                expected: priors.n(),
                actual: o.n(),
            });
            return;
        }
        acc = acc.clone() + S::from_u32(d) * mask_probability::<S>(o.mask(), priors);
    });
    match err {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

/// Mask of all samples, for callers outside the model module.
pub fn all_samples(n: usize) -> u64 {
    full_mask(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::codec::decode;

    fn r(num: i64, den: i64) -> BigRational {
        BigRational::new(num.into(), den.into())
    }

    const FIG2_LEFT: &str = "P{1,2}[L(00),P{1}[L(01),P{2}[L(10),L(11)]]]";

    #[test]
    fn outcome_probability_matches_product() {
        let p = PriorVector::parse("0.1,0.2,0.3,0.4,0.5").unwrap().0;
        let omega = Outcome::parse("11101").unwrap();
        let got: BigRational = outcome_probability(omega, &p).unwrap();
        assert_eq!(got, r(1, 10) * r(2, 10) * r(3, 10) * r(6, 10) * r(5, 10));
        let zero = PriorVector::from_f64(&[0.0; 4]).unwrap();
        let all_clean: f64 = outcome_probability(Outcome::parse("0000").unwrap(), &zero).unwrap();
        assert_eq!(all_clean, 1.0);
    }

    #[test]
    fn length_vectors() {
        let naive = Procedure::naive(2).unwrap();
        assert_eq!(length_vector(&naive).depths(), &[2, 2, 2, 2]);
        let left = decode(FIG2_LEFT).unwrap();
        let lv = length_vector(&left);
        let d = |s: &str| lv.depth(Outcome::parse(s).unwrap());
        assert_eq!((d("00"), d("01"), d("10"), d("11")), (1, 2, 3, 3));
        assert_eq!(length_vector(&Procedure::naive(1).unwrap()).depths(), &[1, 1]);
    }

    #[test]
    fn fig2_left_polynomial() {
        let left = decode(FIG2_LEFT).unwrap();
        let p = PriorVector::parse("1/10,1/5").unwrap().0;
        let got: BigRational = expected_length(&left, &p).unwrap();
        assert_eq!(got, r(138, 100));
        let x1 = r(1, 10);
        let x2 = r(1, 5);
        let one = BigRational::one();
        let poly = (&one - &x1) * (&one - &x2)
            + r(2, 1) * (&one - &x1) * &x2
            + r(3, 1) * &x1 * (&one - &x2)
            + r(3, 1) * &x1 * &x2;
        assert_eq!(got, poly);
    }

    #[test]
    fn set_probabilities() {
        let p = PriorVector::from_f64(&[0.5, 0.5]).unwrap();
        let s = OutcomeSet::from_bit_strings(2, &["01", "10", "11"]).unwrap();
        assert_eq!(set_probability::<f64>(&s, &p).unwrap(), 0.75);
        let p3 = PriorVector::from_f64(&[0.01, 0.17, 0.51]).unwrap();
        let single = OutcomeSet::from_bit_strings(3, &["010"]).unwrap();
        let exact: BigRational = set_probability(&single, &p3).unwrap();
        assert_eq!(exact, r(99, 100) * r(17, 100) * r(49, 100));
        let full: BigRational = set_probability(&OutcomeSet::full(3).unwrap(), &p3).unwrap();
        assert!(full.is_one());
    }

    #[test]
    fn parsing_priors() {
        let (p, frac) = PriorVector::parse("0.01, 17/100,5.1e-1").unwrap();
        assert!(frac);
        assert_eq!(p.exact_values(), &[r(1, 100), r(17, 100), r(51, 100)]);
        assert!(!PriorVector::parse("0.5,0.5").unwrap().1);
        assert!(matches!(
            PriorVector::parse("0.5,1.5"),
            Err(Error::PriorOutOfRange { index: 2, .. })
        ));
        assert!(PriorVector::parse("0.5,abc").is_err());
        assert!(PriorVector::parse("1/0").is_err());
        assert!(PriorVector::from_f64(&[f64::NAN]).is_err());
        assert_eq!(PriorVector::from_f64(&[0.17]).unwrap().exact_values(), &[r(17, 100)]);
    }

    #[test]
    fn decimal_rendering() {
        assert_eq!(ratio_to_decimal_or_fraction(&r(17, 100)), "0.17");
        assert_eq!(ratio_to_decimal_or_fraction(&r(1, 3)), "1/3");
        assert_eq!(ratio_to_decimal_or_fraction(&r(1, 1)), "1");
        assert_eq!(ratio_to_decimal_or_fraction(&r(1, 1000)), "0.001");
    }

    #[test]
    fn explicit_limit_is_enforced() {
        let p = PriorVector::from_f64(&[0.5; 13]).unwrap();
        let naive = Procedure::naive(13).unwrap();
        assert!(matches!(
            expected_length::<f64>(&naive, &p),
            Err(Error::UnsupportedSize { limit: 12, .. })
        ));
    }

    #[test]
    fn permuted_length_vector_matches_permuted_tree() {
        let left = decode(FIG2_LEFT).unwrap();
        let sigma = Permutation::transposition(2, 1, 2).unwrap();
        let right = left.apply_permutation(&sigma).unwrap();
        assert_eq!(length_vector(&left).permuted(&sigma), length_vector(&right));
    }
}
