//! First-order (delta-method) uncertainty arithmetic.
//!
//! An [`UncertainValue`] carries a central value together with its linear
//! sensitivities to a set of named base variables, each of which owns a
//! standard (k=1) uncertainty. Arithmetic combines sensitivities by the
//! chain rule, so quantities sharing a base variable stay correlated and
//! cancel exactly: `x - x` has sigma 0, and products of independent factors
//! add relative sigmas in quadrature.
//!
//! Correlated fit parameters enter through [`UncertainValue::correlated`],
//! which whitens a covariance matrix (Cholesky, with an eigenvalue fallback
//! for semi-definite input) into independent unit-sigma base variables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

static NEXT_BASE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifier of an underlying measured or fitted quantity. Allocation is
/// a process-wide atomic counter, so ids are unique and race-free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BaseId(u64);

impl BaseId {
    fn fresh() -> Self {
        BaseId(NEXT_BASE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UncertaintyError {
    #[error("negative sigma {0} is not a valid standard uncertainty")]
    NegativeSigma(f64),
    #[error("domain error in `{op}` at operand value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("covariance matrix is not symmetric positive semi-definite")]
    BadCovariance,
}

/// A scalar with first-order uncertainty.
///
/// The map stores, per base variable, the partial derivative of this value
/// with respect to that variable multiplied by the variable's sigma. The
/// quadrature sum of the entries is the k=1 standard uncertainty.
#[derive(Clone, Debug, Default)]
pub struct UncertainValue {
    value: f64,
    terms: BTreeMap<BaseId, f64>,
}

impl UncertainValue {
    /// An exact constant: no base variables, sigma 0.
    pub fn exact(value: f64) -> Self {
        UncertainValue {
            value,
            terms: BTreeMap::new(),
        }
    }

    /// Wraps a measured value with a fresh base variable of the given
    /// standard uncertainty.
    pub fn lift(value: f64, sigma: f64) -> Result<Self, UncertaintyError> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(UncertaintyError::NegativeSigma(sigma));
        }
        let mut terms = BTreeMap::new();
        if sigma > 0.0 {
            terms.insert(BaseId::fresh(), sigma);
        }
        Ok(UncertainValue { value, terms })
    }

    /// Mean of a list of raw readings, with the standard error of the mean
    /// as its uncertainty (zero for fewer than two reads).
    pub fn from_reads(reads: &[f64]) -> Result<Self, UncertaintyError> {
        Self::lift(crate::stats::mean(reads), crate::stats::standard_error(reads))
    }

    /// Builds jointly distributed values from a covariance matrix by
    /// expressing each as a linear combination of whitened base variables.
    pub fn correlated(
        values: &[f64],
        covariance: &DMatrix<f64>,
    ) -> Result<Vec<Self>, UncertaintyError> {
        let n = values.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(UncertaintyError::BadCovariance);
        }
        let l = whiten(covariance)?;
        let ids: Vec<BaseId> = (0..n).map(|_| BaseId::fresh()).collect();
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut terms = BTreeMap::new();
                for (k, id) in ids.iter().enumerate() {
                    let s = l[(i, k)];
                    if s != 0.0 {
                        terms.insert(*id, s);
                    }
                }
                UncertainValue { value: v, terms }
            })
            .collect())
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Standard (k=1) uncertainty: quadrature combination of the scaled
    /// sensitivities. Always >= 0.
    pub fn sigma(&self) -> f64 {
        self.terms.values().map(|s| s * s).sum::<f64>().sqrt()
    }

    /// sigma / |value|; None when the central value is zero.
    pub fn relative_sigma(&self) -> Option<f64> {
        if self.value == 0.0 {
            None
        } else {
            Some(self.sigma() / self.value.abs())
        }
    }

    /// The base variables this value depends on.
    pub fn base_ids(&self) -> BTreeSet<BaseId> {
        self.terms.keys().copied().collect()
    }

    /// Sigma restricted to a subset of base variables. Used to split a
    /// propagated uncertainty into named contributions.
    pub fn sigma_restricted(&self, ids: &BTreeSet<BaseId>) -> f64 {
        self.terms
            .iter()
            .filter(|(id, _)| ids.contains(id))
            .map(|(_, s)| s * s)
            .sum::<f64>()
            .sqrt()
    }

    /// Mean of a slice of uncertain values, correlations preserved.
    pub fn mean_of(values: &[UncertainValue]) -> UncertainValue {
        assert!(!values.is_empty(), "mean_of requires at least one value");
        let mut acc = UncertainValue::exact(0.0);
        for v in values {
            acc = &acc + v;
        }
        &acc / values.len() as f64
    }

    fn unary(&self, value: f64, dfdx: f64) -> UncertainValue {
        let mut terms = BTreeMap::new();
        for (id, s) in &self.terms {
            let t = dfdx * s;
            if t != 0.0 {
                terms.insert(*id, t);
            }
        }
        UncertainValue { value, terms }
    }

    fn binary(a: &UncertainValue, b: &UncertainValue, value: f64, dfda: f64, dfdb: f64) -> Self {
        let mut terms = BTreeMap::new();
        for (id, s) in &a.terms {
            let t = dfda * s;
            if t != 0.0 {
                terms.insert(*id, t);
            }
        }
        for (id, s) in &b.terms {
            let t = dfdb * s + terms.get(id).copied().unwrap_or(0.0);
            if t == 0.0 {
                terms.remove(id);
            } else {
                terms.insert(*id, t);
            }
        }
        UncertainValue { value, terms }
    }

    /// Division that reports a domain error on an exactly zero denominator.
    pub fn try_div(&self, rhs: &UncertainValue) -> Result<UncertainValue, UncertaintyError> {
        if rhs.value == 0.0 {
            return Err(UncertaintyError::Domain {
                op: "div",
                value: rhs.value,
            });
        }
        Ok(Self::binary(
            self,
            rhs,
            self.value / rhs.value,
            1.0 / rhs.value,
            -self.value / (rhs.value * rhs.value),
        ))
    }

    /// Natural logarithm; the argument must be strictly positive.
    pub fn try_ln(&self) -> Result<UncertainValue, UncertaintyError> {
        if self.value <= 0.0 {
            return Err(UncertaintyError::Domain {
                op: "ln",
                value: self.value,
            });
        }
        Ok(self.unary(self.value.ln(), 1.0 / self.value))
    }

    pub fn try_log10(&self) -> Result<UncertainValue, UncertaintyError> {
        if self.value <= 0.0 {
            return Err(UncertaintyError::Domain {
                op: "log10",
                value: self.value,
            });
        }
        Ok(self.unary(
            self.value.log10(),
            1.0 / (self.value * std::f64::consts::LN_10),
        ))
    }

    pub fn exp(&self) -> UncertainValue {
        let v = self.value.exp();
        self.unary(v, v)
    }

    pub fn powi(&self, n: i32) -> UncertainValue {
        let v = self.value.powi(n);
        self.unary(v, n as f64 * self.value.powi(n - 1))
    }

    /// Real power; requires a positive base for non-integer exponents.
    pub fn try_powf(&self, p: f64) -> Result<UncertainValue, UncertaintyError> {
        if self.value <= 0.0 && p.fract() != 0.0 {
            return Err(UncertaintyError::Domain {
                op: "powf",
                value: self.value,
            });
        }
        let v = self.value.powf(p);
        Ok(self.unary(v, p * self.value.powf(p - 1.0)))
    }

    pub fn try_sqrt(&self) -> Result<UncertainValue, UncertaintyError> {
        if self.value < 0.0 {
            return Err(UncertaintyError::Domain {
                op: "sqrt",
                value: self.value,
            });
        }
        let v = self.value.sqrt();
        let d = if v == 0.0 { 0.0 } else { 0.5 / v };
        Ok(self.unary(v, d))
    }
}

/// Lower-triangular factor of a covariance matrix: Cholesky when positive
/// definite, otherwise an eigendecomposition with negative eigenvalues
/// clipped to zero (covariances from fits can be singular).
fn whiten(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, UncertaintyError> {
    let n = cov.nrows();
    for i in 0..n {
        for j in 0..i {
            let a = cov[(i, j)];
            let b = cov[(j, i)];
            let scale = a.abs().max(b.abs()).max(1e-300);
            if (a - b).abs() > 1e-8 * scale {
                return Err(UncertaintyError::BadCovariance);
            }
        }
        if !cov[(i, i)].is_finite() || cov[(i, i)] < -1e-12 {
            return Err(UncertaintyError::BadCovariance);
        }
    }
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let mut l = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam < -1e-8 * eig.eigenvalues.amax().max(1e-300) {
            return Err(UncertaintyError::BadCovariance);
        }
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            l[(i, k)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    Ok(l)
}

impl fmt::Display for UncertainValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} +/- {}", self.value, self.sigma())
    }
}

impl PartialEq for UncertainValue {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.sigma() == other.sigma()
    }
}

macro_rules! binop {
    ($trait:ident, $fn:ident) => {
        impl $trait<UncertainValue> for UncertainValue {
            type Output = UncertainValue;
            fn $fn(self, rhs: UncertainValue) -> UncertainValue {
                (&self).$fn(&rhs)
            }
        }
        impl $trait<&UncertainValue> for UncertainValue {
            type Output = UncertainValue;
            fn $fn(self, rhs: &UncertainValue) -> UncertainValue {
                (&self).$fn(rhs)
            }
        }
        impl $trait<UncertainValue> for &UncertainValue {
            type Output = UncertainValue;
            fn $fn(self, rhs: UncertainValue) -> UncertainValue {
                self.$fn(&rhs)
            }
        }
        impl $trait<f64> for UncertainValue {
            type Output = UncertainValue;
            fn $fn(self, rhs: f64) -> UncertainValue {
                (&self).$fn(&UncertainValue::exact(rhs))
            }
        }
        impl $trait<f64> for &UncertainValue {
            type Output = UncertainValue;
            fn $fn(self, rhs: f64) -> UncertainValue {
                self.$fn(&UncertainValue::exact(rhs))
            }
        }
        impl $trait<UncertainValue> for f64 {
            type Output = UncertainValue;
            fn $fn(self, rhs: UncertainValue) -> UncertainValue {
                (&UncertainValue::exact(self)).$fn(&rhs)
            }
        }
        impl $trait<&UncertainValue> for f64 {
            type Output = UncertainValue;
            fn $fn(self, rhs: &UncertainValue) -> UncertainValue {
                (&UncertainValue::exact(self)).$fn(rhs)
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Add<&UncertainValue> for &UncertainValue {
    type Output = UncertainValue;
    fn add(self, rhs: &UncertainValue) -> UncertainValue {
        UncertainValue::binary(self, rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl Sub<&UncertainValue> for &UncertainValue {
    type Output = UncertainValue;
    fn sub(self, rhs: &UncertainValue) -> UncertainValue {
        UncertainValue::binary(self, rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl Mul<&UncertainValue> for &UncertainValue {
    type Output = UncertainValue;
    fn mul(self, rhs: &UncertainValue) -> UncertainValue {
        UncertainValue::binary(self, rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl Div<&UncertainValue> for &UncertainValue {
    type Output = UncertainValue;
    fn div(self, rhs: &UncertainValue) -> UncertainValue {
        self.try_div(rhs)
            .unwrap_or_else(|e| panic!("uncertain division: {e}"))
    }
}

impl Neg for &UncertainValue {
    type Output = UncertainValue;
    fn neg(self) -> UncertainValue {
        self.unary(-self.value, -1.0)
    }
}

impl Neg for UncertainValue {
    type Output = UncertainValue;
    fn neg(self) -> UncertainValue {
        -&self
    }
}

/// Formats a float as decimal text with 17 significant digits, enough to
/// round-trip any f64 exactly.
pub fn fmt_17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Result files store uncertain values as (value, sigma) pairs in
/// 17-significant-digit decimal text. Sensitivity structure is not
/// persisted; a reloaded value becomes an independent base variable.
impl Serialize for UncertainValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("UncertainValue", 2)?;
        s.serialize_field("value", &fmt_17(self.value))?;
        s.serialize_field("sigma", &fmt_17(self.sigma()))?;
        s.end()
    }
}

#[derive(Deserialize)]
struct UncertainValueRepr {
    value: ParsedF64,
    sigma: ParsedF64,
}

/// Accepts either a JSON number or decimal text.
struct ParsedF64(f64);

impl<'de> Deserialize<'de> for ParsedF64 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(x) => Ok(ParsedF64(x)),
            Raw::Text(s) => s
                .trim()
                .parse::<f64>()
                .map(ParsedF64)
                .map_err(|e| D::Error::custom(format!("bad float {s:?}: {e}"))),
        }
    }
}

impl<'de> Deserialize<'de> for UncertainValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = UncertainValueRepr::deserialize(deserializer)?;
        UncertainValue::lift(repr.value.0, repr.sigma.0).map_err(D::Error::custom)
    }
}
