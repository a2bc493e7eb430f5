use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::Serialize;

use crate::error::{FuxiError, Result};

/// Polynomial over `arity` commuting variables with exact rational
/// coefficients. Zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicPoly {
    arity: usize,
    terms: BTreeMap<Vec<u32>, BigRational>,
}

impl SymbolicPoly {
    pub fn zero(arity: usize) -> Self {
        SymbolicPoly { arity, terms: BTreeMap::new() }
    }

    pub fn constant(arity: usize, c: BigRational) -> Self {
        let mut p = Self::zero(arity);
        p.insert(vec![0; arity], c);
        p
    }

    /// The single variable `x_i`.
    pub fn var(arity: usize, i: usize) -> Self {
        let mut e = vec![0; arity];
        e[i] = 1;
        let mut p = Self::zero(arity);
        p.insert(e, BigRational::one());
        p
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn terms(&self) -> &BTreeMap<Vec<u32>, BigRational> {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn insert(&mut self, exps: Vec<u32>, c: BigRational) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(exps) {
            Entry::Vacant(slot) => {
                slot.insert(c);
            }
            Entry::Occupied(mut slot) => {
                *slot.get_mut() += c;
                if slot.get().is_zero() {
                    slot.remove();
                }
            }
        }
    }

    fn check_arity(&self, other: &Self) -> Result<()> {
        if self.arity != other.arity {
            return Err(FuxiError::invalid(format!("arity mismatch: {} vs {}", self.arity, other.arity)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_arity(other)?;
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.insert(e.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_arity(other)?;
        let mut out = Self::zero(self.arity);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.insert(e, ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: &BigRational) -> Self {
        let mut out = Self::zero(self.arity);
        for (e, v) in &self.terms {
            out.insert(e.clone(), v * c);
        }
        out
    }

    /// Largest total degree; `None` for the zero polynomial.
    pub fn total_degree(&self) -> Option<u32> {
        self.terms.keys().map(|e| e.iter().sum()).max()
    }

    /// `Some(p / x_i)` when every monomial contains `x_i`.
    pub fn divide_by_var(&self, i: usize) -> Option<Self> {
        let mut out = Self::zero(self.arity);
        for (e, c) in &self.terms {
            if e[i] == 0 {
                return None;
            }
            let mut e = e.clone();
            e[i] -= 1;
            out.terms.insert(e, c.clone());
        }
        Some(out)
    }
}

impl fmt::Display for SymbolicPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (n, (e, c)) in self.terms.iter().rev().enumerate() {
            if n > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{c}")?;
            for (i, &p) in e.iter().enumerate() {
                match p {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{p}", i + 1)?,
                }
            }
        }
        Ok(())
    }
}

/// Constant attention weights `weights[l][i][j]` of a stack of simplified
/// blocks over `n` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplifiedBlockSpec {
    pub n: usize,
    pub weights: Vec<Vec<Vec<BigRational>>>,
}

impl SimplifiedBlockSpec {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn zeros(layers: usize, n: usize) -> Self {
        SimplifiedBlockSpec {
            n,
            weights: vec![vec![vec![BigRational::zero(); n]; n]; layers],
        }
    }

    /// Every weight a distinct prime, so no coefficient cancels by accident.
    pub fn generic(layers: usize, n: usize) -> Self {
        let mut primes = primes().map(|p| BigRational::from_integer(BigInt::from(p)));
        SimplifiedBlockSpec {
            n,
            weights: (0..layers)
                .map(|_| (0..n).map(|_| (0..n).map(|_| primes.next().expect("infinite")).collect()).collect())
                .collect(),
        }
    }
}

fn primes() -> impl Iterator<Item = u64> {
    (2u64..).filter(|&k| (2..k).take_while(|d| d * d <= k).all(|d| k % d != 0))
}

/// One simplified block: `x_i ↦ x_i · (Σ_j a_ij x_j) + x_i`.
pub fn simplified_block_apply(polys: &[SymbolicPoly], spec: &SimplifiedBlockSpec, layer: usize) -> Result<Vec<SymbolicPoly>> {
    let n = spec.n;
    if polys.len() != n || polys.iter().any(|p| p.arity() != n) {
        return Err(FuxiError::invalid(format!("expected {n} polynomials of arity {n}")));
    }
    let a = spec
        .weights
        .get(layer)
        .ok_or_else(|| FuxiError::invalid(format!("layer {layer} out of range")))?;
    if a.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(FuxiError::invalid("weight matrix does not match the sequence length"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut mix = SymbolicPoly::zero(n);
        for j in 0..n {
            mix = mix.add(&polys[j].scale(&a[i][j]))?;
        }
        out.push(polys[i].mul(&mix)?.add(&polys[i])?);
    }
    Ok(out)
}

/// Runs every layer on the inputs `x_1 .. x_n`.
pub fn expand_stack(spec: &SimplifiedBlockSpec) -> Result<Vec<SymbolicPoly>> {
    let mut polys: Vec<SymbolicPoly> = (0..spec.n).map(|i| SymbolicPoly::var(spec.n, i)).collect();
    for l in 0..spec.layers() {
        polys = simplified_block_apply(&polys, spec, l)?;
    }
    Ok(polys)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeReport {
    pub layers: usize,
    pub n: usize,
    /// `2^b − 1`.
    pub bound: u32,
    /// Largest cofactor degree over positions.
    pub max_degree: u32,
    pub cofactor_degrees: Vec<u32>,
    /// Every monomial of output `i` contains `x_i`.
    pub divisibility: bool,
    /// Some position reaches the bound exactly.
    pub attained: bool,
    /// Divisibility holds and no cofactor exceeds the bound.
    pub holds: bool,
}

pub const MAX_ORACLE_LAYERS: usize = 4;
pub const MAX_ORACLE_LEN: usize = 3;

/// Expands the stack symbolically and checks that output `i` equals `x_i`
/// times a cofactor of degree at most `2^b − 1`.
pub fn verify_degree_bound(spec: &SimplifiedBlockSpec) -> Result<DegreeReport> {
    let (b, n) = (spec.layers(), spec.n);
    if b > MAX_ORACLE_LAYERS || n > MAX_ORACLE_LEN || n == 0 {
        return Err(FuxiError::invalid(format!(
            "symbolic oracle limited to b ≤ {MAX_ORACLE_LAYERS} and 1 ≤ n ≤ {MAX_ORACLE_LEN} (got b = {b}, n = {n})"
        )));
    }
    let bound = (1u32 << b) - 1;
    let outputs = expand_stack(spec)?;
    let mut divisibility = true;
    let mut degrees = Vec::with_capacity(n);
    for (i, p) in outputs.iter().enumerate() {
        match p.divide_by_var(i) {
            Some(cofactor) => degrees.push(cofactor.total_degree().unwrap_or(0)),
            None => {
                divisibility = false;
                degrees.push(p.total_degree().unwrap_or(0));
            }
        }
    }
    let max_degree = degrees.iter().copied().max().unwrap_or(0);
    Ok(DegreeReport {
        layers: b,
        n,
        bound,
        max_degree,
        cofactor_degrees: degrees,
        divisibility,
        attained: max_degree == bound,
        holds: divisibility && max_degree <= bound,
    })
}
