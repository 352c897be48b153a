//! Finite Grassmann algebra over the signed index set.
//!
//! A polynomial is stored as a sorted list of `(monomial, coefficient)`
//! pairs, where a monomial is the set of generator positions (in the global
//! order of [`crate::lattice_index`]) multiplied in increasing order. The
//! antisymmetric kernel of degree `m` is recovered as
//! `f_m(X) = sgn(sort X) * c_{sort X} * h^m / m!`.
//!
//! Products are computed in fixed-size chunks of the left operand, run on the
//! rayon pool, and merged in chunk order, so results are bit-identical for
//! any number of worker threads.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::Covariance;
use crate::lattice_index::{chordal_space, chordal_time, Charge, LatticeSpec, SignedIndex, Spin};
use crate::{EngineError, Result, C64};

/// Largest supported number of generators.
pub const MAX_GENERATORS: usize = 256;

const PRODUCT_CHUNK: usize = 64;
const INTEGRATION_CHUNK: usize = 256;

/// A set of generator positions, as a 256-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Mono(pub [u64; 4]);

impl Mono {
    pub const EMPTY: Mono = Mono([0; 4]);

    pub fn single(p: usize) -> Mono {
        let mut m = Mono::EMPTY;
        m.0[p / 64] |= 1u64 << (p % 64);
        m
    }

    /// Builds the canonical monomial of the ordered product `psi_{p_1} ... psi_{p_n}`.
    /// Returns the sign of the sorting permutation, or `None` if a position repeats.
    pub fn from_ordered(positions: &[usize]) -> Option<(Mono, f64)> {
        let mut m = Mono::EMPTY;
        let mut sign = 1.0;
        for &p in positions {
            if m.contains(p) {
                return None;
            }
            if m.count_greater(p) % 2 == 1 {
                sign = -sign;
            }
            m.0[p / 64] |= 1u64 << (p % 64);
        }
        Some((m, sign))
    }

    pub fn degree(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn contains(&self, p: usize) -> bool {
        self.0[p / 64] >> (p % 64) & 1 == 1
    }

    pub fn overlaps(&self, other: &Mono) -> bool {
        (0..4).any(|i| self.0[i] & other.0[i] != 0)
    }

    pub fn union(&self, other: &Mono) -> Mono {
        Mono([
            self.0[0] | other.0[0],
            self.0[1] | other.0[1],
            self.0[2] | other.0[2],
            self.0[3] | other.0[3],
        ])
    }

    pub fn without(&self, p: usize) -> Mono {
        let mut m = *self;
        m.0[p / 64] &= !(1u64 << (p % 64));
        m
    }

    /// Positions in increasing order.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.degree());
        for (i, &word) in self.0.iter().enumerate() {
            let mut w = word;
            while w != 0 {
                out.push(i * 64 + w.trailing_zeros() as usize);
                w &= w - 1;
            }
        }
        out
    }

    /// Number of elements strictly greater than `p`.
    pub fn count_greater(&self, p: usize) -> u32 {
        let word = p / 64;
        let bit = p % 64;
        let mask = if bit == 63 { 0 } else { !0u64 << (bit + 1) };
        let mut c = (self.0[word] & mask).count_ones();
        for i in word + 1..4 {
            c += self.0[i].count_ones();
        }
        c
    }

    /// Number of elements strictly smaller than `p`.
    pub fn count_less(&self, p: usize) -> u32 {
        let word = p / 64;
        let bit = p % 64;
        let mask = (1u64 << bit) - 1;
        let mut c = (self.0[word] & mask).count_ones();
        for i in 0..word {
            c += self.0[i].count_ones();
        }
        c
    }

    /// Sign of `psi_a psi_b = sign * psi_{a union b}` for disjoint `a`, `b`.
    pub fn product_sign(a: &Mono, b: &Mono) -> f64 {
        let mut inversions = 0u32;
        for (i, &word) in b.0.iter().enumerate() {
            let mut w = word;
            while w != 0 {
                let p = i * 64 + w.trailing_zeros() as usize;
                inversions += a.count_greater(p);
                w &= w - 1;
            }
        }
        if inversions % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Limits applied by the algebra operations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AlgebraLimits {
    /// Terms of degree above the cap are dropped and the result is flagged.
    pub degree_cap: usize,
    /// Maximal number of stored terms per polynomial.
    pub term_budget: usize,
    /// Exact mode: no pruning, and any truncation is a capacity error.
    pub exact: bool,
    /// Relative pruning threshold used outside exact mode.
    pub prune_relative: f64,
}

impl Default for AlgebraLimits {
    fn default() -> Self {
        AlgebraLimits {
            degree_cap: MAX_GENERATORS,
            term_budget: 10_000_000,
            exact: true,
            prune_relative: 1e-15,
        }
    }
}

/// Sparse Grassmann polynomial in canonical storage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Poly {
    terms: Vec<(Mono, C64)>,
    /// Set when some operation dropped terms above the degree cap.
    pub truncated: bool,
}

impl Poly {
    pub fn zero() -> Poly {
        Poly::default()
    }

    pub fn scalar(c: C64) -> Poly {
        Poly::from_terms(vec![(Mono::EMPTY, c)])
    }

    pub fn one() -> Poly {
        Poly::scalar(C64::new(1.0, 0.0))
    }

    /// Single generator `psi_p`.
    pub fn generator(p: usize) -> Poly {
        Poly::from_terms(vec![(Mono::single(p), C64::new(1.0, 0.0))])
    }

    /// Ordered product `c * psi_{p_1} ... psi_{p_n}`.
    pub fn monomial(positions: &[usize], c: C64) -> Poly {
        match Mono::from_ordered(positions) {
            Some((m, s)) => Poly::from_terms(vec![(m, c * s)]),
            None => Poly::zero(),
        }
    }

    /// Sorts by monomial (stable) and merges duplicates in their input order.
    pub fn from_terms(mut terms: Vec<(Mono, C64)>) -> Poly {
        if terms.len() > 4096 {
            terms.par_sort_by(|a, b| a.0.cmp(&b.0));
        } else {
            terms.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let mut out: Vec<(Mono, C64)> = Vec::with_capacity(terms.len());
        for (m, c) in terms {
            match out.last_mut() {
                Some(last) if last.0 == m => last.1 += c,
                _ => out.push((m, c)),
            }
        }
        out.retain(|(_, c)| *c != C64::new(0.0, 0.0));
        Poly {
            terms: out,
            truncated: false,
        }
    }

    pub fn terms(&self) -> &[(Mono, C64)] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Coefficient of the empty monomial.
    pub fn constant(&self) -> C64 {
        match self.terms.first() {
            Some((m, c)) if m.is_empty() => *c,
            _ => C64::new(0.0, 0.0),
        }
    }

    pub fn coefficient(&self, m: &Mono) -> C64 {
        match self.terms.binary_search_by(|t| t.0.cmp(m)) {
            Ok(i) => self.terms[i].1,
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn max_degree(&self) -> usize {
        self.terms.iter().map(|t| t.0.degree()).max().unwrap_or(0)
    }

    /// Degree-`m` part.
    pub fn part(&self, m: usize) -> Poly {
        self.filter(|mono| mono.degree() == m)
    }

    /// Keeps the terms whose monomial satisfies the predicate.
    pub fn filter(&self, keep: impl Fn(&Mono) -> bool) -> Poly {
        Poly {
            terms: self.terms.iter().filter(|t| keep(&t.0)).cloned().collect(),
            truncated: self.truncated,
        }
    }

    /// Drops the constant and the quadratic part.
    pub fn without_low_degrees(&self) -> Poly {
        self.filter(|m| m.degree() >= 4 || m.degree() == 1 || m.degree() == 3)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = Vec::with_capacity(self.terms.len() + other.terms.len());
        let (mut i, mut j) = (0, 0);
        while i < self.terms.len() && j < other.terms.len() {
            let (a, b) = (&self.terms[i], &other.terms[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => {
                    out.push(*a);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(*b);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    let c = a.1 + b.1;
                    if c != C64::new(0.0, 0.0) {
                        out.push((a.0, c));
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.terms[i..]);
        out.extend_from_slice(&other.terms[j..]);
        Poly {
            terms: out,
            truncated: self.truncated || other.truncated,
        }
    }

    pub fn scale(&self, c: C64) -> Poly {
        if c == C64::new(0.0, 0.0) {
            return Poly {
                terms: vec![],
                truncated: self.truncated,
            };
        }
        Poly {
            terms: self.terms.iter().map(|(m, x)| (*m, x * c)).collect(),
            truncated: self.truncated,
        }
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Complex conjugation of all coefficients.
    pub fn conj(&self) -> Poly {
        Poly {
            terms: self.terms.iter().map(|(m, c)| (*m, c.conj())).collect(),
            truncated: self.truncated,
        }
    }

    /// Graded product with Koszul signs; terms above the degree cap are dropped.
    pub fn mul(&self, other: &Poly, limits: &AlgebraLimits) -> Result<Poly> {
        let cap = limits.degree_cap;
        let chunks: Vec<(Vec<(Mono, C64)>, bool)> = self
            .terms
            .par_chunks(PRODUCT_CHUNK)
            .map(|chunk| {
                let mut local = Vec::new();
                let mut dropped = false;
                for (ma, ca) in chunk {
                    let da = ma.degree();
                    for (mb, cb) in &other.terms {
                        if ma.overlaps(mb) {
                            continue;
                        }
                        if da + mb.degree() > cap {
                            dropped = true;
                            continue;
                        }
                        let s = Mono::product_sign(ma, mb);
                        local.push((ma.union(mb), ca * cb * s));
                    }
                }
                (Poly::from_terms(local).terms, dropped)
            })
            .collect();
        let dropped = chunks.iter().any(|c| c.1);
        if dropped && limits.exact {
            return Err(EngineError::Capacity(format!(
                "product exceeds the degree cap {cap} in exact mode"
            )));
        }
        let total: usize = chunks.iter().map(|c| c.0.len()).sum();
        let mut all = Vec::with_capacity(total);
        for (c, _) in chunks {
            all.extend(c);
        }
        let mut out = Poly::from_terms(all);
        out.truncated = self.truncated || other.truncated || dropped;
        out.enforce(limits)?;
        Ok(out)
    }

    /// Applies the term budget and, outside exact mode, relative pruning.
    pub fn enforce(&mut self, limits: &AlgebraLimits) -> Result<()> {
        if !limits.exact && limits.prune_relative > 0.0 {
            let scale = self.max_abs();
            let threshold = scale * limits.prune_relative;
            self.terms.retain(|(_, c)| c.norm() > threshold);
        }
        if self.terms.len() > limits.term_budget {
            return Err(EngineError::Capacity(format!(
                "{} terms exceed the budget {}",
                self.terms.len(),
                limits.term_budget
            )));
        }
        Ok(())
    }

    /// Largest coefficient modulus.
    pub fn max_abs(&self) -> f64 {
        self.terms.iter().map(|t| t.1.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient modulus among odd-degree terms.
    pub fn odd_max_abs(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.0.degree() % 2 == 1)
            .map(|t| t.1.norm())
            .fold(0.0, f64::max)
    }

    /// `L^1` norm of the degree-`m` kernel, `(1/h)^m sum_X |f_m(X)| = sum_S |c_S|`.
    pub fn l1(&self, m: usize) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.0.degree() == m)
            .map(|t| t.1.norm())
            .sum()
    }

    /// Largest coefficient difference with another polynomial.
    pub fn max_diff(&self, other: &Poly) -> f64 {
        self.sub(other).max_abs()
    }

    /// Kernel value `f_m(X)` for an arbitrary ordered tuple of positions.
    pub fn kernel(&self, tuple: &[usize], h: f64) -> C64 {
        match Mono::from_ordered(tuple) {
            Some((m, s)) => {
                let m_fact: f64 = (1..=tuple.len()).map(|i| i as f64).product();
                self.coefficient(&m) * s * h.powi(tuple.len() as i32) / m_fact
            }
            None => C64::new(0.0, 0.0),
        }
    }

    /// Stable JSON-friendly dump.
    pub fn dump(&self) -> Vec<TermDump> {
        self.terms
            .iter()
            .map(|(m, c)| TermDump {
                degree: m.degree(),
                indices: m.positions(),
                re: c.re,
                im: c.im,
            })
            .collect()
    }
}

/// One serialized term.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TermDump {
    pub degree: usize,
    pub indices: Vec<usize>,
    pub re: f64,
    pub im: f64,
}

/// Canonical storage of a raw kernel `(1/h)^m sum_X f(X) psi_X`.
/// Tuples with repeated positions contribute nothing.
pub fn antisymmetrize(raw: &[(Vec<usize>, C64)], h: f64) -> Poly {
    let terms = raw
        .iter()
        .filter_map(|(tuple, c)| {
            Mono::from_ordered(tuple).map(|(m, s)| (m, c * s * h.powi(-(tuple.len() as i32))))
        })
        .collect();
    Poly::from_terms(terms)
}

/// Raw `L^1` norm `(1/h)^m sum_X |f(X)|` of a kernel given as a tuple list.
pub fn raw_l1(raw: &[(Vec<usize>, C64)], h: f64) -> f64 {
    raw.iter()
        .map(|(t, c)| c.norm() * h.powi(-(t.len() as i32)))
        .sum()
}

/// Polynomial graded by an order counter (power of the coupling, or of a
/// formal parameter `z`). `grades[g]` holds the order-`g` part.
#[derive(Debug, Clone, PartialEq)]
pub struct Graded {
    pub grades: Vec<Poly>,
}

impl Graded {
    pub fn zero(order: usize) -> Graded {
        Graded {
            grades: vec![Poly::zero(); order + 1],
        }
    }

    /// `f` placed at grade `g`.
    pub fn at_grade(f: Poly, g: usize, order: usize) -> Graded {
        let mut out = Graded::zero(order);
        if g <= order {
            out.grades[g] = f;
        }
        out
    }

    pub fn order(&self) -> usize {
        self.grades.len() - 1
    }

    pub fn add(&self, other: &Graded) -> Graded {
        Graded {
            grades: self
                .grades
                .iter()
                .zip(&other.grades)
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    pub fn scale(&self, c: C64) -> Graded {
        Graded {
            grades: self.grades.iter().map(|g| g.scale(c)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&Poly) -> Poly) -> Graded {
        Graded {
            grades: self.grades.iter().map(f).collect(),
        }
    }

    pub fn try_map(&self, f: impl Fn(&Poly) -> Result<Poly>) -> Result<Graded> {
        Ok(Graded {
            grades: self.grades.iter().map(f).collect::<Result<_>>()?,
        })
    }

    /// Product truncated at the common order.
    pub fn mul(&self, other: &Graded, limits: &AlgebraLimits) -> Result<Graded> {
        let order = self.order().min(other.order());
        let mut out = Graded::zero(order);
        for ga in 0..=order {
            if self.grades[ga].is_zero() {
                continue;
            }
            for gb in 0..=order - ga {
                if other.grades[gb].is_zero() {
                    continue;
                }
                let p = self.grades[ga].mul(&other.grades[gb], limits)?;
                out.grades[ga + gb] = out.grades[ga + gb].add(&p);
            }
        }
        Ok(out)
    }

    /// Sum over all grades.
    pub fn collapse(&self) -> Poly {
        self.grades.iter().fold(Poly::zero(), |acc, g| acc.add(g))
    }

    /// Evaluates the sum of grades with weights `z^g`.
    pub fn evaluate(&self, z: C64) -> Poly {
        let mut acc = Poly::zero();
        let mut w = C64::new(1.0, 0.0);
        for g in &self.grades {
            acc = acc.add(&g.scale(w));
            w *= z;
        }
        acc
    }

    pub fn constant(&self) -> Vec<C64> {
        self.grades.iter().map(|g| g.constant()).collect()
    }

    pub fn truncated(&self) -> bool {
        self.grades.iter().any(|g| g.truncated)
    }

    pub fn max_diff(&self, other: &Graded) -> f64 {
        self.grades
            .iter()
            .zip(&other.grades)
            .map(|(a, b)| a.max_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn odd_max_abs(&self) -> f64 {
        self.grades.iter().map(|g| g.odd_max_abs()).fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.grades.iter().map(|g| g.len()).sum()
    }
}

fn grade_zero_scalar(f: &Graded) -> Result<C64> {
    let g0 = &f.grades[0];
    if g0.terms().iter().any(|t| !t.0.is_empty()) {
        return Err(EngineError::Domain(
            "grade-zero part must be a scalar for graded exp/log".into(),
        ));
    }
    Ok(g0.constant())
}

/// `e^f` truncated at the order of `f`; the grade-zero part must be scalar.
pub fn exp_graded(f: &Graded, limits: &AlgebraLimits) -> Result<Graded> {
    let order = f.order();
    let c0 = grade_zero_scalar(f)?;
    let mut rest = f.clone();
    rest.grades[0] = Poly::zero();
    let mut result = Graded::at_grade(Poly::one(), 0, order);
    let mut power = result.clone();
    for n in 1..=order {
        power = power.mul(&rest, limits)?.scale(C64::new(1.0 / n as f64, 0.0));
        result = result.add(&power);
    }
    Ok(result.scale(c0.exp()))
}

/// Principal-branch `log g` truncated at the order of `g`.
pub fn log_graded(g: &Graded, limits: &AlgebraLimits) -> Result<Graded> {
    let order = g.order();
    let c0 = grade_zero_scalar(g)?;
    check_log_branch(c0)?;
    let mut u = g.clone();
    u.grades[0] = Poly::zero();
    let u = u.scale(c0.inv());
    let mut result = Graded::at_grade(Poly::scalar(c0.ln()), 0, order);
    let mut power = Graded::at_grade(Poly::one(), 0, order);
    for n in 1..=order {
        power = power.mul(&u, limits)?;
        let coef = if n % 2 == 1 { 1.0 } else { -1.0 } / n as f64;
        result = result.add(&power.scale(C64::new(coef, 0.0)));
    }
    Ok(result)
}

fn check_log_branch(c0: C64) -> Result<()> {
    if c0.im == 0.0 && c0.re <= 0.0 {
        return Err(EngineError::Domain(format!(
            "zero-degree part {c0} lies on the branch cut"
        )));
    }
    Ok(())
}

/// `e^f = e^{f_0} sum_n (f - f_0)^n / n!`, the series ending by nilpotency.
pub fn exp_poly(f: &Poly, limits: &AlgebraLimits) -> Result<Poly> {
    let c0 = f.constant();
    let rest = f.sub(&Poly::scalar(c0));
    let mut result = Poly::one();
    let mut power = Poly::one();
    let mut n = 1;
    loop {
        power = power.mul(&rest, limits)?.scale(C64::new(1.0 / n as f64, 0.0));
        if power.is_zero() {
            break;
        }
        result = result.add(&power);
        n += 1;
    }
    Ok(result.scale(c0.exp()))
}

/// Principal-branch `log f`; requires `f_0` off the non-positive real axis.
pub fn log_poly(f: &Poly, limits: &AlgebraLimits) -> Result<Poly> {
    let c0 = f.constant();
    check_log_branch(c0)?;
    let u = f.sub(&Poly::scalar(c0)).scale(c0.inv());
    let mut result = Poly::scalar(c0.ln());
    let mut power = Poly::one();
    let mut n = 1;
    loop {
        power = power.mul(&u, limits)?;
        if power.is_zero() {
            break;
        }
        let coef = if n % 2 == 1 { 1.0 } else { -1.0 } / n as f64;
        result = result.add(&power.scale(C64::new(coef, 0.0)));
        n += 1;
    }
    Ok(result)
}

/// Left derivative with respect to the generator at position `y`.
pub fn left_derivative(f: &Poly, y: usize) -> Poly {
    let terms = f
        .terms()
        .iter()
        .filter(|t| t.0.contains(y))
        .map(|(m, c)| {
            let s = if m.count_less(y) % 2 == 0 { 1.0 } else { -1.0 };
            (m.without(y), c * s)
        })
        .collect();
    Poly::from_terms(terms)
}

/// Determinant by partial-pivot LU on a row-major buffer; `a` is overwritten.
pub fn small_det(a: &mut [C64], n: usize) -> C64 {
    let mut det = C64::new(1.0, 0.0);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].norm();
        for r in col + 1..n {
            let v = a[r * n + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return C64::new(0.0, 0.0);
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            det = -det;
        }
        let d = a[col * n + col];
        det *= d;
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != C64::new(0.0, 0.0) {
                for c in col + 1..n {
                    let v = a[col * n + c];
                    a[r * n + c] -= f * v;
                }
            }
        }
    }
    det
}

fn parity_sign(seq: &[usize]) -> f64 {
    let mut inv = 0usize;
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            if seq[i] > seq[j] {
                inv += 1;
            }
        }
    }
    if inv % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Gaussian integral of the canonical monomial with the given increasing positions.
pub fn monomial_integral(positions: &[usize], cov: &Covariance) -> C64 {
    let mut bars = Vec::with_capacity(positions.len());
    let mut plains = Vec::with_capacity(positions.len());
    for &p in positions {
        if p % 2 == 0 {
            bars.push(p);
        } else {
            plains.push(p);
        }
    }
    if bars.len() != plains.len() {
        return C64::new(0.0, 0.0);
    }
    let n = bars.len();
    if n == 0 {
        return C64::new(1.0, 0.0);
    }
    if cov.spin_diagonal {
        let up = |p: &usize| cov.spin_of(p / 2) == Spin::Up;
        if bars.iter().filter(|p| up(p)).count() != plains.iter().filter(|p| up(p)).count() {
            return C64::new(0.0, 0.0);
        }
    }
    let mut seq = bars.clone();
    seq.extend(plains.iter().rev());
    let sign = parity_sign(&seq);
    let mut a = vec![C64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = cov.entry(bars[i] / 2, plains[j] / 2);
        }
    }
    small_det(&mut a, n) * sign
}

/// `int f(psi) dmu_C(psi)` over all generators.
pub fn integrate_full(f: &Poly, cov: &Covariance) -> C64 {
    let partial: Vec<C64> = f
        .terms()
        .par_chunks(INTEGRATION_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|(m, c)| c * monomial_integral(&m.positions(), cov))
                .fold(C64::new(0.0, 0.0), |a, b| a + b)
        })
        .collect();
    partial.into_iter().fold(C64::new(0.0, 0.0), |a, b| a + b)
}

fn free_integrate_mono(m: &Mono, c: C64, cov: &Covariance, out: &mut Vec<(Mono, C64)>) {
    let pos = m.positions();
    let deg = pos.len();
    let charge: Vec<i32> = pos.iter().map(|p| if p % 2 == 0 { 1 } else { -1 }).collect();
    let up: Vec<bool> = pos.iter().map(|p| cov.spin_of(p / 2) == Spin::Up).collect();
    let mut sub = Vec::with_capacity(deg);
    for mask in 0u32..(1u32 << deg) {
        if mask == 0 {
            out.push((*m, c));
            continue;
        }
        let ones = mask.count_ones() as usize;
        if ones % 2 == 1 {
            continue;
        }
        let (mut q_up, mut q_down) = (0i32, 0i32);
        for i in 0..deg {
            if mask >> i & 1 == 1 {
                if up[i] {
                    q_up += charge[i];
                } else {
                    q_down += charge[i];
                }
            }
        }
        if q_up + q_down != 0 || (cov.spin_diagonal && q_up != 0) {
            continue;
        }
        let mut crossings = 0u32;
        let mut rest_after = 0u32;
        for i in (0..deg).rev() {
            if mask >> i & 1 == 1 {
                crossings += rest_after;
            } else {
                rest_after += 1;
            }
        }
        sub.clear();
        let mut rest = *m;
        for i in 0..deg {
            if mask >> i & 1 == 1 {
                sub.push(pos[i]);
                rest = rest.without(pos[i]);
            }
        }
        let val = monomial_integral(&sub, cov);
        if val == C64::new(0.0, 0.0) {
            continue;
        }
        let s = if crossings % 2 == 0 { 1.0 } else { -1.0 };
        out.push((rest, c * val * s));
    }
}

/// Free integration `F(psi) = int f(psi + psi^1) dmu_C(psi^1)`.
pub fn free_integrate(f: &Poly, cov: &Covariance, limits: &AlgebraLimits) -> Result<Poly> {
    if f.terms().iter().any(|t| t.0.degree() > 30) {
        return Err(EngineError::Capacity(
            "free integration supports monomials of degree at most 30".into(),
        ));
    }
    let chunks: Vec<Vec<(Mono, C64)>> = f
        .terms()
        .par_chunks(INTEGRATION_CHUNK)
        .map(|chunk| {
            let mut local = Vec::new();
            for (m, c) in chunk {
                free_integrate_mono(m, *c, cov, &mut local);
            }
            Poly::from_terms(local).terms
        })
        .collect();
    let mut all = Vec::new();
    for c in chunks {
        all.extend(c);
    }
    let mut out = Poly::from_terms(all);
    out.truncated = f.truncated;
    out.enforce(limits)?;
    Ok(out)
}

/// Graded free integration, grade by grade.
pub fn free_integrate_graded(f: &Graded, cov: &Covariance, limits: &AlgebraLimits) -> Result<Graded> {
    f.try_map(|g| free_integrate(g, cov, limits))
}

/// Precomputed distances between unsigned indices, per axis.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    axes: usize,
    count: usize,
    values: Vec<f64>,
}

impl DistanceTable {
    pub fn new(spec: &LatticeSpec) -> DistanceTable {
        let count = spec.unsigned_count();
        let axes = spec.dim + 1;
        let coords: Vec<Vec<i64>> = (0..count)
            .map(|u| spec.site_coords(spec.unsigned_at(u).site))
            .collect();
        let times: Vec<i64> = (0..count).map(|u| spec.unsigned_at(u).time).collect();
        let mut values = vec![0.0; axes * count * count];
        for a in 0..count {
            for b in 0..count {
                let base = (a * count + b) * axes;
                values[base] = chordal_time(spec, times[a], times[b]);
                for j in 1..axes {
                    values[base + j] = chordal_space(spec.side, coords[a][j - 1], coords[b][j - 1]);
                }
            }
        }
        DistanceTable {
            axes,
            count,
            values,
        }
    }

    /// `d_j` between the unsigned bases of two signed positions.
    pub fn get(&self, axis: usize, x: usize, y: usize) -> f64 {
        self.values[((x / 2) * self.count + y / 2) * self.axes + axis]
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    /// `exp(sum_j (w d_j)^r)`.
    pub fn weight(&self, w: f64, r: f64, x: usize, y: usize) -> f64 {
        (0..self.axes)
            .map(|j| (w * self.get(j, x, y)).powf(r))
            .sum::<f64>()
            .exp()
    }
}

/// Weight parameters of the scale-dependent norms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NormWeight {
    /// The weight `w(l)` of the current scale.
    pub w: f64,
    /// The exponent applied to `w d_j`; fixed to 1/2 in the flows.
    pub exponent: f64,
}

/// Per-degree norms of a polynomial: `norms[m] = (||f_m||_{l,0}, ||f_m||_{l,1})`.
/// Degrees 0 and 1 carry the absolute constant and zero respectively.
pub fn poly_norms(f: &Poly, spec: &LatticeSpec, dist: &DistanceTable, weight: NormWeight) -> Vec<(f64, f64)> {
    let max_deg = f.max_degree();
    let n_signed = spec.signed_count();
    let axes = dist.axes();
    let h = spec.h;
    let mut result = vec![(0.0, 0.0); max_deg + 1];
    result[0] = (f.constant().norm(), 0.0);
    let factorial = |n: usize| -> f64 { (1..=n).map(|i| i as f64).product() };
    for m in 2..=max_deg {
        let mut plain = vec![0.0; n_signed];
        let mut moment_first = vec![0.0; n_signed * axes];
        let mut moment_other = vec![0.0; n_signed * axes];
        let f0 = h * factorial(m - 2) / factorial(m);
        let f1 = if m >= 3 { h * factorial(m - 3) / factorial(m) } else { 0.0 };
        let mut ew = Vec::new();
        for (mono, c) in f.terms().iter().filter(|t| t.0.degree() == m) {
            let pos = mono.positions();
            let a = c.norm();
            for &x in &pos {
                ew.clear();
                for &z in &pos {
                    if z != x {
                        ew.push((z, dist.weight(weight.w, weight.exponent, x, z)));
                    }
                }
                let sum_e: f64 = ew.iter().map(|e| e.1).sum();
                plain[x] += f0 * a * sum_e;
                for j in 0..axes {
                    let sum_d: f64 = ew.iter().map(|e| dist.get(j, x, e.0)).sum();
                    let sum_de: f64 = ew.iter().map(|e| dist.get(j, x, e.0) * e.1).sum();
                    moment_first[x * axes + j] += f0 * a * sum_de;
                    if m >= 3 {
                        moment_other[x * axes + j] += f1 * a * (sum_e * sum_d - sum_de);
                    }
                }
            }
        }
        let n0 = plain.iter().cloned().fold(0.0, f64::max);
        let n1 = moment_first
            .iter()
            .chain(moment_other.iter())
            .cloned()
            .fold(0.0, f64::max);
        result[m] = (n0, n1);
    }
    result
}

/// `||f_m||_{l,r}` for a single degree; `first_moment` selects `r = 1`.
pub fn poly_norm(f: &Poly, m: usize, spec: &LatticeSpec, dist: &DistanceTable, weight: NormWeight, first_moment: bool) -> f64 {
    let norms = poly_norms(&f.part(m), spec, dist, weight);
    match norms.get(m) {
        Some(&(n0, n1)) => {
            if m == 0 {
                n0
            } else if first_moment {
                n1
            } else {
                n0
            }
        }
        None => 0.0,
    }
}

/// The named transforms of an index-set symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformName {
    Identity,
    ParticleHole,
    SpinPhase,
    SpinFlip,
    Translation,
    Rotation,
    HermitianConj,
    HalfFilledConj,
    GlobalSign,
}

impl TransformName {
    pub const SEVEN: [TransformName; 7] = [
        TransformName::ParticleHole,
        TransformName::SpinPhase,
        TransformName::SpinFlip,
        TransformName::Translation,
        TransformName::Rotation,
        TransformName::HermitianConj,
        TransformName::HalfFilledConj,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            TransformName::Identity => "identity",
            TransformName::ParticleHole => "particle_hole",
            TransformName::SpinPhase => "spin_phase",
            TransformName::SpinFlip => "spin_flip",
            TransformName::Translation => "translation",
            TransformName::Rotation => "rotation",
            TransformName::HermitianConj => "hermitian_conj",
            TransformName::HalfFilledConj => "half_filled_conj",
            TransformName::GlobalSign => "global_sign",
        }
    }

    pub fn parse(s: &str) -> Result<TransformName> {
        let all = [
            TransformName::Identity,
            TransformName::ParticleHole,
            TransformName::SpinPhase,
            TransformName::SpinFlip,
            TransformName::Translation,
            TransformName::Rotation,
            TransformName::HermitianConj,
            TransformName::HalfFilledConj,
            TransformName::GlobalSign,
        ];
        all.into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown transform {s}")))
    }
}

/// A substitution `(R psi)_X = e^{i Q(S(X))} psi_{S(X)}` on signed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRQ {
    pub name: TransformName,
    /// Whether coefficients are conjugated before substitution.
    pub conjugate: bool,
    /// `S` as a position map.
    pub target: Vec<usize>,
    /// `Q(S(X))` per source position.
    pub phase: Vec<f64>,
}

/// Parameters of the translation transform: spatial shift and time shift in ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationShift {
    pub space: Vec<i64>,
    pub time_ticks: i64,
}

impl TransformRQ {
    /// Builds a named transform on the signed index set of `spec`.
    /// `band_offsets[rho]` is the vector `e(rho)` used by the rotation.
    pub fn build(name: TransformName, spec: &LatticeSpec, band_offsets: &[Vec<i64>], shift: &TranslationShift) -> Result<TransformRQ> {
        let n = spec.signed_count();
        let period = spec.time_slices() as i64;
        let mut target = vec![0usize; n];
        let mut phase = vec![0.0; n];
        let conjugate = matches!(name, TransformName::HermitianConj | TransformName::HalfFilledConj);
        if name == TransformName::Rotation && band_offsets.len() != spec.bands {
            return Err(EngineError::Config("rotation needs one offset per band".into()));
        }
        if name == TransformName::Translation && shift.space.len() != spec.dim {
            return Err(EngineError::Config("translation shift has wrong dimension".into()));
        }
        for p in 0..n {
            let x = spec.signed_at(p);
            let mut y: SignedIndex = x;
            let q;
            match name {
                TransformName::Identity => q = 0.0,
                TransformName::GlobalSign => q = PI,
                TransformName::ParticleHole => q = PI / 2.0 * x.charge.sign() as f64,
                TransformName::SpinPhase => {
                    q = if x.base.spin == Spin::Up { PI } else { 0.0 };
                }
                TransformName::SpinFlip => {
                    y.base.spin = x.base.spin.flipped();
                    q = 0.0;
                }
                TransformName::Translation => {
                    let c = spec.site_coords(x.base.site);
                    let moved: Vec<i64> = c.iter().zip(&shift.space).map(|(a, b)| a + b).collect();
                    y.base.site = spec.site_from_coords(&moved);
                    let t = x.base.time + shift.time_ticks;
                    y.base.time = t.rem_euclid(period);
                    q = PI * t.div_euclid(period) as f64;
                }
                TransformName::Rotation => {
                    let c = spec.site_coords(x.base.site);
                    let off = &band_offsets[x.base.band];
                    let moved: Vec<i64> = c.iter().zip(off).map(|(a, b)| -a - b).collect();
                    y.base.site = spec.site_from_coords(&moved);
                    q = 0.0;
                }
                TransformName::HermitianConj => {
                    y.base.time = (-x.base.time).rem_euclid(period);
                    y.charge = x.charge.flipped();
                    let bar = if y.charge == Charge::Bar { 1.0 } else { 0.0 };
                    let nonzero = if y.base.time != 0 { 1.0 } else { 0.0 };
                    q = PI * (bar + nonzero);
                }
                TransformName::HalfFilledConj => {
                    y.charge = x.charge.flipped();
                    let odd_band = x.base.band == 0 || x.base.band == 3;
                    q = if odd_band { PI } else { 0.0 };
                }
            }
            target[p] = spec.signed_position(&y);
            phase[p] = q;
        }
        let t = TransformRQ {
            name,
            conjugate,
            target,
            phase,
        };
        t.check_bijective()?;
        Ok(t)
    }

    pub fn check_bijective(&self) -> Result<()> {
        let mut seen = vec![false; self.target.len()];
        for &t in &self.target {
            if t >= seen.len() || seen[t] {
                return Err(EngineError::Contract("transform map is not bijective".into()));
            }
            seen[t] = true;
        }
        Ok(())
    }

    /// Phase factor `e^{iQ}` with exact values at multiples of `pi/2`.
    pub fn phase_factor(q: f64) -> C64 {
        let quarter = q / (PI / 2.0);
        if (quarter - quarter.round()).abs() < 1e-12 {
            match (quarter.round() as i64).rem_euclid(4) {
                0 => C64::new(1.0, 0.0),
                1 => C64::new(0.0, 1.0),
                2 => C64::new(-1.0, 0.0),
                _ => C64::new(0.0, -1.0),
            }
        } else {
            C64::from_polar(1.0, q)
        }
    }
}

/// `f(R psi)`, with coefficients conjugated first when the transform is of
/// conjugate type.
pub fn apply_transform(f: &Poly, t: &TransformRQ) -> Poly {
    let terms = f
        .terms()
        .iter()
        .map(|(m, c)| {
            let pos = m.positions();
            let mapped: Vec<usize> = pos.iter().map(|&p| t.target[p]).collect();
            let q: f64 = pos.iter().map(|&p| t.phase[p]).sum();
            let (nm, s) = Mono::from_ordered(&mapped).expect("bijective transform keeps positions distinct");
            let coef = if t.conjugate { c.conj() } else { *c };
            (nm, coef * s * TransformRQ::phase_factor(q))
        })
        .collect();
    let mut out = Poly::from_terms(terms);
    out.truncated = f.truncated;
    out
}

/// Largest coefficient of `f - f(R psi)` (or of the conjugate variant).
pub fn invariance_residual(f: &Poly, t: &TransformRQ) -> f64 {
    f.max_diff(&apply_transform(f, t))
}

/// The quadratic kernel in momentum space.
#[derive(Debug, Clone)]
pub struct MomentumKernel {
    pub bands: usize,
    pub dim: usize,
    pub side: usize,
    pub beta: f64,
    pub h: f64,
    pub time_slices: usize,
    /// `values[(rho, site, tick)][eta] = f_2((rho,x,up,t,psi),(eta,0,up,0,psi-bar))`.
    values: Vec<C64>,
    site_coords: Vec<Vec<i64>>,
}

fn kernel_pair(f2: &Poly, a: usize, b: usize, h: f64) -> C64 {
    f2.kernel(&[a, b], h)
}

/// Extracts `W(omega,k)` from the quadratic part of `f`.
///
/// The quadratic part must be charge balanced, spin symmetric and
/// space-time translation invariant; otherwise a contract error names the
/// failed property.
pub fn quadratic_momentum_kernel(f: &Poly, spec: &LatticeSpec) -> Result<MomentumKernel> {
    let f2 = f.part(2);
    let nt = spec.time_slices();
    let tol = 1e-10 * (1.0 + f2.max_abs());
    for (m, _) in f2.terms() {
        let p = m.positions();
        if p[0] % 2 == p[1] % 2 {
            return Err(EngineError::Contract(
                "quadratic part violates particle_hole (same-charge pair)".into(),
            ));
        }
        if spec.signed_at(p[0]).base.spin != spec.signed_at(p[1]).base.spin {
            return Err(EngineError::Contract("quadratic part violates spin_phase".into()));
        }
    }
    let sites = spec.sites();
    let bands = spec.bands;
    let mut values = vec![C64::new(0.0, 0.0); bands * sites * nt * bands];
    let pos_of = |band: usize, site: usize, spin: Spin, time: i64, charge: Charge| {
        spec.signed_position(&SignedIndex {
            base: crate::lattice_index::SpaceTimeIndex {
                band,
                site,
                spin,
                time,
            },
            charge,
        })
    };
    for rho in 0..bands {
        for x in 0..sites {
            for t in 0..nt {
                for eta in 0..bands {
                    let a = pos_of(rho, x, Spin::Up, t as i64, Charge::Plain);
                    let b = pos_of(eta, 0, Spin::Up, 0, Charge::Bar);
                    values[((rho * sites + x) * nt + t) * bands + eta] = kernel_pair(&f2, a, b, spec.h);
                }
            }
        }
    }
    // Spot-check translation and spin symmetry against every stored pair.
    for (m, _) in f2.terms() {
        let p = m.positions();
        let (xa, xb) = (spec.signed_at(p[0]), spec.signed_at(p[1]));
        let (plain, bar) = if xa.charge == Charge::Plain { (xa, xb) } else { (xb, xa) };
        let cp = spec.site_coords(plain.base.site);
        let cb = spec.site_coords(bar.base.site);
        let diff: Vec<i64> = cp.iter().zip(&cb).map(|(a, b)| a - b).collect();
        let dsite = spec.site_from_coords(&diff);
        let dt = plain.base.time - bar.base.time;
        let sign = if dt < 0 { -1.0 } else { 1.0 };
        let t = dt.rem_euclid(nt as i64) as usize;
        let expect = values[((plain.base.band * sites + dsite) * nt + t) * bands + bar.base.band] * sign;
        let pa = spec.signed_position(&plain);
        let pb = spec.signed_position(&bar);
        let got = kernel_pair(&f2, pa, pb, spec.h);
        if (got - expect).norm() > tol {
            let which = if plain.base.spin == Spin::Down {
                "spin_flip or translation"
            } else {
                "translation"
            };
            return Err(EngineError::Contract(format!(
                "quadratic part violates {which} invariance (residual {:.3e})",
                (got - expect).norm()
            )));
        }
    }
    Ok(MomentumKernel {
        bands,
        dim: spec.dim,
        side: spec.side,
        beta: spec.beta,
        h: spec.h,
        time_slices: nt,
        values,
        site_coords: (0..sites).map(|s| spec.site_coords(s)).collect(),
    })
}

impl MomentumKernel {
    fn value(&self, rho: usize, site: usize, t: usize, eta: usize) -> C64 {
        self.values[((rho * self.site_coords.len() + site) * self.time_slices + t) * self.bands + eta]
    }

    /// Grid form `W(omega,k)` with plain Fourier phases.
    pub fn eval_grid(&self, omega: f64, k: &[f64]) -> DMatrix<C64> {
        self.eval_impl(omega, k, false)
    }

    /// Flat extension `W-hat(omega,k)` on all of `R^{1+d}`.
    pub fn eval_extended(&self, omega: f64, k: &[f64]) -> DMatrix<C64> {
        self.eval_impl(omega, k, true)
    }

    fn eval_impl(&self, omega: f64, k: &[f64], extended: bool) -> DMatrix<C64> {
        let b = self.bands;
        let mut w = DMatrix::from_element(b, b, C64::new(0.0, 0.0));
        let l = self.side as i64;
        for (site, c) in self.site_coords.iter().enumerate() {
            let shifted: Vec<f64> = c
                .iter()
                .map(|&xj| {
                    if extended && 2 * xj >= l {
                        (xj - l) as f64
                    } else {
                        xj as f64
                    }
                })
                .collect();
            let kx: f64 = shifted.iter().zip(k).map(|(a, b)| a * b).sum();
            for t in 0..self.time_slices {
                let mut time = t as f64 / self.h;
                let mut sign = 1.0;
                if extended && 2 * t >= self.time_slices {
                    time -= self.beta;
                    sign = -1.0;
                }
                let ph = C64::from_polar(2.0 / self.h * sign, -kx - omega * time);
                for rho in 0..b {
                    for eta in 0..b {
                        w[(rho, eta)] += ph * self.value(rho, site, t, eta);
                    }
                }
            }
        }
        w
    }

    /// Maximal entry modulus over a set of frequencies and momenta.
    pub fn max_abs_on(&self, points: &[(f64, Vec<f64>)]) -> f64 {
        points
            .iter()
            .map(|(w, k)| self.eval_grid(*w, k).iter().map(|z| z.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }
}

/// Rebuilds the quadratic polynomial from `W` on the grid `M_h x Gamma*`.
pub fn quadratic_from_momentum(kernel: &MomentumKernel, spec: &LatticeSpec) -> Poly {
    let omegas = spec.matsubara_h();
    let momenta = spec.momenta();
    let vol = spec.beta * spec.sites() as f64;
    let grid: Vec<DMatrix<C64>> = omegas
        .iter()
        .flat_map(|w| momenta.iter().map(move |k| (*w, k.clone())))
        .map(|(w, k)| kernel.eval_grid(w, &k))
        .collect();
    let points: Vec<(f64, Vec<f64>)> = omegas
        .iter()
        .flat_map(|w| momenta.iter().map(move |k| (*w, k.clone())))
        .collect();
    let n0 = spec.unsigned_count();
    let mut raw = Vec::new();
    for xu in 0..n0 {
        let x = spec.unsigned_at(xu);
        let cx = spec.site_coords(x.site);
        for yu in 0..n0 {
            let y = spec.unsigned_at(yu);
            if x.spin != y.spin {
                continue;
            }
            let cy = spec.site_coords(y.site);
            let dt = spec.time_value(x.time - y.time);
            let mut acc = C64::new(0.0, 0.0);
            for (g, (w, k)) in grid.iter().zip(&points) {
                let kd: f64 = k.iter().zip(cx.iter().zip(&cy)).map(|(kj, (a, c))| kj * (a - c) as f64).sum();
                acc += C64::from_polar(1.0, kd + w * dt) * g[(x.band, y.band)];
            }
            acc /= vol;
            if acc.norm() > 0.0 {
                raw.push((vec![2 * xu + 1, 2 * yu], acc));
            }
        }
    }
    antisymmetrize(&raw, spec.h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{Covariance, CovarianceKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn small_spec() -> LatticeSpec {
        LatticeSpec::new(1, 1, 1, 1.0, 6.0).unwrap()
    }

    fn random_cov(spec: &LatticeSpec, seed: u64) -> Covariance {
        let n = spec.unsigned_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        Covariance::from_matrix(CovarianceKind::Custom, spec.clone(), m, false)
    }

    fn random_poly(n_gen: usize, terms: usize, max_deg: usize, seed: u64) -> Poly {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = Vec::new();
        for _ in 0..terms {
            let deg = rng.random_range(0..=max_deg);
            let mut pos: Vec<usize> = Vec::new();
            while pos.len() < deg {
                let p = rng.random_range(0..n_gen);
                if !pos.contains(&p) {
                    pos.push(p);
                }
            }
            raw.push((pos, C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))));
        }
        let terms = raw
            .into_iter()
            .filter_map(|(p, c)| Mono::from_ordered(&p).map(|(m, s)| (m, c * s)))
            .collect();
        Poly::from_terms(terms)
    }

    #[test]
    fn square_of_generator_vanishes_and_generators_anticommute() {
        let lim = AlgebraLimits::default();
        let x = Poly::generator(3);
        let y = Poly::generator(7);
        assert!(x.mul(&x, &lim).unwrap().is_zero());
        let xy = x.mul(&y, &lim).unwrap();
        let yx = y.mul(&x, &lim).unwrap();
        assert!(xy.add(&yx).is_zero());
    }

    #[test]
    fn product_of_unit_shifts_expands() {
        let lim = AlgebraLimits::default();
        let a = Poly::one().add(&Poly::generator(1));
        let b = Poly::one().add(&Poly::generator(4));
        let p = a.mul(&b, &lim).unwrap();
        let want = Poly::one()
            .add(&Poly::generator(1))
            .add(&Poly::generator(4))
            .add(&Poly::monomial(&[1, 4], c(1.0)));
        assert_eq!(p, want);
    }

    #[test]
    fn exp_zero_is_one_and_log_inverts_quadratic() {
        let lim = AlgebraLimits::default();
        assert_eq!(exp_poly(&Poly::zero(), &lim).unwrap(), Poly::one());
        let q = Poly::monomial(&[0, 3], C64::new(0.7, -0.2));
        let back = log_poly(&exp_poly(&q, &lim).unwrap(), &lim).unwrap();
        assert!(back.max_diff(&q) < 1e-15);
    }

    #[test]
    fn log_rejects_branch_cut() {
        let lim = AlgebraLimits::default();
        assert!(log_poly(&Poly::scalar(c(-1.0)), &lim).is_err());
        assert!(log_poly(&Poly::zero(), &lim).is_err());
    }

    #[test]
    fn left_derivative_examples() {
        let d = left_derivative(&Poly::generator(5), 5);
        assert_eq!(d, Poly::one());
        let f = Poly::monomial(&[2, 5], c(1.0));
        assert_eq!(left_derivative(&f, 5), Poly::generator(2).scale(c(-1.0)));
    }

    #[test]
    fn antisymmetrize_examples() {
        let h = 2.0;
        let sym = vec![(vec![0, 1], c(1.0)), (vec![1, 0], c(1.0))];
        assert!(antisymmetrize(&sym, h).is_zero());
        let anti = vec![(vec![0, 1], c(0.5)), (vec![1, 0], c(-0.5))];
        let p = antisymmetrize(&anti, h);
        assert!((p.kernel(&[0, 1], h) - c(0.5)).norm() < 1e-15);
        assert!((p.kernel(&[1, 0], h) - c(-0.5)).norm() < 1e-15);
    }

    #[test]
    fn two_point_and_four_point_integrals() {
        let spec = small_spec();
        let cov = random_cov(&spec, 3);
        let (x, y) = (1usize, 4usize);
        let f = Poly::monomial(&[2 * x, 2 * y + 1], c(1.0));
        assert!((integrate_full(&f, &cov) - cov.entry(x, y)).norm() < 1e-14);
        let (x1, x2, y1, y2) = (0usize, 2usize, 3usize, 5usize);
        let f = Poly::monomial(&[2 * x1, 2 * x2, 2 * y2 + 1, 2 * y1 + 1], c(1.0));
        let det = cov.entry(x1, y1) * cov.entry(x2, y2) - cov.entry(x1, y2) * cov.entry(x2, y1);
        assert!((integrate_full(&f, &cov) - det).norm() < 1e-14);
    }

    #[test]
    fn same_charge_pairs_integrate_to_zero() {
        let spec = small_spec();
        let cov = random_cov(&spec, 4);
        let f = Poly::monomial(&[0, 2], c(1.0));
        assert_eq!(integrate_full(&f, &cov), c(0.0));
    }

    #[test]
    fn free_integration_is_additive_in_the_covariance() {
        let spec = LatticeSpec::new(1, 1, 1, 1.0, 4.0).unwrap();
        let n = spec.signed_count();
        let a = random_cov(&spec, 11);
        let b = random_cov(&spec, 12);
        let sum = Covariance::from_matrix(CovarianceKind::Custom, spec.clone(), &a.matrix + &b.matrix, false);
        let lim = AlgebraLimits::default();
        let f = random_poly(n, 30, 4, 9);
        let twice = free_integrate(&free_integrate(&f, &a, &lim).unwrap(), &b, &lim).unwrap();
        let once = free_integrate(&f, &sum, &lim).unwrap();
        assert!(twice.max_diff(&once) < 1e-11);
    }

    #[test]
    fn antisymmetrization_contracts_the_l1_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let raw: Vec<(Vec<usize>, C64)> = (0..10)
                .map(|_| {
                    let t: Vec<usize> = (0..3).map(|_| rng.random_range(0..6)).collect();
                    (t, C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                })
                .collect();
            let p = antisymmetrize(&raw, 2.0);
            assert!(p.l1(3) <= raw_l1(&raw, 2.0) + 1e-14);
        }
    }

    #[test]
    fn identity_transform_is_trivial() {
        let spec = LatticeSpec::new(2, 1, 4, 1.0, 2.0).unwrap();
        let shift = TranslationShift { space: vec![0, 0], time_ticks: 0 };
        let t = TransformRQ::build(TransformName::Identity, &spec, &[], &shift).unwrap();
        let f = random_poly(spec.signed_count(), 40, 4, 1);
        assert_eq!(apply_transform(&f, &t), f);
    }

    #[test]
    fn particle_hole_on_balanced_pair_is_trivial() {
        let spec = LatticeSpec::new(2, 1, 4, 1.0, 2.0).unwrap();
        let shift = TranslationShift { space: vec![0, 0], time_ticks: 0 };
        let t = TransformRQ::build(TransformName::ParticleHole, &spec, &[], &shift).unwrap();
        let f = Poly::monomial(&[0, 5], c(1.0));
        assert_eq!(apply_transform(&f, &t), f);
    }

    #[test]
    fn every_named_transform_is_bijective() {
        let spec = LatticeSpec::new(2, 2, 4, 1.0, 4.0).unwrap();
        let offsets = vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]];
        let shift = TranslationShift { space: vec![1, 0], time_ticks: 3 };
        for name in TransformName::SEVEN {
            TransformRQ::build(name, &spec, &offsets, &shift).unwrap();
        }
    }

    #[test]
    fn zero_polynomial_has_zero_norms_and_kernel() {
        let spec = LatticeSpec::new(2, 1, 1, 1.0, 2.0).unwrap();
        let dist = DistanceTable::new(&spec);
        let w = NormWeight { w: 0.1, exponent: 0.5 };
        for m in [0, 2, 4] {
            assert_eq!(poly_norm(&Poly::zero(), m, &spec, &dist, w, false), 0.0);
            assert_eq!(poly_norm(&Poly::zero(), m, &spec, &dist, w, true), 0.0);
        }
        let k = quadratic_momentum_kernel(&Poly::zero(), &spec).unwrap();
        assert!(k.eval_grid(PI, &[0.0, 0.0]).iter().all(|z| z.norm() == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn product_is_associative(seed in 0u64..1000) {
            let lim = AlgebraLimits::default();
            let a = random_poly(10, 6, 3, seed);
            let b = random_poly(10, 6, 3, seed + 1);
            let cc = random_poly(10, 6, 3, seed + 2);
            let left = a.mul(&b, &lim).unwrap().mul(&cc, &lim).unwrap();
            let right = a.mul(&b.mul(&cc, &lim).unwrap(), &lim).unwrap();
            prop_assert!(left.max_diff(&right) < 1e-12);
        }

        #[test]
        fn log_exp_round_trip(seed in 0u64..1000) {
            let lim = AlgebraLimits::default();
            let f = random_poly(8, 8, 4, seed).scale(c(0.3));
            let back = log_poly(&exp_poly(&f, &lim).unwrap(), &lim).unwrap();
            prop_assert!(back.max_diff(&f) < 1e-10);
        }

        #[test]
        fn second_left_derivative_vanishes(seed in 0u64..1000, y in 0usize..8) {
            let f = random_poly(8, 12, 5, seed);
            prop_assert!(left_derivative(&left_derivative(&f, y), y).is_zero());
        }

        #[test]
        fn norms_are_homogeneous_and_monotone_in_weight(seed in 0u64..1000, scale in 0.1f64..3.0) {
            let spec = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
            let dist = DistanceTable::new(&spec);
            let f = random_poly(spec.signed_count(), 10, 4, seed);
            let w = NormWeight { w: 0.2, exponent: 0.5 };
            let w_big = NormWeight { w: 0.8, exponent: 0.5 };
            for m in [2usize, 4] {
                for first in [false, true] {
                    let a = poly_norm(&f, m, &spec, &dist, w, first);
                    let b = poly_norm(&f.scale(c(scale)), m, &spec, &dist, w, first);
                    prop_assert!((b - scale * a).abs() <= 1e-12 * (1.0 + b));
                    prop_assert!(poly_norm(&f, m, &spec, &dist, w_big, first) + 1e-12 >= a);
                }
            }
        }

        #[test]
        fn first_moment_norm_obeys_triangle_inequality(seed in 0u64..1000) {
            let spec = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
            let dist = DistanceTable::new(&spec);
            let f = random_poly(spec.signed_count(), 10, 4, seed);
            let g = random_poly(spec.signed_count(), 10, 4, seed + 7);
            let w = NormWeight { w: 0.3, exponent: 0.5 };
            for m in [2usize, 4] {
                let lhs = poly_norm(&f.add(&g), m, &spec, &dist, w, true);
                let rhs = poly_norm(&f, m, &spec, &dist, w, true) + poly_norm(&g, m, &spec, &dist, w, true);
                prop_assert!(lhs <= rhs + 1e-12);
            }
        }

        #[test]
        fn transforms_are_homomorphisms(seed in 0u64..1000, which in 0usize..7) {
            let spec = LatticeSpec::new(2, 1, 4, 1.0, 2.0).unwrap();
            let offsets = vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]];
            let shift = TranslationShift { space: vec![0, 0], time_ticks: 1 };
            let t = TransformRQ::build(TransformName::SEVEN[which], &spec, &offsets, &shift).unwrap();
            let lim = AlgebraLimits::default();
            let f = random_poly(spec.signed_count(), 6, 3, seed);
            let g = random_poly(spec.signed_count(), 6, 3, seed + 3);
            let fg = apply_transform(&f.mul(&g, &lim).unwrap(), &t);
            let tf_tg = apply_transform(&f, &t).mul(&apply_transform(&g, &t), &lim).unwrap();
            prop_assert!(fg.max_diff(&tf_tg) < 1e-12);
            let small = f.part(2).scale(c(0.5));
            let e1 = apply_transform(&exp_poly(&small, &lim).unwrap(), &t);
            let e2 = exp_poly(&apply_transform(&small, &t), &lim).unwrap();
            prop_assert!(e1.max_diff(&e2) < 1e-12);
        }
    }
}
