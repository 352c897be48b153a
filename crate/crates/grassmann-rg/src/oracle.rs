//! Exact and brute-force references.
//!
//! Everything here is computed without the multi-scale machinery: Fock-space
//! traces by exact diagonalization, free-fermion trace formulas, the
//! discrete-time partition function by three independent routes (transfer
//! matrix, factored Gaussian sum, full Grassmann expansion), perturbative
//! coefficients by graded integration and by a Cauchy contour, the flux-phase
//! search with gauge checks, and the half-filling check.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{covariance_l1_quantity, full_covariance, hermitian_function, invert, Covariance};
use crate::grassmann::{exp_graded, exp_poly, integrate_full, log_graded, small_det, AlgebraLimits, Graded, Poly};
use crate::lattice_index::{LatticeSpec, SpaceTimeIndex, Spin};
use crate::model::{
    fock_mode, hermitian_eigenvalues, interaction_kernels, operator_norm, CouplingParams, FockHamiltonian, FockSpace,
    HoppingParams, HoppingTable, SectorSpectrum, MAX_FOCK_MODES,
};
use crate::{EngineError, Result, C64};

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// `log(1 + e^{-x})` without overflow.
fn log1p_exp_neg(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// A spec carrying only geometry: the coarsest admissible grid `h = 2/beta`.
pub fn geometry_spec(dim: usize, side: usize, bands: usize, beta: f64) -> Result<LatticeSpec> {
    LatticeSpec::new(dim, side, bands, beta, 2.0 / beta)
}

/// `log Tr e^{-beta H_0} = 2 sum_{rho,k} log(1 + e^{-beta alpha_rho(k)})`.
pub fn free_log_trace(spec: &LatticeSpec, table: &HoppingTable) -> Result<f64> {
    if table.bands != spec.bands || table.dim != spec.dim {
        return Err(EngineError::Config("hopping table does not match the lattice".into()));
    }
    let mut total = 0.0;
    for k in spec.momenta() {
        for alpha in hermitian_eigenvalues(&table.matrix(&k)) {
            total += 2.0 * log1p_exp_neg(spec.beta * alpha);
        }
    }
    Ok(total)
}

/// `Tr e^{-beta H_0}` from the free-fermion product formula.
pub fn free_trace(spec: &LatticeSpec, table: &HoppingTable) -> Result<f64> {
    free_log_trace(spec, table).map(f64::exp)
}

/// `log Tr e^{-beta H_0}` by exact diagonalization of the Fock operator.
pub fn free_log_trace_ed(spec: &LatticeSpec, table: &HoppingTable) -> Result<f64> {
    let ham = FockHamiltonian::lattice(spec, table, &CouplingParams::uniform(spec.bands, 0.0), true)?;
    Ok(SectorSpectrum::new(&ham.h0, &ham.sectors())?.log_trace_exp(spec.beta))
}

/// Interacting and free log-traces from exact diagonalization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct InteractingTrace {
    pub log_trace: f64,
    pub log_trace_free: f64,
    /// `Tr e^{-beta H} / Tr e^{-beta H_0}`.
    pub ratio: f64,
}

/// `Tr e^{-beta H}` and its ratio to the free trace, for real couplings.
pub fn interacting_trace(spec: &LatticeSpec, table: &HoppingTable, u: &CouplingParams) -> Result<InteractingTrace> {
    if !u.is_real() {
        return Err(EngineError::Domain("exact diagonalization needs real couplings".into()));
    }
    let ham = FockHamiltonian::lattice(spec, table, u, true)?;
    let sectors = ham.sectors();
    let log_trace = SectorSpectrum::new(&ham.h, &sectors)?.log_trace_exp(spec.beta);
    let log_trace_free = SectorSpectrum::new(&ham.h0, &sectors)?.log_trace_exp(spec.beta);
    Ok(InteractingTrace {
        log_trace,
        log_trace_free,
        ratio: (log_trace - log_trace_free).exp(),
    })
}

/// Discrete-time partition function `P_h = Tr[(e^{-H_0/h} O)^{beta h}] / Tr e^{-beta H_0}`,
/// where `O` is the normal-ordered per-slice interaction
/// `prod_orbitals (1 + a (n_up + n_down) + (a^2 - U/h) n_up n_down)` with `a = U/(2h)`.
///
/// Complex couplings are allowed, which the contour route for the
/// perturbative coefficients relies on.
pub struct TransferOracle {
    space: FockSpace,
    step: DMatrix<C64>,
    log_free: f64,
    slices: usize,
    h: f64,
    orbital_band: Vec<usize>,
    bands: usize,
}

impl TransferOracle {
    pub fn new(spec: &LatticeSpec, table: &HoppingTable) -> Result<TransferOracle> {
        let ham = FockHamiltonian::lattice(spec, table, &CouplingParams::uniform(spec.bands, 0.0), true)?;
        let dense = ham.h0.to_dense();
        let h = spec.h;
        let step = hermitian_function(&dense, |e| C64::new((-e / h).exp(), 0.0));
        let log_free = SectorSpectrum::new(&ham.h0, &ham.sectors())?.log_trace_exp(spec.beta);
        let sites = spec.sites();
        Ok(TransferOracle {
            space: ham.space,
            step,
            log_free,
            slices: spec.time_slices(),
            h,
            orbital_band: (0..spec.bands * sites).map(|o| o / sites).collect(),
            bands: spec.bands,
        })
    }

    /// `P_h` at couplings `u[band]`.
    pub fn partition(&self, u: &[C64]) -> Result<C64> {
        if u.len() != self.bands {
            return Err(EngineError::Config(format!("{} couplings for {} bands", u.len(), self.bands)));
        }
        let dim = self.space.dim();
        let diag: Vec<C64> = (0..dim)
            .map(|s| {
                let mut v = C64::new(1.0, 0.0);
                for (o, &band) in self.orbital_band.iter().enumerate() {
                    let up = self.space.occupied(fock_mode(o, Spin::Up), s) as u8 as f64;
                    let down = self.space.occupied(fock_mode(o, Spin::Down), s) as u8 as f64;
                    let a = u[band] / (2.0 * self.h);
                    let quartic = a * a - u[band] / self.h;
                    v *= C64::new(1.0, 0.0) + a * (up + down) + quartic * (up * down);
                }
                v
            })
            .collect();
        let mut slice = self.step.clone();
        for (c, d) in diag.iter().enumerate() {
            for r in 0..dim {
                slice[(r, c)] *= d;
            }
        }
        let product = matrix_power(&slice, self.slices);
        Ok(product.trace() / self.log_free.exp())
    }
}

fn matrix_power(m: &DMatrix<C64>, mut n: usize) -> DMatrix<C64> {
    let mut result = DMatrix::<C64>::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while n > 0 {
        if n & 1 == 1 {
            result = &result * &base;
        }
        n >>= 1;
        if n > 0 {
            base = &base * &base;
        }
    }
    result
}

/// `P_h` by the transfer-matrix route.
pub fn transfer_partition(spec: &LatticeSpec, table: &HoppingTable, u: &CouplingParams) -> Result<C64> {
    TransferOracle::new(spec, table)?.partition(&u.u)
}

/// Level-by-level record of the factored Gaussian sum.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FactoredReport {
    pub re: f64,
    pub im: f64,
    /// Magnitude of every evaluated level `|D| = d`.
    pub level_magnitudes: Vec<f64>,
    /// Geometric estimate of the omitted levels, relative to the total.
    pub tail_estimate: f64,
    /// Whether the level cap was reached before the tail fell below tolerance.
    pub capped: bool,
}

impl FactoredReport {
    pub fn value(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

/// `P_h = int e^{-V} dmu_C` from the per-point nilpotent factorization
/// `e^{-V} = e^{sum_p a_p (n_p,up + n_p,down)} prod_p (1 - u_p n_p,up n_p,down)`:
/// `P_h = sum_D prod_{p in D} (-u_p) prod_s det(I + A C_s) det K_s[D]` with
/// `K_s = C_s (I + A C_s)^{-1}`. Levels `|D| = d` are summed until the
/// geometric tail estimate drops below `tolerance` or `max_level` is reached.
pub fn factored_partition(cov: &Covariance, u: &CouplingParams, max_level: usize, tolerance: f64) -> Result<FactoredReport> {
    let spec = &cov.spec;
    if u.u.len() != spec.bands {
        return Err(EngineError::Config("one coupling per band required".into()));
    }
    if !cov.spin_diagonal && cov.spin_offdiagonal_max() > 0.0 {
        return Err(EngineError::Contract("factored partition needs a spin-diagonal covariance".into()));
    }
    let sites = spec.sites();
    let nt = spec.time_slices();
    let h = spec.h;
    let points: Vec<(usize, usize, i64)> = (0..spec.bands)
        .flat_map(|b| (0..sites).flat_map(move |x| (0..nt as i64).map(move |t| (b, x, t))))
        .collect();
    let n = points.len();
    let pos = |p: &(usize, usize, i64), spin: Spin| {
        spec.unsigned_position(&SpaceTimeIndex {
            band: p.0,
            site: p.1,
            spin,
            time: p.2,
        })
    };
    let a: Vec<C64> = points.iter().map(|p| u.u[p.0] / (2.0 * h)).collect();
    let weights: Vec<C64> = points.iter().map(|p| -u.u[p.0] / h).collect();
    let mut prefactor = C64::new(1.0, 0.0);
    let mut kernels = Vec::new();
    for spin in [Spin::Up, Spin::Down] {
        let c = DMatrix::from_fn(n, n, |i, j| cov.entry(pos(&points[i], spin), pos(&points[j], spin)));
        let mut m = DMatrix::<C64>::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += a[i] * c[(i, j)];
            }
        }
        prefactor *= m.clone().determinant();
        kernels.push(&c * invert(&m)?);
    }
    let active: Vec<usize> = (0..n).filter(|&i| weights[i] != zero()).collect();
    let mut levels = vec![C64::new(1.0, 0.0)];
    let mut total = C64::new(1.0, 0.0);
    let mut tail = 0.0;
    let mut capped = false;
    for d in 1..=max_level.min(active.len()) {
        let level = factored_level(&active, d, &weights, &kernels[0], &kernels[1]);
        total += level;
        levels.push(level);
        let prev = levels[d - 1].norm();
        let ratio = if prev > 0.0 { level.norm() / prev } else { 0.0 };
        tail = if ratio < 1.0 {
            level.norm() * ratio / (1.0 - ratio) / total.norm().max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        if tail < tolerance || level.norm() == 0.0 {
            break;
        }
        if d == max_level.min(active.len()) && d < active.len() {
            capped = true;
        }
    }
    if levels.len() - 1 == active.len() {
        tail = 0.0;
    }
    let value = total * prefactor;
    Ok(FactoredReport {
        re: value.re,
        im: value.im,
        level_magnitudes: levels.iter().map(|z| z.norm()).collect(),
        tail_estimate: tail,
        capped,
    })
}

/// `sum_{D subset active, |D| = d} prod (-u_p) det K_up[D] det K_down[D]`,
/// reduced in a fixed order independent of the worker count.
fn factored_level(active: &[usize], d: usize, weights: &[C64], k_up: &DMatrix<C64>, k_down: &DMatrix<C64>) -> C64 {
    let m = active.len();
    let partial: Vec<C64> = (0..m)
        .into_par_iter()
        .map(|first| {
            let mut acc = zero();
            let mut idx: Vec<usize> = Vec::with_capacity(d);
            idx.push(first);
            for j in 1..d {
                idx.push(first + j);
            }
            if idx[d - 1] >= m {
                return acc;
            }
            let mut buf = vec![zero(); d * d];
            loop {
                let chosen: Vec<usize> = idx.iter().map(|&i| active[i]).collect();
                let mut w = C64::new(1.0, 0.0);
                for &p in &chosen {
                    w *= weights[p];
                }
                let mut dets = C64::new(1.0, 0.0);
                for k in [k_up, k_down] {
                    for (r, &pr) in chosen.iter().enumerate() {
                        for (c, &pc) in chosen.iter().enumerate() {
                            buf[r * d + c] = k[(pr, pc)];
                        }
                    }
                    dets *= small_det(&mut buf, d);
                }
                acc += w * dets;
                // Advance the tail indices; the first index stays fixed.
                let mut j = d;
                loop {
                    if j == 1 {
                        return acc;
                    }
                    j -= 1;
                    if idx[j] < m - (d - j) {
                        idx[j] += 1;
                        for q in j + 1..d {
                            idx[q] = idx[q - 1] + 1;
                        }
                        break;
                    }
                }
            }
        })
        .collect();
    partial.into_iter().fold(zero(), |a, b| a + b)
}

/// `P_h = int e^{-V} dmu_C` via the factored Gaussian sum with the full covariance.
pub fn grassmann_partition(spec: &LatticeSpec, table: &HoppingTable, u: &CouplingParams, max_level: usize, tolerance: f64) -> Result<FactoredReport> {
    let cov = full_covariance(spec, table)?;
    factored_partition(&cov, u, max_level, tolerance)
}

/// `int psi_{p_1} ... psi_{p_n} dmu_C` as the signed sum over all perfect
/// pairings of the positions, each pair `(p, q)` with `p` before `q`
/// contributing the two-point integral `int psi_p psi_q dmu_C`.
pub fn pair_contraction_sum(positions: &[usize], cov: &Covariance) -> C64 {
    fn two_point(cov: &Covariance, p: usize, q: usize) -> C64 {
        match (p % 2, q % 2) {
            (0, 1) => cov.entry(p / 2, q / 2),
            (1, 0) => -cov.entry(q / 2, p / 2),
            _ => zero(),
        }
    }
    fn expand(rest: &[usize], cov: &Covariance) -> C64 {
        if rest.is_empty() {
            return C64::new(1.0, 0.0);
        }
        let first = rest[0];
        let mut acc = zero();
        for j in 1..rest.len() {
            let pair = two_point(cov, first, rest[j]);
            if pair == zero() {
                continue;
            }
            let remaining: Vec<usize> = rest[1..j].iter().chain(&rest[j + 1..]).copied().collect();
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            acc += pair * sign * expand(&remaining, cov);
        }
        acc
    }
    if positions.len() % 2 == 1 {
        return zero();
    }
    expand(positions, cov)
}

/// Largest signed index count accepted by [`brute_partition`].
pub const BRUTE_GENERATOR_CAP: usize = 32;

/// `P_h` by expanding `e^{-V}` in the algebra and contracting every monomial.
pub fn brute_partition(spec: &LatticeSpec, table: &HoppingTable, u: &CouplingParams) -> Result<C64> {
    if spec.signed_count() > BRUTE_GENERATOR_CAP {
        return Err(EngineError::Capacity(format!(
            "{} generators exceed the brute-force cap {BRUTE_GENERATOR_CAP}",
            spec.signed_count()
        )));
    }
    let cov = full_covariance(spec, table)?;
    let minus_v = interaction_kernels(spec, u, true)?;
    let e = exp_poly(&minus_v, &AlgebraLimits::default())?;
    Ok(integrate_full(&e, &cov))
}

/// `a_n = -(1/(beta L^d)) (1/n!) (d/dz)^n log int e^{-zV} dmu_C |_{z=0}` for
/// `n = 0..=n_max`, by graded expansion of `e^{-zV}` and Gaussian integration.
pub fn perturbative_coefficients(spec: &LatticeSpec, cov: &Covariance, u: &CouplingParams, n_max: usize) -> Result<Vec<C64>> {
    if n_max > 3 {
        return Err(EngineError::Capacity("perturbative coefficients are supported up to order 3".into()));
    }
    let minus_v = interaction_kernels(spec, u, true)?;
    let limits = AlgebraLimits::default();
    let e = exp_graded(&Graded::at_grade(minus_v, 1, n_max), &limits)?;
    let mut integrals = Graded::zero(n_max);
    for (g, part) in e.grades.iter().enumerate() {
        integrals.grades[g] = Poly::scalar(integrate_full(part, cov));
    }
    let logs = log_graded(&integrals, &limits)?;
    let vol = spec.beta * spec.sites() as f64;
    Ok(logs.constant().iter().map(|c| -c / vol).collect())
}

/// The same coefficients from a Cauchy contour of the transfer-matrix
/// `log P_h(zU)` around `z = 0`, with `nodes` equally spaced points at the
/// radius where `|z| max|U| = reach`.
pub fn perturbative_coefficients_contour(
    spec: &LatticeSpec,
    table: &HoppingTable,
    u: &CouplingParams,
    n_max: usize,
    nodes: usize,
    reach: f64,
) -> Result<Vec<C64>> {
    let oracle = TransferOracle::new(spec, table)?;
    let umax = u.u_max();
    if umax == 0.0 {
        return Ok(vec![zero(); n_max + 1]);
    }
    let radius = reach / umax;
    let values: Vec<C64> = (0..nodes)
        .map(|j| {
            let z = C64::from_polar(radius, 2.0 * PI * j as f64 / nodes as f64);
            let scaled: Vec<C64> = u.u.iter().map(|x| x * z).collect();
            oracle.partition(&scaled).map(|p| p.ln())
        })
        .collect::<Result<_>>()?;
    let vol = spec.beta * spec.sites() as f64;
    Ok((0..=n_max)
        .map(|n| {
            let mut acc = zero();
            for (j, v) in values.iter().enumerate() {
                acc += v * C64::from_polar(1.0, -2.0 * PI * (n * j) as f64 / nodes as f64);
            }
            -acc / (nodes as f64 * radius.powi(n as i32) * vol)
        })
        .collect())
}

/// `a_1 = sum_rho U_rho (C(rho 0 up 0, rho 0 up 0)^2 - C(rho 0 up 0, rho 0 up 0))`.
pub fn a1_closed_form(cov: &Covariance, u: &CouplingParams) -> C64 {
    let spec = &cov.spec;
    let mut total = zero();
    for (band, ub) in u.u.iter().enumerate() {
        let p = spec.unsigned_position(&SpaceTimeIndex {
            band,
            site: 0,
            spin: Spin::Up,
            time: 0,
        });
        let c = cov.entry(p, p);
        total += ub * (c * c - c);
    }
    total
}

/// Largest `|<n_{rho x s}> - 1/2|` over the modes and coupling samples.
/// `counterterm = false` removes the `-(1/2) sum n` part of the interaction.
pub fn half_filling_check(spec: &LatticeSpec, table: &HoppingTable, samples: &[CouplingParams], counterterm: bool) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for u in samples {
        if !u.is_real() {
            return Err(EngineError::Domain("half filling is checked for real couplings".into()));
        }
        let ham = FockHamiltonian::lattice(spec, table, u, counterterm)?;
        let spectrum = SectorSpectrum::new(&ham.h, &ham.sectors())?;
        for mode in 0..ham.space.modes {
            let n = spectrum.thermal_diagonal(spec.beta, |s| ham.space.occupied(mode, s) as u8 as f64);
            worst = worst.max((n - 0.5).abs());
        }
    }
    Ok(worst)
}

/// Seeded random real couplings in `[-1, 1]^bands`.
pub fn random_couplings(bands: usize, count: usize, seed: u64) -> Vec<CouplingParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let values: Vec<f64> = (0..bands).map(|_| rng.random_range(-1.0..=1.0)).collect();
            CouplingParams::real(&values)
        })
        .collect()
}

/// Imaginary-time two-point function of the free Fock Hamiltonian,
/// `<T psi-bar_X(s) psi_Y(t)>`, from the eigenbasis of `H_0`.
pub struct FockPropagator {
    energies: Vec<f64>,
    creation: Vec<DMatrix<C64>>,
    annihilation: Vec<DMatrix<C64>>,
    beta: f64,
    h: f64,
    sites: usize,
}

impl FockPropagator {
    pub fn new(spec: &LatticeSpec, table: &HoppingTable) -> Result<FockPropagator> {
        let ham = FockHamiltonian::lattice(spec, table, &CouplingParams::uniform(spec.bands, 0.0), true)?;
        let eig = ham.h0.to_dense().symmetric_eigen();
        let v = eig.eigenvectors;
        let vd = v.adjoint();
        let mut creation = Vec::new();
        let mut annihilation = Vec::new();
        for mode in 0..ham.space.modes {
            let c = ham.space.annihilation_matrix(mode);
            annihilation.push(&vd * &c * &v);
            creation.push(&vd * c.adjoint() * &v);
        }
        Ok(FockPropagator {
            energies: eig.eigenvalues.iter().cloned().collect(),
            creation,
            annihilation,
            beta: spec.beta,
            h: spec.h,
            sites: spec.sites(),
        })
    }

    /// `C(X, Y)` with times in ticks inside `[0, beta h)`.
    pub fn value(&self, x: &SpaceTimeIndex, y: &SpaceTimeIndex) -> C64 {
        let mx = fock_mode(x.band * self.sites + x.site, x.spin);
        let my = fock_mode(y.band * self.sites + y.site, y.spin);
        let s = x.time as f64 / self.h;
        let t = y.time as f64 / self.h;
        let e0 = self.energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let z: f64 = self.energies.iter().map(|e| (-self.beta * (e - e0)).exp()).sum();
        let (first, second, tau, sign) = if s >= t {
            (&self.creation[mx], &self.annihilation[my], s - t, 1.0)
        } else {
            (&self.annihilation[my], &self.creation[mx], t - s, -1.0)
        };
        let d = self.energies.len();
        let mut acc = zero();
        for m in 0..d {
            let wm = (-(self.beta - tau) * (self.energies[m] - e0)).exp();
            for n in 0..d {
                let a = first[(m, n)];
                if a == zero() {
                    continue;
                }
                let wn = (-tau * (self.energies[n] - e0)).exp();
                acc += a * second[(n, m)] * (wm * wn);
            }
        }
        acc * (sign / z)
    }
}

/// `C(X, Y)` from the Fock-space oracle.
pub fn fock_two_point(spec: &LatticeSpec, table: &HoppingTable, x: &SpaceTimeIndex, y: &SpaceTimeIndex) -> Result<C64> {
    Ok(FockPropagator::new(spec, table)?.value(x, y))
}

/// One row of the integer-temperature comparison.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BetaIntegerRow {
    pub beta: f64,
    pub beta_floor: f64,
    pub lhs: f64,
    pub integral_term: f64,
    pub envelope_term: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Compares the free-energy density at `beta` and at its integer part with
/// the bound `int_{[beta]}^{beta} |log R(g)| / (g^2 L^d) dg + 2b (2 sup||E|| + max|U|) log(beta/[beta])`.
pub fn beta_integer_bound_check(dim: usize, side: usize, table: &HoppingTable, u: &CouplingParams, betas: &[f64]) -> Result<Vec<BetaIntegerRow>> {
    let spec = geometry_spec(dim, side, table.bands, 1.0)?;
    let ham = FockHamiltonian::lattice(&spec, table, u, true)?;
    let sectors = ham.sectors();
    let full = SectorSpectrum::new(&ham.h, &sectors)?;
    let free = SectorSpectrum::new(&ham.h0, &sectors)?;
    let log_ratio = |g: f64| full.log_trace_exp(g) - free.log_trace_exp(g);
    let vol = spec.sites() as f64;
    let sup_e = sampled_dispersion_sup(table, 48);
    betas
        .iter()
        .map(|&beta| {
            if beta < 1.0 {
                return Err(EngineError::Domain(format!("beta = {beta} must be at least 1")));
            }
            let floor = beta.floor();
            let lhs = (log_ratio(beta) / (beta * vol) - log_ratio(floor) / (floor * vol)).abs();
            let integral_term = simpson(|g| log_ratio(g).abs() / (g * g * vol), floor, beta, 256);
            let envelope_term = 2.0 * table.bands as f64 * (2.0 * sup_e + u.u_max()) * (beta / floor).ln();
            let rhs = integral_term + envelope_term;
            Ok(BetaIntegerRow {
                beta,
                beta_floor: floor,
                lhs,
                integral_term,
                envelope_term,
                rhs,
                pass: lhs <= rhs,
            })
        })
        .collect()
}

/// `max ||E(k)||` over a uniform grid of `points^d` momenta.
pub fn sampled_dispersion_sup(table: &HoppingTable, points: usize) -> f64 {
    let total = points.pow(table.dim as u32);
    (0..total)
        .map(|mut i| {
            let k: Vec<f64> = (0..table.dim)
                .map(|_| {
                    let c = i % points;
                    i /= points;
                    2.0 * PI * c as f64 / points as f64
                })
                .collect();
            operator_norm(&table.matrix(&k))
        })
        .fold(0.0, f64::max)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = intervals + intervals % 2;
    let step = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + step * i as f64);
    }
    s * step / 3.0
}

/// Square torus of side `2L` with one directed bond `x -> x + e_j` per site and axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluxLattice {
    pub side: usize,
}

impl FluxLattice {
    pub fn new(side: usize) -> Result<FluxLattice> {
        if side < 2 || side % 2 != 0 {
            return Err(EngineError::Config(format!("flux lattice side {side} must be even and at least 2")));
        }
        Ok(FluxLattice { side })
    }

    pub fn sites(&self) -> usize {
        self.side * self.side
    }

    pub fn bonds(&self) -> usize {
        2 * self.sites()
    }

    pub fn site(&self, x1: usize, x2: usize) -> usize {
        (x1 % self.side) + self.side * (x2 % self.side)
    }

    pub fn coords(&self, site: usize) -> (usize, usize) {
        (site % self.side, site / self.side)
    }

    /// Bond index of `x -> x + e_axis` (`axis` 0 or 1).
    pub fn bond(&self, site: usize, axis: usize) -> usize {
        2 * site + axis
    }

    /// `(tail, head)` of a bond.
    pub fn endpoints(&self, bond: usize) -> (usize, usize) {
        let site = bond / 2;
        let (x1, x2) = self.coords(site);
        let head = if bond % 2 == 0 {
            self.site(x1 + 1, x2)
        } else {
            self.site(x1, x2 + 1)
        };
        (site, head)
    }

    /// Bonds of the gauge-fixing spanning tree: the horizontal row `x2 = 0`
    /// up to `x1 = 2L - 2` and every vertical column up to `x2 = 2L - 2`.
    pub fn tree_bonds(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for x1 in 0..self.side - 1 {
            out.push(self.bond(self.site(x1, 0), 0));
        }
        for x1 in 0..self.side {
            for x2 in 0..self.side - 1 {
                out.push(self.bond(self.site(x1, x2), 1));
            }
        }
        out.sort_unstable();
        out
    }

    /// Bonds outside the spanning tree.
    pub fn free_bonds(&self) -> Vec<usize> {
        let tree = self.tree_bonds();
        (0..self.bonds()).filter(|b| tree.binary_search(b).is_err()).collect()
    }
}

fn wrap_angle(q: f64) -> f64 {
    let r = q.rem_euclid(2.0 * PI);
    if (2.0 * PI - r) < 1e-9 {
        0.0
    } else {
        r
    }
}

/// A raw phase assignment: `phases[bond]` is `phi(head, tail)` for the bond
/// `tail -> head`, so the reverse hop carries `-phases[bond]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxConfig {
    pub lattice: FluxLattice,
    pub phases: Vec<f64>,
}

impl FluxConfig {
    pub fn zero(lattice: FluxLattice) -> FluxConfig {
        FluxConfig {
            lattice,
            phases: vec![0.0; lattice.bonds()],
        }
    }

    /// `pi` on vertical bonds with odd `x1`: every plaquette carries `pi`
    /// and both loop fluxes vanish. This is the phase pattern of the
    /// four-band model.
    pub fn model_pi_flux(lattice: FluxLattice) -> FluxConfig {
        let mut c = FluxConfig::zero(lattice);
        for s in 0..lattice.sites() {
            if lattice.coords(s).0 % 2 == 1 {
                c.phases[lattice.bond(s, 1)] = PI;
            }
        }
        c
    }

    /// `pi` flux per plaquette with both loop fluxes equal to `pi(L - 1)`:
    /// for even `L` the wrap bonds of both axes receive an extra `pi`.
    pub fn loop_pi_flux(lattice: FluxLattice) -> FluxConfig {
        let mut c = FluxConfig::model_pi_flux(lattice);
        let half = lattice.side / 2;
        if half % 2 == 0 {
            let last = lattice.side - 1;
            for y in 0..lattice.side {
                let hb = lattice.bond(lattice.site(last, y), 0);
                c.phases[hb] = wrap_angle(c.phases[hb] + PI);
                let vb = lattice.bond(lattice.site(y, last), 1);
                c.phases[vb] = wrap_angle(c.phases[vb] + PI);
            }
        }
        c
    }

    /// `f_p(x)` for every plaquette with lower-left corner `x`.
    pub fn plaquette_fluxes(&self) -> Vec<f64> {
        let lat = self.lattice;
        (0..lat.sites())
            .map(|s| {
                let (x1, x2) = lat.coords(s);
                let bottom = self.phases[lat.bond(s, 0)];
                let right = self.phases[lat.bond(lat.site(x1 + 1, x2), 1)];
                let top = self.phases[lat.bond(lat.site(x1, x2 + 1), 0)];
                let left = self.phases[lat.bond(s, 1)];
                wrap_angle(bottom + right - top - left)
            })
            .collect()
    }

    /// `(f_h(x2) for every row, f_v(x1) for every column)`.
    pub fn loop_fluxes(&self) -> (Vec<f64>, Vec<f64>) {
        let lat = self.lattice;
        let rows = (0..lat.side)
            .map(|x2| wrap_angle((0..lat.side).map(|x1| self.phases[lat.bond(lat.site(x1, x2), 0)]).sum()))
            .collect();
        let cols = (0..lat.side)
            .map(|x1| wrap_angle((0..lat.side).map(|x2| self.phases[lat.bond(lat.site(x1, x2), 1)]).sum()))
            .collect();
        (rows, cols)
    }

    fn meets(&self, loop_target: f64) -> bool {
        let close = |a: f64, b: f64| {
            let d = wrap_angle(a - b);
            d < 1e-9 || 2.0 * PI - d < 1e-9
        };
        let (rows, cols) = self.loop_fluxes();
        self.plaquette_fluxes().iter().all(|&f| close(f, PI))
            && rows.iter().chain(cols.iter()).all(|&f| close(f, loop_target))
    }

    /// `f_p = pi` everywhere and `f_h = f_v = pi (L - 1)`.
    pub fn meets_loop_condition(&self) -> bool {
        let half = self.lattice.side / 2;
        self.meets(PI * (half as f64 - 1.0))
    }

    /// `f_p = pi` everywhere and vanishing loop fluxes.
    pub fn meets_model_condition(&self) -> bool {
        self.meets(0.0)
    }

    /// Gauge transform `phi(x, y) -> phi(x, y) + theta(x) - theta(y)`.
    pub fn gauge(&self, theta: &[f64]) -> FluxConfig {
        let lat = self.lattice;
        let phases = (0..lat.bonds())
            .map(|b| {
                let (tail, head) = lat.endpoints(b);
                self.phases[b] + theta[head] - theta[tail]
            })
            .collect();
        FluxConfig { lattice: lat, phases }
    }

    /// Canonical flux signature in units of `pi/4`: plaquettes, then the
    /// loop fluxes of row 0 and column 0.
    pub fn signature(&self) -> String {
        let q = |f: f64| ((f / (PI / 4.0)).round() as i64).rem_euclid(8);
        let plaq: String = self.plaquette_fluxes().iter().map(|&f| char::from(b'0' + q(f) as u8)).collect();
        let (rows, cols) = self.loop_fluxes();
        format!("p{plaq}-h{}-v{}", q(rows[0]), q(cols[0]))
    }

    /// Single-particle matrix `sum t e^{i phi(x,y)} psi*_x psi_y` for one spin.
    pub fn hopping_matrix(&self, t: f64) -> DMatrix<C64> {
        let lat = self.lattice;
        let n = lat.sites();
        let mut m = DMatrix::from_element(n, n, zero());
        for b in 0..lat.bonds() {
            let (tail, head) = lat.endpoints(b);
            let amp = C64::from_polar(t, self.phases[b]);
            m[(head, tail)] += amp;
            m[(tail, head)] += amp.conj();
        }
        m
    }
}

/// Free or interacting evaluation of the flux free energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxMode {
    Free,
    Interacting,
}

/// `log Tr e^{-beta H(phi)}`: the free-fermion formula in free mode, exact
/// diagonalization with `U (n_up n_down - (n_up + n_down)/2)` otherwise.
pub fn flux_log_trace(config: &FluxConfig, beta: f64, t: f64, u: f64, mode: FluxMode) -> Result<f64> {
    let hop = config.hopping_matrix(t);
    match mode {
        FluxMode::Free => Ok(hermitian_eigenvalues(&hop)
            .iter()
            .map(|&e| 2.0 * log1p_exp_neg(beta * e))
            .sum()),
        FluxMode::Interacting => {
            if 2 * config.lattice.sites() > MAX_FOCK_MODES {
                return Err(EngineError::Capacity(format!(
                    "{} Fock modes exceed the cap {MAX_FOCK_MODES}",
                    2 * config.lattice.sites()
                )));
            }
            let onsite = vec![C64::new(u, 0.0); config.lattice.sites()];
            let ham = FockHamiltonian::build(&hop, &onsite, true)?;
            Ok(SectorSpectrum::new(&ham.h, &ham.sectors())?.log_trace_exp(beta))
        }
    }
}

/// One gauge class of the flux search.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FluxRow {
    pub signature: String,
    pub free_energy: f64,
    pub loop_condition: bool,
    pub model_condition: bool,
}

/// Ranked result of the flux search.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FluxTable {
    pub side: usize,
    pub beta: f64,
    pub t: f64,
    pub u: f64,
    pub mode: FluxMode,
    /// Rows sorted by free energy, ties by signature.
    pub rows: Vec<FluxRow>,
    pub min_free_energy: f64,
    /// Free energy of the configuration meeting the loop condition `pi(L-1)`.
    pub loop_free_energy: f64,
    /// Free energy of the four-band pattern (vanishing loop fluxes).
    pub model_free_energy: f64,
    pub zero_flux_free_energy: f64,
    /// 1-based rank of the loop-condition configuration: one plus the number of rows
    /// strictly below it by more than `1e-10`.
    pub loop_rank: usize,
    /// Spread of free energies among every enumerated configuration meeting
    /// the loop condition.
    pub loop_class_spread: f64,
}

/// Largest number of configurations enumerated by [`flux_phase_search`].
pub const FLUX_ENUMERATION_CAP: usize = 1 << 22;

/// Exhaustive search over phases in `grid` on the bonds outside the spanning
/// tree (tree bonds fixed to 0), which reaches every gauge class with fluxes
/// in the grid. Free energies are `-(1/beta) log Tr e^{-beta H(phi)}`.
pub fn flux_phase_search(side: usize, beta: f64, t: f64, u: f64, grid: &[f64], mode: FluxMode) -> Result<FluxTable> {
    let lattice = FluxLattice::new(side)?;
    if mode == FluxMode::Interacting && side != 2 {
        return Err(EngineError::Capacity("interacting flux search runs at side 2 only".into()));
    }
    if grid.is_empty() {
        return Err(EngineError::Config("empty flux grid".into()));
    }
    let free = lattice.free_bonds();
    let count = (grid.len() as f64).powi(free.len() as i32);
    if count > FLUX_ENUMERATION_CAP as f64 {
        return Err(EngineError::Capacity(format!(
            "{count} flux configurations exceed the cap {FLUX_ENUMERATION_CAP}"
        )));
    }
    let count = count as usize;
    let evaluated: Vec<(FluxRow, bool)> = (0..count)
        .into_par_iter()
        .map(|mut index| {
            let mut config = FluxConfig::zero(lattice);
            for &b in &free {
                config.phases[b] = grid[index % grid.len()];
                index /= grid.len();
            }
            let f = -flux_log_trace(&config, beta, t, u, mode)? / beta;
            let looped = config.meets_loop_condition();
            Ok((
                FluxRow {
                    signature: config.signature(),
                    free_energy: f,
                    loop_condition: looped,
                    model_condition: config.meets_model_condition(),
                },
                looped,
            ))
        })
        .collect::<Result<_>>()?;
    let loop_values: Vec<f64> = evaluated.iter().filter(|r| r.1).map(|r| r.0.free_energy).collect();
    let mut rows: Vec<FluxRow> = evaluated.into_iter().map(|r| r.0).collect();
    rows.sort_by(|a, b| a.free_energy.total_cmp(&b.free_energy).then_with(|| a.signature.cmp(&b.signature)));
    let loop_free_energy = -flux_log_trace(&FluxConfig::loop_pi_flux(lattice), beta, t, u, mode)? / beta;
    let model_free_energy = -flux_log_trace(&FluxConfig::model_pi_flux(lattice), beta, t, u, mode)? / beta;
    let zero_flux_free_energy = -flux_log_trace(&FluxConfig::zero(lattice), beta, t, u, mode)? / beta;
    let loop_rank = 1 + rows.iter().filter(|r| r.free_energy < loop_free_energy - 1e-10).count();
    let spread = if loop_values.is_empty() {
        f64::NAN
    } else {
        loop_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - loop_values.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    Ok(FluxTable {
        side,
        beta,
        t,
        u,
        mode,
        min_free_energy: rows[0].free_energy,
        rows,
        loop_free_energy,
        model_free_energy,
        zero_flux_free_energy,
        loop_rank,
        loop_class_spread: spread,
    })
}

/// Gauge-invariance record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaugeReport {
    pub side: usize,
    pub mode: FluxMode,
    pub trials: usize,
    pub base_log_trace: f64,
    pub max_difference: f64,
}

/// Compares `log Tr e^{-beta H(phi)}` of a seeded random raw phase with the
/// traces of `trials` seeded random gauge transforms of it.
pub fn gauge_invariance_check(side: usize, beta: f64, t: f64, u: f64, mode: FluxMode, trials: usize, seed: u64) -> Result<GaugeReport> {
    let lattice = FluxLattice::new(side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = FluxConfig {
        lattice,
        phases: (0..lattice.bonds()).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
    };
    let reference = flux_log_trace(&base, beta, t, u, mode)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let theta: Vec<f64> = (0..lattice.sites()).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let moved = base.gauge(&theta);
        worst = worst.max((flux_log_trace(&moved, beta, t, u, mode)? - reference).abs());
    }
    Ok(GaugeReport {
        side,
        mode,
        trials,
        base_log_trace: reference,
        max_difference: worst,
    })
}

/// Offsets `e(rho)` placing band `rho` of the four-band cell on the doubled lattice.
pub const FOUR_BAND_OFFSETS: [[usize; 2]; 4] = [[0, 0], [1, 0], [0, 1], [1, 1]];

/// Single-particle matrix of the one-band model on the `2L x 2L` torus with
/// row- and column-dependent hoppings and a `pi` phase on vertical bonds
/// with odd `x1`.
pub fn doubled_lattice_hopping(side: usize, t: &HoppingParams) -> Result<DMatrix<C64>> {
    let lattice = FluxLattice::new(side)?;
    let n = lattice.sites();
    let mut m = DMatrix::from_element(n, n, zero());
    for b in 0..lattice.bonds() {
        let (tail, head) = lattice.endpoints(b);
        let (x1, x2) = lattice.coords(tail);
        let amp = if b % 2 == 0 {
            if x2 % 2 == 0 {
                t.t_he
            } else {
                t.t_ho
            }
        } else {
            let a = if x1 % 2 == 0 { t.t_ve } else { t.t_vo };
            if x1 % 2 == 1 {
                -a
            } else {
                a
            }
        };
        m[(head, tail)] += C64::new(amp, 0.0);
        m[(tail, head)] += C64::new(amp, 0.0);
    }
    Ok(m)
}

/// Comparison of the four-band model with the doubled one-band lattice.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EquivalenceReport {
    pub side: usize,
    /// `max |T_4(rho x, eta y) - T_1(G(rho, x), G(eta, y))|`.
    pub hopping_difference: f64,
    /// Log-traces of both interacting Hamiltonians (only when both fit the ED cap).
    pub log_trace_four_band: Option<f64>,
    pub log_trace_doubled: Option<f64>,
    pub relative_difference: Option<f64>,
}

/// Maps orbital `(rho, x)` of the four-band cell lattice of side `L` onto
/// site `2x + e(rho)` of the doubled lattice and compares hopping matrices
/// and, when the Fock space fits, interacting traces with `U` by sublattice
/// parity.
pub fn four_band_equivalence(side: usize, t: &HoppingParams, u: &CouplingParams, beta: f64) -> Result<EquivalenceReport> {
    let spec = geometry_spec(2, side, 4, beta)?;
    let table = HoppingTable::four_band(t);
    let four = table.real_space(&spec)?;
    let doubled = doubled_lattice_hopping(2 * side, t)?;
    let big = FluxLattice::new(2 * side)?;
    let sites = spec.sites();
    let g = |orbital: usize| {
        let band = orbital / sites;
        let c = spec.site_coords(orbital % sites);
        let off = FOUR_BAND_OFFSETS[band];
        big.site(2 * c[0] as usize + off[0], 2 * c[1] as usize + off[1])
    };
    let n = 4 * sites;
    let mut diff: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            diff = diff.max((four[(a, b)] - doubled[(g(a), g(b))]).norm());
        }
    }
    let mut report = EquivalenceReport {
        side,
        hopping_difference: diff,
        log_trace_four_band: None,
        log_trace_doubled: None,
        relative_difference: None,
    };
    if 2 * n <= MAX_FOCK_MODES {
        let ham4 = FockHamiltonian::lattice(&spec, &table, u, true)?;
        let l4 = SectorSpectrum::new(&ham4.h, &ham4.sectors())?.log_trace_exp(beta);
        let mut onsite = vec![zero(); big.sites()];
        for s in 0..big.sites() {
            let (x1, x2) = big.coords(s);
            let band = (x1 % 2) + 2 * (x2 % 2);
            onsite[s] = u.u[band];
        }
        let ham1 = FockHamiltonian::build(&doubled, &onsite, true)?;
        let l1 = SectorSpectrum::new(&ham1.h, &ham1.sectors())?.log_trace_exp(beta);
        report.log_trace_four_band = Some(l4);
        report.log_trace_doubled = Some(l1);
        report.relative_difference = Some(((l4.exp() - l1.exp()) / l1.exp()).abs());
    }
    Ok(report)
}

/// Grid of experiment cells for the convergence suite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    /// Doubling ladder of time-grid densities.
    pub h_values: Vec<f64>,
    /// `beta` of the partition-function tables (first entry used).
    pub beta_values: Vec<f64>,
    /// Side lengths of the partition-function tables (first entry used).
    pub side_values: Vec<usize>,
    /// Uniform coupling of the partition-function tables (first entry used).
    pub u_values: Vec<f64>,
    /// Non-integer temperatures for the integer-part comparison.
    pub fractional_betas: Vec<f64>,
    /// Temperatures of the covariance `L^1` slope table, run at `L = 2 beta`.
    pub slope_betas: Vec<f64>,
    /// Coupling order of the symmetric-formulation table.
    pub order: usize,
    /// Exact mode: algebra truncation is an error.
    pub exact: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            h_values: vec![2.0, 4.0, 8.0, 16.0],
            beta_values: vec![1.0],
            side_values: vec![1],
            u_values: vec![0.05],
            fractional_betas: vec![1.5, 2.25, 3.75],
            slope_betas: vec![2.0, 4.0, 8.0],
            order: 2,
            exact: true,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        for list in [&self.h_values, &self.beta_values, &self.u_values] {
            if list.is_empty() {
                return Err(EngineError::Config("experiment grid lists must be non-empty".into()));
            }
        }
        if self.side_values.is_empty() {
            return Err(EngineError::Config("experiment grid needs a side length".into()));
        }
        for w in self.h_values.windows(2) {
            if (w[1] - 2.0 * w[0]).abs() > 1e-12 {
                return Err(EngineError::Config("h values must double".into()));
            }
        }
        for &beta in &self.beta_values {
            for &h in &self.h_values {
                let half = beta * h / 2.0;
                if (half - half.round()).abs() > 1e-9 || half.round() < 1.0 {
                    return Err(EngineError::Config(format!("h = {h} is not in (2/beta)N for beta = {beta}")));
                }
            }
        }
        Ok(())
    }
}

/// One row of an `h` ladder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LadderRow {
    pub h: f64,
    pub value_re: f64,
    pub value_im: f64,
    pub reference_re: f64,
    pub reference_im: f64,
    pub error: f64,
    /// `error(h/2) / error(h)`, absent on the first row.
    pub ratio: Option<f64>,
    /// `error * h`.
    pub scaled: f64,
}

/// One row of the covariance `L^1` slope table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlopeRow {
    pub beta: f64,
    pub side: usize,
    pub integral: f64,
    pub per_beta: f64,
}

/// Tables of the convergence suite with per-cell failures.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceSuite {
    pub grassmann_vs_fock: Vec<LadderRow>,
    pub symmetric_vs_direct: Vec<LadderRow>,
    pub beta_integer: Vec<BetaIntegerRow>,
    pub covariance_slope: Vec<SlopeRow>,
    pub failures: Vec<String>,
}

fn fill_ratios(rows: &mut [LadderRow]) {
    for i in 1..rows.len() {
        let prev = rows[i - 1].error;
        rows[i].ratio = Some(if rows[i].error > 0.0 { prev / rows[i].error } else { f64::INFINITY });
    }
}

/// Runs the four tables: (i) discrete-time partition function against the
/// Fock ratio over `h`, (ii) symmetric against direct formulation over `h`,
/// (iii) the integer-temperature comparison, (iv) the covariance `L^1`
/// quantity divided by `beta`. Failing cells are recorded and skipped.
pub fn convergence_suite(grid: &ExperimentGrid, t: &HoppingParams) -> Result<ConvergenceSuite> {
    grid.validate()?;
    let table = HoppingTable::four_band(t);
    let beta = grid.beta_values[0];
    let side = grid.side_values[0];
    let u = CouplingParams::uniform(4, grid.u_values[0]);
    let mut failures = Vec::new();
    let mut first = Vec::new();
    let reference = geometry_spec(2, side, 4, beta).and_then(|s| interacting_trace(&s, &table, &u));
    match reference {
        Ok(fock) => {
            for &h in &grid.h_values {
                let cell = LatticeSpec::new(2, side, 4, beta, h).and_then(|spec| grassmann_partition(&spec, &table, &u, 8, 1e-10));
                match cell {
                    Ok(rep) => {
                        let v = rep.value();
                        let err = (v - fock.ratio).norm();
                        first.push(LadderRow {
                            h,
                            value_re: v.re,
                            value_im: v.im,
                            reference_re: fock.ratio,
                            reference_im: 0.0,
                            error: err,
                            ratio: None,
                            scaled: err * h,
                        });
                    }
                    Err(e) => failures.push(format!("grassmann_vs_fock h={h}: {e}")),
                }
            }
        }
        Err(e) => failures.push(format!("grassmann_vs_fock reference: {e}")),
    }
    fill_ratios(&mut first);
    let mut second = Vec::new();
    for &h in &grid.h_values {
        let cell = LatticeSpec::new(2, side, 4, beta, h).and_then(|spec| crate::rgflow::symmetric_formulation_gap(&spec, t, &u, grid.order));
        match cell {
            Ok(gap) => {
                let err = (gap.symmetric - gap.direct).norm();
                second.push(LadderRow {
                    h,
                    value_re: gap.symmetric.re,
                    value_im: gap.symmetric.im,
                    reference_re: gap.direct.re,
                    reference_im: gap.direct.im,
                    error: err,
                    ratio: None,
                    scaled: err * h,
                });
            }
            Err(e) => failures.push(format!("symmetric_vs_direct h={h}: {e}")),
        }
    }
    fill_ratios(&mut second);
    let beta_integer = match beta_integer_bound_check(2, side, &table, &u, &grid.fractional_betas) {
        Ok(rows) => rows,
        Err(e) => {
            failures.push(format!("beta_integer: {e}"));
            Vec::new()
        }
    };
    let mut slope = Vec::new();
    for &b in &grid.slope_betas {
        let side = (2.0 * b).round() as usize;
        match covariance_l1_quantity(&table, b, side, 64 * b.ceil() as usize) {
            Ok(v) => slope.push(SlopeRow {
                beta: b,
                side,
                integral: v,
                per_beta: v / b,
            }),
            Err(e) => failures.push(format!("covariance_slope beta={b}: {e}")),
        }
    }
    Ok(ConvergenceSuite {
        grassmann_vs_fock: first,
        symmetric_vs_direct: second,
        beta_integer,
        covariance_slope: slope,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::full_covariance_closed_form;

    fn four_band_spec(h: f64) -> LatticeSpec {
        LatticeSpec::new(2, 1, 4, 1.0, h).unwrap()
    }

    #[test]
    fn zero_dispersion_trace_is_the_fock_dimension() {
        let spec = LatticeSpec::new(2, 2, 1, 1.7, 2.0 / 1.7).unwrap();
        let tr = free_trace(&spec, &HoppingTable::zero(1, 2)).unwrap();
        assert!((tr - 256.0).abs() < 1e-9);
    }

    #[test]
    fn free_trace_matches_exact_diagonalization() {
        for (table, side) in [
            (HoppingTable::nearest_neighbor(2, 1.0), 2usize),
            (HoppingTable::four_band(&HoppingParams::new(1.0, 0.8, 0.9, 0.7).unwrap()), 1),
        ] {
            for beta in [1.0, 2.0] {
                let spec = geometry_spec(2, side, table.bands, beta).unwrap();
                let formula = free_log_trace(&spec, &table).unwrap();
                let ed = free_log_trace_ed(&spec, &table).unwrap();
                assert!(((formula - ed).exp() - 1.0).abs() < 1e-10, "{formula} vs {ed}");
            }
        }
    }

    #[test]
    fn zero_coupling_ratio_is_one() {
        let spec = four_band_spec(2.0);
        let table = HoppingTable::four_band(&HoppingParams::uniform(1.0));
        let r = interacting_trace(&spec, &table, &CouplingParams::uniform(4, 0.0)).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-12);
        let p = transfer_partition(&spec, &table, &CouplingParams::uniform(4, 0.0)).unwrap();
        assert!((p - 1.0).norm() < 1e-12);
    }

    #[test]
    fn three_partition_routes_agree_at_h_two() {
        let spec = four_band_spec(2.0);
        let table = HoppingTable::four_band(&HoppingParams::new(1.0, 0.9, 0.8, 1.1).unwrap());
        let u = CouplingParams::real(&[0.3, -0.2, 0.5, 0.1]);
        let brute = brute_partition(&spec, &table, &u).unwrap();
        let factored = grassmann_partition(&spec, &table, &u, 8, 0.0).unwrap().value();
        let transfer = transfer_partition(&spec, &table, &u).unwrap();
        assert!((brute - factored).norm() < 1e-11, "{brute} vs {factored}");
        assert!((brute - transfer).norm() < 1e-11, "{brute} vs {transfer}");
    }

    #[test]
    fn fock_two_point_matches_covariance() {
        let spec = LatticeSpec::new(2, 2, 1, 1.0, 4.0).unwrap();
        let table = HoppingTable::nearest_neighbor(2, 1.0);
        let cov = full_covariance_closed_form(&spec, &table).unwrap();
        let prop = FockPropagator::new(&spec, &table).unwrap();
        let mut worst: f64 = 0.0;
        for xu in (0..cov.size()).step_by(3) {
            for yu in (0..cov.size()).step_by(5) {
                let (x, y) = (spec.unsigned_at(xu), spec.unsigned_at(yu));
                if x.spin != y.spin {
                    continue;
                }
                worst = worst.max((prop.value(&x, &y) - cov.entry(xu, yu)).norm());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn a1_closed_form_and_contour_agree_with_graded_integration() {
        let spec = four_band_spec(4.0);
        let table = HoppingTable::four_band(&HoppingParams::uniform(1.0));
        let cov = full_covariance(&spec, &table).unwrap();
        let u = CouplingParams::real(&[0.2, -0.1, 0.05, 0.3]);
        let graded = perturbative_coefficients(&spec, &cov, &u, 2).unwrap();
        let closed = a1_closed_form(&cov, &u);
        assert!((graded[1] - closed).norm() < 1e-12);
        let contour = perturbative_coefficients_contour(&spec, &table, &u, 2, 32, 0.2).unwrap();
        assert!((graded[1] - contour[1]).norm() < 1e-10);
        assert!((graded[2] - contour[2]).norm() < 1e-9);
    }

    #[test]
    fn coefficients_are_homogeneous_in_the_coupling() {
        let spec = four_band_spec(2.0);
        let cov = full_covariance(&spec, &HoppingTable::four_band(&HoppingParams::uniform(1.0))).unwrap();
        let u = CouplingParams::real(&[0.2, -0.1, 0.05, 0.3]);
        let a = perturbative_coefficients(&spec, &cov, &u, 2).unwrap();
        let b = perturbative_coefficients(&spec, &cov, &u.scaled(3.0), 2).unwrap();
        for n in 1..=2 {
            assert!((b[n] - a[n] * 3f64.powi(n as i32)).norm() < 1e-12 * (1.0 + b[n].norm()));
        }
    }

    #[test]
    fn half_filling_holds_with_the_counterterm_only() {
        let spec = four_band_spec(2.0);
        let table = HoppingTable::four_band(&HoppingParams::new(1.0, 0.7, 0.9, 0.8).unwrap());
        let samples = random_couplings(4, 2, 7);
        assert!(half_filling_check(&spec, &table, &samples, true).unwrap() < 1e-9);
        assert!(half_filling_check(&spec, &table, &samples, false).unwrap() > 1e-3);
    }

    #[test]
    fn pi_flux_configurations_meet_their_conditions() {
        for side in [2usize, 4, 6, 8] {
            let lat = FluxLattice::new(side).unwrap();
            assert_eq!(lat.free_bonds().len(), side * side + 1);
            assert!(FluxConfig::loop_pi_flux(lat).meets_loop_condition());
            assert!(FluxConfig::model_pi_flux(lat).meets_model_condition());
        }
    }

    #[test]
    fn gauge_transforms_keep_the_trace() {
        let free = gauge_invariance_check(4, 1.0, 1.0, 0.0, FluxMode::Free, 5, 3).unwrap();
        assert!(free.max_difference < 1e-10);
        let ed = gauge_invariance_check(2, 1.0, 1.0, 1.0, FluxMode::Interacting, 3, 3).unwrap();
        assert!(ed.max_difference < 1e-10);
    }

    #[test]
    fn four_band_model_is_the_doubled_lattice() {
        let t = HoppingParams::new(1.0, 0.8, 0.9, 0.7).unwrap();
        let u = CouplingParams::real(&[0.4, -0.3, 0.2, 0.6]);
        let one = four_band_equivalence(1, &t, &u, 1.0).unwrap();
        assert!(one.hopping_difference < 1e-14);
        assert!(one.relative_difference.unwrap() < 1e-10);
        let two = four_band_equivalence(2, &t, &u, 1.0).unwrap();
        assert!(two.hopping_difference < 1e-14);
    }

    #[test]
    fn pair_contractions_match_the_determinant_integral() {
        let spec = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
        let cov = full_covariance(&spec, &HoppingTable::nearest_neighbor(1, 0.6)).unwrap();
        for positions in [vec![0, 3], vec![1, 2], vec![0, 2, 5, 7], vec![0, 1, 4, 6, 9, 11], vec![0, 2]] {
            let direct = crate::grassmann::monomial_integral(&positions, &cov);
            assert!((pair_contraction_sum(&positions, &cov) - direct).norm() < 1e-14, "{positions:?}");
        }
    }

    #[test]
    fn integer_temperature_bound_holds() {
        let table = HoppingTable::four_band(&HoppingParams::uniform(1.0));
        let rows = beta_integer_bound_check(2, 1, &table, &CouplingParams::uniform(4, 0.5), &[1.5, 2.5]).unwrap();
        assert!(rows.iter().all(|r| r.pass));
    }
}
