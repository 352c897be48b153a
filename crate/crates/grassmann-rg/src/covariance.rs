//! Covariance matrices on the unsigned index set `I_0`.
//!
//! Every covariance of the formulation is a sum over the Matsubara grid
//! `M_h` and the momentum lattice of a `b x b` symbol. The builders evaluate
//! the symbol once per `(omega, k)` point, reduce it to a table indexed by the
//! band pair, the spatial difference and the time difference, and then
//! materialize the dense `I_0 x I_0` matrix. The full covariance also has an
//! independent closed-form route through the spectral decomposition of the
//! real-space hopping matrix.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutoff::{chi_ir, chi_ir_hat, chi_uv, phi_uv, GevreyBump, ScaleParams};
use crate::grassmann::{small_det, DistanceTable, NormWeight, TransformRQ};
use crate::lattice_index::{LatticeSpec, Spin};
use crate::model::{operator_norm, HoppingTable};
use crate::{EngineError, Result, C64};

/// Which covariance a matrix represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Full,
    Le0Plus,
    Gt0Plus,
    Gt0Minus,
    Le0Infty,
    Gt0PlusH,
    Identity,
    UvSlice { l: i64, plus: bool },
    IrSlice { l: i64 },
    Custom,
}

/// A dense covariance `C : I_0 x I_0 -> C` in the global index order.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub kind: CovarianceKind,
    pub spec: LatticeSpec,
    pub matrix: DMatrix<C64>,
    /// Whether entries between different spins are known to vanish.
    pub spin_diagonal: bool,
    spins: Vec<Spin>,
}

impl Covariance {
    /// Wraps a dense matrix. The matrix must be `|I_0| x |I_0|`.
    pub fn from_matrix(kind: CovarianceKind, spec: LatticeSpec, matrix: DMatrix<C64>, spin_diagonal: bool) -> Covariance {
        let n = spec.unsigned_count();
        assert_eq!(matrix.nrows(), n, "covariance rows must match |I_0|");
        assert_eq!(matrix.ncols(), n, "covariance columns must match |I_0|");
        let spins = (0..n).map(|u| spec.unsigned_at(u).spin).collect();
        Covariance {
            kind,
            spec,
            matrix,
            spin_diagonal,
            spins,
        }
    }

    /// `C(X, Y)` for unsigned positions.
    pub fn entry(&self, x: usize, y: usize) -> C64 {
        self.matrix[(x, y)]
    }

    pub fn spin_of(&self, u: usize) -> Spin {
        self.spins[u]
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Antisymmetric extension on signed positions:
    /// `C~((X,bar),(Y,plain)) = C(X,Y)/2`, `C~((Y,plain),(X,bar)) = -C(X,Y)/2`,
    /// zero between equal charges.
    pub fn antisym(&self, p: usize, q: usize) -> C64 {
        match (p % 2, q % 2) {
            (0, 1) => self.matrix[(p / 2, q / 2)] * 0.5,
            (1, 0) => -self.matrix[(q / 2, p / 2)] * 0.5,
            _ => C64::new(0.0, 0.0),
        }
    }

    /// Entrywise sum, tagged as custom.
    pub fn plus(&self, other: &Covariance) -> Covariance {
        Covariance::from_matrix(
            CovarianceKind::Custom,
            self.spec.clone(),
            &self.matrix + &other.matrix,
            self.spin_diagonal && other.spin_diagonal,
        )
    }

    /// Entrywise difference, tagged as custom.
    pub fn minus(&self, other: &Covariance) -> Covariance {
        Covariance::from_matrix(
            CovarianceKind::Custom,
            self.spec.clone(),
            &self.matrix - &other.matrix,
            self.spin_diagonal && other.spin_diagonal,
        )
    }

    /// `max |C(X,Y) - D(X,Y)|`.
    pub fn max_diff(&self, other: &Covariance) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entry between different spins.
    pub fn spin_offdiagonal_max(&self) -> f64 {
        let n = self.size();
        let mut worst: f64 = 0.0;
        for x in 0..n {
            for y in 0..n {
                if self.spins[x] != self.spins[y] {
                    worst = worst.max(self.matrix[(x, y)].norm());
                }
            }
        }
        worst
    }
}

/// Whether the momentum phase is `e^{-i<x-y,k>}` paired with the entrywise
/// conjugate dispersion, or `e^{+i<x-y,k>}` paired with `E(k)` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentumConvention {
    Conjugate,
    Direct,
}

/// One `(omega, k)` symbol block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymbolBlock {
    pub omega: f64,
    pub k: Vec<f64>,
    pub rho: usize,
    pub eta: usize,
    pub re: f64,
    pub im: f64,
}

/// Symbols on the grid `M_h x Gamma^*`, in frequency-major order.
struct SymbolGrid {
    points: Vec<(f64, Vec<f64>)>,
    blocks: Vec<Option<DMatrix<C64>>>,
}

fn zero_matrix(n: usize) -> DMatrix<C64> {
    DMatrix::from_element(n, n, C64::new(0.0, 0.0))
}

/// `f(A)` for a hermitian `A` by spectral decomposition.
pub fn hermitian_function(a: &DMatrix<C64>, f: impl Fn(f64) -> C64) -> DMatrix<C64> {
    let eig = a.clone().symmetric_eigen();
    let u = &eig.eigenvectors;
    let n = a.nrows();
    let mut d = zero_matrix(n);
    for i in 0..n {
        d[(i, i)] = f(eig.eigenvalues[i]);
    }
    u * d * u.adjoint()
}

/// Inverse of a small matrix; a numeric error is raised when it is singular.
pub fn invert(a: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    a.clone()
        .try_inverse()
        .ok_or_else(|| EngineError::Numeric("singular matrix in a covariance symbol".into()))
}

fn grid_points(spec: &LatticeSpec) -> Vec<(f64, Vec<f64>)> {
    let momenta = spec.momenta();
    spec.matsubara_h()
        .into_iter()
        .flat_map(|w| momenta.iter().map(move |k| (w, k.clone())))
        .collect()
}

fn dispersion(table: &HoppingTable, k: &[f64], convention: MomentumConvention) -> DMatrix<C64> {
    let e = table.matrix(k);
    match convention {
        MomentumConvention::Conjugate => e.map(|z| z.conj()),
        MomentumConvention::Direct => e,
    }
}

fn evaluate_symbols(
    spec: &LatticeSpec,
    symbol: &(dyn Fn(f64, &[f64]) -> Result<Option<DMatrix<C64>>> + Sync),
) -> Result<SymbolGrid> {
    let points = grid_points(spec);
    let blocks: Result<Vec<Option<DMatrix<C64>>>> = points.par_iter().map(|(w, k)| symbol(*w, k)).collect();
    Ok(SymbolGrid {
        points,
        blocks: blocks?,
    })
}

/// Reduces a symbol grid to the dense covariance
/// `C(rho x s t, eta y s t') = (1/(beta L^d)) sum e^{-+i<x-y,k>} e^{i(t-t')omega/h} S(omega,k)(rho,eta)`.
fn assemble(spec: &LatticeSpec, kind: CovarianceKind, grid: &SymbolGrid, convention: MomentumConvention) -> Covariance {
    let b = spec.bands;
    let sites = spec.sites();
    let nt = spec.time_slices() as i64;
    let span = (2 * nt - 1) as usize;
    let vol = spec.beta * sites as f64;
    let coords: Vec<Vec<i64>> = (0..sites).map(|s| spec.site_coords(s)).collect();
    let k_sign = match convention {
        MomentumConvention::Conjugate => -1.0,
        MomentumConvention::Direct => 1.0,
    };
    let active: Vec<(usize, &DMatrix<C64>)> = grid
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.as_ref().map(|m| (i, m)))
        .collect();
    // table[((rho*b + eta)*sites + dsite)*span + (dt + nt - 1)]
    let table: Vec<C64> = (0..b * b * sites * span)
        .into_par_iter()
        .map(|idx| {
            let dt = (idx % span) as i64 - (nt - 1);
            let rest = idx / span;
            let dsite = rest % sites;
            let pair = rest / sites;
            let (rho, eta) = (pair / b, pair % b);
            let tau = dt as f64 / spec.h;
            let mut acc = C64::new(0.0, 0.0);
            for &(i, m) in &active {
                let (w, k) = &grid.points[i];
                let kd: f64 = k.iter().zip(&coords[dsite]).map(|(kj, c)| kj * *c as f64).sum();
                acc += C64::from_polar(1.0, k_sign * kd + tau * w) * m[(rho, eta)];
            }
            acc / vol
        })
        .collect();
    let n = spec.unsigned_count();
    let mut matrix = zero_matrix(n);
    let units: Vec<_> = (0..n).map(|u| spec.unsigned_at(u)).collect();
    for (xu, x) in units.iter().enumerate() {
        for (yu, y) in units.iter().enumerate() {
            if x.spin != y.spin {
                continue;
            }
            let diff: Vec<i64> = coords[x.site].iter().zip(&coords[y.site]).map(|(a, c)| a - c).collect();
            let dsite = spec.site_from_coords(&diff);
            let dt = x.time - y.time;
            let idx = ((x.band * b + y.band) * sites + dsite) * span + (dt + nt - 1) as usize;
            matrix[(xu, yu)] = table[idx];
        }
    }
    Covariance::from_matrix(kind, spec.clone(), matrix, true)
}

/// Covariance from an arbitrary symbol on `M_h x Gamma^*`, with `None`
/// marking points where the symbol vanishes.
pub fn covariance_from_symbol(
    spec: &LatticeSpec,
    kind: CovarianceKind,
    convention: MomentumConvention,
    symbol: &(dyn Fn(f64, &[f64]) -> Result<Option<DMatrix<C64>>> + Sync),
) -> Result<Covariance> {
    spec.validate()?;
    let grid = evaluate_symbols(spec, symbol)?;
    Ok(assemble(spec, kind, &grid, convention))
}

fn check_table(spec: &LatticeSpec, table: &HoppingTable) -> Result<()> {
    spec.validate()?;
    table.validate()?;
    if table.bands != spec.bands || table.dim != spec.dim {
        return Err(EngineError::Config("dispersion table does not match the lattice".into()));
    }
    Ok(())
}

/// `h^{-1} (I - e^{-i omega/h} e^{E/h})^{-1}`.
fn forward_symbol(e: &DMatrix<C64>, omega: f64, h: f64) -> Result<DMatrix<C64>> {
    let b = e.nrows();
    let expo = hermitian_function(e, |lam| C64::from_polar((lam / h).exp(), -omega / h));
    invert(&(DMatrix::identity(b, b) - expo)).map(|m| m / C64::new(h, 0.0))
}

/// `h^{-1} (e^{i omega/h} e^{-E/h} - I)^{-1}`.
fn backward_symbol(e: &DMatrix<C64>, omega: f64, h: f64) -> Result<DMatrix<C64>> {
    let b = e.nrows();
    let expo = hermitian_function(e, |lam| C64::from_polar((-lam / h).exp(), omega / h));
    invert(&(expo - DMatrix::identity(b, b))).map(|m| m / C64::new(h, 0.0))
}

/// `(i omega - E)^{-1}`.
pub fn resolvent(e: &DMatrix<C64>, omega: f64) -> Result<DMatrix<C64>> {
    let b = e.nrows();
    let m = DMatrix::identity(b, b) * C64::new(0.0, omega) - e;
    invert(&m)
}

/// Full covariance from the Matsubara sum on `M_h x Gamma^*`.
pub fn full_covariance(spec: &LatticeSpec, table: &HoppingTable) -> Result<Covariance> {
    check_table(spec, table)?;
    let h = spec.h;
    let grid = evaluate_symbols(spec, &|w, k| {
        let e = dispersion(table, k, MomentumConvention::Conjugate);
        forward_symbol(&e, w, h).map(Some)
    })?;
    Ok(assemble(spec, CovarianceKind::Full, &grid, MomentumConvention::Conjugate))
}

/// `e^{tau lam} / (1 + e^{sign beta lam})` evaluated without overflow.
fn thermal_weight(tau: f64, lam: f64, beta: f64, sign: f64) -> f64 {
    let a = sign * beta * lam;
    if a > 0.0 {
        (tau * lam - a).exp() / (1.0 + (-a).exp())
    } else {
        (tau * lam).exp() / (1.0 + a.exp())
    }
}

/// Continuous-time two-point function from the real-space hopping matrix:
/// `C(X,Y) = [e^{tau T}(I + e^{beta T})^{-1}]_{Y,X}` for `tau = s - t >= 0` and
/// `-[e^{tau T}(I + e^{-beta T})^{-1}]_{Y,X}` otherwise.
pub struct ClosedFormPropagator {
    values: Vec<f64>,
    vectors: DMatrix<C64>,
    beta: f64,
}

impl ClosedFormPropagator {
    pub fn new(spec: &LatticeSpec, table: &HoppingTable) -> Result<ClosedFormPropagator> {
        check_table(spec, table)?;
        let t = table.real_space(spec)?;
        let eig = t.symmetric_eigen();
        Ok(ClosedFormPropagator {
            values: eig.eigenvalues.iter().cloned().collect(),
            vectors: eig.eigenvectors,
            beta: spec.beta,
        })
    }

    /// `C` between orbitals `a = band*sites+site` (creation side) and `b` at
    /// real time difference `tau = s - t` in `(-beta, beta)`.
    pub fn value(&self, a: usize, b: usize, tau: f64) -> C64 {
        let sign = if tau >= 0.0 { 1.0 } else { -1.0 };
        let mut acc = C64::new(0.0, 0.0);
        for (i, &lam) in self.values.iter().enumerate() {
            let w = thermal_weight(tau, lam, self.beta, sign);
            acc += self.vectors[(b, i)] * self.vectors[(a, i)].conj() * w;
        }
        acc * sign
    }
}

/// Full covariance from the closed form at the grid times.
pub fn full_covariance_closed_form(spec: &LatticeSpec, table: &HoppingTable) -> Result<Covariance> {
    let prop = ClosedFormPropagator::new(spec, table)?;
    let n = spec.unsigned_count();
    let sites = spec.sites();
    let units: Vec<_> = (0..n).map(|u| spec.unsigned_at(u)).collect();
    let rows: Vec<Vec<C64>> = units
        .par_iter()
        .map(|x| {
            units
                .iter()
                .map(|y| {
                    if x.spin != y.spin {
                        return C64::new(0.0, 0.0);
                    }
                    let tau = spec.time_value(x.time - y.time);
                    prop.value(x.band * sites + x.site, y.band * sites + y.site, tau)
                })
                .collect()
        })
        .collect();
    let matrix = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    Ok(Covariance::from_matrix(CovarianceKind::Full, spec.clone(), matrix, true))
}

/// The identity covariance `I(X,Y) = 1_{X=Y}`.
pub fn identity_covariance(spec: &LatticeSpec) -> Covariance {
    let n = spec.unsigned_count();
    Covariance::from_matrix(CovarianceKind::Identity, spec.clone(), DMatrix::identity(n, n), true)
}

/// The six covariances of the symmetric formulation, built with `chi_{h,0}`.
#[derive(Debug, Clone)]
pub struct SlicedFamily {
    pub full: Covariance,
    pub le0_plus: Covariance,
    pub gt0_plus: Covariance,
    pub gt0_minus: Covariance,
    pub le0_infty: Covariance,
    pub gt0_plus_h: Covariance,
    pub identity: Covariance,
}

/// `C_{<=0}^+`, `C_{>0}^+`, `C_{>0}^-` sliced by `chi_{h,0}`, the
/// continuum-resolvent `C_{<=0}^infty`, the corrected `C_{>0}^{+(h)}` and `I`.
pub fn sliced_covariances(spec: &LatticeSpec, table: &HoppingTable, bump: &GevreyBump, params: &ScaleParams) -> Result<SlicedFamily> {
    check_table(spec, table)?;
    let h = spec.h;
    let chi0 = |w: f64| chi_uv(bump, params, h, 0, w);
    let conv = MomentumConvention::Conjugate;
    let le0 = evaluate_symbols(spec, &|w, k| {
        let c = chi0(w)?;
        if c == 0.0 {
            return Ok(None);
        }
        let e = dispersion(table, k, conv);
        forward_symbol(&e, w, h).map(|m| Some(m * C64::new(c, 0.0)))
    })?;
    let gt0p = evaluate_symbols(spec, &|w, k| {
        let c = 1.0 - chi0(w)?;
        if c == 0.0 {
            return Ok(None);
        }
        let e = dispersion(table, k, conv);
        forward_symbol(&e, w, h).map(|m| Some(m * C64::new(c, 0.0)))
    })?;
    let gt0m = evaluate_symbols(spec, &|w, k| {
        let c = 1.0 - chi0(w)?;
        if c == 0.0 {
            return Ok(None);
        }
        let e = dispersion(table, k, conv);
        backward_symbol(&e, w, h).map(|m| Some(m * C64::new(c, 0.0)))
    })?;
    let infty = evaluate_symbols(spec, &|w, k| {
        let c = phi_uv(bump, params, w);
        if c == 0.0 {
            return Ok(None);
        }
        let e = dispersion(table, k, conv);
        resolvent(&e, w).map(|m| Some(m * C64::new(c, 0.0)))
    })?;
    let full = full_covariance(spec, table)?;
    let le0_plus = assemble(spec, CovarianceKind::Le0Plus, &le0, conv);
    let gt0_plus = assemble(spec, CovarianceKind::Gt0Plus, &gt0p, conv);
    let gt0_minus = assemble(spec, CovarianceKind::Gt0Minus, &gt0m, conv);
    let le0_infty = assemble(spec, CovarianceKind::Le0Infty, &infty, conv);
    let mut gt0_plus_h = gt0_plus.clone();
    gt0_plus_h.kind = CovarianceKind::Gt0PlusH;
    let correction = local_cutoff_correction(spec, bump, params)?;
    let n = spec.unsigned_count();
    let units: Vec<_> = (0..n).map(|u| spec.unsigned_at(u)).collect();
    let nt = spec.time_slices() as i64;
    for (xu, x) in units.iter().enumerate() {
        for (yu, y) in units.iter().enumerate() {
            if x.band == y.band && x.site == y.site && x.spin == y.spin {
                gt0_plus_h.matrix[(xu, yu)] += correction[(x.time - y.time + nt - 1) as usize];
            }
        }
    }
    Ok(SlicedFamily {
        full,
        le0_plus,
        gt0_plus,
        gt0_minus,
        le0_infty,
        gt0_plus_h,
        identity: identity_covariance(spec),
    })
}

/// `(1/(beta h)) sum_{omega in M_h} e^{i tau omega} chi_{h,0}(omega)` for every
/// tick difference in `-(beta h - 1) ..= beta h - 1`.
pub fn local_cutoff_correction(spec: &LatticeSpec, bump: &GevreyBump, params: &ScaleParams) -> Result<Vec<C64>> {
    let nt = spec.time_slices() as i64;
    let omegas = spec.matsubara_h();
    let chis: Vec<f64> = omegas
        .iter()
        .map(|&w| chi_uv(bump, params, spec.h, 0, w))
        .collect::<Result<_>>()?;
    Ok((-(nt - 1)..nt)
        .map(|dt| {
            let tau = dt as f64 / spec.h;
            let s: C64 = omegas
                .iter()
                .zip(&chis)
                .map(|(w, c)| C64::from_polar(*c, tau * w))
                .sum();
            s / (spec.beta * spec.h)
        })
        .collect())
}

/// Ultraviolet slice `C_l^+` (`plus = true`) or `C_l^-` for `l` in `1..=N_h`.
pub fn uv_slice(spec: &LatticeSpec, table: &HoppingTable, bump: &GevreyBump, params: &ScaleParams, l: i64, plus: bool) -> Result<Covariance> {
    check_table(spec, table)?;
    if l < 1 || l > params.n_h {
        return Err(EngineError::Domain(format!("ultraviolet slice {l} outside 1..={}", params.n_h)));
    }
    let h = spec.h;
    let conv = MomentumConvention::Conjugate;
    let grid = evaluate_symbols(spec, &|w, k| {
        let c = chi_uv(bump, params, h, l, w)?;
        if c == 0.0 {
            return Ok(None);
        }
        let e = dispersion(table, k, conv);
        let m = if plus {
            forward_symbol(&e, w, h)?
        } else {
            backward_symbol(&e, w, h)?
        };
        Ok(Some(m * C64::new(c, 0.0)))
    })?;
    Ok(assemble(spec, CovarianceKind::UvSlice { l, plus }, &grid, conv))
}

/// Self-energy insertion `E_l(omega, k)`.
pub type SelfEnergy<'a> = dyn Fn(f64, &[f64]) -> DMatrix<C64> + Sync + 'a;

/// Worst Neumann ratio `||(i omega - E)^{-1} E_l||` and inverse bound
/// `||(i omega - E - E_l)^{-1}|| M^l` over the support of `chi_l`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IrSliceReport {
    pub l: i64,
    pub support_points: usize,
    pub neumann_max: f64,
    pub inverse_bound_max: f64,
}

/// Infrared slice `C_l` with the self-energy `E_l` inserted,
/// `(1/(beta L^2)) sum e^{i<x-y,k>} e^{i(x-y)omega} chi_l (i omega - E - E_l)^{-1}`.
pub fn ir_slice(
    spec: &LatticeSpec,
    table: &HoppingTable,
    bump: &GevreyBump,
    params: &ScaleParams,
    f_t: f64,
    l: i64,
    self_energy: &SelfEnergy<'_>,
) -> Result<(Covariance, IrSliceReport)> {
    check_table(spec, table)?;
    if l > 0 || l < params.n_beta {
        return Err(EngineError::Domain(format!("infrared slice {l} outside {}..=0", params.n_beta)));
    }
    let conv = MomentumConvention::Direct;
    let stats: Vec<(f64, Vec<f64>, f64, f64)> = grid_points(spec)
        .par_iter()
        .map(|(w, k)| -> Result<Option<(f64, Vec<f64>, f64, f64)>> {
            if chi_ir(bump, params, f_t, l, *w, k)? == 0.0 {
                return Ok(None);
            }
            let e = dispersion(table, k, conv);
            let el = self_energy(*w, k);
            let free = resolvent(&e, *w)?;
            let neumann = operator_norm(&(&free * &el));
            let full = resolvent(&(&e + &el), *w)?;
            Ok(Some((*w, k.clone(), neumann, operator_norm(&full) * params.m.powi(l as i32))))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if let Some((w, k, ratio, _)) = stats.iter().find(|s| !(s.2 < 1.0)) {
        return Err(EngineError::FlowAbort(format!(
            "self-energy too large at scale {l}: Neumann ratio {ratio:.3e} at omega = {w}, k = {k:?}"
        )));
    }
    let grid = evaluate_symbols(spec, &|w, k| {
        let c = chi_ir(bump, params, f_t, l, w, k)?;
        if c == 0.0 {
            return Ok(None);
        }
        let e = dispersion(table, k, conv) + self_energy(w, k);
        resolvent(&e, w).map(|m| Some(m * C64::new(c, 0.0)))
    })?;
    let report = IrSliceReport {
        l,
        support_points: stats.len(),
        neumann_max: stats.iter().map(|s| s.2).fold(0.0, f64::max),
        inverse_bound_max: stats.iter().map(|s| s.3).fold(0.0, f64::max),
    };
    Ok((assemble(spec, CovarianceKind::IrSlice { l }, &grid, conv), report))
}

/// Free infrared slice (no self-energy).
pub fn free_ir_slice(spec: &LatticeSpec, table: &HoppingTable, bump: &GevreyBump, params: &ScaleParams, f_t: f64, l: i64) -> Result<Covariance> {
    let b = spec.bands;
    ir_slice(spec, table, bump, params, f_t, l, &|_, _| zero_matrix(b)).map(|r| r.0)
}

/// Effective dispersion `E_l = sum_{j=0}^{l} chi-hat_{<=j} W-hat^j` from the
/// stored kernels, with `kernels[i]` belonging to scale `-i`.
pub fn effective_dispersion(
    bump: &GevreyBump,
    params: &ScaleParams,
    f_t: f64,
    kernels: &[crate::grassmann::MomentumKernel],
    omega: f64,
    k: &[f64],
) -> DMatrix<C64> {
    let b = kernels.first().map(|w| w.bands).unwrap_or(0);
    let mut acc = zero_matrix(b);
    for (i, w) in kernels.iter().enumerate() {
        let j = -(i as i64);
        let c = chi_ir_hat(bump, params, f_t, j, omega, k);
        if c != 0.0 {
            acc += w.eval_extended(omega, k) * C64::new(c, 0.0);
        }
    }
    acc
}

/// `||C~||_{l,0}` (or the first-moment semi-norm) with the weight of `weight`:
/// `sup_X (1/h) sum_Y [d_j(X,Y)] e^{sum_j (w d_j(X,Y))^r} |C~(X,Y)|`.
pub fn covariance_norm(cov: &Covariance, dist: &DistanceTable, weight: NormWeight, first_moment: bool) -> f64 {
    let spec = &cov.spec;
    let n = spec.signed_count();
    let axes = dist.axes();
    (0..n)
        .into_par_iter()
        .map(|p| {
            let mut plain = 0.0;
            let mut moments = vec![0.0; axes];
            for q in 0..n {
                let v = cov.antisym(p, q).norm();
                if v == 0.0 {
                    continue;
                }
                let wgt = dist.weight(weight.w, weight.exponent, p, q) * v;
                plain += wgt;
                for (j, m) in moments.iter_mut().enumerate() {
                    *m += dist.get(j, p, q) * wgt;
                }
            }
            if first_moment {
                moments.into_iter().fold(0.0, f64::max) / spec.h
            } else {
                plain / spec.h
            }
        })
        .reduce(|| 0.0, f64::max)
}

/// Symmetry residual of a covariance under a substitution map:
/// `max |C~(X,Y) - e^{i(Q(SX)+Q(SY))} D~(SX,SY)|`, with the right side
/// conjugated for the conjugate-type maps. `partner` is `D`; for most maps it
/// is the covariance itself.
pub fn covariance_symmetry_check(cov: &Covariance, partner: &Covariance, t: &TransformRQ) -> f64 {
    let n = cov.spec.signed_count();
    (0..n)
        .into_par_iter()
        .map(|p| {
            let mut worst: f64 = 0.0;
            for q in 0..n {
                let phase = TransformRQ::phase_factor(t.phase[p] + t.phase[q]);
                let mut rhs = phase * partner.antisym(t.target[p], t.target[q]);
                if t.conjugate {
                    rhs = rhs.conj();
                }
                worst = worst.max((cov.antisym(p, q) - rhs).norm());
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Result of the randomized determinant-bound probe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GramReport {
    pub seed: u64,
    pub trials: usize,
    pub inner_dim: usize,
    /// `(n, max over trials of |det|^{1/n})`.
    pub per_order: Vec<(usize, f64)>,
    /// Largest value over all orders.
    pub plateau: f64,
}

fn random_unit(rng: &mut ChaCha8Rng, r: usize) -> Vec<C64> {
    let v: Vec<C64> = (0..r)
        .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|z| z / norm.max(1e-300)).collect()
}

/// Samples `|det(<p_i,q_j> C(X_i,Y_j))|^{1/n}` for random unit vectors and
/// index tuples from a seeded stream.
pub fn gram_bound_probe(cov: &Covariance, n_max: usize, trials: usize, seed: u64) -> Result<GramReport> {
    if n_max == 0 || n_max > 8 {
        return Err(EngineError::Config(format!("probe order {n_max} must lie in 1..=8")));
    }
    let inner_dim = 3;
    let size = cov.size();
    let mut per_order = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n as u64));
        let mut best: f64 = 0.0;
        for _ in 0..trials {
            let xs: Vec<usize> = (0..n).map(|_| rng.random_range(0..size)).collect();
            let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..size)).collect();
            let ps: Vec<Vec<C64>> = (0..n).map(|_| random_unit(&mut rng, inner_dim)).collect();
            let qs: Vec<Vec<C64>> = (0..n).map(|_| random_unit(&mut rng, inner_dim)).collect();
            let mut a = vec![C64::new(0.0, 0.0); n * n];
            for i in 0..n {
                for j in 0..n {
                    let inner: C64 = ps[i].iter().zip(&qs[j]).map(|(p, q)| p.conj() * q).sum();
                    a[i * n + j] = inner * cov.entry(xs[i], ys[j]);
                }
            }
            let d = small_det(&mut a, n).norm();
            best = best.max(d.powf(1.0 / n as f64));
        }
        per_order.push((n, best));
    }
    let plateau = per_order.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GramReport {
        seed,
        trials,
        inner_dim,
        per_order,
        plateau,
    })
}

/// `int_0^beta dx sum_x ||C(. x s x, . 0 s 0)||` for the continuous-time free
/// covariance on a periodic box of side `side`, by the midpoint rule with
/// `time_points` nodes.
pub fn covariance_l1_quantity(table: &HoppingTable, beta: f64, side: usize, time_points: usize) -> Result<f64> {
    let spec = LatticeSpec::new(table.dim, side, table.bands, beta, 2.0 / beta)?;
    let b = table.bands;
    let momenta = spec.momenta();
    let sites = spec.sites();
    let coords: Vec<Vec<i64>> = (0..sites).map(|s| spec.site_coords(s)).collect();
    let eigs: Vec<_> = momenta
        .iter()
        .map(|k| table.matrix(k).map(|z| z.conj()).symmetric_eigen())
        .collect();
    let dt = beta / time_points as f64;
    let per_time: Vec<f64> = (0..time_points)
        .into_par_iter()
        .map(|i| {
            let tau = (i as f64 + 0.5) * dt;
            let blocks: Vec<DMatrix<C64>> = eigs
                .iter()
                .map(|eig| {
                    let mut d = zero_matrix(b);
                    for j in 0..b {
                        d[(j, j)] = C64::new(thermal_weight(tau, eig.eigenvalues[j], beta, 1.0), 0.0);
                    }
                    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
                })
                .collect();
            let mut total = 0.0;
            for c in &coords {
                let mut m = zero_matrix(b);
                for (k, blk) in momenta.iter().zip(&blocks) {
                    let kd: f64 = k.iter().zip(c).map(|(kj, x)| kj * *x as f64).sum();
                    m += blk * C64::from_polar(1.0, -kd);
                }
                total += operator_norm(&(m / C64::new(sites as f64, 0.0)));
            }
            total * dt
        })
        .collect();
    Ok(per_time.iter().sum())
}

/// Exported symbol blocks of the full covariance, keyed by `(omega, k, rho, eta)`.
pub fn full_symbol_blocks(spec: &LatticeSpec, table: &HoppingTable) -> Result<Vec<SymbolBlock>> {
    check_table(spec, table)?;
    let mut out = Vec::new();
    for (w, k) in grid_points(spec) {
        let e = dispersion(table, &k, MomentumConvention::Conjugate);
        let m = forward_symbol(&e, w, spec.h)?;
        for rho in 0..spec.bands {
            for eta in 0..spec.bands {
                out.push(SymbolBlock {
                    omega: w,
                    k: k.clone(),
                    rho,
                    eta,
                    re: m[(rho, eta)].re,
                    im: m[(rho, eta)].im,
                });
            }
        }
    }
    Ok(out)
}

/// Largest deviation from time antiperiodicity: the entry at times shifted
/// by `shift` ticks equals `(-1)^{wraps}` times the entry at the wrapped times.
pub fn antiperiodicity_residual(cov: &Covariance, shift: i64) -> f64 {
    let spec = &cov.spec;
    let nt = spec.time_slices() as i64;
    let n = cov.size();
    let mut worst: f64 = 0.0;
    for xu in 0..n {
        for yu in 0..n {
            let mut x = spec.unsigned_at(xu);
            let mut y = spec.unsigned_at(yu);
            let (wx, tx) = crate::lattice_index::wrap_time_ticks(nt, x.time + shift);
            let (wy, ty) = crate::lattice_index::wrap_time_ticks(nt, y.time + shift);
            x.time = tx;
            y.time = ty;
            let sign = if (wx + wy) % 2 == 0 { 1.0 } else { -1.0 };
            let shifted = cov.entry(spec.unsigned_position(&x), spec.unsigned_position(&y)) * sign;
            worst = worst.max((shifted - cov.entry(xu, yu)).norm());
        }
    }
    worst
}

/// Whether `omega` is an odd multiple of `pi/beta`.
pub fn is_matsubara(omega: f64, beta: f64) -> bool {
    let n = omega * beta / PI;
    (n - n.round()).abs() < 1e-9 && (n.round() as i64).rem_euclid(2) == 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grassmann::{TransformName, TranslationShift};
    use crate::model::HoppingParams;

    fn desk_params(spec: &LatticeSpec) -> ScaleParams {
        ScaleParams::new(spec, 4.0, 4.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn zero_dispersion_equal_time_value_is_one_half() {
        let spec = LatticeSpec::new(2, 2, 1, 1.0, 4.0).unwrap();
        let c = full_covariance(&spec, &HoppingTable::zero(1, 2)).unwrap();
        for u in 0..spec.unsigned_count() {
            assert!((c.entry(u, u) - C64::new(0.5, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn matsubara_sum_agrees_with_closed_form() {
        let spec = LatticeSpec::new(2, 2, 1, 1.0, 4.0).unwrap();
        let table = HoppingTable::nearest_neighbor(2, 1.0);
        let a = full_covariance(&spec, &table).unwrap();
        let b = full_covariance_closed_form(&spec, &table).unwrap();
        assert!(a.max_diff(&b) < 1e-9, "diff {}", a.max_diff(&b));
    }

    #[test]
    fn four_band_routes_agree() {
        let spec = LatticeSpec::new(2, 1, 4, 1.0, 4.0).unwrap();
        let table = HoppingTable::four_band(&HoppingParams::new(1.0, 0.8, 0.9, 1.0).unwrap());
        let a = full_covariance(&spec, &table).unwrap();
        let b = full_covariance_closed_form(&spec, &table).unwrap();
        assert!(a.max_diff(&b) < 1e-9);
        assert_eq!(a.spin_offdiagonal_max(), 0.0);
    }

    #[test]
    fn antisymmetric_extension_rules() {
        let spec = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
        let c = full_covariance(&spec, &HoppingTable::nearest_neighbor(1, 0.7)).unwrap();
        let n = spec.signed_count();
        for p in 0..n {
            for q in 0..n {
                assert_eq!(c.antisym(p, q), -c.antisym(q, p));
                if p % 2 == q % 2 {
                    assert_eq!(c.antisym(p, q), C64::new(0.0, 0.0));
                }
            }
        }
        assert_eq!(c.antisym(0, 3), c.entry(0, 1) * 0.5);
    }

    #[test]
    fn sliced_family_identities() {
        let spec = LatticeSpec::new(2, 1, 4, 1.0, 8.0).unwrap();
        let table = HoppingTable::four_band(&HoppingParams::uniform(1.0));
        let bump = GevreyBump::standard();
        let params = desk_params(&spec);
        let fam = sliced_covariances(&spec, &table, &bump, &params).unwrap();
        assert!(fam.full.max_diff(&fam.le0_plus.plus(&fam.gt0_plus)) < 1e-12);
        let lhs = fam.gt0_plus_h.clone();
        let rhs = fam.gt0_minus.plus(&fam.identity);
        assert!(lhs.max_diff(&rhs) < 1e-12, "{}", lhs.max_diff(&rhs));
        let mut uv_sum = fam.le0_plus.clone();
        for l in 1..=params.n_h {
            uv_sum = uv_sum.plus(&uv_slice(&spec, &table, &bump, &params, l, true).unwrap());
        }
        assert!(uv_sum.max_diff(&fam.full) < 1e-10);
    }

    #[test]
    fn identity_norm_is_one_over_twice_h() {
        let spec = LatticeSpec::new(1, 2, 1, 1.0, 4.0).unwrap();
        let id = identity_covariance(&spec);
        let dist = DistanceTable::new(&spec);
        let v = covariance_norm(&id, &dist, NormWeight { w: 0.3, exponent: 0.5 }, false);
        assert!((v - 1.0 / (2.0 * spec.h)).abs() < 1e-14);
        let zero = Covariance::from_matrix(CovarianceKind::Custom, spec.clone(), zero_matrix(spec.unsigned_count()), true);
        assert_eq!(covariance_norm(&zero, &dist, NormWeight { w: 0.3, exponent: 0.5 }, false), 0.0);
    }

    #[test]
    fn translation_and_antiperiodicity() {
        let spec = LatticeSpec::new(2, 2, 1, 1.0, 4.0).unwrap();
        let c = full_covariance(&spec, &HoppingTable::nearest_neighbor(2, 1.0)).unwrap();
        let t = TransformRQ::build(
            TransformName::Translation,
            &spec,
            &[vec![0, 0]],
            &TranslationShift {
                space: vec![1, 0],
                time_ticks: 3,
            },
        )
        .unwrap();
        assert!(covariance_symmetry_check(&c, &c, &t) < 1e-12);
        assert!(antiperiodicity_residual(&c, 5) < 1e-12);
    }

    #[test]
    fn gram_probe_first_order_is_bounded_by_entries() {
        let spec = LatticeSpec::new(1, 2, 1, 1.0, 4.0).unwrap();
        let c = full_covariance(&spec, &HoppingTable::nearest_neighbor(1, 1.0)).unwrap();
        let r = gram_bound_probe(&c, 4, 50, 7).unwrap();
        assert!(r.per_order[0].1 <= c.max_abs() + 1e-12);
        assert_eq!(r, gram_bound_probe(&c, 4, 50, 7).unwrap());
    }

    #[test]
    fn matsubara_membership() {
        assert!(is_matsubara(PI, 1.0));
        assert!(!is_matsubara(2.0 * PI, 1.0));
    }
}
