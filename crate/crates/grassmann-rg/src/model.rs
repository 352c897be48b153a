//! Hamiltonian data: hopping tables and dispersion matrices, the four-band
//! flux dispersion, couplings, the interaction polynomials and the
//! Fock-space operators used by the exact references.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::grassmann::Poly;
use crate::lattice_index::{Charge, LatticeSpec, SignedIndex, SpaceTimeIndex, Spin};
use crate::{EngineError, Result, C64};

/// Largest number of Fock modes handled by the exact references.
pub const MAX_FOCK_MODES: usize = 14;

/// Hopping amplitudes of the four-band model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoppingParams {
    pub t_he: f64,
    pub t_ho: f64,
    pub t_ve: f64,
    pub t_vo: f64,
}

impl HoppingParams {
    pub fn new(t_he: f64, t_ho: f64, t_ve: f64, t_vo: f64) -> Result<HoppingParams> {
        let t = HoppingParams { t_he, t_ho, t_ve, t_vo };
        t.validate()?;
        Ok(t)
    }

    pub fn uniform(t: f64) -> HoppingParams {
        HoppingParams {
            t_he: t,
            t_ho: t,
            t_ve: t,
            t_vo: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.all().iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(EngineError::Domain(format!(
                "hopping amplitudes must be positive, got {:?}",
                self.all()
            )));
        }
        Ok(())
    }

    pub fn all(&self) -> [f64; 4] {
        [self.t_he, self.t_ho, self.t_ve, self.t_vo]
    }

    pub fn max(&self) -> f64 {
        self.all().into_iter().fold(0.0, f64::max)
    }

    /// Whether the largest amplitude equals one.
    pub fn is_normalized(&self) -> bool {
        (self.max() - 1.0).abs() < 1e-14
    }
}

/// The ratio constant `f_t` controlling the gap of the four-band spectrum.
pub fn f_t(t: &HoppingParams) -> Result<f64> {
    t.validate()?;
    let products = (t.t_he * t.t_ho).min(t.t_ve * t.t_vo);
    let ratios = [t.t_ho / t.t_he, t.t_he / t.t_ho, t.t_vo / t.t_ve, t.t_ve / t.t_vo]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(products / t.max().powf(1.5) * ratios)
}

/// Couplings `U_rho`, one per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    pub u: Vec<C64>,
}

impl CouplingParams {
    pub fn real(values: &[f64]) -> CouplingParams {
        CouplingParams {
            u: values.iter().map(|&v| C64::new(v, 0.0)).collect(),
        }
    }

    pub fn uniform(bands: usize, value: f64) -> CouplingParams {
        CouplingParams::real(&vec![value; bands])
    }

    pub fn u_max(&self) -> f64 {
        self.u.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().all(|u| u.norm() == 0.0)
    }

    pub fn is_real(&self) -> bool {
        self.u.iter().all(|u| u.im == 0.0)
    }

    pub fn conj(&self) -> CouplingParams {
        CouplingParams {
            u: self.u.iter().map(|u| u.conj()).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> CouplingParams {
        CouplingParams {
            u: self.u.iter().map(|u| u * c).collect(),
        }
    }
}

/// One hopping table entry: `E(k)(from,to) += amplitude * exp(-i <k, offset>)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoppingEntry {
    pub from: usize,
    pub to: usize,
    pub offset: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// A finite-range dispersion `E(k)` given by a table of hoppings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoppingTable {
    pub bands: usize,
    pub dim: usize,
    pub entries: Vec<HoppingEntry>,
    /// Declared bound on `sup_k ||E(k)||`.
    pub norm_bound: f64,
    /// Declared bound on the derivatives of `E`.
    pub derivative_bound: f64,
}

impl HoppingTable {
    /// The four-band flux dispersion as a table.
    pub fn four_band(t: &HoppingParams) -> HoppingTable {
        let mut entries = Vec::new();
        let mut pair = |from: usize, to: usize, amp: f64, dir: [i64; 2]| {
            for off in [[0i64, 0i64], dir] {
                entries.push(HoppingEntry {
                    from,
                    to,
                    offset: off.to_vec(),
                    re: amp,
                    im: 0.0,
                });
                entries.push(HoppingEntry {
                    from: to,
                    to: from,
                    offset: vec![-off[0], -off[1]],
                    re: amp,
                    im: 0.0,
                });
            }
        };
        pair(0, 1, t.t_he, [1, 0]);
        pair(0, 2, t.t_ve, [0, 1]);
        pair(1, 3, -t.t_vo, [0, 1]);
        pair(2, 3, t.t_ho, [1, 0]);
        HoppingTable {
            bands: 4,
            dim: 2,
            entries,
            norm_bound: 4.0,
            derivative_bound: 1.0,
        }
    }

    /// Single-band nearest-neighbour hopping `-t sum_j 2 cos k_j`.
    pub fn nearest_neighbor(dim: usize, t: f64) -> HoppingTable {
        let mut entries = Vec::new();
        for j in 0..dim {
            for s in [1i64, -1] {
                let mut off = vec![0i64; dim];
                off[j] = s;
                entries.push(HoppingEntry {
                    from: 0,
                    to: 0,
                    offset: off,
                    re: -t,
                    im: 0.0,
                });
            }
        }
        HoppingTable {
            bands: 1,
            dim,
            entries,
            norm_bound: 2.0 * dim as f64 * t.abs(),
            derivative_bound: 2.0 * t.abs(),
        }
    }

    /// The zero dispersion.
    pub fn zero(bands: usize, dim: usize) -> HoppingTable {
        HoppingTable {
            bands,
            dim,
            entries: vec![],
            norm_bound: 0.0,
            derivative_bound: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.from >= self.bands || e.to >= self.bands || e.offset.len() != self.dim {
                return Err(EngineError::Config(format!("malformed hopping entry {e:?}")));
            }
        }
        let probes = [0.3, 1.1, -2.3, 2.9];
        let k: Vec<f64> = (0..self.dim).map(|j| probes[j % 4]).collect();
        let e = self.matrix(&k);
        if (&e - e.adjoint()).iter().any(|z| z.norm() > 1e-12) {
            return Err(EngineError::Config("hopping table is not hermitian".into()));
        }
        Ok(())
    }

    /// `E(k)`.
    pub fn matrix(&self, k: &[f64]) -> DMatrix<C64> {
        self.derivative(k, 0, 0)
    }

    /// `(d/dk_axis)^order E(k)`.
    pub fn derivative(&self, k: &[f64], axis: usize, order: u32) -> DMatrix<C64> {
        let mut m = DMatrix::from_element(self.bands, self.bands, C64::new(0.0, 0.0));
        for e in &self.entries {
            let kr: f64 = e.offset.iter().zip(k).map(|(r, kj)| *r as f64 * kj).sum();
            let mut v = C64::new(e.re, e.im) * C64::from_polar(1.0, -kr);
            if order > 0 {
                let r = e.offset.get(axis).copied().unwrap_or(0) as f64;
                v *= C64::new(0.0, -r).powu(order);
            }
            m[(e.from, e.to)] += v;
        }
        m
    }

    /// Real-space single-particle matrix indexed by `band * sites + site`.
    pub fn real_space(&self, spec: &LatticeSpec) -> Result<DMatrix<C64>> {
        if spec.bands != self.bands || spec.dim != self.dim {
            return Err(EngineError::Config("hopping table does not match the lattice".into()));
        }
        let sites = spec.sites();
        let n = self.bands * sites;
        let mut m = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for x in 0..sites {
            let cx = spec.site_coords(x);
            for e in &self.entries {
                let cy: Vec<i64> = cx.iter().zip(&e.offset).map(|(a, r)| a - r).collect();
                let y = spec.site_from_coords(&cy);
                m[(e.from * sites + x, e.to * sites + y)] += C64::new(e.re, e.im);
            }
        }
        Ok(m)
    }
}

/// The explicit four-band matrix with the `(1 + e^{-ik})` entries.
pub fn dispersion_4band(t: &HoppingParams, k: &[f64; 2]) -> DMatrix<C64> {
    let e1 = C64::new(1.0, 0.0) + C64::from_polar(1.0, -k[0]);
    let e2 = C64::new(1.0, 0.0) + C64::from_polar(1.0, -k[1]);
    let z = C64::new(0.0, 0.0);
    let mut m = DMatrix::from_element(4, 4, z);
    m[(0, 1)] = e1 * t.t_he;
    m[(0, 2)] = e2 * t.t_ve;
    m[(1, 0)] = e1.conj() * t.t_he;
    m[(1, 3)] = -e2 * t.t_vo;
    m[(2, 0)] = e2.conj() * t.t_ve;
    m[(2, 3)] = e1 * t.t_ho;
    m[(3, 1)] = -e2.conj() * t.t_vo;
    m[(3, 2)] = e1.conj() * t.t_ho;
    m
}

/// The four eigenvalues `X_{p,q}(k)` in ascending order.
pub fn spectrum_xpq(t: &HoppingParams, k: &[f64; 2]) -> [f64; 4] {
    let c1 = 1.0 + k[0].cos();
    let c2 = 1.0 + k[1].cos();
    let a = (t.t_he.powi(2) + t.t_ho.powi(2)) * c1 + (t.t_ve.powi(2) + t.t_vo.powi(2)) * c2;
    let b = t.t_he * t.t_ho * c1 + t.t_ve * t.t_vo * c2;
    let disc = (a * a - 4.0 * b * b).max(0.0).sqrt();
    let mut out = [0.0; 4];
    let mut i = 0;
    for p in [1.0, -1.0] {
        for q in [1.0, -1.0] {
            out[i] = p * (a + q * disc).max(0.0).sqrt();
            i += 1;
        }
    }
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out
}

/// Sorted eigenvalues of a hermitian matrix.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().cloned().collect();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v
}

/// Spectral norm.
pub fn operator_norm(m: &DMatrix<C64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Result of the free propagator bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropagatorBoundReport {
    pub samples: usize,
    pub skipped: usize,
    pub violations: usize,
    /// Smallest value of `bound - norm` over the samples.
    pub worst_margin: f64,
    pub notes: Vec<String>,
}

/// Checks `||(i omega - E(k))^{-1}|| <= (omega^2 + f_t sum_j (1 + cos k_j))^{-1/2}`.
pub fn propagator_bound_check(t: &HoppingParams, samples: &[(f64, [f64; 2])]) -> Result<PropagatorBoundReport> {
    let ft = f_t(t)?;
    let mut report = PropagatorBoundReport {
        samples: samples.len(),
        skipped: 0,
        violations: 0,
        worst_margin: f64::INFINITY,
        notes: vec![],
    };
    for (omega, k) in samples {
        let q = omega * omega + ft * ((1.0 + k[0].cos()) + (1.0 + k[1].cos()));
        if q <= 1e-300 {
            report.skipped += 1;
            report.notes.push(format!("singular sample omega={omega}, k={k:?} skipped"));
            continue;
        }
        let a = DMatrix::<C64>::identity(4, 4) * C64::new(0.0, *omega) - dispersion_4band(t, k);
        let inv = a
            .try_inverse()
            .ok_or_else(|| EngineError::Numeric("singular propagator matrix".into()))?;
        let norm = operator_norm(&inv);
        let bound = q.powf(-0.5);
        let margin = bound - norm;
        if margin < -1e-12 * bound {
            report.violations += 1;
        }
        report.worst_margin = report.worst_margin.min(margin);
    }
    Ok(report)
}

/// Largest spectral norm of `(d/dk_j)^n E(k)` over the given samples.
pub fn derivative_norm_max(table: &HoppingTable, samples: &[Vec<f64>], max_order: u32) -> f64 {
    let mut worst: f64 = 0.0;
    for k in samples {
        for axis in 0..table.dim {
            for n in 1..=max_order {
                worst = worst.max(operator_norm(&table.derivative(k, axis, n)));
            }
        }
    }
    worst
}

fn signed(spec: &LatticeSpec, band: usize, site: usize, spin: Spin, time: i64, charge: Charge) -> usize {
    spec.signed_position(&SignedIndex {
        base: SpaceTimeIndex {
            band,
            site,
            spin,
            time,
        },
        charge,
    })
}

/// The polynomial `-V^delta(psi)`, where `V^+ = V` and `V^- = V + (1/h) sum U psi-bar psi`.
/// `delta_plus` selects `delta = +1`.
pub fn interaction_kernels(spec: &LatticeSpec, u: &CouplingParams, delta_plus: bool) -> Result<Poly> {
    if u.u.len() != spec.bands {
        return Err(EngineError::Config(format!(
            "{} couplings for {} bands",
            u.u.len(),
            spec.bands
        )));
    }
    let h = spec.h;
    let delta = if delta_plus { 1.0 } else { -1.0 };
    let mut terms = Vec::new();
    for band in 0..spec.bands {
        let ub = u.u[band];
        if ub.norm() == 0.0 {
            continue;
        }
        for site in 0..spec.sites() {
            for t in 0..spec.time_slices() as i64 {
                for spin in [Spin::Up, Spin::Down] {
                    let bar = signed(spec, band, site, spin, t, Charge::Bar);
                    let plain = signed(spec, band, site, spin, t, Charge::Plain);
                    terms.push((vec![bar, plain], ub * (delta / (2.0 * h))));
                }
                let quartic = vec![
                    signed(spec, band, site, Spin::Up, t, Charge::Bar),
                    signed(spec, band, site, Spin::Down, t, Charge::Bar),
                    signed(spec, band, site, Spin::Down, t, Charge::Plain),
                    signed(spec, band, site, Spin::Up, t, Charge::Plain),
                ];
                terms.push((quartic, -ub / h));
            }
        }
    }
    let mut out = Poly::zero();
    for (pos, c) in terms {
        out = out.add(&Poly::monomial(&pos, c));
    }
    Ok(out)
}

/// Sparse complex matrix on a Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    pub dim: usize,
    pub entries: BTreeMap<(usize, usize), C64>,
}

impl SparseOp {
    pub fn zero(dim: usize) -> SparseOp {
        SparseOp {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, v: C64) {
        if v == C64::new(0.0, 0.0) {
            return;
        }
        let e = self.entries.entry((row, col)).or_insert(C64::new(0.0, 0.0));
        *e += v;
    }

    pub fn add(&self, other: &SparseOp) -> SparseOp {
        let mut out = self.clone();
        for (&(r, c), &v) in &other.entries {
            out.push(r, c, v);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::from_element(self.dim, self.dim, C64::new(0.0, 0.0));
        for (&(r, c), &v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest entry of `A - A^*`.
    pub fn hermiticity_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (&(r, c), &v) in &self.entries {
            let w = self.entries.get(&(c, r)).copied().unwrap_or(C64::new(0.0, 0.0));
            worst = worst.max((v - w.conj()).norm());
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Dense block on a list of basis states.
    pub fn block(&self, states: &[usize]) -> DMatrix<C64> {
        let mut index = vec![usize::MAX; self.dim];
        for (i, &s) in states.iter().enumerate() {
            index[s] = i;
        }
        let mut m = DMatrix::from_element(states.len(), states.len(), C64::new(0.0, 0.0));
        for (&(r, c), &v) in &self.entries {
            if index[r] != usize::MAX && index[c] != usize::MAX {
                m[(index[r], index[c])] += v;
            }
        }
        m
    }
}

/// Occupation-number Fock space over `modes` fermionic modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockSpace {
    pub modes: usize,
}

impl FockSpace {
    pub fn new(modes: usize) -> Result<FockSpace> {
        if modes > MAX_FOCK_MODES {
            return Err(EngineError::Capacity(format!(
                "{modes} Fock modes exceed the cap {MAX_FOCK_MODES}"
            )));
        }
        Ok(FockSpace { modes })
    }

    pub fn dim(&self) -> usize {
        1usize << self.modes
    }

    /// `c_mode |state>` as `(sign, new state)`.
    pub fn annihilate(&self, mode: usize, state: usize) -> Option<(f64, usize)> {
        if state >> mode & 1 == 0 {
            return None;
        }
        let below = (state & ((1usize << mode) - 1)).count_ones();
        let sign = if below % 2 == 0 { 1.0 } else { -1.0 };
        Some((sign, state ^ (1 << mode)))
    }

    /// `c_mode^* |state>`.
    pub fn create(&self, mode: usize, state: usize) -> Option<(f64, usize)> {
        if state >> mode & 1 == 1 {
            return None;
        }
        let below = (state & ((1usize << mode) - 1)).count_ones();
        let sign = if below % 2 == 0 { 1.0 } else { -1.0 };
        Some((sign, state ^ (1 << mode)))
    }

    /// Dense matrix of `c_mode`.
    pub fn annihilation_matrix(&self, mode: usize) -> DMatrix<C64> {
        let d = self.dim();
        let mut m = DMatrix::from_element(d, d, C64::new(0.0, 0.0));
        for s in 0..d {
            if let Some((sg, t)) = self.annihilate(mode, s) {
                m[(t, s)] = C64::new(sg, 0.0);
            }
        }
        m
    }

    /// `sum A(i,j) c_i^* c_j` for a single-particle matrix over the modes.
    pub fn quadratic(&self, a: &DMatrix<C64>) -> SparseOp {
        let mut op = SparseOp::zero(self.dim());
        for s in 0..self.dim() {
            for j in 0..self.modes {
                let Some((s1, mid)) = self.annihilate(j, s) else { continue };
                for i in 0..self.modes {
                    let v = a[(i, j)];
                    if v == C64::new(0.0, 0.0) {
                        continue;
                    }
                    if let Some((s2, out)) = self.create(i, mid) {
                        op.push(out, s, v * s1 * s2);
                    }
                }
            }
        }
        op
    }

    /// Occupation of a mode in a basis state.
    pub fn occupied(&self, mode: usize, state: usize) -> bool {
        state >> mode & 1 == 1
    }
}

/// Mode index `(orbital, spin)` with `orbital = band * sites + site`.
pub fn fock_mode(orbital: usize, spin: Spin) -> usize {
    orbital * 2 + spin.index()
}

/// Fock-space Hamiltonian assembled from a single-particle hopping matrix
/// over orbitals and on-site couplings.
#[derive(Debug, Clone)]
pub struct FockHamiltonian {
    pub space: FockSpace,
    pub h0: SparseOp,
    pub v: SparseOp,
    pub h: SparseOp,
}

impl FockHamiltonian {
    /// `hopping` is indexed by orbitals; `onsite_u[o]` is the coupling at orbital `o`.
    /// `counterterm` includes the `-(1/2) sum n` part of the interaction.
    pub fn build(hopping: &DMatrix<C64>, onsite_u: &[C64], counterterm: bool) -> Result<FockHamiltonian> {
        let orbitals = hopping.nrows();
        if onsite_u.len() != orbitals {
            return Err(EngineError::Config("one coupling per orbital required".into()));
        }
        let space = FockSpace::new(2 * orbitals)?;
        let mut single = DMatrix::from_element(2 * orbitals, 2 * orbitals, C64::new(0.0, 0.0));
        for i in 0..orbitals {
            for j in 0..orbitals {
                for spin in [Spin::Up, Spin::Down] {
                    single[(fock_mode(i, spin), fock_mode(j, spin))] = hopping[(i, j)];
                }
            }
        }
        let h0 = space.quadratic(&single);
        let mut v = SparseOp::zero(space.dim());
        for s in 0..space.dim() {
            let mut val = C64::new(0.0, 0.0);
            for (o, u) in onsite_u.iter().enumerate() {
                let up = space.occupied(fock_mode(o, Spin::Up), s) as i32 as f64;
                let down = space.occupied(fock_mode(o, Spin::Down), s) as i32 as f64;
                let mut e = up * down;
                if counterterm {
                    e -= 0.5 * (up + down);
                }
                val += u * e;
            }
            v.push(s, s, val);
        }
        let h = h0.add(&v);
        Ok(FockHamiltonian { space, h0, v, h })
    }

    /// Builds the lattice Hamiltonian `H_0 + V` of a hopping table.
    pub fn lattice(spec: &LatticeSpec, table: &HoppingTable, u: &CouplingParams, counterterm: bool) -> Result<FockHamiltonian> {
        let hop = table.real_space(spec)?;
        let sites = spec.sites();
        let onsite: Vec<C64> = (0..spec.bands * sites).map(|o| u.u[o / sites]).collect();
        FockHamiltonian::build(&hop, &onsite, counterterm)
    }

    /// Basis states grouped by `(N_up, N_down)`.
    pub fn sectors(&self) -> Vec<Vec<usize>> {
        let orbitals = self.space.modes / 2;
        let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for s in 0..self.space.dim() {
            let mut up = 0;
            let mut down = 0;
            for o in 0..orbitals {
                up += self.space.occupied(fock_mode(o, Spin::Up), s) as u32;
                down += self.space.occupied(fock_mode(o, Spin::Down), s) as u32;
            }
            groups.entry((up, down)).or_default().push(s);
        }
        groups.into_values().collect()
    }
}

/// Eigen-decomposition of a hermitian operator, sector by sector.
#[derive(Debug, Clone)]
pub struct SectorSpectrum {
    /// `(states, eigenvalues, eigenvectors)` per sector.
    pub blocks: Vec<(Vec<usize>, Vec<f64>, DMatrix<C64>)>,
}

impl SectorSpectrum {
    pub fn new(op: &SparseOp, sectors: &[Vec<usize>]) -> Result<SectorSpectrum> {
        if op.hermiticity_residual() > 1e-10 * (1.0 + op.max_abs()) {
            return Err(EngineError::Numeric("operator is not hermitian".into()));
        }
        let blocks = sectors
            .iter()
            .map(|states| {
                let eig = op.block(states).symmetric_eigen();
                (states.clone(), eig.eigenvalues.iter().cloned().collect(), eig.eigenvectors)
            })
            .collect();
        Ok(SectorSpectrum { blocks })
    }

    pub fn ground_energy(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.1.iter().cloned())
            .fold(f64::INFINITY, f64::min)
    }

    /// `log Tr e^{-beta A}`, stabilized by the ground energy.
    pub fn log_trace_exp(&self, beta: f64) -> f64 {
        let e0 = self.ground_energy();
        let s: f64 = self
            .blocks
            .iter()
            .flat_map(|b| b.1.iter())
            .map(|&e| (-beta * (e - e0)).exp())
            .sum();
        s.ln() - beta * e0
    }

    /// Thermal expectation of a diagonal observable given per basis state.
    pub fn thermal_diagonal(&self, beta: f64, observable: impl Fn(usize) -> f64) -> f64 {
        let e0 = self.ground_energy();
        let mut num = 0.0;
        let mut den = 0.0;
        for (states, evals, evecs) in &self.blocks {
            for (i, &e) in evals.iter().enumerate() {
                let w = (-beta * (e - e0)).exp();
                let mut ex = 0.0;
                for (r, &s) in states.iter().enumerate() {
                    ex += evecs[(r, i)].norm_sqr() * observable(s);
                }
                num += w * ex;
                den += w;
            }
        }
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn four_band_vanishes_at_the_corner() {
        let t = HoppingParams::uniform(1.0);
        assert!(dispersion_4band(&t, &[PI, PI]).iter().all(|z| z.norm() < 1e-15));
        assert_eq!(spectrum_xpq(&t, &[PI, PI]), [0.0; 4]);
    }

    #[test]
    fn four_band_at_origin_squares_to_eight() {
        let t = HoppingParams::uniform(1.0);
        let e = dispersion_4band(&t, &[0.0, 0.0]);
        let sq = &e * &e;
        let eight = DMatrix::<C64>::identity(4, 4) * C64::new(8.0, 0.0);
        assert!((sq - eight).iter().all(|z| z.norm() < 1e-13));
        let x = spectrum_xpq(&t, &[0.0, 0.0]);
        let r = 2.0 * 2f64.sqrt();
        for (a, b) in x.iter().zip([-r, -r, r, r]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn f_t_examples() {
        assert_eq!(f_t(&HoppingParams::uniform(1.0)).unwrap(), 1.0);
        let t = HoppingParams::new(1.0, 0.5, 1.0, 1.0).unwrap();
        assert!((f_t(&t).unwrap() - 0.25).abs() < 1e-15);
        assert!(HoppingParams::new(1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn propagator_bound_at_the_corner_is_tight() {
        let t = HoppingParams::uniform(1.0);
        let r = propagator_bound_check(&t, &[(PI, [PI, PI]), (0.0, [PI, PI])]).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.violations, 0);
        assert!(r.worst_margin.abs() < 1e-14);
    }

    #[test]
    fn zero_coupling_gives_zero_interaction() {
        let spec = LatticeSpec::new(1, 1, 1, 1.0, 2.0).unwrap();
        let u = CouplingParams::uniform(1, 0.0);
        assert!(interaction_kernels(&spec, &u, true).unwrap().is_zero());
        let table = HoppingTable::nearest_neighbor(1, 1.0);
        let fh = FockHamiltonian::lattice(&spec, &table, &u, true).unwrap();
        assert_eq!(fh.v.max_abs(), 0.0);
    }

    #[test]
    fn interaction_l1_within_the_coupling_bound() {
        let spec = LatticeSpec::new(1, 1, 1, 1.0, 2.0).unwrap();
        let u = CouplingParams::uniform(1, 1.0);
        for plus in [true, false] {
            let v = interaction_kernels(&spec, &u, plus).unwrap();
            let bound = spec.bands as f64 * spec.beta * spec.sites() as f64 * u.u_max();
            assert!(v.l1(2) <= bound + 1e-14);
            assert!(v.l1(4) <= bound + 1e-14);
        }
    }

    #[test]
    fn signed_interactions_differ_by_the_quadratic_shift() {
        let spec = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
        let u = CouplingParams::real(&[0.7]);
        let plus = interaction_kernels(&spec, &u, true).unwrap();
        let minus = interaction_kernels(&spec, &u, false).unwrap();
        // (-V^-) - (-V^+) = -(1/h) sum U psi-bar psi
        let mut shift = Poly::zero();
        for p in 0..spec.unsigned_count() {
            shift = shift.add(&Poly::monomial(&[2 * p, 2 * p + 1], C64::new(-0.7 / spec.h, 0.0)));
        }
        assert!(minus.sub(&plus).max_diff(&shift) < 1e-15);
    }

    #[test]
    fn interaction_kernels_are_antisymmetric() {
        let spec = LatticeSpec::new(1, 1, 1, 1.0, 2.0).unwrap();
        let v = interaction_kernels(&spec, &CouplingParams::real(&[0.3]), true).unwrap();
        let n = spec.signed_count();
        for a in 0..n {
            for b in 0..n {
                let x = v.kernel(&[a, b], spec.h);
                let y = v.kernel(&[b, a], spec.h);
                assert!((x + y).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn mode_operators_satisfy_anticommutation() {
        let space = FockSpace::new(4).unwrap();
        let ops: Vec<DMatrix<C64>> = (0..4).map(|m| space.annihilation_matrix(m)).collect();
        let id = DMatrix::<C64>::identity(16, 16);
        for i in 0..4 {
            for j in 0..4 {
                let ac = &ops[i] * &ops[j] + &ops[j] * &ops[i];
                assert!(ac.iter().all(|z| z.norm() == 0.0));
                let mixed = &ops[i] * ops[j].adjoint() + ops[j].adjoint() * &ops[i];
                let want = if i == j { id.clone() } else { id.clone() * C64::new(0.0, 0.0) };
                assert!((mixed - want).iter().all(|z| z.norm() == 0.0));
            }
        }
    }

    #[test]
    fn fock_cap_is_enforced() {
        assert!(FockSpace::new(MAX_FOCK_MODES + 1).is_err());
    }

    #[test]
    fn table_and_explicit_four_band_agree() {
        let t = HoppingParams::new(1.0, 0.6, 0.8, 0.9).unwrap();
        let table = HoppingTable::four_band(&t);
        for k in [[0.1, 0.2], [2.0, -1.0], [PI, 0.3]] {
            let a = table.matrix(&k);
            let b = dispersion_4band(&t, &k);
            assert!((a - b).iter().all(|z| z.norm() < 1e-14));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn spectrum_matches_eigenvalues(k1 in -PI..PI, k2 in -PI..PI,
                                        a in 0.1f64..1.0, b in 0.1f64..1.0, c in 0.1f64..1.0) {
            let t = HoppingParams::new(1.0, a, b, c).unwrap();
            let x = spectrum_xpq(&t, &[k1, k2]);
            let e = hermitian_eigenvalues(&dispersion_4band(&t, &[k1, k2]));
            for (p, q) in x.iter().zip(&e) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }

        #[test]
        fn dispersion_is_hermitian_and_periodic(k1 in -PI..PI, k2 in -PI..PI) {
            let t = HoppingParams::new(1.0, 0.7, 0.4, 0.9).unwrap();
            let e = dispersion_4band(&t, &[k1, k2]);
            prop_assert!((&e - e.adjoint()).iter().all(|z| z.norm() < 1e-12));
            let shifted = dispersion_4band(&t, &[k1 + 2.0 * PI, k2 - 2.0 * PI]);
            prop_assert!((&e - shifted).iter().all(|z| z.norm() < 1e-12));
        }

        #[test]
        fn spectrum_is_bounded_below_by_f_t(k1 in -PI..PI, k2 in -PI..PI, a in 0.1f64..1.0) {
            let t = HoppingParams::new(a, 1.0, 1.0, a).unwrap();
            let ft = f_t(&t).unwrap();
            let floor = (ft * ((1.0 + k1.cos()) + (1.0 + k2.cos()))).sqrt();
            for x in spectrum_xpq(&t, &[k1, k2]) {
                prop_assert!(x.abs() + 1e-12 >= floor);
            }
        }

        #[test]
        fn propagator_and_derivative_bounds_hold(w in -10.0f64..10.0, k1 in -PI..PI, k2 in -PI..PI) {
            let t = HoppingParams::uniform(1.0);
            let r = propagator_bound_check(&t, &[(w, [k1, k2])]).unwrap();
            prop_assert_eq!(r.violations, 0);
            let table = HoppingTable::four_band(&t);
            prop_assert!(derivative_norm_max(&table, &[vec![k1, k2]], 3) <= 4.0 + 1e-12);
        }
    }
}
