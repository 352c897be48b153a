//! Multi-scale integration of the Grassmann formulation.
//!
//! The ultraviolet flow integrates the Matsubara slices `C_l^delta` one at a
//! time starting from `-V^delta`; the two signed outputs are averaged into
//! the infrared input `J^0`. The infrared flow then removes the quadratic
//! part at every scale by a determinant, folds it into the next covariance
//! as a self-energy, and integrates the rest. All polynomials are carried as
//! series in a formal coupling grade, so every step is exact up to the
//! chosen order in the coupling.
//!
//! The module also holds the numeric bound reports, the tree combinatorics
//! check and the tree coefficients of the log-integral.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    covariance_from_symbol, covariance_norm, free_ir_slice, gram_bound_probe, ir_slice, resolvent, sliced_covariances,
    uv_slice, Covariance, CovarianceKind, MomentumConvention,
};
use crate::cutoff::{chi_ir_hat, chi_ir_le, GevreyBump, ScaleParams};
use crate::grassmann::{
    apply_transform, exp_graded, free_integrate_graded, integrate_full, invariance_residual, log_graded, poly_norms,
    quadratic_momentum_kernel, AlgebraLimits, DistanceTable, Graded, MomentumKernel, NormWeight, Poly, TransformName,
    TransformRQ, TranslationShift,
};
use crate::lattice_index::LatticeSpec;
use crate::model::{f_t, interaction_kernels, CouplingParams, HoppingParams, HoppingTable};
use crate::oracle::FOUR_BAND_OFFSETS;
use crate::{EngineError, Result, C64};

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

fn one() -> C64 {
    C64::new(1.0, 0.0)
}

/// User-facing flow parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Scale ratio `M`.
    pub m: f64,
    /// Weight constant `c_w` of the scale-dependent norms.
    pub c_w: f64,
    /// The `alpha` stored with the scale parameters.
    pub alpha: f64,
    /// Highest coupling grade kept in every polynomial.
    pub order: usize,
    pub limits: AlgebraLimits,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            m: 4.0,
            c_w: 1.0,
            alpha: 1.0,
            order: 2,
            limits: AlgebraLimits::default(),
        }
    }
}

/// Everything a flow needs besides the couplings.
#[derive(Debug, Clone)]
pub struct FlowSetup {
    pub spec: LatticeSpec,
    pub table: HoppingTable,
    pub bump: GevreyBump,
    pub params: ScaleParams,
    pub f_t: f64,
    pub order: usize,
    pub limits: AlgebraLimits,
}

impl FlowSetup {
    /// Four-band setup with `f_t` from the hopping amplitudes.
    pub fn four_band(spec: &LatticeSpec, t: &HoppingParams, config: &FlowConfig) -> Result<FlowSetup> {
        if spec.bands != 4 || spec.dim != 2 {
            return Err(EngineError::Config("the four-band flow needs b = 4 and d = 2".into()));
        }
        FlowSetup::generic(spec, &HoppingTable::four_band(t), f_t(t)?, config)
    }

    /// Setup for an arbitrary dispersion table with a supplied `f_t`.
    pub fn generic(spec: &LatticeSpec, table: &HoppingTable, f_t: f64, config: &FlowConfig) -> Result<FlowSetup> {
        if config.order == 0 {
            return Err(EngineError::Config("the coupling order must be at least 1".into()));
        }
        let params = ScaleParams::new(spec, config.m, table.derivative_bound, config.c_w, config.alpha)?;
        Ok(FlowSetup {
            spec: spec.clone(),
            table: table.clone(),
            bump: GevreyBump::standard(),
            params,
            f_t,
            order: config.order,
            limits: config.limits.clone(),
        })
    }

    fn volume(&self) -> f64 {
        self.spec.beta * self.spec.sites() as f64
    }
}

/// `log int e^{J(psi + psi^1)} dmu_C(psi^1)` in coupling grades.
pub fn integration_step(j: &Graded, cov: &Covariance, limits: &AlgebraLimits, scale: i64) -> Result<Graded> {
    let e = exp_graded(j, limits)?;
    let f = free_integrate_graded(&e, cov, limits)?;
    let z0: C64 = f.grades.iter().map(|g| g.constant()).sum();
    if !(z0.re > 0.0) {
        return Err(EngineError::FlowAbort(format!(
            "zero-degree part {z0} of the scale-{scale} integral has non-positive real part"
        )));
    }
    log_graded(&f, limits)
}

/// Per-grade constants of `log int e^{J} dmu_C`.
pub fn log_integral_grades(j: &Graded, cov: &Covariance, limits: &AlgebraLimits) -> Result<Vec<C64>> {
    let e = exp_graded(j, limits)?;
    let mut scalars = Graded::zero(j.order());
    for (g, part) in e.grades.iter().enumerate() {
        scalars.grades[g] = Poly::scalar(integrate_full(part, cov));
    }
    Ok(log_graded(&scalars, limits)?.constant())
}

fn sum(values: &[C64]) -> C64 {
    values.iter().fold(zero(), |a, b| a + b)
}

fn check_even(j: &Graded, scale: i64) -> Result<f64> {
    let odd = j.odd_max_abs();
    if odd != 0.0 {
        return Err(EngineError::Contract(format!("odd-degree part {odd:.3e} at scale {scale}")));
    }
    Ok(odd)
}

/// Summary of one ultraviolet scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UvScaleRecord {
    pub l: i64,
    pub constant_re: f64,
    pub constant_im: f64,
    pub terms: usize,
    pub odd_max: f64,
}

/// Output of the ultraviolet flow for one sign `delta`.
#[derive(Debug, Clone)]
pub struct UvFlow {
    pub delta_plus: bool,
    pub records: Vec<UvScaleRecord>,
    /// `J^{delta,l}` from `l = N_h` down to `0`.
    pub states: Vec<(i64, Graded)>,
}

impl UvFlow {
    pub fn result(&self) -> &Graded {
        &self.states.last().expect("flow has at least one state").1
    }
}

fn record_uv(l: i64, j: &Graded) -> Result<UvScaleRecord> {
    let odd = check_even(j, l)?;
    let c = sum(&j.constant());
    Ok(UvScaleRecord {
        l,
        constant_re: c.re,
        constant_im: c.im,
        terms: j.len(),
        odd_max: odd,
    })
}

/// `J^{delta,N_h} = -V^delta` and
/// `J^{delta,l} = log int e^{J^{delta,l+1}(psi + psi^1)} dmu_{C_{l+1}^delta}(psi^1)` down to `l = 0`.
pub fn uv_flow(setup: &FlowSetup, u: &CouplingParams, delta_plus: bool) -> Result<UvFlow> {
    let spec = &setup.spec;
    let n_h = setup.params.n_h;
    let mut j = Graded::at_grade(interaction_kernels(spec, u, delta_plus)?, 1, setup.order);
    let mut records = vec![record_uv(n_h, &j)?];
    let mut states = vec![(n_h, j.clone())];
    for l in (0..n_h).rev() {
        let cov = uv_slice(spec, &setup.table, &setup.bump, &setup.params, l + 1, delta_plus)?;
        j = integration_step(&j, &cov, &setup.limits, l)?;
        records.push(record_uv(l, &j)?);
        states.push((l, j.clone()));
        log::info!("ultraviolet scale {l} (delta {}) done: {} terms", if delta_plus { '+' } else { '-' }, j.len());
    }
    Ok(UvFlow {
        delta_plus,
        records,
        states,
    })
}

/// `J^0 = (J^{+,0} + J^{-,0}) / 2`.
pub fn symmetrized_input(plus: &UvFlow, minus: &UvFlow) -> Result<Graded> {
    if !plus.delta_plus || minus.delta_plus {
        return Err(EngineError::Contract("symmetrized input needs the + and - flows in that order".into()));
    }
    Ok(plus.result().add(minus.result()).scale(C64::new(0.5, 0.0)))
}

/// Residual of one symmetry transform at one scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InvarianceRow {
    pub scale: i64,
    pub transform: String,
    pub residual: f64,
}

fn band_offsets(spec: &LatticeSpec) -> Vec<Vec<i64>> {
    if spec.bands == 4 && spec.dim == 2 {
        FOUR_BAND_OFFSETS.iter().map(|o| o.iter().map(|&v| v as i64).collect()).collect()
    } else {
        vec![vec![0; spec.dim]; spec.bands]
    }
}

fn unit_shift(spec: &LatticeSpec) -> TranslationShift {
    TranslationShift {
        space: vec![1; spec.dim],
        time_ticks: 1,
    }
}

/// The seven transforms of the invariance class on `spec`; the rotation is
/// only defined for the four-band cell and is skipped otherwise.
pub fn class_transforms(spec: &LatticeSpec) -> Result<Vec<TransformRQ>> {
    let offsets = band_offsets(spec);
    let shift = unit_shift(spec);
    TransformName::SEVEN
        .iter()
        .filter(|name| **name != TransformName::Rotation || (spec.bands == 4 && spec.dim == 2))
        .map(|name| TransformRQ::build(*name, spec, &offsets, &shift))
        .collect()
}

/// Residuals `max |f(R psi) - f(psi)|` of every class transform.
pub fn invariance_rows(f: &Poly, spec: &LatticeSpec, scale: i64) -> Result<Vec<InvarianceRow>> {
    Ok(class_transforms(spec)?
        .iter()
        .map(|t| InvarianceRow {
            scale,
            transform: t.name.label().to_string(),
            residual: invariance_residual(f, t),
        })
        .collect())
}

/// Class report of the symmetrized input: the residuals on `J^0` and the
/// half-filled conjugation measured on the pair swap `J^{+,0} -> J^{-,0}`.
pub fn input_class_report(plus: &UvFlow, minus: &UvFlow, spec: &LatticeSpec) -> Result<Vec<InvarianceRow>> {
    let j0 = symmetrized_input(plus, minus)?.collapse();
    let mut rows = invariance_rows(&j0, spec, 0)?;
    let p = plus.result().collapse();
    let m = minus.result().collapse();
    let t = TransformRQ::build(TransformName::HalfFilledConj, spec, &band_offsets(spec), &unit_shift(spec))?;
    let swap = apply_transform(&p, &t).max_diff(&m).max(apply_transform(&m, &t).max_diff(&p));
    rows.push(InvarianceRow {
        scale: 0,
        transform: "half_filled_conj_pair_swap".into(),
        residual: swap,
    });
    Ok(rows)
}

/// Summary of one infrared scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IrScaleRecord {
    pub l: i64,
    /// `J_0^l`.
    pub constant_re: f64,
    pub constant_im: f64,
    /// `sum_{omega,k} log det(I - (i omega - E - E_{l+1})^{-1} chi_{<=l} W^l)`, one spin.
    pub log_det_re: f64,
    pub log_det_im: f64,
    /// The same determinant for both spins from the real-space matrices.
    pub log_det_real_space_re: f64,
    pub log_det_real_space_im: f64,
    pub min_re_det: f64,
    pub kernel_max: f64,
    pub neumann_max: f64,
    pub inverse_bound_max: f64,
    pub terms: usize,
}

/// Output of the infrared flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrFlow {
    pub records: Vec<IrScaleRecord>,
    /// `J_0^{N_beta - 1}`.
    pub final_constant_re: f64,
    pub final_constant_im: f64,
    pub j_end_re: f64,
    pub j_end_im: f64,
    pub invariance: Vec<InvarianceRow>,
    /// `max |chi-hat_{<=l} - chi_{<=l}|` over the grid and the infrared scales.
    pub cutoff_mismatch: f64,
    /// `J^l` from `l = 0` down to `N_beta - 1`.
    #[serde(skip)]
    pub states: Vec<(i64, Graded)>,
    #[serde(skip)]
    pub kernels: Vec<MomentumKernel>,
}

impl IrFlow {
    pub fn j_end(&self) -> C64 {
        C64::new(self.j_end_re, self.j_end_im)
    }
}

fn grid_points(spec: &LatticeSpec) -> Vec<(f64, Vec<f64>)> {
    let momenta = spec.momenta();
    spec.matsubara_h()
        .into_iter()
        .flat_map(|w| momenta.iter().map(move |k| (w, k.clone())))
        .collect()
}

fn self_energy(setup: &FlowSetup, kernels: &[MomentumKernel], omega: f64, k: &[f64]) -> DMatrix<C64> {
    let b = setup.spec.bands;
    let mut acc = DMatrix::from_element(b, b, zero());
    for (i, w) in kernels.iter().enumerate() {
        let c = chi_ir_hat(&setup.bump, &setup.params, setup.f_t, -(i as i64), omega, k);
        if c != 0.0 {
            acc += w.eval_extended(omega, k) * C64::new(c, 0.0);
        }
    }
    acc
}

/// Matrix `q` with `J_2 = sum_{x,y} q(x,y) psi-bar_x psi_y`.
pub fn quadratic_matrix(j: &Poly, spec: &LatticeSpec) -> DMatrix<C64> {
    let n = spec.unsigned_count();
    let mut q = DMatrix::from_element(n, n, zero());
    for (m, c) in j.part(2).terms() {
        let p = m.positions();
        if p[0] % 2 == 0 && p[1] % 2 == 1 {
            q[(p[0] / 2, p[1] / 2)] += c;
        } else if p[0] % 2 == 1 && p[1] % 2 == 0 {
            q[(p[1] / 2, p[0] / 2)] -= c;
        }
    }
    q
}

/// `log det(I + C q^T) = log int e^{sum q(x,y) psi-bar_x psi_y} dmu_C`.
pub fn quadratic_log_det(cov: &Covariance, q: &DMatrix<C64>) -> C64 {
    let n = q.nrows();
    let m = DMatrix::<C64>::identity(n, n) + &cov.matrix * q.transpose();
    m.determinant().ln()
}

/// Largest `|chi-hat_{<=l} - chi_{<=l}|` over the grid and `l` in `N_beta..=0`.
pub fn cutoff_mismatch(setup: &FlowSetup) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (w, k) in grid_points(&setup.spec) {
        for l in setup.params.n_beta..=0 {
            let hat = chi_ir_hat(&setup.bump, &setup.params, setup.f_t, l, w, &k);
            let le = chi_ir_le(&setup.bump, &setup.params, setup.f_t, l, w, &k)?;
            worst = worst.max((hat - le).abs());
        }
    }
    Ok(worst)
}

/// Runs the infrared flow from `J^0` down to `N_beta` and assembles
/// `J_end = -(1/(beta L^d)) sum_{l=0}^{N_beta-1} J_0^l - (2/(beta L^d)) sum_l sum_{omega,k} log det(...)`.
pub fn ir_flow(setup: &FlowSetup, j0: &Graded) -> Result<IrFlow> {
    let spec = &setup.spec;
    let points = grid_points(spec);
    let mut j = j0.clone();
    let mut kernels: Vec<MomentumKernel> = Vec::new();
    let mut records = Vec::new();
    let mut invariance = Vec::new();
    let mut states = Vec::new();
    let mut constants = zero();
    let mut log_dets = zero();
    for l in (setup.params.n_beta..=0).rev() {
        check_even(&j, l)?;
        let collapsed = j.collapse();
        invariance.extend(invariance_rows(&collapsed, spec, l)?);
        let w = quadratic_momentum_kernel(&collapsed, spec)?;
        let previous = kernels.clone();
        kernels.push(w.clone());
        let dets: Vec<C64> = points
            .par_iter()
            .map(|(omega, k)| -> Result<C64> {
                let chi = chi_ir_le(&setup.bump, &setup.params, setup.f_t, l, *omega, k)?;
                if chi == 0.0 {
                    return Ok(one());
                }
                let e = setup.table.matrix(k) + self_energy(setup, &previous, *omega, k);
                let s = resolvent(&e, *omega)? * C64::new(chi, 0.0);
                let b = spec.bands;
                let d = (DMatrix::<C64>::identity(b, b) - s * w.eval_grid(*omega, k)).determinant();
                if !(d.re > 0.0) {
                    return Err(EngineError::FlowAbort(format!(
                        "determinant {d} with non-positive real part at scale {l}, omega = {omega}, k = {k:?}"
                    )));
                }
                Ok(d)
            })
            .collect::<Result<_>>()?;
        let log_det = dets.iter().fold(zero(), |a, d| a + d.ln());
        let min_re_det = dets.iter().map(|d| d.re).fold(f64::INFINITY, f64::min);
        let covariance_le = covariance_from_symbol(spec, CovarianceKind::Custom, MomentumConvention::Direct, &|omega, k| {
            let chi = chi_ir_le(&setup.bump, &setup.params, setup.f_t, l, omega, k)?;
            if chi == 0.0 {
                return Ok(None);
            }
            let e = setup.table.matrix(k) + self_energy(setup, &previous, omega, k);
            resolvent(&e, omega).map(|r| Some(r * C64::new(chi, 0.0)))
        })?;
        let real_space = quadratic_log_det(&covariance_le, &quadratic_matrix(&collapsed, spec));
        let current = &kernels;
        let (cov, slice_report) = ir_slice(spec, &setup.table, &setup.bump, &setup.params, setup.f_t, l, &|omega, k| {
            self_energy(setup, current, omega, k)
        })?;
        let constant = collapsed.constant();
        constants += constant;
        log_dets += log_det;
        states.push((l, j.clone()));
        let stripped = j.map(|p| p.filter(|m| m.degree() >= 4));
        j = integration_step(&stripped, &cov, &setup.limits, l)?;
        records.push(IrScaleRecord {
            l,
            constant_re: constant.re,
            constant_im: constant.im,
            log_det_re: log_det.re,
            log_det_im: log_det.im,
            log_det_real_space_re: real_space.re,
            log_det_real_space_im: real_space.im,
            min_re_det,
            kernel_max: w.max_abs_on(&points),
            neumann_max: slice_report.neumann_max,
            inverse_bound_max: slice_report.inverse_bound_max,
            terms: collapsed.len(),
        });
        log::info!("infrared scale {l} done: {} terms", j.len());
    }
    let last = setup.params.n_beta - 1;
    check_even(&j, last)?;
    let collapsed = j.collapse();
    invariance.extend(invariance_rows(&collapsed, spec, last)?);
    let final_constant = collapsed.constant();
    constants += final_constant;
    states.push((last, j));
    let vol = setup.volume();
    let j_end = -(constants / vol) - log_dets * (2.0 / vol);
    Ok(IrFlow {
        records,
        final_constant_re: final_constant.re,
        final_constant_im: final_constant.im,
        j_end_re: j_end.re,
        j_end_im: j_end.im,
        invariance,
        cutoff_mismatch: cutoff_mismatch(setup)?,
        states,
        kernels,
    })
}

/// `-(1/(beta L^d)) log int e^{J^0} dmu_{C_{<=0}^infty}` in coupling grades.
pub fn telescoping_reference(setup: &FlowSetup, j0: &Graded) -> Result<C64> {
    let family = sliced_covariances(&setup.spec, &setup.table, &setup.bump, &setup.params)?;
    let grades = log_integral_grades(j0, &family.le0_infty, &setup.limits)?;
    Ok(-sum(&grades) / setup.volume())
}

/// Result of the full two-stage flow with the telescoping comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelescopingReport {
    pub h: f64,
    pub beta: f64,
    pub side: usize,
    pub order: usize,
    pub n_h: i64,
    pub n_beta: i64,
    pub couplings: Vec<(f64, f64)>,
    pub uv_plus: Vec<UvScaleRecord>,
    pub uv_minus: Vec<UvScaleRecord>,
    pub input_class: Vec<InvarianceRow>,
    pub ir: IrFlow,
    pub reference_re: f64,
    pub reference_im: f64,
    /// `|J_end + (1/(beta L^d)) log int e^{J^0} dmu_{C_{<=0}^infty}|`.
    pub residual: f64,
}

/// Ultraviolet flows for both signs, the symmetrized input, the infrared
/// flow and the telescoping comparison.
pub fn telescoping_run(setup: &FlowSetup, u: &CouplingParams) -> Result<TelescopingReport> {
    let plus = uv_flow(setup, u, true)?;
    let minus = uv_flow(setup, u, false)?;
    let j0 = symmetrized_input(&plus, &minus)?;
    let input_class = input_class_report(&plus, &minus, &setup.spec)?;
    let ir = ir_flow(setup, &j0)?;
    let reference = telescoping_reference(setup, &j0)?;
    Ok(TelescopingReport {
        h: setup.spec.h,
        beta: setup.spec.beta,
        side: setup.spec.side,
        order: setup.order,
        n_h: setup.params.n_h,
        n_beta: setup.params.n_beta,
        couplings: u.u.iter().map(|z| (z.re, z.im)).collect(),
        uv_plus: plus.records,
        uv_minus: minus.records,
        input_class,
        residual: (ir.j_end() - reference).norm(),
        reference_re: reference.re,
        reference_im: reference.im,
        ir,
    })
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Log-integrals of the two formulations at one `h`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SymmetricGap {
    pub h: f64,
    /// `log int e^{(R^+ + R^-)/2} dmu_{C_{<=0}^infty}` with
    /// `R^delta = log int e^{-V^delta(psi + psi^1)} dmu_{C_{>0}^delta}(psi^1)`.
    pub symmetric: C64,
    /// `log int e^{-V} dmu_C`.
    pub direct: C64,
}

/// Compares the symmetric formulation with the direct one at order `order`.
pub fn symmetric_formulation_gap(spec: &LatticeSpec, t: &HoppingParams, u: &CouplingParams, order: usize) -> Result<SymmetricGap> {
    let config = FlowConfig {
        order,
        ..FlowConfig::default()
    };
    let setup = FlowSetup::four_band(spec, t, &config)?;
    let family = sliced_covariances(spec, &setup.table, &setup.bump, &setup.params)?;
    let limits = &setup.limits;
    let minus_v_plus = interaction_kernels(spec, u, true)?;
    let minus_v_minus = interaction_kernels(spec, u, false)?;
    let r_plus = integration_step(&Graded::at_grade(minus_v_plus.clone(), 1, order), &family.gt0_plus, limits, 1)?;
    let r_minus = integration_step(&Graded::at_grade(minus_v_minus, 1, order), &family.gt0_minus, limits, 1)?;
    let averaged = r_plus.add(&r_minus).scale(C64::new(0.5, 0.0));
    let symmetric = sum(&log_integral_grades(&averaged, &family.le0_infty, limits)?);
    let direct = sum(&log_integral_grades(&Graded::at_grade(minus_v_plus, 1, order), &family.full, limits)?);
    Ok(SymmetricGap {
        h: spec.h,
        symmetric,
        direct,
    })
}

/// One line of a bound report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoundRow {
    pub l: i64,
    /// Degree, or `sum` for an aggregated inequality.
    pub m: String,
    pub r: u8,
    pub norm: f64,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub pass: bool,
}

/// Engine-estimated constants and the derived desk configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoundConstants {
    /// Determinant constant of the ultraviolet slices.
    pub c0: f64,
    /// Decay constant `max_l M^l ||C_l||` of the ultraviolet slices.
    pub c0_prime: f64,
    /// Determinant constant of the scaled infrared slices.
    pub c_ir: f64,
    pub alpha_uv: f64,
    pub alpha_ir: f64,
    /// `min(1/((c0 + c0')^2 alpha_uv^4), f_t^2 / alpha_ir^4)`.
    pub radius: f64,
    /// Half the radius.
    pub desk_u: f64,
}

/// Estimates the constants from randomized determinant probes and slice
/// norms, and places `alpha` on the envelopes `alpha^2 >= M` (ultraviolet) and
/// `alpha >= M^{7/2}` (infrared).
pub fn estimate_constants(setup: &FlowSetup, seed: u64) -> Result<BoundConstants> {
    let spec = &setup.spec;
    let dist = DistanceTable::new(spec);
    let m = setup.params.m;
    let mut c0: f64 = 1.0;
    let mut c0_prime: f64 = 1.0;
    for l in 1..=setup.params.n_h {
        for plus in [true, false] {
            let cov = uv_slice(spec, &setup.table, &setup.bump, &setup.params, l, plus)?;
            c0 = c0.max(gram_bound_probe(&cov, 6, 200, seed)?.plateau);
            let weight = NormWeight {
                w: setup.params.weight(0),
                exponent: 0.5,
            };
            let norm = covariance_norm(&cov, &dist, weight, false).max(covariance_norm(&cov, &dist, weight, true));
            c0_prime = c0_prime.max(m.powi(l as i32) * norm);
        }
    }
    let mut c_ir: f64 = 1.0;
    for l in setup.params.n_beta..=0 {
        let cov = free_ir_slice(spec, &setup.table, &setup.bump, &setup.params, setup.f_t, l)?;
        c_ir = c_ir.max(gram_bound_probe(&cov, 6, 200, seed)?.plateau * m.powi(-(l as i32)));
    }
    let alpha_uv = m.sqrt();
    let alpha_ir = m.powf(3.5);
    let radius = (1.0 / ((c0 + c0_prime).powi(2) * alpha_uv.powi(4))).min(setup.f_t * setup.f_t / alpha_ir.powi(4));
    Ok(BoundConstants {
        c0,
        c0_prime,
        c_ir,
        alpha_uv,
        alpha_ir,
        radius,
        desk_u: radius / 2.0,
    })
}

fn norms_at(j: &Poly, setup: &FlowSetup, dist: &DistanceTable, l: i64) -> Vec<(f64, f64)> {
    poly_norms(
        j,
        &setup.spec,
        dist,
        NormWeight {
            w: setup.params.weight(l),
            exponent: 0.5,
        },
    )
}

/// The three ultraviolet inequalities at every scale of a flow:
/// `(h/N)|J_0| <= alpha^{-4}`, `c_0 alpha^2 ||J_2||_{0,r} <= 1` and
/// `M^{-2l} sum_{m>=2} c_0^{m/2} M^{lm/2} alpha^m ||J_m||_{0,r} <= 1`.
pub fn uv_bound_rows(flow: &UvFlow, setup: &FlowSetup, constants: &BoundConstants) -> Vec<BoundRow> {
    let dist = DistanceTable::new(&setup.spec);
    let n = setup.spec.signed_count() as f64;
    let (m_ratio, alpha, c0) = (setup.params.m, constants.alpha_uv, constants.c0);
    let mut rows = Vec::new();
    for (l, j) in &flow.states {
        let norms = norms_at(&j.collapse(), setup, &dist, 0);
        let lhs0 = setup.spec.h / n * norms[0].0;
        let rhs0 = alpha.powi(-4);
        rows.push(BoundRow {
            l: *l,
            m: "0".into(),
            r: 0,
            norm: norms[0].0,
            bound_lhs: lhs0,
            bound_rhs: rhs0,
            pass: lhs0 <= rhs0,
        });
        for r in 0..2u8 {
            let pick = |m: usize| norms.get(m).map(|v| if r == 0 { v.0 } else { v.1 }).unwrap_or(0.0);
            let lhs2 = c0 * alpha * alpha * pick(2);
            rows.push(BoundRow {
                l: *l,
                m: "2".into(),
                r,
                norm: pick(2),
                bound_lhs: lhs2,
                bound_rhs: 1.0,
                pass: lhs2 <= 1.0,
            });
            let mut total = 0.0;
            let mut norm_sum = 0.0;
            for m in (2..norms.len()).step_by(2) {
                norm_sum += pick(m);
                total += c0.powf(m as f64 / 2.0) * m_ratio.powf(*l as f64 * m as f64 / 2.0) * alpha.powi(m as i32) * pick(m);
            }
            let lhs = m_ratio.powf(-2.0 * *l as f64) * total;
            rows.push(BoundRow {
                l: *l,
                m: "sum".into(),
                r,
                norm: norm_sum,
                bound_lhs: lhs,
                bound_rhs: 1.0,
                pass: lhs <= 1.0,
            });
        }
    }
    rows
}

/// Membership inequalities of the infrared class at every state of a flow:
/// `(h/N)|J_0| <= M^{7l/2} alpha^{-3}` and
/// `M^{-7l/2 + rl} sum_{m>=2} c_IR^{m/2} M^{ml} alpha^m ||J_m||_{l,r} <= 1`.
pub fn ir_bound_rows(flow: &IrFlow, setup: &FlowSetup, constants: &BoundConstants) -> Vec<BoundRow> {
    let dist = DistanceTable::new(&setup.spec);
    let n = setup.spec.signed_count() as f64;
    let (m_ratio, alpha, c_ir) = (setup.params.m, constants.alpha_ir, constants.c_ir);
    let mut rows = Vec::new();
    for (l, j) in &flow.states {
        let lf = *l as f64;
        let norms = norms_at(&j.collapse(), setup, &dist, *l);
        let lhs0 = setup.spec.h / n * norms[0].0;
        let rhs0 = m_ratio.powf(3.5 * lf) * alpha.powi(-3);
        rows.push(BoundRow {
            l: *l,
            m: "0".into(),
            r: 0,
            norm: norms[0].0,
            bound_lhs: lhs0,
            bound_rhs: rhs0,
            pass: lhs0 <= rhs0,
        });
        for r in 0..2u8 {
            let pick = |m: usize| norms.get(m).map(|v| if r == 0 { v.0 } else { v.1 }).unwrap_or(0.0);
            let mut total = 0.0;
            let mut norm_sum = 0.0;
            for m in (2..norms.len()).step_by(2) {
                norm_sum += pick(m);
                total += c_ir.powf(m as f64 / 2.0) * m_ratio.powf(m as f64 * lf) * alpha.powi(m as i32) * pick(m);
            }
            let lhs = m_ratio.powf(-3.5 * lf + r as f64 * lf) * total;
            rows.push(BoundRow {
                l: *l,
                m: "sum".into(),
                r,
                norm: norm_sum,
                bound_lhs: lhs,
                bound_rhs: 1.0,
                pass: lhs <= 1.0,
            });
        }
    }
    rows
}

/// Bound report of the desk configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub uv_plus: Vec<BoundRow>,
    pub uv_minus: Vec<BoundRow>,
    pub ir: Vec<BoundRow>,
    pub all_pass: bool,
}

/// Runs both flows at the uniform desk coupling and evaluates every inequality.
pub fn bound_report(setup: &FlowSetup, seed: u64) -> Result<BoundReport> {
    let constants = estimate_constants(setup, seed)?;
    let u = CouplingParams::uniform(setup.spec.bands, constants.desk_u);
    let plus = uv_flow(setup, &u, true)?;
    let minus = uv_flow(setup, &u, false)?;
    let j0 = symmetrized_input(&plus, &minus)?;
    let ir = ir_flow(setup, &j0)?;
    let uv_plus = uv_bound_rows(&plus, setup, &constants);
    let uv_minus = uv_bound_rows(&minus, setup, &constants);
    let ir_rows = ir_bound_rows(&ir, setup, &constants);
    let all_pass = uv_plus.iter().chain(&uv_minus).chain(&ir_rows).all(|r| r.pass);
    Ok(BoundReport {
        constants,
        uv_plus,
        uv_minus,
        ir: ir_rows,
        all_pass,
    })
}

/// One row of the two-temperature comparison.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TwoTemperatureRow {
    pub beta1: f64,
    pub beta2: f64,
    pub j_end_1: f64,
    pub j_end_2: f64,
    pub difference: f64,
    /// `max_l |(h/N_1) J_0^{+,l}(beta_1) - (h/N_2) J_0^{+,l}(beta_2)|` over common scales.
    pub uv_constant_difference: f64,
    pub envelope: f64,
}

/// Free-energy and per-generator ultraviolet constant differences between
/// temperature pairs at a common `h`.
pub fn two_temperature_report(
    pairs: &[(f64, f64)],
    side: usize,
    h: f64,
    t: &HoppingParams,
    u: &CouplingParams,
    config: &FlowConfig,
) -> Result<Vec<TwoTemperatureRow>> {
    let run = |beta: f64| -> Result<(C64, Vec<(i64, C64)>, f64)> {
        let spec = LatticeSpec::new(2, side, 4, beta, h)?;
        let setup = FlowSetup::four_band(&spec, t, config)?;
        let plus = uv_flow(&setup, u, true)?;
        let minus = uv_flow(&setup, u, false)?;
        let constants: Vec<(i64, C64)> = plus.states.iter().map(|(l, j)| (*l, sum(&j.constant()))).collect();
        let j0 = symmetrized_input(&plus, &minus)?;
        let ir = ir_flow(&setup, &j0)?;
        Ok((ir.j_end(), constants, spec.h / spec.signed_count() as f64))
    };
    pairs
        .iter()
        .map(|&(b1, b2)| {
            if !(b1 <= b2) {
                return Err(EngineError::Config(format!("temperature pair ({b1}, {b2}) must be ordered")));
            }
            let (e1, c1, s1) = run(b1)?;
            let (e2, c2, s2) = if b1 == b2 { (e1, c1.clone(), s1) } else { run(b2)? };
            let mut uv = 0.0f64;
            for (l, a) in &c1 {
                if let Some((_, b)) = c2.iter().find(|(l2, _)| l2 == l) {
                    uv = uv.max((a * s1 - b * s2).norm());
                }
            }
            Ok(TwoTemperatureRow {
                beta1: b1,
                beta2: b2,
                j_end_1: e1.re,
                j_end_2: e2.re,
                difference: (e1 - e2).norm(),
                uv_constant_difference: uv,
                envelope: b1.powf(-0.5),
            })
        })
        .collect()
}

/// `T^{(n)} = (1/n!) (d/dz)^n log int e^{z J(psi + psi^1)} dmu_C(psi^1) |_{z=0}`
/// for `n = 0..=n_max`, with `z` carried as the grade.
pub fn tree_coefficients(j: &Poly, cov: &Covariance, n_max: usize, limits: &AlgebraLimits) -> Result<Vec<Poly>> {
    if n_max == 0 || n_max > 5 {
        return Err(EngineError::Capacity(format!("tree order {n_max} must lie in 1..=5")));
    }
    let mut limits = limits.clone();
    limits.exact = true;
    let e = exp_graded(&Graded::at_grade(j.clone(), 1, n_max), &limits)?;
    let f = free_integrate_graded(&e, cov, &limits)?;
    Ok(log_graded(&f, &limits)?.grades)
}

/// Labeled tree on `0..n` as an edge list, decoded from a Pruefer sequence.
pub fn pruefer_decode(sequence: &[usize], n: usize) -> Vec<(usize, usize)> {
    if n == 1 {
        return Vec::new();
    }
    let mut degree = vec![1usize; n];
    for &v in sequence {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &v in sequence {
        let leaf = (0..n).find(|&x| degree[x] == 1).expect("a leaf exists");
        edges.push((leaf.min(v), leaf.max(v)));
        degree[leaf] = 0;
        degree[v] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&x| degree[x] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges.sort_unstable();
    edges
}

/// Every labeled tree on `n` vertices from all Pruefer sequences.
pub fn labeled_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n <= 2 {
        return if n == 2 { vec![vec![(0, 1)]] } else { vec![Vec::new()] };
    }
    let len = n - 2;
    let total = n.pow(len as u32);
    (0..total)
        .map(|mut idx| {
            let seq: Vec<usize> = (0..len)
                .map(|_| {
                    let v = idx % n;
                    idx /= n;
                    v
                })
                .collect();
            pruefer_decode(&seq, n)
        })
        .collect()
}

/// Number of spanning trees of the complete graph by testing every
/// `(n-1)`-edge subset for connectivity.
pub fn spanning_tree_count(n: usize) -> usize {
    if n <= 1 {
        return 1;
    }
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let k = n - 1;
    let mut count = 0;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut acyclic = true;
        for &e in &idx {
            let (a, b) = edges[e];
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra == rb {
                acyclic = false;
                break;
            }
            parent[ra] = rb;
        }
        if acyclic {
            count += 1;
        }
        let mut j = k;
        loop {
            if j == 0 {
                return count;
            }
            j -= 1;
            if idx[j] < edges.len() - (k - j) {
                idx[j] += 1;
                for q in j + 1..k {
                    idx[q] = idx[q - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Combinatorics of one tree size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TreeRow {
    pub n: usize,
    pub trees: usize,
    pub cayley: usize,
    pub spanning_subsets: Option<usize>,
    /// Whether every tree has incidence numbers summing to `2(n - 1)`.
    pub incidence_ok: bool,
    /// Largest `lhs / 2^{2 sum m_j}` over all `m_j` in `1..=m_max`.
    pub worst_ratio: f64,
    pub cases: usize,
    pub pass: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Exhaustive check of
/// `(2^{n-1}/n!) sum_T 1{n_j(T) <= m_j} prod_j m_j binom(m_j - 1, n_j(T) - 1) (n_j(T) - 1)! <= 2^{2 sum m_j}`
/// for `2 <= n <= n_max` and `1 <= m_j <= m_max`, together with Cayley counts
/// up to `cayley_max` (independently by edge subsets up to 7 vertices).
pub fn tree_combinatorics_check(n_max: usize, m_max: usize, cayley_max: usize) -> Result<Vec<TreeRow>> {
    if n_max > 7 || cayley_max > 8 || m_max == 0 {
        return Err(EngineError::Capacity("tree check supports n <= 7 and Cayley counts up to 8".into()));
    }
    let mut rows = Vec::new();
    for n in 2..=n_max.max(cayley_max) {
        let trees = labeled_trees(n);
        let degrees: Vec<Vec<usize>> = trees
            .iter()
            .map(|edges| {
                let mut d = vec![0usize; n];
                for &(a, b) in edges {
                    d[a] += 1;
                    d[b] += 1;
                }
                d
            })
            .collect();
        let incidence_ok = degrees.iter().all(|d| d.iter().sum::<usize>() == 2 * (n - 1));
        let mut distinct = trees.clone();
        distinct.sort();
        distinct.dedup();
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        if n <= n_max {
            let total = m_max.pow(n as u32);
            for mut idx in 0..total {
                let m: Vec<usize> = (0..n)
                    .map(|_| {
                        let v = idx % m_max + 1;
                        idx /= m_max;
                        v
                    })
                    .collect();
                let mut acc = 0.0;
                for d in &degrees {
                    if d.iter().zip(&m).all(|(nj, mj)| nj <= mj) {
                        acc += d
                            .iter()
                            .zip(&m)
                            .map(|(&nj, &mj)| mj as f64 * binomial(mj - 1, nj - 1) * factorial(nj - 1))
                            .product::<f64>();
                    }
                }
                let lhs = 2f64.powi(n as i32 - 1) / factorial(n) * acc;
                let rhs = 2f64.powi(2 * m.iter().sum::<usize>() as i32);
                worst = worst.max(lhs / rhs);
                cases += 1;
            }
        }
        let cayley = n.pow(n as u32 - 2);
        let spanning = (n <= 7).then(|| spanning_tree_count(n));
        let pass = distinct.len() == trees.len()
            && trees.len() == cayley
            && spanning.is_none_or(|s| s == cayley)
            && incidence_ok
            && worst < 1.0;
        rows.push(TreeRow {
            n,
            trees: distinct.len(),
            cayley,
            spanning_subsets: spanning,
            incidence_ok,
            worst_ratio: worst,
            cases,
            pass,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::full_covariance;
    use crate::grassmann::{exp_poly, log_poly};

    fn desk_spec() -> LatticeSpec {
        LatticeSpec::new(2, 1, 4, 1.0, 4.0).unwrap()
    }

    #[test]
    fn zero_coupling_flow_vanishes() {
        let spec = desk_spec();
        let setup = FlowSetup::four_band(&spec, &HoppingParams::uniform(1.0), &FlowConfig::default()).unwrap();
        let report = telescoping_run(&setup, &CouplingParams::uniform(4, 0.0)).unwrap();
        assert_eq!(report.ir.j_end(), zero());
        assert!(report.ir.states.iter().all(|(_, j)| j.collapse().is_zero()));
    }

    #[test]
    fn one_band_uv_constant_matches_direct_integral() {
        let spec = LatticeSpec::new(1, 1, 1, 1.0, 2.0).unwrap();
        let table = HoppingTable::nearest_neighbor(1, 1.0);
        let config = FlowConfig {
            order: 3,
            ..FlowConfig::default()
        };
        let setup = FlowSetup::generic(&spec, &table, 1.0, &config).unwrap();
        let u = CouplingParams::uniform(1, 1e-2);
        let family = sliced_covariances(&spec, &table, &setup.bump, &setup.params).unwrap();
        for plus in [true, false] {
            let flow = uv_flow(&setup, &u, plus).unwrap();
            let got = sum(&flow.result().constant());
            let v = interaction_kernels(&spec, &u, plus).unwrap();
            let cov = if plus { &family.gt0_plus } else { &family.gt0_minus };
            let direct = integrate_full(&exp_poly(&v, &AlgebraLimits::default()).unwrap(), cov).ln();
            assert!((got - direct).norm() < 1e-10, "{got} vs {direct}");
            let first = flow.result().grades[1].constant();
            assert!((first - integrate_full(&v, cov)).norm() < 1e-14);
        }
    }

    #[test]
    fn quadratic_determinant_identity_holds_in_both_routes() {
        let spec = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
        let table = HoppingTable::nearest_neighbor(1, 1.0);
        let cov = full_covariance(&spec, &table).unwrap();
        // Translation-invariant spin-symmetric quadratic form.
        let mut raw = Poly::zero();
        for xu in 0..spec.unsigned_count() {
            let x = spec.unsigned_at(xu);
            for yu in 0..spec.unsigned_count() {
                let y = spec.unsigned_at(yu);
                if x.spin != y.spin {
                    continue;
                }
                let ds = (x.site + spec.side - y.site) % spec.side;
                let dt = x.time - y.time;
                let c = C64::new(0.03 * (1.0 + ds as f64) - 0.01 * dt as f64, 0.02 * dt as f64);
                raw = raw.add(&Poly::monomial(&[2 * xu, 2 * yu + 1], c));
            }
        }
        let q = quadratic_matrix(&raw, &spec);
        let via_det = quadratic_log_det(&cov, &q);
        let direct = integrate_full(&exp_poly(&raw, &AlgebraLimits::default()).unwrap(), &cov).ln();
        assert!((via_det - direct).norm() < 1e-12, "{via_det} vs {direct}");
    }

    #[test]
    fn momentum_determinant_matches_real_space_route() {
        let spec = desk_spec();
        let setup = FlowSetup::four_band(&spec, &HoppingParams::uniform(1.0), &FlowConfig::default()).unwrap();
        let report = telescoping_run(&setup, &CouplingParams::real(&[1e-2, -5e-3, 2e-3, 7e-3])).unwrap();
        for r in &report.ir.records {
            let momentum = C64::new(2.0 * r.log_det_re, 2.0 * r.log_det_im);
            let real = C64::new(r.log_det_real_space_re, r.log_det_real_space_im);
            assert!((momentum - real).norm() < 1e-12, "scale {}: {momentum} vs {real}", r.l);
        }
        assert!(report.ir.cutoff_mismatch < 1e-14);
    }

    #[test]
    fn telescoping_identity_at_small_coupling() {
        let spec = desk_spec();
        let setup = FlowSetup::four_band(&spec, &HoppingParams::uniform(1.0), &FlowConfig::default()).unwrap();
        let report = telescoping_run(&setup, &CouplingParams::uniform(4, 1e-3)).unwrap();
        println!("telescoping residual {:.3e}", report.residual);
        assert!(report.residual < 1e-8, "{}", report.residual);
        assert!(report.input_class.iter().all(|r| r.residual < 1e-10), "{:?}", report.input_class);
        assert!(report.ir.invariance.iter().all(|r| r.residual < 1e-9));
    }

    #[test]
    fn tree_coefficients_of_a_quadratic_form_follow_the_log_det_series() {
        let spec = LatticeSpec::new(1, 1, 1, 1.0, 2.0).unwrap();
        let cov = full_covariance(&spec, &HoppingTable::nearest_neighbor(1, 1.0)).unwrap();
        let n0 = spec.unsigned_count();
        let mut j = Poly::zero();
        for x in 0..n0 {
            for y in 0..n0 {
                if spec.unsigned_at(x).spin == spec.unsigned_at(y).spin {
                    j = j.add(&Poly::monomial(&[2 * x, 2 * y + 1], C64::new(0.01 + 0.005 * (x + y) as f64, 0.0)));
                }
            }
        }
        let t = tree_coefficients(&j, &cov, 4, &AlgebraLimits::default()).unwrap();
        // log det(I + z X) = sum_n (-1)^{n+1} z^n tr X^n / n
        let x = &cov.matrix * quadratic_matrix(&j, &spec).transpose();
        let mut power = DMatrix::<C64>::identity(n0, n0);
        for (n, tn) in t.iter().enumerate().skip(1) {
            power = &power * &x;
            let expect = power.trace() * (if n % 2 == 1 { 1.0 } else { -1.0 } / n as f64);
            assert!((tn.constant() - expect).norm() < 1e-12, "order {n}");
            assert_eq!(tn.odd_max_abs(), 0.0);
        }
        let whole = log_poly(
            &crate::grassmann::free_integrate(&exp_poly(&j, &AlgebraLimits::default()).unwrap(), &cov, &AlgebraLimits::default()).unwrap(),
            &AlgebraLimits::default(),
        )
        .unwrap();
        let partial = t.iter().fold(Poly::zero(), |a, b| a.add(b));
        assert!(partial.max_diff(&whole) < 1e-6, "{}", partial.max_diff(&whole));
    }

    #[test]
    fn trees_counts_and_bound() {
        let rows = tree_combinatorics_check(4, 3, 5).unwrap();
        assert_eq!(rows[0].trees, 1);
        assert_eq!(rows[2].trees, 16);
        assert!(rows.iter().all(|r| r.pass));
    }

    #[test]
    fn equal_temperatures_give_zero_difference() {
        let rows = two_temperature_report(&[(1.0, 1.0)], 1, 4.0, &HoppingParams::uniform(1.0), &CouplingParams::uniform(4, 1e-3), &FlowConfig::default()).unwrap();
        assert_eq!(rows[0].difference, 0.0);
    }
}
