//! Configuration, experiment orchestration and report emission.
//!
//! A run reads a JSON [`RunConfig`], resolves every default, executes one
//! experiment and writes `report.json` plus `tables/*.csv` into the output
//! directory. Exit codes: 0 success, 1 configuration or engineering error,
//! 2 a bound check or acceptance check failed, 3 flow abort, 4 capacity.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::covariance::{
    covariance_norm, full_symbol_blocks, gram_bound_probe, sliced_covariances, uv_slice, Covariance,
};
use crate::cutoff::{ir_cutoff_table, uv_cutoff_table, GevreyBump};
use crate::grassmann::{AlgebraLimits, DistanceTable, NormWeight};
use crate::lattice_index::LatticeSpec;
use crate::model::{CouplingParams, HoppingParams, HoppingTable};
use crate::oracle::{
    convergence_suite, flux_phase_search, four_band_equivalence, gauge_invariance_check, geometry_spec, interacting_trace,
    ExperimentGrid, FluxMode,
};
use crate::rgflow::{
    estimate_constants, ir_bound_rows, ir_flow, symmetrized_input, telescoping_reference, two_temperature_report,
    uv_bound_rows, uv_flow, with_workers, FlowConfig, FlowSetup, InvarianceRow,
};
use crate::suites::{run_criterion, CriterionOutcome, CONVERGE_CRITERIA, VERIFY_CRITERIA};
use crate::{EngineError, Result};

/// Version of the report layout embedded in every `report.json`.
pub const REPORT_SCHEMA_VERSION: &str = "1.0.0";

pub fn report_schema_version() -> &'static str {
    REPORT_SCHEMA_VERSION
}

/// Experiments selectable on the command line or in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    Covariance,
    Uvflow,
    Irflow,
    FreeEnergy,
    Fluxphase,
    Converge,
    Verify,
}

/// Dispersion source of the model block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dispersion {
    /// Four-band flux dispersion built from `model.t`.
    FourBand,
    /// Explicit hopping table; `f_t` is the infrared constant of the cutoffs.
    CustomTable { table: HoppingTable, f_t: f64 },
}

fn default_dim() -> usize {
    2
}
fn default_side() -> usize {
    1
}
fn default_bands() -> usize {
    4
}
fn default_beta() -> f64 {
    1.0
}
fn default_h() -> f64 {
    4.0
}
fn default_t() -> HoppingParams {
    HoppingParams::uniform(1.0)
}
fn default_u() -> Vec<f64> {
    vec![1e-3; 4]
}
fn default_dispersion() -> Dispersion {
    Dispersion::FourBand
}

/// Lattice, hoppings and couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "default_dim")]
    pub d: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_bands")]
    pub bands: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_t")]
    pub t: HoppingParams,
    /// Real couplings, one per band.
    #[serde(default = "default_u")]
    pub u: Vec<f64>,
    #[serde(default = "default_dispersion")]
    pub dispersion: Dispersion,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            d: default_dim(),
            side: default_side(),
            bands: default_bands(),
            beta: default_beta(),
            h: default_h(),
            t: default_t(),
            u: default_u(),
            dispersion: default_dispersion(),
        }
    }
}

fn default_m() -> f64 {
    4.0
}
fn default_one() -> f64 {
    1.0
}
fn default_order() -> usize {
    2
}
fn default_bump_order() -> usize {
    8
}
fn default_degree_cap() -> usize {
    AlgebraLimits::default().degree_cap
}
fn default_term_budget() -> usize {
    AlgebraLimits::default().term_budget
}
fn default_true() -> bool {
    true
}

/// Scale and algebra parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleBlock {
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default = "default_one")]
    pub alpha: f64,
    #[serde(default = "default_one")]
    pub c_w: f64,
    /// Number of box kernels in the bump construction.
    #[serde(default = "default_bump_order")]
    pub bump_order: usize,
    /// Highest coupling grade kept in the flows.
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_degree_cap")]
    pub degree_cap: usize,
    #[serde(default = "default_term_budget")]
    pub term_budget: usize,
    #[serde(default = "default_true")]
    pub exact: bool,
}

impl Default for ScaleBlock {
    fn default() -> Self {
        ScaleBlock {
            m: default_m(),
            alpha: default_one(),
            c_w: default_one(),
            bump_order: default_bump_order(),
            order: default_order(),
            degree_cap: default_degree_cap(),
            term_budget: default_term_budget(),
            exact: default_true(),
        }
    }
}

fn default_flux_side() -> usize {
    4
}
fn default_flux_interacting_side() -> usize {
    2
}
fn default_flux_grid() -> Vec<f64> {
    vec![0.0, std::f64::consts::PI]
}
fn default_gauge_trials() -> usize {
    20
}

/// Parameters of the flux search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxBlock {
    /// Side `2L` of the free search.
    #[serde(default = "default_flux_side")]
    pub free_side: usize,
    /// Side `2L` of the interacting search.
    #[serde(default = "default_flux_interacting_side")]
    pub interacting_side: usize,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_one")]
    pub t: f64,
    /// Coupling of the interacting search.
    #[serde(default = "default_one")]
    pub u: f64,
    #[serde(default = "default_flux_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_gauge_trials")]
    pub gauge_trials: usize,
}

impl Default for FluxBlock {
    fn default() -> Self {
        FluxBlock {
            free_side: default_flux_side(),
            interacting_side: default_flux_interacting_side(),
            beta: default_one(),
            t: default_one(),
            u: default_one(),
            grid: default_flux_grid(),
            gauge_trials: default_gauge_trials(),
        }
    }
}

fn default_pairs() -> Vec<(f64, f64)> {
    vec![(1.0, 2.0)]
}

/// Extra inputs of the `converge` experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeBlock {
    #[serde(default)]
    pub grid: ExperimentGrid,
    /// Temperature pairs of the two-temperature comparison at `model.h`.
    #[serde(default = "default_pairs")]
    pub temperature_pairs: Vec<(f64, f64)>,
}

impl Default for ConvergeBlock {
    fn default() -> Self {
        ConvergeBlock {
            grid: ExperimentGrid::default(),
            temperature_pairs: default_pairs(),
        }
    }
}

fn default_experiment() -> Experiment {
    Experiment::Irflow
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_workers() -> usize {
    1
}

/// Full run configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_experiment")]
    pub experiment: Experiment,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub scale: ScaleBlock,
    #[serde(default)]
    pub flux: FluxBlock,
    #[serde(default)]
    pub converge: ConvergeBlock,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: default_experiment(),
            model: ModelBlock::default(),
            scale: ScaleBlock::default(),
            flux: FluxBlock::default(),
            converge: ConvergeBlock::default(),
            out: default_out(),
            seed: 0,
            workers: default_workers(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| EngineError::Config(format!("config schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks the lattice, the time grid, the scale ratio and the couplings.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        self.spec()?;
        if m.u.len() != m.bands {
            return Err(EngineError::Config(format!("model.u has {} entries for {} bands", m.u.len(), m.bands)));
        }
        if m.u.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Config("model.u must be finite".into()));
        }
        match &m.dispersion {
            Dispersion::FourBand => {
                if m.bands != 4 || m.d != 2 {
                    return Err(EngineError::Config("the four_band dispersion needs d = 2 and bands = 4".into()));
                }
                m.t.validate()?;
            }
            Dispersion::CustomTable { table, f_t } => {
                table.validate()?;
                if table.bands != m.bands || table.dim != m.d {
                    return Err(EngineError::Config("custom table shape does not match the model block".into()));
                }
                if !(*f_t > 0.0) {
                    return Err(EngineError::Config("custom f_t must be positive".into()));
                }
            }
        }
        let s = &self.scale;
        if !(s.m > 2f64.sqrt()) {
            return Err(EngineError::Config(format!("scale.m = {} must exceed sqrt(2)", s.m)));
        }
        if s.order == 0 {
            return Err(EngineError::Config("scale.order must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(EngineError::Config("workers must be at least 1".into()));
        }
        if self.experiment == Experiment::Converge {
            self.converge.grid.validate()?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<LatticeSpec> {
        let m = &self.model;
        LatticeSpec::new(m.d, m.side, m.bands, m.beta, m.h)
    }

    pub fn couplings(&self) -> CouplingParams {
        CouplingParams::real(&self.model.u)
    }

    pub fn table(&self) -> HoppingTable {
        match &self.model.dispersion {
            Dispersion::FourBand => HoppingTable::four_band(&self.model.t),
            Dispersion::CustomTable { table, .. } => table.clone(),
        }
    }

    pub fn limits(&self) -> AlgebraLimits {
        AlgebraLimits {
            degree_cap: self.scale.degree_cap,
            term_budget: self.scale.term_budget,
            exact: self.scale.exact,
            ..AlgebraLimits::default()
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            m: self.scale.m,
            c_w: self.scale.c_w,
            alpha: self.scale.alpha,
            order: self.scale.order,
            limits: self.limits(),
        }
    }

    pub fn setup(&self) -> Result<FlowSetup> {
        let spec = self.spec()?;
        let mut setup = match &self.model.dispersion {
            Dispersion::FourBand => FlowSetup::four_band(&spec, &self.model.t, &self.flow_config())?,
            Dispersion::CustomTable { table, f_t } => FlowSetup::generic(&spec, table, *f_t, &self.flow_config())?,
        };
        if self.scale.bump_order != setup.bump.order {
            setup.bump = GevreyBump::build(self.scale.bump_order, setup.bump.step)?;
        }
        Ok(setup)
    }
}

/// Command line: `grassmann-rg <experiment> --config <path> [--seed N] [--workers N] [--out DIR]`.
#[derive(Debug, Parser)]
#[command(name = "grassmann-rg", version, about = "Desk-scale Grassmann-integral renormalization-group engine")]
pub struct Cli {
    #[arg(value_enum)]
    pub experiment: Experiment,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One named CSV table.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

fn table<T: Serialize>(name: &str, rows: &[T]) -> Result<Table> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer.serialize(r).map_err(|e| EngineError::Numeric(format!("table {name}: {e}")))?;
    }
    let bytes = writer.into_inner().map_err(|e| EngineError::Numeric(format!("table {name}: {e}")))?;
    Ok(Table {
        name: name.into(),
        csv: String::from_utf8(bytes).map_err(|e| EngineError::Numeric(e.to_string()))?,
    })
}

/// Result of an experiment before it is written out.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub result: Value,
    /// Named checks with their pass flags; any failure maps to exit code 2.
    pub checks: Vec<(String, bool)>,
    pub tables: Vec<Table>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| EngineError::Numeric(e.to_string()))
}

/// Exit code of an engine error.
pub fn exit_code(e: &EngineError) -> i32 {
    match e {
        EngineError::FlowAbort(_) => 3,
        EngineError::Capacity(_) => 4,
        _ => 1,
    }
}

fn warn_outside_radius(config: &RunConfig, setup: &FlowSetup) -> Result<Value> {
    let constants = estimate_constants(setup, config.seed)?;
    let u_max = config.couplings().u_max();
    if u_max > constants.radius {
        log::warn!(
            "max |U| = {u_max:.3e} lies outside the estimated small-coupling radius {:.3e}; bound checks may fail",
            constants.radius
        );
    }
    Ok(json!({ "constants": constants, "u_max": u_max, "inside_radius": u_max <= constants.radius }))
}

fn covariance_summary(name: &str, cov: &Covariance, dist: &DistanceTable, weight: NormWeight) -> Value {
    json!({
        "name": name,
        "max_abs": cov.max_abs(),
        "norm": covariance_norm(cov, dist, weight, false),
        "first_moment_norm": covariance_norm(cov, dist, weight, true),
        "spin_offdiagonal_max": cov.spin_offdiagonal_max(),
    })
}

fn run_covariance(config: &RunConfig) -> Result<Artifacts> {
    let setup = config.setup()?;
    let spec = &setup.spec;
    let family = sliced_covariances(spec, &setup.table, &setup.bump, &setup.params)?;
    let dist = DistanceTable::new(spec);
    let weight = NormWeight {
        w: setup.params.weight(0),
        exponent: 0.5,
    };
    let mut summaries = vec![
        covariance_summary("full", &family.full, &dist, weight),
        covariance_summary("le0_plus", &family.le0_plus, &dist, weight),
        covariance_summary("gt0_plus", &family.gt0_plus, &dist, weight),
        covariance_summary("gt0_minus", &family.gt0_minus, &dist, weight),
        covariance_summary("le0_infty", &family.le0_infty, &dist, weight),
        covariance_summary("gt0_plus_h", &family.gt0_plus_h, &dist, weight),
        covariance_summary("identity", &family.identity, &dist, weight),
    ];
    let mut sum = family.le0_plus.clone();
    let mut gram = Vec::new();
    for l in 1..=setup.params.n_h {
        let slice = uv_slice(spec, &setup.table, &setup.bump, &setup.params, l, true)?;
        summaries.push(covariance_summary(&format!("uv_slice_{l}"), &slice, &dist, weight));
        gram.push(json!({ "l": l, "probe": gram_bound_probe(&slice, 6, 200, config.seed)? }));
        sum = sum.plus(&slice);
    }
    let slice_sum = sum.max_diff(&family.full);
    let signed_identity = family.gt0_plus_h.max_diff(&family.gt0_minus.plus(&family.identity));
    let split = family.full.max_diff(&family.le0_plus.plus(&family.gt0_plus));
    let checks = vec![
        ("slice_sum_below_1e-10".to_string(), slice_sum < 1e-10),
        ("signed_identity_below_1e-12".to_string(), signed_identity < 1e-12),
        ("split_below_1e-12".to_string(), split < 1e-12),
    ];
    let tables = vec![
        table("full_symbols", &symbol_rows(spec, &setup.table)?)?,
        table("uv_cutoff", &uv_cutoff_table(&setup.bump, &setup.params, spec)?)?,
        table("ir_cutoff", &ir_cutoff_table(&setup.bump, &setup.params, spec, setup.f_t)?)?,
    ];
    Ok(Artifacts {
        result: json!({
            "scale_params": setup.params,
            "covariances": summaries,
            "slice_sum_residual": slice_sum,
            "signed_identity_residual": signed_identity,
            "split_residual": split,
            "gram_probes": gram,
        }),
        checks,
        tables,
    })
}

/// CSV row of one symbol block entry; the momentum is written space-separated.
#[derive(Serialize)]
struct SymbolRow {
    omega: f64,
    k: String,
    rho: usize,
    eta: usize,
    re: f64,
    im: f64,
}

fn symbol_rows(spec: &LatticeSpec, table: &HoppingTable) -> Result<Vec<SymbolRow>> {
    Ok(full_symbol_blocks(spec, table)?
        .into_iter()
        .map(|b| SymbolRow {
            omega: b.omega,
            k: b.k.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" "),
            rho: b.rho,
            eta: b.eta,
            re: b.re,
            im: b.im,
        })
        .collect())
}

fn run_uvflow(config: &RunConfig) -> Result<Artifacts> {
    let setup = config.setup()?;
    let domain = warn_outside_radius(config, &setup)?;
    let u = config.couplings();
    let plus = uv_flow(&setup, &u, true)?;
    let minus = uv_flow(&setup, &u, false)?;
    let constants = estimate_constants(&setup, config.seed)?;
    let rows_plus = uv_bound_rows(&plus, &setup, &constants);
    let rows_minus = uv_bound_rows(&minus, &setup, &constants);
    let pass = rows_plus.iter().chain(&rows_minus).all(|r| r.pass);
    Ok(Artifacts {
        result: json!({
            "scale_params": setup.params,
            "domain": domain,
            "uv_plus": plus.records,
            "uv_minus": minus.records,
        }),
        checks: vec![("uv_bounds".into(), pass)],
        tables: vec![
            table("uv_scales_plus", &plus.records)?,
            table("uv_scales_minus", &minus.records)?,
            table("uv_bounds_plus", &rows_plus)?,
            table("uv_bounds_minus", &rows_minus)?,
        ],
    })
}

fn run_irflow(config: &RunConfig, include_reference: bool) -> Result<Artifacts> {
    let setup = config.setup()?;
    let domain = warn_outside_radius(config, &setup)?;
    let u = config.couplings();
    let plus = uv_flow(&setup, &u, true)?;
    let minus = uv_flow(&setup, &u, false)?;
    let j0 = symmetrized_input(&plus, &minus)?;
    let ir = ir_flow(&setup, &j0)?;
    let constants = estimate_constants(&setup, config.seed)?;
    let bounds = ir_bound_rows(&ir, &setup, &constants);
    let invariance_max = ir.invariance.iter().map(|r| r.residual).fold(0.0, f64::max);
    let mut checks = vec![
        ("ir_bounds".to_string(), bounds.iter().all(|r| r.pass)),
        ("invariance_below_1e-9".to_string(), invariance_max < 1e-9),
    ];
    let mut result = json!({
        "scale_params": setup.params,
        "domain": domain,
        "ir": ir,
        "j_end": ir.j_end_re,
        "j_end_im": ir.j_end_im,
    });
    if include_reference {
        let reference = telescoping_reference(&setup, &j0)?;
        let residual = (ir.j_end() - reference).norm();
        result["telescoping_reference"] = json!(reference.re);
        result["telescoping_residual"] = json!(residual);
        checks.push(("telescoping_below_1e-8".into(), residual < 1e-8));
        if let Ok(fock_spec) = geometry_spec(setup.spec.dim, setup.spec.side, setup.spec.bands, setup.spec.beta) {
            if let Ok(trace) = interacting_trace(&fock_spec, &setup.table, &u) {
                result["fock_free_energy_density"] = json!(-trace.ratio.ln() / setup.spec.beta / setup.spec.sites() as f64);
            }
        }
    }
    let invariance: Vec<InvarianceRow> = ir.invariance.clone();
    Ok(Artifacts {
        result,
        checks,
        tables: vec![
            table("ir_scales", &ir.records)?,
            table("ir_bounds", &bounds)?,
            table("invariance", &invariance)?,
        ],
    })
}

fn run_fluxphase(config: &RunConfig) -> Result<Artifacts> {
    let f = &config.flux;
    let free = flux_phase_search(f.free_side, f.beta, f.t, 0.0, &f.grid, FluxMode::Free)?;
    let interacting = flux_phase_search(f.interacting_side, f.beta, f.t, f.u, &f.grid, FluxMode::Interacting)?;
    let gauge_free = gauge_invariance_check(f.free_side, f.beta, f.t, 0.0, FluxMode::Free, f.gauge_trials, config.seed)?;
    let gauge_ed = gauge_invariance_check(f.interacting_side, f.beta, f.t, f.u, FluxMode::Interacting, f.gauge_trials, config.seed)?;
    let equivalence = four_band_equivalence(1, &config.model.t, &config.couplings(), f.beta).ok();
    let checks = vec![
        ("free_loop_config_attains_minimum".to_string(), free.loop_rank == 1),
        (
            "interacting_pi_below_zero_flux".to_string(),
            interacting.loop_free_energy <= interacting.zero_flux_free_energy - 1e-6,
        ),
        ("gauge_below_1e-10".to_string(), gauge_free.max_difference.max(gauge_ed.max_difference) < 1e-10),
    ];
    let tables = vec![table("flux_free", &free.rows)?, table("flux_interacting", &interacting.rows)?];
    let summarize = |t: &crate::oracle::FluxTable| {
        json!({
            "side": t.side, "beta": t.beta, "t": t.t, "u": t.u, "configurations": t.rows.len(),
            "min_free_energy": t.min_free_energy, "loop_free_energy": t.loop_free_energy,
            "model_free_energy": t.model_free_energy, "zero_flux_free_energy": t.zero_flux_free_energy,
            "loop_rank": t.loop_rank, "loop_class_spread": t.loop_class_spread,
        })
    };
    Ok(Artifacts {
        result: json!({
            "free": summarize(&free),
            "interacting": summarize(&interacting),
            "gauge": [gauge_free, gauge_ed],
            "four_band_equivalence": equivalence,
        }),
        checks,
        tables,
    })
}

fn criteria_artifacts(ids: &[u8]) -> Result<Artifacts> {
    let outcomes: Vec<CriterionOutcome> = ids.iter().map(|&id| run_criterion(id)).collect::<Result<_>>()?;
    for o in &outcomes {
        log::info!("{}", o.line());
    }
    let checks = outcomes.iter().map(|o| (format!("criterion_{:02}", o.id), o.pass)).collect();
    let summary: Vec<_> = outcomes
        .iter()
        .map(|o| json!({ "id": o.id, "title": o.title, "pass": o.pass, "summary": o.summary }))
        .collect();
    Ok(Artifacts {
        result: json!({ "criteria": to_value(&outcomes)? }),
        checks,
        tables: vec![table("criteria", &summary.iter().map(|v| CriterionRow::from(v)).collect::<Vec<_>>())?],
    })
}

#[derive(Serialize)]
struct CriterionRow {
    id: u64,
    title: String,
    pass: bool,
    summary: String,
}

impl From<&Value> for CriterionRow {
    fn from(v: &Value) -> Self {
        CriterionRow {
            id: v["id"].as_u64().unwrap_or(0),
            title: v["title"].as_str().unwrap_or_default().into(),
            pass: v["pass"].as_bool().unwrap_or(false),
            summary: v["summary"].as_str().unwrap_or_default().into(),
        }
    }
}

fn run_converge(config: &RunConfig) -> Result<Artifacts> {
    let suite = convergence_suite(&config.converge.grid, &config.model.t)?;
    let pairs = two_temperature_report(
        &config.converge.temperature_pairs,
        config.model.side,
        config.model.h,
        &config.model.t,
        &config.couplings(),
        &config.flow_config(),
    )?;
    let mut criteria = criteria_artifacts(&CONVERGE_CRITERIA)?;
    criteria.checks.push(("suite_without_cell_failures".into(), suite.failures.is_empty()));
    criteria.tables.extend([
        table("grassmann_vs_fock", &suite.grassmann_vs_fock)?,
        table("symmetric_vs_direct", &suite.symmetric_vs_direct)?,
        table("beta_integer", &suite.beta_integer)?,
        table("covariance_slope", &suite.covariance_slope)?,
        table("two_temperature", &pairs)?,
    ]);
    criteria.result["suite"] = to_value(&suite)?;
    criteria.result["two_temperature"] = to_value(&pairs)?;
    Ok(criteria)
}

/// Runs the configured experiment on a pool of `config.workers` threads.
pub fn execute(config: &RunConfig) -> Result<Artifacts> {
    with_workers(config.workers, || match config.experiment {
        Experiment::Covariance => run_covariance(config),
        Experiment::Uvflow => run_uvflow(config),
        Experiment::Irflow => run_irflow(config, false),
        Experiment::FreeEnergy => run_irflow(config, true),
        Experiment::Fluxphase => run_fluxphase(config),
        Experiment::Converge => run_converge(config),
        Experiment::Verify => criteria_artifacts(&VERIFY_CRITERIA),
    })?
}

/// The JSON report: schema version, resolved config, result and checks.
pub fn report_json(config: &RunConfig, artifacts: &Artifacts, status: &str, error: Option<&str>) -> Result<String> {
    let checks: Vec<Value> = artifacts.checks.iter().map(|(n, p)| json!({ "name": n, "pass": p })).collect();
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "engine_version": env!("CARGO_PKG_VERSION"),
        "experiment": config.experiment,
        "config": config,
        "status": status,
        "error": error,
        "checks": checks,
        "result": artifacts.result,
    });
    serde_json::to_string_pretty(&report).map_err(|e| EngineError::Numeric(e.to_string()))
}

fn write_artifacts(out: &Path, report: &str, tables: &[Table]) -> std::io::Result<()> {
    std::fs::create_dir_all(out.join("tables"))?;
    std::fs::write(out.join("report.json"), report)?;
    for t in tables {
        std::fs::write(out.join("tables").join(format!("{}.csv", t.name)), &t.csv)?;
    }
    Ok(())
}

/// Resolves the config from the command line, runs it and writes the artifacts.
/// Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let mut config = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match serde_json::from_str::<RunConfig>(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config {}: schema error: {e}", path.display());
                    return 1;
                }
            },
            Err(e) => {
                eprintln!("config {}: {e}", path.display());
                return 1;
            }
        },
        None => RunConfig::default(),
    };
    config.experiment = cli.experiment;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Err(e) = config.validate() {
        eprintln!("{e}");
        return 1;
    }
    let empty = Artifacts {
        result: Value::Null,
        checks: Vec::new(),
        tables: Vec::new(),
    };
    let (artifacts, status, error, code) = match execute(&config) {
        Ok(a) => {
            let failed: Vec<&str> = a.checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
            if failed.is_empty() {
                (a, "ok", None, 0)
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                (a, "check_failed", None, 2)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            let code = exit_code(&e);
            let status = match code {
                3 => "flow_abort",
                4 => "capacity",
                _ => "error",
            };
            (empty, status, Some(e.to_string()), code)
        }
    };
    let report = match report_json(&config, &artifacts, status, error.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    if let Err(e) = write_artifacts(&config.out, &report, &artifacts.tables) {
        eprintln!("writing {}: {e}", config.out.display());
        return 1;
    }
    code
}

/// Initializes logging from `GRASSMANN_RG_LOG` (default `warn`).
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRASSMANN_RG_LOG", "warn")).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), config);
        assert_eq!(RunConfig::from_json("{}").unwrap(), config);
    }

    #[test]
    fn malformed_configs_are_rejected() {
        assert!(matches!(RunConfig::from_json("{\"modle\": {}}"), Err(EngineError::Config(_))));
        assert!(RunConfig::from_json("{\"model\": {\"h\": 3.0}}").is_err());
        assert!(RunConfig::from_json("{\"model\": {\"u\": [0.1]}}").is_err());
        assert!(RunConfig::from_json("{\"scale\": {\"m\": 1.2}}").is_err());
        assert!(RunConfig::from_json("{\"experiment\": \"teleport\"}").is_err());
    }

    #[test]
    fn zero_coupling_free_energy_is_zero() {
        let mut config = RunConfig::default();
        config.experiment = Experiment::FreeEnergy;
        config.model.u = vec![0.0; 4];
        let a = execute(&config).unwrap();
        assert_eq!(a.result["j_end"].as_f64(), Some(0.0));
    }

    #[test]
    fn reports_are_reproducible_and_versioned() {
        let mut config = RunConfig::default();
        config.experiment = Experiment::Irflow;
        let one = report_json(&config, &execute(&config).unwrap(), "ok", None).unwrap();
        config.workers = 4;
        let mut four = report_json(&config, &execute(&config).unwrap(), "ok", None).unwrap();
        four = four.replace("\"workers\": 4", "\"workers\": 1");
        assert_eq!(one, four);
        assert!(one.contains("\"schema_version\": \"1.0.0\""));
        assert_eq!(report_schema_version(), "1.0.0");
    }

    #[test]
    fn error_taxonomy() {
        assert_eq!(exit_code(&EngineError::FlowAbort("x".into())), 3);
        assert_eq!(exit_code(&EngineError::Capacity("x".into())), 4);
        assert_eq!(exit_code(&EngineError::Config("x".into())), 1);
    }
}
