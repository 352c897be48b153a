//! The Gevrey-class bump, the Matsubara ultraviolet cutoffs, the infrared
//! cutoffs on `(omega, k)`, scale counts, weights and derivative probes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::lattice_index::LatticeSpec;
use crate::{EngineError, Result};

/// Left edge of the transition region of the bump.
pub const FLAT_ONE_END: f64 = PI * PI / 6.0;
/// Right edge of the transition region of the bump.
pub const FLAT_ZERO_START: f64 = PI * PI / 3.0;

/// Smooth nonincreasing bump equal to 1 up to `pi^2/6` and 0 from `pi^2/3`.
///
/// Built as the primitive of a `K`-fold convolution of normalized box
/// kernels of widths `(j+1)^{-2}`, sampled on a uniform grid.
#[derive(Debug, Clone)]
pub struct GevreyBump {
    pub order: usize,
    pub step: f64,
    density: Vec<f64>,
    primitive: Vec<f64>,
    mass: f64,
}

impl GevreyBump {
    pub fn build(order: usize, step: f64) -> Result<GevreyBump> {
        if order < 4 {
            return Err(EngineError::Config(format!(
                "bump order {order} is too small for the flatness requirement (need at least 4)"
            )));
        }
        if !(step > 0.0 && step <= 1e-2) {
            return Err(EngineError::Config(format!("bump grid step {step} out of range")));
        }
        let w0 = ((1.0 / step).round() as usize).max(1);
        let mut density = vec![1.0 / (w0 as f64 * step); w0];
        for j in 1..order {
            let width = 1.0 / ((j + 1) * (j + 1)) as f64;
            let w = ((width / step).round() as usize).max(1);
            let n = density.len() + w - 1;
            let mut prefix = vec![0.0; density.len() + 1];
            for (i, v) in density.iter().enumerate() {
                prefix[i + 1] = prefix[i] + v;
            }
            let mut next = vec![0.0; n];
            for (i, slot) in next.iter_mut().enumerate() {
                let hi = (i + 1).min(density.len());
                let lo = i.saturating_sub(w - 1);
                *slot = (prefix[hi] - prefix[lo]) / w as f64;
            }
            density = next;
        }
        let mut primitive = vec![0.0; density.len() + 1];
        for i in 0..density.len() {
            let next = if i + 1 < density.len() { density[i + 1] } else { 0.0 };
            primitive[i + 1] = primitive[i] + 0.5 * (density[i] + next) * step;
        }
        let total = *primitive.last().unwrap();
        for p in primitive.iter_mut() {
            *p /= total;
        }
        if density.len() as f64 * step > FLAT_ZERO_START - FLAT_ONE_END {
            return Err(EngineError::Config("bump support exceeds the transition region".into()));
        }
        Ok(GevreyBump {
            order,
            step,
            density,
            primitive,
            mass: total,
        })
    }

    /// Default construction with eight kernels on a `1e-4` grid.
    pub fn standard() -> GevreyBump {
        GevreyBump::build(8, 1e-4).expect("default bump parameters are valid")
    }

    /// `phi(x)`; returns exact 0 and 1 on the flat regions.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= FLAT_ONE_END {
            return 1.0;
        }
        if x >= FLAT_ZERO_START {
            return 0.0;
        }
        let y = FLAT_ZERO_START - x;
        let pos = y / self.step;
        let i = pos.floor() as usize;
        if i >= self.density.len() {
            return 1.0;
        }
        let d = (pos - i as f64) * self.step;
        let ui = self.density[i];
        let un = if i + 1 < self.density.len() { self.density[i + 1] } else { 0.0 };
        let v = self.primitive[i] + (ui * d + (un - ui) * d * d / (2.0 * self.step)) / self.mass;
        v.clamp(0.0, 1.0)
    }

    /// Length of the support of the density.
    pub fn support_length(&self) -> f64 {
        self.density.len() as f64 * self.step
    }
}

/// Scale parameters shared by the flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub m: f64,
    pub m_uv: f64,
    pub m_ir: f64,
    pub n_h: i64,
    pub n_beta: i64,
    pub c_w: f64,
    pub exponent: f64,
    pub alpha: f64,
}

/// `M_UV = 2 sqrt(6) (E_1 + 1) / pi`.
pub fn m_uv(e1: f64) -> f64 {
    2.0 * 6f64.sqrt() * (e1 + 1.0) / PI
}

/// `M_IR = (sqrt(6)/pi) (pi^2 M_UV^2 / 3 + 4)^{1/2}`.
pub fn m_ir(m_uv: f64) -> f64 {
    6f64.sqrt() / PI * (PI * PI * m_uv * m_uv / 3.0 + 4.0).sqrt()
}

/// `N_h = max{ floor(log(2h (pi^2/6)^{-1/2} / M_UV) / log M) + 1, 1 }`.
pub fn n_h(h: f64, m: f64, m_uv: f64) -> i64 {
    let v = (2.0 * h * FLAT_ONE_END.powf(-0.5) / m_uv).ln() / m.ln();
    (v.floor() as i64 + 1).max(1)
}

/// `N_beta = min{ floor(log((pi/beta) / ((pi/sqrt 3) M_IR)) / log M), 0 }`.
pub fn n_beta(beta: f64, m: f64, m_ir: f64) -> i64 {
    let v = ((PI / beta) / (PI / 3f64.sqrt() * m_ir)).ln() / m.ln();
    (v.floor() as i64).min(0)
}

impl ScaleParams {
    /// Parameters for a model with derivative constant `e1`.
    pub fn new(spec: &LatticeSpec, m: f64, e1: f64, c_w: f64, alpha: f64) -> Result<ScaleParams> {
        if !(m > 2f64.sqrt()) {
            return Err(EngineError::Config(format!("M = {m} must exceed sqrt(2)")));
        }
        if !(c_w > 0.0 && c_w <= 1.0) {
            return Err(EngineError::Config(format!("c_w = {c_w} must lie in (0, 1]")));
        }
        if !(alpha >= 1.0) {
            return Err(EngineError::Config(format!("alpha = {alpha} must be at least 1")));
        }
        let uv = m_uv(e1);
        let ir = m_ir(uv);
        if spec.h < (2.0 * e1).exp() {
            log::warn!(
                "h = {} is below e^(2 E_1) = {:.1}; ultraviolet bound claims are outside their stated range",
                spec.h,
                (2.0 * e1).exp()
            );
        }
        Ok(ScaleParams {
            m,
            m_uv: uv,
            m_ir: ir,
            n_h: n_h(spec.h, m, uv),
            n_beta: n_beta(spec.beta, m, ir),
            c_w,
            exponent: 0.5,
            alpha,
        })
    }

    /// `w(l) = (c_w / 18) M^{-2} M^l`.
    pub fn weight(&self, l: i64) -> f64 {
        self.c_w / 18.0 * self.m.powi(-2) * self.m.powi(l as i32)
    }
}

/// `(N_h, N_beta)`.
pub fn scale_counts(params: &ScaleParams) -> (i64, i64) {
    (params.n_h, params.n_beta)
}

/// `h^2 |1 - e^{i omega / h}|^2`.
pub fn lattice_frequency_sq(h: f64, omega: f64) -> f64 {
    let z = num_complex::Complex64::new(1.0, 0.0) - num_complex::Complex64::from_polar(1.0, omega / h);
    h * h * z.norm_sqr()
}

/// Ultraviolet cutoff `chi_{h,l}(omega)` for `l` in `0..=N_h`.
pub fn chi_uv(bump: &GevreyBump, params: &ScaleParams, h: f64, l: i64, omega: f64) -> Result<f64> {
    if l < 0 || l > params.n_h {
        return Err(EngineError::Domain(format!("ultraviolet scale {l} outside 0..={}", params.n_h)));
    }
    let q = lattice_frequency_sq(h, omega) / (params.m_uv * params.m_uv);
    if l == 0 {
        return Ok(bump.eval(q));
    }
    let m2 = params.m * params.m;
    Ok(bump.eval(q * m2.powi(-(l as i32))) - bump.eval(q * m2.powi(-(l as i32 - 1))))
}

/// `omega^2 + f_t sum_j (1 + cos k_j)`.
pub fn infrared_quadratic(omega: f64, k: &[f64], f_t: f64) -> f64 {
    omega * omega + f_t * k.iter().map(|kj| 1.0 + kj.cos()).sum::<f64>()
}

/// `phi(M_UV^{-2} omega^2)`.
pub fn phi_uv(bump: &GevreyBump, params: &ScaleParams, omega: f64) -> f64 {
    bump.eval(omega * omega / (params.m_uv * params.m_uv))
}

fn phi_ir(bump: &GevreyBump, params: &ScaleParams, power: i64, q: f64) -> f64 {
    bump.eval(q / (params.m_ir * params.m_ir) * params.m.powi(-2 * power as i32))
}

/// Infrared cutoff `chi_l(omega, k)` for `l` in `N_beta..=0`.
pub fn chi_ir(bump: &GevreyBump, params: &ScaleParams, f_t: f64, l: i64, omega: f64, k: &[f64]) -> Result<f64> {
    if l > 0 || l < params.n_beta {
        return Err(EngineError::Domain(format!("infrared scale {l} outside {}..=0", params.n_beta)));
    }
    let uv = phi_uv(bump, params, omega);
    if uv == 0.0 {
        return Ok(0.0);
    }
    let q = infrared_quadratic(omega, k, f_t);
    let outer = phi_ir(bump, params, l + 1, q);
    let inner = phi_ir(bump, params, l, q);
    Ok(uv * (outer - inner))
}

/// `chi_{<=l} = sum_{j=N_beta}^{l} chi_j`, summed in closed form.
pub fn chi_ir_le(bump: &GevreyBump, params: &ScaleParams, f_t: f64, l: i64, omega: f64, k: &[f64]) -> Result<f64> {
    if l > 0 || l < params.n_beta {
        return Err(EngineError::Domain(format!("infrared scale {l} outside {}..=0", params.n_beta)));
    }
    let q = infrared_quadratic(omega, k, f_t);
    let lowest = phi_ir(bump, params, params.n_beta, q);
    Ok(phi_uv(bump, params, omega) * (phi_ir(bump, params, l + 1, q) - lowest))
}

/// `chi-hat_{<=l} = phi(M_UV^{-2} omega^2) phi(M_IR^{-2} M^{-2(l+1)} Q)`, defined for every `l <= 0`.
pub fn chi_ir_hat(bump: &GevreyBump, params: &ScaleParams, f_t: f64, l: i64, omega: f64, k: &[f64]) -> f64 {
    let q = infrared_quadratic(omega, k, f_t);
    phi_uv(bump, params, omega) * phi_ir(bump, params, l + 1, q)
}

/// Result of a finite-difference derivative probe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DerivativeProbe {
    pub x0: f64,
    pub order: u32,
    pub estimate: f64,
    pub envelope: f64,
    pub within: bool,
    /// Set when step halving changed the estimate by more than 10%.
    pub unstable: bool,
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Central-difference estimate of the `order`-th derivative with one
/// Richardson extrapolation step; returns `(estimate, halving disagreement)`.
pub fn fd_derivative(f: &dyn Fn(f64) -> f64, x0: f64, order: u32, step: f64) -> (f64, f64) {
    let central = |s: f64| -> f64 {
        let mut acc = 0.0;
        for j in 0..=order {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * binomial(order, j) * f(x0 + (order as f64 / 2.0 - j as f64) * s);
        }
        acc / s.powi(order as i32)
    };
    if order == 0 {
        return (f(x0), 0.0);
    }
    let coarse = central(step);
    let fine = central(step / 2.0);
    let estimate = (4.0 * fine - coarse) / 3.0;
    let scale = fine.abs().max(coarse.abs()).max(1e-300);
    (estimate, (fine - coarse).abs() / scale)
}

/// Compares `|f^{(n)}(x_0)|` with `q r^n (n!)^t` for `n = 1..=n_max`.
pub fn gevrey_probe(
    f: &dyn Fn(f64) -> f64,
    x0: f64,
    n_max: u32,
    step: f64,
    envelope: (f64, f64, f64),
) -> Result<Vec<DerivativeProbe>> {
    if n_max > 6 {
        return Err(EngineError::Domain("derivative probes support orders up to 6".into()));
    }
    let (q, r, t) = envelope;
    let mut out = Vec::new();
    for n in 1..=n_max {
        let (est, disagreement) = fd_derivative(f, x0, n, step);
        let fact: f64 = (1..=n).map(|i| i as f64).product();
        let env = q * r.powi(n as i32) * fact.powf(t);
        out.push(DerivativeProbe {
            x0,
            order: n,
            estimate: est,
            envelope: env,
            within: est.abs() <= env * 1.1,
            unstable: disagreement > 0.1 && est.abs() > 1e-8 * env,
        });
    }
    Ok(out)
}

/// One row of an exported cutoff table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CutoffRow {
    pub l: i64,
    pub omega: f64,
    pub k1: f64,
    pub k2: f64,
    pub value: f64,
}

/// Infrared cutoff values on `M_h x Gamma*` for every scale.
pub fn ir_cutoff_table(bump: &GevreyBump, params: &ScaleParams, spec: &LatticeSpec, f_t: f64) -> Result<Vec<CutoffRow>> {
    let mut rows = Vec::new();
    for l in (params.n_beta..=0).rev() {
        for omega in spec.matsubara_h() {
            for k in spec.momenta() {
                let value = chi_ir(bump, params, f_t, l, omega, &k)?;
                rows.push(CutoffRow {
                    l,
                    omega,
                    k1: k.first().copied().unwrap_or(0.0),
                    k2: k.get(1).copied().unwrap_or(0.0),
                    value,
                });
            }
        }
    }
    Ok(rows)
}

/// Ultraviolet cutoff values on `M_h` for every scale.
pub fn uv_cutoff_table(bump: &GevreyBump, params: &ScaleParams, spec: &LatticeSpec) -> Result<Vec<CutoffRow>> {
    let mut rows = Vec::new();
    for l in 0..=params.n_h {
        for omega in spec.matsubara_h() {
            rows.push(CutoffRow {
                l,
                omega,
                k1: 0.0,
                k2: 0.0,
                value: chi_uv(bump, params, spec.h, l, omega)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(beta: f64, h: f64, m: f64) -> ScaleParams {
        let spec = LatticeSpec::new(2, 1, 4, beta, h).unwrap();
        ScaleParams::new(&spec, m, 4.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn bump_flat_values() {
        let b = GevreyBump::standard();
        assert_eq!(b.eval(0.0), 1.0);
        assert_eq!(b.eval(4.0), 0.0);
        assert_eq!(b.eval(FLAT_ONE_END), 1.0);
        assert!(GevreyBump::build(3, 1e-4).is_err());
    }

    #[test]
    fn bump_third_derivative_bound() {
        let b = GevreyBump::standard();
        let f = |x: f64| b.eval(x);
        for i in 0..50 {
            let x = FLAT_ONE_END + (FLAT_ZERO_START - FLAT_ONE_END) * (i as f64 + 0.5) / 50.0;
            let (d, _) = fd_derivative(&f, x, 3, 0.02);
            assert!(d.abs() <= 288.0 * 1.1, "phi''' = {d} at {x}");
        }
    }

    #[test]
    fn scale_count_examples() {
        let uv = m_uv(4.0);
        assert!((uv - 10.0 * 6f64.sqrt() / PI).abs() < 1e-12);
        assert_eq!(n_h(2.0, 2.0, uv), 1);
        let ir = m_ir(uv);
        assert!((ir - 11.14).abs() < 0.01);
        assert_eq!(n_beta(1.0, 2.0, ir), -3);
        let mut last = 1;
        for beta in [1.0, 2.0, 4.0, 8.0] {
            let nb = n_beta(beta, 2.0, ir);
            assert!(nb <= last);
            last = nb;
        }
    }

    #[test]
    fn uv_cutoff_at_zero_frequency() {
        let p = params(1.0, 64.0, 2.0);
        let b = GevreyBump::standard();
        assert_eq!(chi_uv(&b, &p, 64.0, 0, 0.0).unwrap(), 1.0);
        for l in 1..=p.n_h {
            assert_eq!(chi_uv(&b, &p, 64.0, l, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn weights_decrease_toward_the_infrared() {
        let p = params(1.0, 4.0, 4.0);
        assert!((p.weight(0) - 0.1 / 18.0 / 16.0).abs() < 1e-15);
        for l in -5..5 {
            assert!(p.weight(l - 1) < p.weight(l));
        }
    }

    #[test]
    fn polynomial_probe_envelope() {
        let f = |x: f64| x * x;
        let r = gevrey_probe(&f, 1.0, 4, 0.1, (2.0, 2.0, 1.0)).unwrap();
        assert!(r.iter().all(|p| p.within));
        assert!(r[2].estimate.abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn uv_partition_of_unity(omega in -400.0f64..400.0) {
            let p = params(1.0, 64.0, 2.0);
            let b = GevreyBump::standard();
            let s: f64 = (0..=p.n_h).map(|l| chi_uv(&b, &p, 64.0, l, omega).unwrap()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn uv_slices_vanish_below_their_support(omega in -400.0f64..400.0) {
            let p = params(1.0, 64.0, 2.0);
            let b = GevreyBump::standard();
            let lf = lattice_frequency_sq(64.0, omega).sqrt();
            for l in 1..=p.n_h {
                if lf <= PI / 6f64.sqrt() * p.m_uv * p.m.powi(l as i32 - 1) {
                    prop_assert_eq!(chi_uv(&b, &p, 64.0, l, omega).unwrap(), 0.0);
                }
            }
        }

        #[test]
        fn bump_is_nonincreasing(x in 1.5f64..3.4, dx in 0.0f64..0.2) {
            let b = GevreyBump::standard();
            prop_assert!(b.eval(x + dx) <= b.eval(x));
        }

        #[test]
        fn ir_slices_sum_to_the_uv_bump(n in -6i64..6, k1 in -PI..PI, k2 in -PI..PI) {
            let p = params(4.0, 4.0, 2.0);
            let b = GevreyBump::standard();
            let omega = (2 * n + 1) as f64 * PI / 4.0;
            let s: f64 = (p.n_beta..=0).map(|l| chi_ir(&b, &p, 1.0, l, omega, &[k1, k2]).unwrap()).sum();
            prop_assert!((s - phi_uv(&b, &p, omega)).abs() < 1e-12);
            for l in p.n_beta..=0 {
                for j in p.n_beta..=0 {
                    if (l - j).abs() >= 2 {
                        let a = chi_ir(&b, &p, 1.0, l, omega, &[k1, k2]).unwrap();
                        let c = chi_ir(&b, &p, 1.0, j, omega, &[k1, k2]).unwrap();
                        prop_assert_eq!(a * c, 0.0);
                    }
                }
            }
        }
    }
}
