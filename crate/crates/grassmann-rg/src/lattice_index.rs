//! Space-time and momentum index sets, wrapping maps and chordal distances.
//!
//! Times are stored as integer multiples of `1/h` ("ticks") so that wrapping
//! is exact. The global order of signed indices is lexicographic in
//! `(band, site coordinates, spin, time, charge)` with `up < down` and
//! `psi-bar < psi`; every sum in the engine iterates in this order.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{EngineError, Result};

/// Spin label. `Up` precedes `Down` in the global order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    pub fn index(self) -> usize {
        match self {
            Spin::Up => 0,
            Spin::Down => 1,
        }
    }

    pub fn from_index(i: usize) -> Spin {
        if i == 0 {
            Spin::Up
        } else {
            Spin::Down
        }
    }

    pub fn flipped(self) -> Spin {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }
}

/// Charge of a Grassmann generator: `Bar` is the conjugate field (charge +1),
/// `Plain` the field itself (charge -1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Charge {
    Bar,
    Plain,
}

impl Charge {
    pub fn sign(self) -> i32 {
        match self {
            Charge::Bar => 1,
            Charge::Plain => -1,
        }
    }

    pub fn flipped(self) -> Charge {
        match self {
            Charge::Bar => Charge::Plain,
            Charge::Plain => Charge::Bar,
        }
    }
}

/// Geometry of the discretized system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Spatial dimension.
    pub dim: usize,
    /// Side length of the periodic box.
    pub side: usize,
    /// Number of bands per unit cell.
    pub bands: usize,
    /// Inverse temperature.
    pub beta: f64,
    /// Time-grid density: the time step is `1/h`.
    pub h: f64,
    /// Direct basis vectors (rows). Defaults to the standard basis.
    pub direct_basis: Vec<Vec<f64>>,
    /// Dual basis vectors (rows) with `<u_l, v_m> = delta_{lm}`.
    pub dual_basis: Vec<Vec<f64>>,
}

/// One element `(band, site, spin, time)` of the unsigned index set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpaceTimeIndex {
    pub band: usize,
    /// Linear site index; coordinates via [`LatticeSpec::site_coords`].
    pub site: usize,
    pub spin: Spin,
    /// Time in ticks of `1/h`. Usually in `[0, beta*h)`; the flat distance
    /// also accepts negative values.
    pub time: i64,
}

/// One element of the signed index set: a space-time point with a charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SignedIndex {
    pub base: SpaceTimeIndex,
    pub charge: Charge,
}

/// A point of the momentum lattice together with a Matsubara frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumPoint {
    pub k: Vec<f64>,
    pub omega: f64,
}

impl LatticeSpec {
    /// Builds a spec with the standard basis and validates it.
    pub fn new(dim: usize, side: usize, bands: usize, beta: f64, h: f64) -> Result<Self> {
        let mut identity = vec![vec![0.0; dim]; dim];
        for (j, row) in identity.iter_mut().enumerate() {
            row[j] = 1.0;
        }
        let spec = LatticeSpec {
            dim,
            side,
            bands,
            beta,
            h,
            direct_basis: identity.clone(),
            dual_basis: identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks positivity, the time-grid condition `h*beta/2 in N` and the
    /// duality of the basis pair.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.side == 0 || self.bands == 0 {
            return Err(EngineError::Config(
                "dimension, side length and band count must be positive".into(),
            ));
        }
        if !(self.beta > 0.0) || !(self.h > 0.0) {
            return Err(EngineError::Config("beta and h must be positive".into()));
        }
        let half = self.beta * self.h / 2.0;
        if (half - half.round()).abs() > 1e-9 || half.round() < 1.0 {
            return Err(EngineError::Config(format!(
                "h = {} is not in (2/beta)N for beta = {}",
                self.h, self.beta
            )));
        }
        if self.direct_basis.len() != self.dim || self.dual_basis.len() != self.dim {
            return Err(EngineError::Config("basis size does not match dimension".into()));
        }
        for l in 0..self.dim {
            for m in 0..self.dim {
                if self.direct_basis[l].len() != self.dim || self.dual_basis[m].len() != self.dim {
                    return Err(EngineError::Config("basis vector length mismatch".into()));
                }
                let dot: f64 = (0..self.dim)
                    .map(|c| self.direct_basis[l][c] * self.dual_basis[m][c])
                    .sum();
                let want = if l == m { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-12 {
                    return Err(EngineError::Config("basis vectors are not dual".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of time slices `beta*h`.
    pub fn time_slices(&self) -> usize {
        (self.beta * self.h).round() as usize
    }

    /// Number of sites `L^d`.
    pub fn sites(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    /// Number of spatial modes including spin, `2 b L^d`.
    pub fn spatial_modes(&self) -> usize {
        2 * self.bands * self.sites()
    }

    /// `|I_0| = 2 b beta h L^d`.
    pub fn unsigned_count(&self) -> usize {
        self.spatial_modes() * self.time_slices()
    }

    /// `|I| = N = 4 b beta h L^d`.
    pub fn signed_count(&self) -> usize {
        2 * self.unsigned_count()
    }

    /// Site coordinates in `{0..L-1}^d`, first coordinate most significant.
    pub fn site_coords(&self, site: usize) -> Vec<i64> {
        let mut coords = vec![0i64; self.dim];
        let mut rest = site;
        for j in (0..self.dim).rev() {
            coords[j] = (rest % self.side) as i64;
            rest /= self.side;
        }
        coords
    }

    /// Inverse of [`LatticeSpec::site_coords`] after wrapping.
    pub fn site_from_coords(&self, coords: &[i64]) -> usize {
        let wrapped = wrap_site(self.side, coords);
        wrapped
            .iter()
            .fold(0usize, |acc, &c| acc * self.side + c as usize)
    }

    /// Position of an unsigned index in the global order.
    pub fn unsigned_position(&self, x: &SpaceTimeIndex) -> usize {
        let t = x.time.rem_euclid(self.time_slices() as i64) as usize;
        ((x.band * self.sites() + x.site) * 2 + x.spin.index()) * self.time_slices() + t
    }

    /// Unsigned index at a given position of the global order.
    pub fn unsigned_at(&self, pos: usize) -> SpaceTimeIndex {
        let nt = self.time_slices();
        let time = (pos % nt) as i64;
        let rest = pos / nt;
        let spin = Spin::from_index(rest % 2);
        let rest = rest / 2;
        let site = rest % self.sites();
        let band = rest / self.sites();
        SpaceTimeIndex {
            band,
            site,
            spin,
            time,
        }
    }

    /// Position of a signed index: `2*unsigned + (0 for bar, 1 for plain)`.
    pub fn signed_position(&self, x: &SignedIndex) -> usize {
        2 * self.unsigned_position(&x.base)
            + match x.charge {
                Charge::Bar => 0,
                Charge::Plain => 1,
            }
    }

    /// Signed index at a given position of the global order.
    pub fn signed_at(&self, pos: usize) -> SignedIndex {
        SignedIndex {
            base: self.unsigned_at(pos / 2),
            charge: if pos % 2 == 0 {
                Charge::Bar
            } else {
                Charge::Plain
            },
        }
    }

    /// Momentum lattice `(2 pi / L) Z^d mod 2 pi` in lexicographic order.
    pub fn momenta(&self) -> Vec<Vec<f64>> {
        (0..self.sites())
            .map(|s| {
                self.site_coords(s)
                    .iter()
                    .map(|&m| 2.0 * PI * m as f64 / self.side as f64)
                    .collect()
            })
            .collect()
    }

    /// The Matsubara frequencies `(pi/beta)(2Z+1)` with `|omega| < pi h`,
    /// ascending. There are exactly `beta h` of them.
    pub fn matsubara_h(&self) -> Vec<f64> {
        let half = (self.time_slices() / 2) as i64;
        (-half..half)
            .map(|n| (2 * n + 1) as f64 * PI / self.beta)
            .collect()
    }

    /// Time in physical units for a tick count.
    pub fn time_value(&self, ticks: i64) -> f64 {
        ticks as f64 / self.h
    }
}

/// Enumerates `I_0` and `I` in the fixed global order.
pub fn enumerate_index_sets(spec: &LatticeSpec) -> Result<(Vec<SpaceTimeIndex>, Vec<SignedIndex>)> {
    spec.validate()?;
    let unsigned: Vec<SpaceTimeIndex> = (0..spec.unsigned_count()).map(|p| spec.unsigned_at(p)).collect();
    let signed: Vec<SignedIndex> = (0..spec.signed_count()).map(|p| spec.signed_at(p)).collect();
    Ok((unsigned, signed))
}

/// Decomposes a time `x` (in ticks) as `x = n*beta + r` with `r in [0, beta)`.
/// Both the input and the remainder are tick counts; `period` is `beta*h`.
pub fn wrap_time_ticks(period: i64, x: i64) -> (i64, i64) {
    (x.div_euclid(period), x.rem_euclid(period))
}

/// Real-valued version of [`wrap_time_ticks`]. `x` must be a multiple of `1/h`.
pub fn wrap_time(beta: f64, h: f64, x: f64) -> Result<(i64, f64)> {
    let ticks = x * h;
    if (ticks - ticks.round()).abs() > 1e-9 {
        return Err(EngineError::Domain(format!("time {x} is not a multiple of 1/h")));
    }
    let period = (beta * h).round() as i64;
    let (n, r) = wrap_time_ticks(period, ticks.round() as i64);
    Ok((n, r as f64 / h))
}

/// Componentwise reduction of integer coordinates into `{0..L-1}`.
pub fn wrap_site(side: usize, coords: &[i64]) -> Vec<i64> {
    coords.iter().map(|c| c.rem_euclid(side as i64)).collect()
}

fn axis_check(spec: &LatticeSpec, axis: usize) -> Result<()> {
    if axis > spec.dim {
        return Err(EngineError::Domain(format!(
            "axis {axis} out of range for dimension {}",
            spec.dim
        )));
    }
    Ok(())
}

/// Chordal distance between two times given in ticks: `(beta/2pi)|e^{2pi i x/beta} - e^{2pi i y/beta}|`.
pub fn chordal_time(spec: &LatticeSpec, x_ticks: i64, y_ticks: i64) -> f64 {
    let diff = spec.time_value(x_ticks - y_ticks);
    spec.beta / PI * (PI * diff / spec.beta).sin().abs()
}

/// Chordal distance between two coordinates along one spatial axis.
pub fn chordal_space(side: usize, x: i64, y: i64) -> f64 {
    let l = side as f64;
    l / PI * (PI * (x - y) as f64 / l).sin().abs()
}

/// Distance `d_j(X, Y)`: chordal in time for `axis = 0`, chordal along the
/// `axis`-th dual direction otherwise. Charges are ignored.
pub fn dist(spec: &LatticeSpec, axis: usize, x: &SignedIndex, y: &SignedIndex) -> Result<f64> {
    axis_check(spec, axis)?;
    Ok(dist_unsigned(spec, axis, &x.base, &y.base))
}

/// [`dist`] on unsigned indices, without the range check.
pub fn dist_unsigned(spec: &LatticeSpec, axis: usize, x: &SpaceTimeIndex, y: &SpaceTimeIndex) -> f64 {
    if axis == 0 {
        chordal_time(spec, x.time, y.time)
    } else {
        let cx = spec.site_coords(x.site);
        let cy = spec.site_coords(y.site);
        chordal_space(spec.side, cx[axis - 1], cy[axis - 1])
    }
}

/// Flat time distance `|x - y|` for `axis = 0` (times taken as stored, so
/// negative tick values represent `[-beta/4, 0)`), chordal spatial distance otherwise.
pub fn dist_flat(spec: &LatticeSpec, axis: usize, x: &SignedIndex, y: &SignedIndex) -> Result<f64> {
    axis_check(spec, axis)?;
    if axis == 0 {
        Ok(spec.time_value(x.base.time - y.base.time).abs())
    } else {
        Ok(dist_unsigned(spec, axis, &x.base, &y.base))
    }
}

/// Wraps the time of a signed index into `[0, beta)`.
pub fn wrap_index_time(spec: &LatticeSpec, x: &SignedIndex) -> SignedIndex {
    let period = spec.time_slices() as i64;
    let mut out = *x;
    out.base.time = x.base.time.rem_euclid(period);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx(spec: &LatticeSpec, site: usize, time: i64) -> SignedIndex {
        let _ = spec;
        SignedIndex {
            base: SpaceTimeIndex {
                band: 0,
                site,
                spin: Spin::Up,
                time,
            },
            charge: Charge::Bar,
        }
    }

    #[test]
    fn index_counts_match_direct_formula() {
        let s = LatticeSpec::new(2, 1, 4, 1.0, 2.0).unwrap();
        assert_eq!(s.signed_count(), 32);
        let s = LatticeSpec::new(1, 2, 1, 1.0, 2.0).unwrap();
        assert_eq!(s.unsigned_count(), 8);
        let s = LatticeSpec::new(2, 2, 4, 2.0, 4.0).unwrap();
        assert_eq!(s.signed_count(), 512);
        let (i0, i) = enumerate_index_sets(&s).unwrap();
        assert_eq!(i0.len(), 256);
        assert_eq!(i.len(), 512);
    }

    #[test]
    fn invalid_time_grid_is_rejected() {
        assert!(LatticeSpec::new(2, 1, 4, 1.0, 3.0).is_err());
        assert!(LatticeSpec::new(2, 1, 4, 1.0, 1.0).is_err());
        assert!(LatticeSpec::new(2, 1, 4, 2.0, 1.0).is_ok());
    }

    #[test]
    fn order_is_lexicographic_and_round_trips() {
        let s = LatticeSpec::new(2, 2, 2, 1.0, 4.0).unwrap();
        let (_, signed) = enumerate_index_sets(&s).unwrap();
        for (p, x) in signed.iter().enumerate() {
            assert_eq!(s.signed_position(x), p);
        }
        for w in signed.windows(2) {
            let key = |x: &SignedIndex| {
                let c = s.site_coords(x.base.site);
                (x.base.band, c, x.base.spin, x.base.time, x.charge)
            };
            assert!(key(&w[0]) < key(&w[1]));
        }
    }

    #[test]
    fn distance_examples() {
        let s = LatticeSpec::new(1, 4, 1, 1.0, 2.0).unwrap();
        let a = idx(&s, 0, 0);
        let b = idx(&s, 0, 1);
        for j in 0..=1 {
            assert_eq!(dist(&s, j, &a, &a).unwrap(), 0.0);
        }
        assert!((dist(&s, 0, &a, &b).unwrap() - 1.0 / PI).abs() < 1e-15);
        let c = idx(&s, 2, 0);
        assert!((dist(&s, 1, &a, &c).unwrap() - 4.0 / PI).abs() < 1e-14);
        assert!(dist(&s, 2, &a, &c).is_err());
    }

    #[test]
    fn flat_distance_examples() {
        let s = LatticeSpec::new(1, 4, 1, 1.0, 4.0).unwrap();
        let a = idx(&s, 1, 1);
        let b = idx(&s, 3, -1);
        assert_eq!(dist_flat(&s, 0, &a, &a).unwrap(), 0.0);
        assert!((dist_flat(&s, 0, &a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(dist_flat(&s, 1, &a, &b).unwrap(), dist(&s, 1, &a, &b).unwrap());
    }

    #[test]
    fn wrap_time_examples() {
        assert_eq!(wrap_time(1.0, 2.0, 0.5).unwrap(), (0, 0.5));
        assert_eq!(wrap_time(1.0, 2.0, 1.5).unwrap(), (1, 0.5));
        assert_eq!(wrap_time(2.0, 4.0, -0.25).unwrap(), (-1, 1.75));
        let mut hits = 0;
        for n in -2..=2 {
            let r = -0.25 - 2.0 * n as f64;
            if (0.0..2.0).contains(&r) {
                hits += 1;
                assert_eq!(n, -1);
            }
        }
        assert_eq!(hits, 1);
    }

    #[test]
    fn wrap_site_examples() {
        assert_eq!(wrap_site(2, &[3, -1]), vec![1, 1]);
        assert_eq!(wrap_site(1, &[7, -3]), vec![0, 0]);
        assert_eq!(wrap_site(4, &[4, 4]), vec![0, 0]);
    }

    #[test]
    fn matsubara_grid_has_beta_h_points() {
        let s = LatticeSpec::new(2, 1, 4, 2.0, 4.0).unwrap();
        let w = s.matsubara_h();
        assert_eq!(w.len(), 8);
        assert!(w.iter().all(|x| x.abs() < PI * s.h));
        assert!((w[0] + w[7]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn count_formula_holds(dim in 1usize..3, side in 1usize..4, bands in 1usize..5, half in 1usize..5) {
            let beta = 1.0;
            let h = 2.0 * half as f64;
            let s = LatticeSpec::new(dim, side, bands, beta, h).unwrap();
            prop_assert_eq!(s.signed_count(), 4 * bands * (beta * h) as usize * side.pow(dim as u32));
        }

        #[test]
        fn distance_is_symmetric_and_triangular(t in prop::array::uniform3(0i64..8), x in prop::array::uniform3(0usize..4), axis in 0usize..2) {
            let s = LatticeSpec::new(1, 4, 1, 2.0, 4.0).unwrap();
            let p: Vec<SignedIndex> = (0..3).map(|i| idx(&s, x[i], t[i])).collect();
            let d = |a: usize, b: usize| dist(&s, axis, &p[a], &p[b]).unwrap();
            prop_assert!((d(0, 1) - d(1, 0)).abs() < 1e-15);
            prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        }

        #[test]
        fn wrap_time_is_a_bijection(k in 1i64..4, x in -40i64..40) {
            let period = 8;
            prop_assume!(x >= -k * period && x < k * period);
            let (n, r) = wrap_time_ticks(period, x);
            prop_assert_eq!(n * period + r, x);
            prop_assert!((0..period).contains(&r));
            prop_assert!(n >= -k && n < k);
        }

        #[test]
        fn chordal_dominates_flat_on_quarter_window(a in -2i64..2, b in -2i64..2, sa in 0usize..4, sb in 0usize..4) {
            let s = LatticeSpec::new(1, 4, 1, 2.0, 4.0).unwrap();
            let x = idx(&s, sa, a);
            let y = idx(&s, sb, b);
            for axis in 0..2 {
                let lhs = dist(&s, axis, &wrap_index_time(&s, &x), &wrap_index_time(&s, &y)).unwrap();
                let rhs = 2.0 / PI * dist_flat(&s, axis, &x, &y).unwrap();
                prop_assert!(lhs + 1e-12 >= rhs);
            }
        }
    }
}
