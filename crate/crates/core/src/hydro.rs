//! Physical model of a serial cascade: reservoir limits, mass balance,
//! piecewise-constant hydraulic head and linear power conversion.
//!
//! Volumes and releases are volumetric per dispatch step (m³ and m³/step);
//! energy is MWh per step.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Physical constants used by the power conversion.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Constants {
    /// Gravitational acceleration (m/s²).
    pub g: f64,
    /// Water density (kg/m³).
    pub rho: f64,
    /// Joule to MWh conversion (MWh/J).
    pub c: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            g: 9.81,
            rho: 1000.0,
            c: 1.0 / 3.6e9,
        }
    }
}

/// Operating limits and head geometry of one reservoir.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ReservoirParams {
    /// Minimum storage (m³).
    pub v_min: f64,
    /// Maximum storage (m³).
    pub v_max: f64,
    /// Minimum release (m³/step).
    pub u_min: f64,
    /// Maximum release (m³/step).
    pub u_max: f64,
    /// Largest allowed decrease of release between steps (m³/step).
    pub r_down: f64,
    /// Largest allowed increase of release between steps (m³/step).
    pub r_up: f64,
    /// Generation cap (MWh/step).
    pub p_max: f64,
    /// Turbine efficiency in (0, 1].
    pub eta: f64,
    /// Nominal hydraulic head (m).
    pub head_nominal: f64,
    /// Half-width of the head operating band (m).
    pub head_band: f64,
}

impl ReservoirParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.v_min,
            self.v_max,
            self.u_min,
            self.u_max,
            self.r_down,
            self.r_up,
            self.p_max,
            self.eta,
            self.head_nominal,
            self.head_band,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("reservoir parameters must be finite"));
        }
        if self.v_min >= self.v_max {
            return Err(Error::invalid("v_min must be below v_max"));
        }
        if self.u_min > self.u_max {
            return Err(Error::invalid("u_min must not exceed u_max"));
        }
        if self.r_down < 0.0 || self.r_up < 0.0 {
            return Err(Error::invalid("ramp limits must be nonnegative"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid("eta must lie in (0, 1]"));
        }
        if self.p_max <= 0.0 {
            return Err(Error::invalid("p_max must be positive"));
        }
        if self.head_band < 0.0 || self.head_nominal - self.head_band < 0.0 {
            return Err(Error::invalid(
                "head band must be nonnegative and below the nominal head",
            ));
        }
        Ok(())
    }

    /// Storage span `v_max - v_min`.
    pub fn storage_span(&self) -> f64 {
        self.v_max - self.v_min
    }

    /// Concave increasing reference head map: the bottom of the band at
    /// `v_min`, rising as a square root to the top of the band at `v_max`.
    /// Volumes outside the storage range are clamped.
    pub fn reference_head(&self, v: f64) -> f64 {
        let x = ((v - self.v_min) / self.storage_span()).clamp(0.0, 1.0);
        self.head_nominal - self.head_band + 2.0 * self.head_band * libm::sqrt(x)
    }
}

/// A serial cascade; index 0 is the most upstream unit.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CascadeConfig {
    pub units: Vec<ReservoirParams>,
    /// Routing delay between consecutive units, in steps.
    pub travel_time_steps: usize,
    /// Length of one dispatch step (s).
    pub step_seconds: f64,
    pub constants: Constants,
}

impl CascadeConfig {
    pub fn new(units: Vec<ReservoirParams>) -> Result<Self> {
        let cfg = Self {
            units,
            travel_time_steps: 1,
            step_seconds: 3600.0,
            constants: Constants::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::invalid("cascade needs at least one unit"));
        }
        if self.travel_time_steps < 1 {
            return Err(Error::invalid("travel time must be at least one step"));
        }
        if !(self.step_seconds > 0.0) {
            return Err(Error::invalid("step length must be positive"));
        }
        self.units.iter().try_for_each(ReservoirParams::validate)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Converts a flow rate (m³/s) to a volume per step (m³/step).
    pub fn flow_to_volume(&self, flow_m3s: f64) -> f64 {
        flow_m3s * self.step_seconds
    }

    pub fn volume_to_flow(&self, volume: f64) -> f64 {
        volume / self.step_seconds
    }

    /// Energy (MWh/step) per m³ released per metre of head.
    pub fn energy_per_m3_m(&self, unit: usize) -> f64 {
        let k = &self.constants;
        k.c * self.units[unit].eta * k.g * k.rho
    }
}

/// Parameters of the reference test system, expressed in flow units.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PlantSpec {
    /// Minimum release (m³/s).
    pub u_min_m3s: f64,
    /// Maximum release (m³/s).
    pub u_max_m3s: f64,
    /// Ramp-up limit per step (m³/s).
    pub r_up_m3s: f64,
    /// Ramp-down limit per step (m³/s).
    pub r_down_m3s: f64,
    /// Nameplate capacity (MW).
    pub capacity_mw: f64,
    pub eta: f64,
    pub head_nominal: f64,
    pub head_band: f64,
    /// Flow (m³/s) used to size storage.
    pub sizing_flow_m3s: f64,
    /// Storage span expressed in steps of the sizing flow; `v_min` sits at
    /// half of it and `v_max` at one and a half.
    pub capacity_steps: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            u_min_m3s: 1715.0,
            u_max_m3s: 8575.0,
            r_up_m3s: 1715.0,
            r_down_m3s: 2572.5,
            capacity_mw: 750.0,
            eta: 0.9,
            head_nominal: 10.0,
            head_band: 5.0,
            sizing_flow_m3s: 3000.0,
            capacity_steps: 24.0,
        }
    }
}

impl PlantSpec {
    pub fn reservoir(&self, step_seconds: f64) -> ReservoirParams {
        let span = self.sizing_flow_m3s * step_seconds * self.capacity_steps;
        ReservoirParams {
            v_min: 0.5 * span,
            v_max: 1.5 * span,
            u_min: self.u_min_m3s * step_seconds,
            u_max: self.u_max_m3s * step_seconds,
            r_down: self.r_down_m3s * step_seconds,
            r_up: self.r_up_m3s * step_seconds,
            p_max: self.capacity_mw * step_seconds / 3600.0,
            eta: self.eta,
            head_nominal: self.head_nominal,
            head_band: self.head_band,
        }
    }

    /// A cascade of `n` identical units.
    pub fn cascade(&self, n: usize, step_seconds: f64) -> Result<CascadeConfig> {
        let unit = self.reservoir(step_seconds);
        let mut cfg = CascadeConfig::new(alloc::vec![unit; n])?;
        cfg.step_seconds = step_seconds;
        Ok(cfg)
    }
}

/// Piecewise-constant head table over equal-width storage intervals.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct HeadTable {
    breakpoints: Vec<f64>,
    ref_heads: Vec<f64>,
}

const SAMPLES_PER_SEGMENT: usize = 256;

/// Partitions `[v_min, v_max]` into `segments` equal intervals and stores the
/// mean of `head_fn` over each one (midpoint rule on 256 samples).
pub fn build_head_table<F>(
    params: &ReservoirParams,
    head_fn: F,
    segments: usize,
) -> Result<HeadTable>
where
    F: Fn(f64) -> f64,
{
    if segments < 1 {
        return Err(Error::invalid("head table needs at least one segment"));
    }
    if !(params.v_min < params.v_max) {
        return Err(Error::invalid("v_min must be below v_max"));
    }
    let width = params.storage_span() / segments as f64;
    let breakpoints: Vec<f64> = (0..=segments)
        .map(|h| params.v_min + width * h as f64)
        .collect();
    let ref_heads = (0..segments)
        .map(|h| {
            let lo = breakpoints[h];
            let step = width / SAMPLES_PER_SEGMENT as f64;
            let sum: f64 = (0..SAMPLES_PER_SEGMENT)
                .map(|k| head_fn(lo + (k as f64 + 0.5) * step))
                .sum();
            sum / SAMPLES_PER_SEGMENT as f64
        })
        .collect();
    HeadTable::new(breakpoints, ref_heads)
}

impl HeadTable {
    pub fn new(breakpoints: Vec<f64>, ref_heads: Vec<f64>) -> Result<Self> {
        if ref_heads.is_empty() || breakpoints.len() != ref_heads.len() + 1 {
            return Err(Error::invalid(
                "head table needs H heads and H+1 breakpoints",
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(
                "head breakpoints must be strictly increasing",
            ));
        }
        if ref_heads.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("reference heads must be nondecreasing"));
        }
        Ok(Self {
            breakpoints,
            ref_heads,
        })
    }

    /// The reference table for the default concave head map.
    pub fn reference(params: &ReservoirParams, segments: usize) -> Result<Self> {
        build_head_table(params, |v| params.reference_head(v), segments)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn ref_heads(&self) -> &[f64] {
        &self.ref_heads
    }

    pub fn segments(&self) -> usize {
        self.ref_heads.len()
    }

    /// Index of the segment containing `v`; out-of-range volumes clamp to the
    /// first or last segment.
    pub fn segment_of(&self, v: f64) -> usize {
        let h = self.segments();
        if !(v >= self.breakpoints[0]) {
            return 0;
        }
        // first breakpoint strictly greater than v
        let upper = self.breakpoints.partition_point(|&b| b <= v);
        upper.saturating_sub(1).min(h - 1)
    }
}

/// Representative head for the previous-step storage `v_prev`.
pub fn lookup_head(table: &HeadTable, v_prev: f64) -> f64 {
    table.ref_heads[table.segment_of(v_prev)]
}

/// Energy (MWh/step) produced by releasing `u` m³ through `head` metres.
#[inline]
pub fn power(u: f64, head: f64, params: &ReservoirParams, constants: &Constants) -> f64 {
    constants.c * params.eta * constants.g * constants.rho * head * u
}

/// Storage after one step: `v_prev + q - u`. Negative results are allowed.
#[inline]
pub fn mass_balance_step(v_prev: f64, q: f64, u: f64) -> f64 {
    v_prev + q - u
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn unit() -> ReservoirParams {
        PlantSpec::default().reservoir(3600.0)
    }

    #[test]
    fn linear_head_gives_midpoint_values() {
        let mut p = unit();
        p.v_min = 0.0;
        p.v_max = 100.0;
        let t = build_head_table(&p, |v| 3.0 + 0.5 * v, 4).unwrap();
        for (h, head) in t.ref_heads().iter().enumerate() {
            let mid = 12.5 + 25.0 * h as f64;
            assert!((head - (3.0 + 0.5 * mid)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_head_is_constant() {
        for h in [1, 3, 40] {
            let t = build_head_table(&unit(), |_| 10.0, h).unwrap();
            assert!(t.ref_heads().iter().all(|&x| (x - 10.0).abs() < 1e-12));
        }
    }

    #[test]
    fn reference_geometry_forty_segments() {
        let p = unit();
        let t = HeadTable::reference(&p, 40).unwrap();
        assert_eq!(t.segments(), 40);
        assert!(t.ref_heads().windows(2).all(|w| w[0] <= w[1]));
        assert!(t.ref_heads().iter().all(|&x| (5.0..=15.0).contains(&x)));
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(build_head_table(&unit(), |_| 1.0, 0).is_err());
        let mut p = unit();
        p.v_max = p.v_min;
        assert!(build_head_table(&p, |_| 1.0, 4).is_err());
    }

    #[test]
    fn lookup_edges_and_clamping() {
        let p = unit();
        let t = HeadTable::reference(&p, 8).unwrap();
        let b = t.breakpoints().to_vec();
        let heads = t.ref_heads();
        assert_eq!(lookup_head(&t, b[0]), heads[0]);
        assert_eq!(lookup_head(&t, p.v_max), heads[7]);
        assert_eq!(lookup_head(&t, 0.5 * (b[2] + b[3])), heads[2]);
        assert_eq!(lookup_head(&t, p.v_min - 1e9), heads[0]);
        assert_eq!(lookup_head(&t, p.v_max + 1e9), heads[7]);
        assert_eq!(lookup_head(&t, b[3]), heads[3]);
    }

    #[test]
    fn nameplate_power() {
        let p = unit();
        let k = Constants::default();
        assert_eq!(power(0.0, 10.0, &p, &k), 0.0);
        let u = 8575.0 * 3600.0;
        let e = power(u, 10.0, &p, &k);
        // direct unit arithmetic: W = eta g rho h Q, over one hour
        let oracle = 0.9 * 9.81 * 1000.0 * 10.0 * 8575.0 / 1e6;
        assert!((e - oracle).abs() < 1e-9);
        assert!((e - 757.1).abs() < 0.05);
        assert!((power(2.0 * u, 10.0, &p, &k) - 2.0 * e).abs() < 1e-9);
    }

    #[test]
    fn mass_balance_examples() {
        assert_eq!(mass_balance_step(100.0, 10.0, 10.0), 100.0);
        assert_eq!(mass_balance_step(100.0, 0.0, 30.0), 70.0);
        assert_eq!(mass_balance_step(0.0, 5.0, 10.0), -5.0);
    }

    #[test]
    fn head_error_shrinks_with_segments() {
        let p = unit();
        let grid: Vec<f64> = (0..=4000)
            .map(|k| p.v_min + p.storage_span() * k as f64 / 4000.0)
            .collect();
        let mut prev = f64::INFINITY;
        for h in [5, 10, 20, 40] {
            let t = HeadTable::reference(&p, h).unwrap();
            let err = grid
                .iter()
                .map(|&v| (lookup_head(&t, v) - p.reference_head(v)).abs())
                .fold(0.0, f64::max);
            assert!(err < prev, "H={h}: {err} !< {prev}");
            prev = err;
        }
    }

    #[test]
    fn cascade_validation() {
        assert!(CascadeConfig::new(vec![]).is_err());
        let mut bad = unit();
        bad.eta = 1.5;
        assert!(CascadeConfig::new(vec![bad]).is_err());
        assert!(PlantSpec::default().cascade(3, 3600.0).is_ok());
    }
}
