//! Ground-truth inflow scenarios: a constant baseline with staggered
//! exponential-decay dips.
//!
//! A dip starting at step `s` lowers the flow at step `s + k` by
//! `a * q0 * exp(-3k / D)`, so 95% of the drop has recovered after `D`
//! steps. The same event reaches unit `i` after `i * travel_time` steps.
//! Flows are in m³/s.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest flow a trajectory may reach, as a fraction of `q0`.
const FLOW_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DisruptionEvent {
    pub start_step: usize,
    /// Steps until 95% recovery.
    pub duration: usize,
    /// Peak relative drop.
    pub amplitude: f64,
}

impl DisruptionEvent {
    pub fn validate(&self) -> Result<()> {
        if self.duration < 1 {
            return Err(Error::invalid("event duration must be at least one step"));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(Error::invalid("event amplitude must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Exponential decay rate per step.
    pub fn decay_rate(&self) -> f64 {
        3.0 / self.duration as f64
    }

    /// Relative drop at `step`.
    pub fn dip(&self, step: usize) -> f64 {
        if step < self.start_step {
            return 0.0;
        }
        let k = (step - self.start_step) as f64;
        self.amplitude * libm::exp(-self.decay_rate() * k)
    }

    fn delayed(&self, by: usize) -> Self {
        Self {
            start_step: self.start_step + by,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ScenarioSpec {
    /// Baseline flow (m³/s).
    pub q0: f64,
    /// Events per unit; unit `i` sees unit 0's events `i * travel_time_steps` later.
    pub events: Vec<Vec<DisruptionEvent>>,
    pub travel_time_steps: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Replicates `events` down a cascade of `n` units.
    pub fn staggered(
        q0: f64,
        events: &[DisruptionEvent],
        n: usize,
        travel_time_steps: usize,
        horizon: usize,
        seed: u64,
    ) -> Self {
        let events = (0..n)
            .map(|i| {
                events
                    .iter()
                    .map(|e| e.delayed(i * travel_time_steps))
                    .collect()
            })
            .collect();
        Self {
            q0,
            events,
            travel_time_steps,
            horizon,
            seed,
        }
    }

    pub fn units(&self) -> usize {
        self.events.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q0 > 0.0 && self.q0.is_finite()) {
            return Err(Error::invalid("baseline flow must be positive"));
        }
        if self.events.is_empty() {
            return Err(Error::invalid("scenario needs at least one unit"));
        }
        for (i, evs) in self.events.iter().enumerate() {
            if evs.len() != self.events[0].len() {
                return Err(Error::invalid("every unit must see the same events"));
            }
            for (e, e0) in evs.iter().zip(&self.events[0]) {
                e.validate()?;
                if e.start_step != e0.start_step + i * self.travel_time_steps {
                    return Err(Error::invalid(
                        "event starts must be staggered by the travel time",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-unit flow series (m³/s), `n x horizon`.
pub fn build_trajectory(spec: &ScenarioSpec) -> Vec<Vec<f64>> {
    spec.events
        .iter()
        .map(|evs| {
            (0..spec.horizon)
                .map(|t| {
                    let drop: f64 = evs.iter().map(|e| e.dip(t)).sum();
                    spec.q0 * (1.0 - drop).max(FLOW_FLOOR)
                })
                .collect()
        })
        .collect()
}

/// A scalar distribution for the scenario parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Dist {
    Fixed {
        value: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    /// `scale * Beta(a, b)`.
    Beta {
        a: f64,
        b: f64,
        scale: f64,
    },
    Gamma {
        shape: f64,
        scale: f64,
    },
}

impl Dist {
    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Fixed { value } => value,
            Dist::Normal { mean, .. } => mean,
            Dist::Beta { a, b, scale } => scale * a / (a + b),
            Dist::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Fixed { value } => value.is_finite(),
            Dist::Normal { mean, sd } => mean.is_finite() && sd >= 0.0 && sd.is_finite(),
            Dist::Beta { a, b, scale } => a > 0.0 && b > 0.0 && scale > 0.0,
            Dist::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "distribution parameters must be positive and finite",
            ))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Fixed { value } => value,
            Dist::Normal { mean, sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).expect("validated").sample(rng)
                }
            }
            Dist::Beta { a, b, scale } => scale * Beta::new(a, b).expect("validated").sample(rng),
            Dist::Gamma { shape, scale } => {
                Gamma::new(shape, scale).expect("validated").sample(rng)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ScenarioDistributions {
    pub q0: Dist,
    /// Baseline draws below this are redrawn.
    pub q0_floor: f64,
    pub amplitude: Dist,
    pub duration: Dist,
}

impl Default for ScenarioDistributions {
    fn default() -> Self {
        Self {
            q0: Dist::Normal {
                mean: 3000.0,
                sd: 300.0,
            },
            q0_floor: 1500.0,
            amplitude: Dist::Beta {
                a: 2.0,
                b: 5.0,
                scale: 0.3,
            },
            duration: Dist::Gamma {
                shape: 3.0,
                scale: 4.0,
            },
        }
    }
}

impl ScenarioDistributions {
    pub fn validate(&self) -> Result<()> {
        self.q0.validate()?;
        self.amplitude.validate()?;
        self.duration.validate()?;
        if !(self.q0_floor > 0.0) || self.q0.mean() < self.q0_floor {
            return Err(Error::invalid(
                "q0 floor must be positive and below the q0 mean",
            ));
        }
        Ok(())
    }

    /// Same distributions with the baseline, amplitude and duration pinned.
    pub fn pinned(q0: Dist, amplitude: f64, duration: f64) -> Self {
        Self {
            q0,
            amplitude: Dist::Fixed { value: amplitude },
            duration: Dist::Fixed { value: duration },
            ..Self::default()
        }
    }
}

/// Where events happen in a sampled scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ScenarioLayout {
    pub units: usize,
    pub travel_time_steps: usize,
    pub horizon: usize,
    /// Step at which the event reaches unit 0.
    pub event_start: usize,
}

impl Default for ScenarioLayout {
    fn default() -> Self {
        Self {
            units: 3,
            travel_time_steps: 1,
            horizon: 72,
            event_start: 12,
        }
    }
}

fn clamp_amplitude(a: f64) -> f64 {
    a.clamp(1e-6, 0.5)
}

fn round_duration(d: f64) -> usize {
    if d.is_finite() {
        (libm::ceil(d) as usize).max(1)
    } else {
        1
    }
}

fn draw_q0<R: Rng>(dists: &ScenarioDistributions, rng: &mut R) -> f64 {
    for _ in 0..1000 {
        let q = dists.q0.sample(rng);
        if q >= dists.q0_floor {
            return q;
        }
    }
    dists.q0_floor
}

/// Draws one scenario. Deterministic in `seed`.
pub fn sample_scenario(
    dists: &ScenarioDistributions,
    layout: &ScenarioLayout,
    seed: u64,
) -> Result<ScenarioSpec> {
    dists.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q0 = draw_q0(dists, &mut rng);
    let event = DisruptionEvent {
        start_step: layout.event_start,
        duration: round_duration(dists.duration.sample(&mut rng)),
        amplitude: clamp_amplitude(dists.amplitude.sample(&mut rng)),
    };
    Ok(ScenarioSpec::staggered(
        q0,
        &[event],
        layout.units,
        layout.travel_time_steps,
        layout.horizon,
        seed,
    ))
}

/// The scenario built from distribution means.
pub fn mean_scenario(
    dists: &ScenarioDistributions,
    layout: &ScenarioLayout,
) -> Result<ScenarioSpec> {
    dists.validate()?;
    let event = DisruptionEvent {
        start_step: layout.event_start,
        duration: round_duration(dists.duration.mean()),
        amplitude: clamp_amplitude(dists.amplitude.mean()),
    };
    Ok(ScenarioSpec::staggered(
        dists.q0.mean().max(dists.q0_floor),
        &[event],
        layout.units,
        layout.travel_time_steps,
        layout.horizon,
        0,
    ))
}

/// Constant flow for every unit.
pub fn constant_trajectory(q0: f64, units: usize, horizon: usize) -> Vec<Vec<f64>> {
    vec![vec![q0; horizon]; units]
}
