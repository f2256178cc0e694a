//! Oscillating coefficient fields `μ(ξ, q)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediumCase {
    Periodic,
    PeriodicXStationaryT,
    Stationary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicPattern {
    Constant,
    /// `1 + a·sin(2πξ₁)·sin(2πq)`
    Trig,
    /// `1 + a·cos(2πξ₁)`, time independent.
    Cosine,
    /// Two values on the half-period space-time checkerboard.
    Checkerboard,
    /// Two values on the halves of the spatial period, constant in time.
    Stripes,
}

/// JSON block describing a medium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MediumSpec {
    Periodic {
        pattern: PeriodicPattern,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amplitude: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<f64>>,
    },
    PeriodicXStationaryT {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base: Option<Box<MediumSpec>>,
        values: Vec<f64>,
        probs: Vec<f64>,
        tile_size: f64,
        seed: u64,
    },
    Stationary {
        values: Vec<f64>,
        probs: Vec<f64>,
        tile_size: f64,
        seed: u64,
    },
}

impl MediumSpec {
    pub fn build<T: Real>(&self, dim: usize) -> Result<MediumField<T>> {
        match self {
            MediumSpec::Periodic {
                pattern,
                amplitude,
                values,
            } => match pattern {
                PeriodicPattern::Constant => {
                    let v = values.as_ref().and_then(|v| v.first().copied()).unwrap_or(1.0);
                    MediumField::constant(dim, T::of(v))
                }
                PeriodicPattern::Trig => MediumField::periodic_trig(dim, T::of(amplitude.unwrap_or(0.0))),
                PeriodicPattern::Cosine => MediumField::periodic_cosine(dim, T::of(amplitude.unwrap_or(0.0))),
                PeriodicPattern::Checkerboard => {
                    let v = values
                        .as_ref()
                        .filter(|v| v.len() == 2)
                        .ok_or_else(|| Error::Config("checkerboard needs exactly two values".into()))?;
                    MediumField::checkerboard(dim, T::of(v[0]), T::of(v[1]))
                }
                PeriodicPattern::Stripes => {
                    let v = values
                        .as_ref()
                        .filter(|v| v.len() == 2)
                        .ok_or_else(|| Error::Config("stripes need exactly two values".into()))?;
                    MediumField::stripes(dim, T::of(v[0]), T::of(v[1]))
                }
            },
            MediumSpec::PeriodicXStationaryT {
                base,
                values,
                probs,
                tile_size,
                seed,
            } => {
                let base = match base {
                    Some(b) => b.build(dim)?,
                    None => MediumField::constant(dim, T::one())?,
                };
                MediumField::time_stationary(dim, base, T::of(*tile_size), values, probs, *seed)
            }
            MediumSpec::Stationary {
                values,
                probs,
                tile_size,
                seed,
            } => MediumField::tile_random(dim, T::of(*tile_size), values, probs, *seed),
        }
    }

    pub fn with_seed(&self, seed: u64) -> MediumSpec {
        let mut s = self.clone();
        match &mut s {
            MediumSpec::PeriodicXStationaryT { seed: sd, .. } | MediumSpec::Stationary { seed: sd, .. } => *sd = seed,
            MediumSpec::Periodic { .. } => {}
        }
        s
    }
}

#[derive(Clone, Debug)]
struct TileLaw<T> {
    values: Vec<T>,
    cdf: Vec<f64>,
    seed: u64,
}

impl<T: Real> TileLaw<T> {
    fn new(values: &[f64], probs: &[f64], seed: u64) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(Error::Config("tile values and probs must be non-empty and of equal length".into()));
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("tile values must be positive".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("tile probs must be nonnegative and sum to 1".into()));
        }
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(TileLaw {
            values: values.iter().map(|v| T::of(*v)).collect(),
            cdf,
            seed,
        })
    }

    fn draw(&self, tile: &[i64]) -> T {
        let mut h = splitmix64(self.seed ^ 0x9E37_79B9_7F4A_7C15);
        for &t in tile {
            h = splitmix64(h ^ (t as u64));
        }
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        let i = self.cdf.iter().position(|c| u < *c).unwrap_or(self.values.len() - 1);
        self.values[i]
    }

    fn bounds(&self) -> (T, T) {
        let lo = self.values.iter().copied().fold(T::infinity(), T::min);
        let hi = self.values.iter().copied().fold(T::neg_infinity(), T::max);
        (lo, hi)
    }
}

/// Counter-based hash (SplitMix64 finalizer).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
enum Pattern<T> {
    Constant(T),
    Trig(T),
    Cosine(T),
    Checkerboard(T, T),
    Stripes(T, T),
    Tiles { tile: T, law: TileLaw<T> },
    TimeTiles { base: Box<MediumField<T>>, tile: T, law: TileLaw<T> },
}

#[derive(Clone, Debug)]
pub struct MediumField<T> {
    pub dim: usize,
    pub case: MediumCase,
    pub bounds: (T, T),
    pattern: Pattern<T>,
    pub spec: MediumSpec,
}

impl<T: Real> MediumField<T> {
    pub fn constant(dim: usize, c: T) -> Result<Self> {
        if !(c > T::zero()) {
            return Err(Error::Config("constant medium must be positive".into()));
        }
        Ok(MediumField {
            dim,
            case: MediumCase::Periodic,
            bounds: (c, c),
            pattern: Pattern::Constant(c),
            spec: MediumSpec::Periodic {
                pattern: PeriodicPattern::Constant,
                amplitude: None,
                values: Some(vec![c.f64()]),
            },
        })
    }

    /// `μ = 1 + a·sin(2πξ₁)·sin(2πq)`.
    pub fn periodic_trig(dim: usize, amplitude: T) -> Result<Self> {
        if !(amplitude >= T::zero() && amplitude < T::one()) {
            return Err(Error::Config("trig amplitude must lie in [0, 1)".into()));
        }
        Ok(MediumField {
            dim,
            case: MediumCase::Periodic,
            bounds: (T::one() - amplitude, T::one() + amplitude),
            pattern: Pattern::Trig(amplitude),
            spec: MediumSpec::Periodic {
                pattern: PeriodicPattern::Trig,
                amplitude: Some(amplitude.f64()),
                values: None,
            },
        })
    }

    /// `μ = 1 + a·cos(2πξ₁)`, constant in time.
    pub fn periodic_cosine(dim: usize, amplitude: T) -> Result<Self> {
        if !(amplitude >= T::zero() && amplitude < T::one()) {
            return Err(Error::Config("cosine amplitude must lie in [0, 1)".into()));
        }
        Ok(MediumField {
            dim,
            case: MediumCase::Periodic,
            bounds: (T::one() - amplitude, T::one() + amplitude),
            pattern: Pattern::Cosine(amplitude),
            spec: MediumSpec::Periodic {
                pattern: PeriodicPattern::Cosine,
                amplitude: Some(amplitude.f64()),
                values: None,
            },
        })
    }

    /// `a` on cells with `Σ⌊2ξ_c⌋ + ⌊2q⌋` even, `b` otherwise.
    pub fn checkerboard(dim: usize, a: T, b: T) -> Result<Self> {
        if !(a > T::zero() && b > T::zero()) {
            return Err(Error::Config("checkerboard values must be positive".into()));
        }
        Ok(MediumField {
            dim,
            case: MediumCase::Periodic,
            bounds: (a.min(b), a.max(b)),
            pattern: Pattern::Checkerboard(a, b),
            spec: MediumSpec::Periodic {
                pattern: PeriodicPattern::Checkerboard,
                amplitude: None,
                values: Some(vec![a.f64(), b.f64()]),
            },
        })
    }

    /// `a` for `⌊2ξ₁⌋` even, `b` otherwise; constant in time.
    pub fn stripes(dim: usize, a: T, b: T) -> Result<Self> {
        if !(a > T::zero() && b > T::zero()) {
            return Err(Error::Config("stripe values must be positive".into()));
        }
        Ok(MediumField {
            dim,
            case: MediumCase::Periodic,
            bounds: (a.min(b), a.max(b)),
            pattern: Pattern::Stripes(a, b),
            spec: MediumSpec::Periodic {
                pattern: PeriodicPattern::Stripes,
                amplitude: None,
                values: Some(vec![a.f64(), b.f64()]),
            },
        })
    }

    /// Piecewise constant on `tile_size` cubes in `(ξ, q)` with i.i.d. values.
    pub fn tile_random(dim: usize, tile_size: T, values: &[f64], probs: &[f64], seed: u64) -> Result<Self> {
        if !(tile_size > T::zero()) {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        let law = TileLaw::new(values, probs, seed)?;
        Ok(MediumField {
            dim,
            case: MediumCase::Stationary,
            bounds: law.bounds(),
            pattern: Pattern::Tiles { tile: tile_size, law },
            spec: MediumSpec::Stationary {
                values: values.to_vec(),
                probs: probs.to_vec(),
                tile_size: tile_size.f64(),
                seed,
            },
        })
    }

    /// `μ(ξ,q) = base(ξ)·η(⌊q/time_tile⌋)` with i.i.d. `η`.
    pub fn time_stationary(
        dim: usize,
        base: MediumField<T>,
        time_tile: T,
        values: &[f64],
        probs: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if !(time_tile > T::zero()) {
            return Err(Error::Config("time_tile must be positive".into()));
        }
        if base.case != MediumCase::Periodic || !base.is_time_independent() {
            return Err(Error::Config("base field must be periodic and time independent".into()));
        }
        let law = TileLaw::new(values, probs, seed)?;
        let (l, h) = law.bounds();
        let bounds = (base.bounds.0 * l, base.bounds.1 * h);
        let spec = MediumSpec::PeriodicXStationaryT {
            base: Some(Box::new(base.spec.clone())),
            values: values.to_vec(),
            probs: probs.to_vec(),
            tile_size: time_tile.f64(),
            seed,
        };
        Ok(MediumField {
            dim,
            case: MediumCase::PeriodicXStationaryT,
            bounds,
            pattern: Pattern::TimeTiles {
                base: Box::new(base),
                tile: time_tile,
                law,
            },
            spec,
        })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.pattern, Pattern::Constant(_))
    }

    pub fn is_time_independent(&self) -> bool {
        matches!(self.pattern, Pattern::Constant(_) | Pattern::Cosine(_) | Pattern::Stripes(..))
    }

    /// Same construction with another seed (no-op for periodic fields).
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut m = self.clone();
        match &mut m.pattern {
            Pattern::Tiles { law, .. } | Pattern::TimeTiles { law, .. } => law.seed = seed,
            _ => {}
        }
        m.spec = m.spec.with_seed(seed);
        m
    }

    pub fn eval(&self, xi: &[T], q: T) -> T {
        let two_pi = T::of(2.0) * T::PI();
        match &self.pattern {
            Pattern::Constant(c) => *c,
            Pattern::Trig(a) => T::one() + *a * (two_pi * frac(xi[0])).sin() * (two_pi * frac(q)).sin(),
            Pattern::Cosine(a) => T::one() + *a * (two_pi * frac(xi[0])).cos(),
            Pattern::Checkerboard(a, b) => {
                let two = T::of(2.0);
                let mut parity = (two * q).floor().to_i64().unwrap();
                for x in xi {
                    parity += (two * *x).floor().to_i64().unwrap();
                }
                if parity.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Pattern::Stripes(a, b) => {
                if (T::of(2.0) * xi[0]).floor().to_i64().unwrap().rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Pattern::Tiles { tile, law } => {
                let mut idx: Vec<i64> = xi.iter().map(|x| (*x / *tile).floor().to_i64().unwrap()).collect();
                idx.push((q / *tile).floor().to_i64().unwrap());
                law.draw(&idx)
            }
            Pattern::TimeTiles { base, tile, law } => {
                let n = (q / *tile).floor().to_i64().unwrap();
                base.eval(xi, q) * law.draw(&[n])
            }
        }
    }
}

fn frac<T: Real>(x: T) -> T {
    x - x.floor()
}

/// `ν(x,t; y,s) = μ_left(x,t)·μ_right(y,s)`.
pub struct ProductCoefficient<'a, T> {
    pub left: &'a MediumField<T>,
    pub right: &'a MediumField<T>,
}

impl<T: Real> ProductCoefficient<'_, T> {
    pub fn eval(&self, x: &[T], t: T, y: &[T], s: T) -> T {
        self.left.eval(x, t) * self.right.eval(y, s)
    }

    pub fn lower_bound(&self) -> T {
        self.left.bounds.0 * self.right.bounds.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trig_values() {
        let m = MediumField::<f64>::periodic_trig(1, 0.5).unwrap();
        assert!((m.eval(&[0.25], 0.25) - 1.5).abs() < 1e-15);
        assert_eq!(m.bounds, (0.5, 1.5));
        let z = MediumField::<f64>::periodic_trig(1, 0.0).unwrap();
        assert_eq!(z.eval(&[0.3], 0.7), 1.0);
    }

    #[test]
    fn checkerboard_symmetry() {
        let m = MediumField::<f64>::checkerboard(1, 0.5, 2.0).unwrap();
        for &(x, q) in &[(0.1, 0.2), (0.3, 0.6), (0.7, 0.1), (0.9, 0.9)] {
            assert_eq!(m.eval(&[x], q), m.eval(&[1.0 - x], q + 0.5));
        }
    }

    #[test]
    fn forced_single_value() {
        let m = MediumField::<f64>::tile_random(1, 0.5, &[1.3, 1.3], &[0.5, 0.5], 9).unwrap();
        assert_eq!(m.eval(&[0.2], -4.0), 1.3);
        assert_eq!(m.eval(&[17.2], 3.3), 1.3);
    }

    #[test]
    fn spec_roundtrip() {
        let m = MediumField::<f64>::time_stationary(
            1,
            MediumField::periodic_cosine(1, 0.3).unwrap(),
            1.0,
            &[0.5, 2.0],
            &[0.5, 0.5],
            4,
        )
        .unwrap();
        let json = serde_json::to_string(&m.spec).unwrap();
        let back: MediumSpec = serde_json::from_str(&json).unwrap();
        let m2: MediumField<f64> = back.build(1).unwrap();
        for i in 0..50 {
            let x = 0.37 * i as f64;
            let q = -3.0 + 0.71 * i as f64;
            assert_eq!(m.eval(&[x], q), m2.eval(&[x], q));
        }
    }
}
