use serde::{Deserialize, Serialize};

use super::geometry::Vec2;
use crate::error::{Error, Result};

pub const HORIZON: usize = 8;
pub const DT: f64 = 0.5;

/// Fixed-horizon sequence of ego-frame waypoints (meters). Waypoint `i`
/// is the planned position at time `(i + 1) · dt`; the ego sits at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>, dt: f64) -> Self {
        Self { waypoints, dt }
    }

    pub fn from_flat(flat: &[f64], dt: f64) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "flat trajectory of odd length {}",
                flat.len()
            )));
        }
        Ok(Self {
            waypoints: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            dt,
        })
    }

    pub fn zeros(len: usize, dt: f64) -> Self {
        Self {
            waypoints: vec![[0.0, 0.0]; len],
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.waypoints.iter().flat_map(|w| [w[0], w[1]]).collect()
    }

    pub fn point(&self, i: usize) -> Vec2 {
        Vec2::new(self.waypoints[i][0], self.waypoints[i][1])
    }

    pub fn last(&self) -> Vec2 {
        self.point(self.len() - 1)
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints.iter().all(|w| w[0].is_finite() && w[1].is_finite())
    }

    /// Flattened L2 distance.
    pub fn distance(&self, other: &Trajectory) -> f64 {
        l2(&self.flat(), &other.flat())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            waypoints: self.waypoints.iter().map(|w| [w[0] + dx, w[1] + dy]).collect(),
            dt: self.dt,
        }
    }

    pub fn rounded(&self) -> Self {
        Self {
            waypoints: self
                .waypoints
                .iter()
                .map(|w| [round_sig9(w[0]), round_sig9(w[1])])
                .collect(),
            dt: self.dt,
        }
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounding() {
        assert_eq!(round_sig9(1.234567891234), 1.23456789);
        assert_eq!(round_sig9(-0.000123456789987), -0.000123456790);
        assert_eq!(round_sig9(round_sig9(1.234567890123456)), round_sig9(1.234567890123456));
    }
}
