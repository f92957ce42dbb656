use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(a: f64) -> Self {
        Self::new(a.cos(), a.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Self::ZERO
        }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Closest-point query result against a polyline.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub distance: f64,
    /// Arc length of the closest point from the polyline start.
    pub arc: f64,
    pub closest: Vec2,
}

/// Arc-length indexed polyline. Consecutive points must be distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polyline {
    points: Vec<Vec2>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Option<Self> {
        if points.len() < 2 || points.windows(2).any(|w| w[0] == w[1]) {
            return None;
        }
        Some(Self { points })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = Projection {
            distance: f64::INFINITY,
            arc: 0.0,
            closest: self.points[0],
        };
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len2 = ab.dot(ab);
            let u = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
            let q = a + ab.scale(u);
            let d = p.dist(q);
            if d < best.distance {
                best = Projection {
                    distance: d,
                    arc: acc + u * len2.sqrt(),
                    closest: q,
                };
            }
            acc += len2.sqrt();
        }
        best
    }

    /// Point and unit tangent at arc length `s` (clamped to the ends).
    pub fn at(&self, s: f64) -> (Vec2, Vec2) {
        let mut acc = 0.0;
        let last = self.points.len() - 2;
        for (i, w) in self.points.windows(2).enumerate() {
            let seg = w[1] - w[0];
            let len = seg.norm();
            if s <= acc + len || i == last {
                let u = ((s - acc) / len).clamp(0.0, 1.0);
                return (w[0] + seg.scale(u), seg.scale(1.0 / len));
            }
            acc += len;
        }
        unreachable!("polyline has at least one segment")
    }

    /// Samples at `0, spacing, 2·spacing, …` plus the end point when the
    /// length is not a multiple of `spacing`.
    pub fn resample(&self, spacing: f64) -> Vec<(Vec2, Vec2)> {
        let len = self.length();
        let n = (len / spacing + 1e-9).floor() as usize;
        let mut out: Vec<(Vec2, Vec2)> = (0..=n).map(|i| self.at(i as f64 * spacing)).collect();
        if len - n as f64 * spacing > 1e-9 {
            out.push(self.at(len));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_and_resampling() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(20.0, 0.0)]).unwrap();
        let p = pl.project(Vec2::new(5.0, 3.0));
        assert_eq!(p.distance, 3.0);
        assert_eq!(p.arc, 5.0);
        assert_eq!(pl.resample(2.0).len(), 11);
        assert_eq!(pl.resample(3.0).len(), 8);
        let (pt, tan) = pl.at(7.5);
        assert_eq!(pt, Vec2::new(7.5, 0.0));
        assert_eq!(tan, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn degenerate_polylines_are_rejected() {
        assert!(Polyline::new(vec![Vec2::ZERO]).is_none());
        assert!(Polyline::new(vec![Vec2::ZERO, Vec2::ZERO]).is_none());
    }
}
