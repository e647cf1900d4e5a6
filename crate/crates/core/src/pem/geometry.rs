use serde::{Deserialize, Serialize};

/// Point in continuous pixel coordinates: pixel `(row i, col j)` covers
/// `[j, j+1) x [i, i+1)` and its center sits at `(j + 0.5, i + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }

    /// `self + t * (other - self)`.
    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(self.x + t * (other.x - self.x), self.y + t * (other.y - self.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Closed disc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: Point,
    pub radius: f64,
}

/// Closed axis-aligned square `[center ± half_extent]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Square {
    pub center: Point,
    pub half_extent: f64,
}

impl Square {
    pub fn min(&self) -> Point {
        Point::new(self.center.x - self.half_extent, self.center.y - self.half_extent)
    }

    pub fn max(&self) -> Point {
        Point::new(self.center.x + self.half_extent, self.center.y + self.half_extent)
    }

    /// Distance from `p` to the nearest point of the square (zero inside).
    pub fn distance_to(&self, p: Point) -> f64 {
        let (lo, hi) = (self.min(), self.max());
        let dx = (lo.x - p.x).max(0.0).max(p.x - hi.x);
        let dy = (lo.y - p.y).max(0.0).max(p.y - hi.y);
        dx.hypot(dy)
    }

    /// Touching counts as intersecting.
    pub fn intersects(&self, disc: &Disc) -> bool {
        self.distance_to(disc.center) <= disc.radius
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        let (lo, hi) = (self.min(), self.max());
        lo.x >= 0.0 && lo.y >= 0.0 && hi.x <= width as f64 && hi.y <= height as f64
    }
}
