//! Axis-aligned boxes in 2D (pixels) and 3D (meters).

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point set is empty")]
    EmptySet,
    #[error("invalid box: min {min:?} exceeds max {max:?}")]
    InvalidBox { min: [f64; 3], max: [f64; 3] },
}

/// Closed axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 3]; 2]", try_from = "[[f64; 3]; 2]")]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl From<Aabb> for [[f64; 3]; 2] {
    fn from(b: Aabb) -> Self {
        [
            [b.min.x, b.min.y, b.min.z],
            [b.max.x, b.max.y, b.max.z],
        ]
    }
}

impl TryFrom<[[f64; 3]; 2]> for Aabb {
    type Error = GeometryError;

    fn try_from(v: [[f64; 3]; 2]) -> Result<Self, Self::Error> {
        Aabb::new(Point3::from(v[0]), Point3::from(v[1]))
    }
}

impl Aabb {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Result<Self, GeometryError> {
        let b = Aabb { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i]
        });
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox {
                min: self.min.coords.into(),
                max: self.max.coords.into(),
            })
        }
    }

    /// Tight box around `points`: componentwise min and max.
    pub fn from_points<'a, I>(points: I) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = &'a Point3<f64>>,
    {
        let mut iter = points.into_iter();
        let first = iter.next().ok_or(GeometryError::EmptySet)?;
        let (mut min, mut max) = (*first, *first);
        for p in iter {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        Ok(Aabb { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    /// Grows the box by `margin` on every side.
    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    /// Intersection volume; zero when the boxes only touch or are disjoint.
    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|i| (self.max[i].min(other.max[i]) - self.min[i].max(other.min[i])).max(0.0))
            .product()
    }

    /// Volume-based intersection over union. Boxes with zero union volume
    /// (including two identical degenerate boxes) score 0.
    pub fn iou(&self, other: &Aabb) -> Result<f64, GeometryError> {
        self.validate()?;
        other.validate()?;
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            return Ok(0.0);
        }
        Ok((inter / union).clamp(0.0, 1.0))
    }
}

/// Pixel-space box `[x0, y0, x1, y1]`, continuous coordinates with
/// `x0 <= x1`, `y0 <= y1`. The covered pixel columns are `x0 as usize..x1.ceil()`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct Box2 {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<Box2> for [f64; 4] {
    fn from(b: Box2) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[f64; 4]> for Box2 {
    fn from(v: [f64; 4]) -> Self {
        Box2::new(v[0], v[1], v[2], v[3])
    }
}

impl Box2 {
    /// Builds a box, reordering corners if they arrive swapped.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Box2 {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Box2 {
        let (w, h) = (width as f64, height as f64);
        Box2 {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 && self.y1 <= height as f64
    }

    /// Box scaled about its center.
    pub fn scaled(&self, factor: f64) -> Box2 {
        let (cx, cy) = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        Box2::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    /// Integer pixel ranges `(cols, rows)` covered by the box.
    pub fn pixel_ranges(&self) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
        let x0 = self.x0.max(0.0).floor() as u32;
        let y0 = self.y0.max(0.0).floor() as u32;
        let x1 = self.x1.max(0.0).ceil() as u32;
        let y1 = self.y1.max(0.0).ceil() as u32;
        (x0..x1, y0..y1)
    }

    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        let (cols, rows) = self.pixel_ranges();
        cols.contains(&u) && rows.contains(&v)
    }

    pub fn iou(&self, other: &Box2) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}
