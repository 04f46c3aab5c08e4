//! Axis-aligned boxes in pixel `xyxy` convention.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("degenerate box: x1 ({x1}) must be < x2 ({x2})")]
    EmptyWidth { x1: f64, x2: f64 },
    #[error("degenerate box: y1 ({y1}) must be < y2 ({y2})")]
    EmptyHeight { y1: f64, y2: f64 },
    #[error("box [{x1}, {y1}, {x2}, {y2}] exceeds image bounds {width}x{height}")]
    OutOfImage {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: u32,
        height: u32,
    },
}

/// A bounding box `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
///
/// Serialized as a four-element JSON array. Construction through [`BBox::new`]
/// (and deserialization) rejects degenerate and non-finite boxes, so areas are
/// always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if x1 >= x2 {
            return Err(BoxError::EmptyWidth { x1, x2 });
        }
        if y1 >= y2 {
            return Err(BoxError::EmptyHeight { y1, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Area of the overlap with `other`, 0 when disjoint or only touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Euclidean distance between box centers.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }

    /// Checks `0 <= x1 < x2 <= width` and `0 <= y1 < y2 <= height`.
    pub fn check_within(&self, width: u32, height: u32) -> Result<(), BoxError> {
        let (w, h) = (f64::from(width), f64::from(height));
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > w || self.y2 > h {
            return Err(BoxError::OutOfImage {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                width,
                height,
            });
        }
        Ok(())
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = BoxError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(deserializer)?;
        BBox::try_from(c).map_err(serde::de::Error::custom)
    }
}
