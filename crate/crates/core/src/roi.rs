use crate::error::{invalid, Error, Result};
use crate::kernels::CellRegion;

/// Axis-aligned box in input-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoI {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub image_id: usize,
}

impl RoI {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, image_id: usize) -> Result<Self> {
        let r = Self {
            x1,
            y1,
            x2,
            y2,
            image_id,
        };
        if !r.is_valid() {
            return Err(invalid("roi", format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(r)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    /// True when the box overlaps a `width × height` image with positive area.
    pub fn intersects_image(&self, width: usize, height: usize) -> bool {
        self.x2 > 0.0 && self.y2 > 0.0 && self.x1 < width as f32 && self.y1 < height as f32
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() as f64 * self.height() as f64
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn iou(&self, other: &RoI) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0) as f64;
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0) as f64;
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips the box to `[0, width] × [0, height]`.
    pub fn clipped(&self, width: usize, height: usize) -> RoI {
        RoI {
            x1: self.x1.clamp(0.0, width as f32),
            y1: self.y1.clamp(0.0, height as f32),
            x2: self.x2.clamp(0.0, width as f32),
            y2: self.y2.clamp(0.0, height as f32),
            image_id: self.image_id,
        }
    }

    /// Feature-map cells covered by the box: coordinates are divided by
    /// `stride`, then `floor` on the low edge, `ceil` on the high edge,
    /// clamped to the `h × w` map.
    pub fn to_cells(&self, stride: usize, h: usize, w: usize) -> Result<CellRegion> {
        let s = stride as f32;
        let lo = |v: f32, n: usize| ((v / s).floor().max(0.0) as usize).min(n);
        let hi = |v: f32, n: usize| ((v / s).ceil().max(0.0) as usize).min(n);
        let region = CellRegion {
            x0: lo(self.x1, w),
            x1: hi(self.x2, w),
            y0: lo(self.y1, h),
            y1: hi(self.y2, h),
        };
        if region.x1 <= region.x0 || region.y1 <= region.y0 {
            return Err(Error::DegenerateRoi {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                w,
                h,
            });
        }
        Ok(region)
    }
}
