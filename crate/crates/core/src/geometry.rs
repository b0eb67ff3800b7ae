/// Axis-aligned box in corner form `(x1, y1, x2, y2)`, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxF { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxF { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxF::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn intersection(&self, other: &BoxF) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn center_distance(&self, other: &BoxF) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        libm::sqrt((ax - bx) * (ax - bx) + (ay - by) * (ay - by))
    }
}

/// `p ↦ p·scale + offset`, applied per axis with a shared scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub ox: f64,
    pub oy: f64,
}

impl Affine {
    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.ox, y * self.scale + self.oy)
    }

    pub fn apply(&self, b: &BoxF) -> BoxF {
        let (x1, y1) = self.apply_point(b.x1, b.y1);
        let (x2, y2) = self.apply_point(b.x2, b.y2);
        BoxF::new(x1, y1, x2, y2)
    }

    pub fn inverse(&self) -> Affine {
        Affine { scale: 1.0 / self.scale, ox: -self.ox / self.scale, oy: -self.oy / self.scale }
    }
}
