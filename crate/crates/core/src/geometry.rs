//! Axis-aligned boxes in center/size form.

use crate::scalar::Scalar;

/// Axis-aligned box `[cx cy w h]`. Width and height are non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

/// Corner view of a [`BBox`]: `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

/// Width and height of the smallest box enclosing a pair of boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnclosureDims<T> {
    pub width: T,
    pub height: T,
}

impl<T: Scalar> EnclosureDims<T> {
    pub fn area(&self) -> T {
        self.width * self.height
    }

    /// Squared diagonal `W_g^2 + H_g^2`.
    pub fn diag_sq(&self) -> T {
        self.width * self.width + self.height * self.height
    }
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        debug_assert!(w >= T::zero() && h >= T::zero(), "box extents must be non-negative");
        BBox { cx, cy, w, h }
    }

    pub fn from_array(p: [T; 4]) -> Self {
        Self::new(p[0], p[1], p[2], p[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_corners(c: Corners<T>) -> Self {
        let two = T::of(2.0);
        BBox::new((c.x1 + c.x2) / two, (c.y1 + c.y2) / two, c.x2 - c.x1, c.y2 - c.y1)
    }

    pub fn to_corners(self) -> Corners<T> {
        let half_w = self.w / T::of(2.0);
        let half_h = self.h / T::of(2.0);
        Corners {
            x1: self.cx - half_w,
            y1: self.cy - half_h,
            x2: self.cx + half_w,
            y2: self.cy + half_h,
        }
    }

    pub fn area(self) -> T {
        self.w * self.h
    }

    pub fn is_valid(self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w >= T::zero()
            && self.h >= T::zero()
    }

    pub fn translated(self, dx: T, dy: T) -> Self {
        BBox::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    /// Scales centers and extents about the origin.
    pub fn scaled(self, s: T) -> Self {
        BBox::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }
}

/// Overlap length of two intervals given as (center, length). Exact for
/// identical intervals.
pub fn interval_overlap<T: Scalar>(ca: T, la: T, cb: T, lb: T) -> T {
    ((la + lb) / T::of(2.0) - (ca - cb).abs()).min(la).min(lb).max(T::zero())
}

/// Length of the smallest interval covering both.
pub fn interval_span<T: Scalar>(ca: T, la: T, cb: T, lb: T) -> T {
    ((la + lb) / T::of(2.0) + (ca - cb).abs()).max(la).max(lb)
}

/// Overlap width and height; zero when the boxes do not overlap on that axis.
pub fn overlap_extents<T: Scalar>(a: BBox<T>, b: BBox<T>) -> (T, T) {
    (
        interval_overlap(a.cx, a.w, b.cx, b.w),
        interval_overlap(a.cy, a.h, b.cy, b.h),
    )
}

pub fn intersection_area<T: Scalar>(a: BBox<T>, b: BBox<T>) -> T {
    let (iw, ih) = overlap_extents(a, b);
    iw * ih
}

/// Intersection over union. A zero-area union (two degenerate boxes) yields 0.
pub fn iou<T: Scalar>(a: BBox<T>, b: BBox<T>) -> T {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    inter / union
}

pub fn enclosing_dims<T: Scalar>(a: BBox<T>, b: BBox<T>) -> EnclosureDims<T> {
    EnclosureDims {
        width: interval_span(a.cx, a.w, b.cx, b.w),
        height: interval_span(a.cy, a.h, b.cy, b.h),
    }
}

pub fn center_dist_sq<T: Scalar>(a: BBox<T>, b: BBox<T>) -> T {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    dx * dx + dy * dy
}

#[cfg(test)]
mod tests {
    use super::*;

    type B = BBox<f64>;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> B {
        BBox::new(cx, cy, w, h)
    }

    /// Rasterizes both boxes on a grid of cell centers. The boxes are
    /// axis-aligned, so covered cells factor into per-axis counts.
    fn raster_iou(a: B, c: B, res: f64) -> f64 {
        let (ka, kc) = (a.to_corners(), c.to_corners());
        let lo_x = ka.x1.min(kc.x1);
        let lo_y = ka.y1.min(kc.y1);
        let nx = ((ka.x2.max(kc.x2) - lo_x) / res).ceil() as usize;
        let ny = ((ka.y2.max(kc.y2) - lo_y) / res).ceil() as usize;
        let axis = |n: usize, lo: f64, r1: (f64, f64), r2: (f64, f64)| {
            let (mut both, mut first, mut second) = (0u64, 0u64, 0u64);
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * res;
                let in1 = x >= r1.0 && x < r1.1;
                let in2 = x >= r2.0 && x < r2.1;
                both += (in1 && in2) as u64;
                first += in1 as u64;
                second += in2 as u64;
            }
            (both, first, second)
        };
        let (bx, ax, cx) = axis(nx, lo_x, (ka.x1, ka.x2), (kc.x1, kc.x2));
        let (by, ay, cy) = axis(ny, lo_y, (ka.y1, ka.y2), (kc.y1, kc.y2));
        let inter = bx * by;
        let union = ax * ay + cx * cy - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn corners() {
        assert_eq!(
            b(1.0, 1.0, 2.0, 2.0).to_corners(),
            Corners { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 }
        );
        assert_eq!(
            b(0.0, 0.0, 0.0, 0.0).to_corners(),
            Corners { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 }
        );
        assert_eq!(
            b(2.0, 2.0, 2.0, 2.0).to_corners(),
            Corners { x1: 1.0, y1: 1.0, x2: 3.0, y2: 3.0 }
        );
    }

    #[test]
    fn iou_examples() {
        let a = b(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, b(10.0, 0.0, 2.0, 2.0)), 0.0);
        let c = b(2.0, 2.0, 2.0, 2.0);
        let oracle = raster_iou(a, c, 1e-3);
        assert!((oracle - 1.0 / 7.0).abs() < 2e-3);
        assert!((iou(a, c) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_union_is_zero() {
        let p = b(1.0, 1.0, 0.0, 0.0);
        assert_eq!(iou(p, p), 0.0);
    }

    #[test]
    fn enclosure_examples() {
        let a = b(1.0, 1.0, 2.0, 2.0);
        assert_eq!(enclosing_dims(a, a), EnclosureDims { width: 2.0, height: 2.0 });
        assert_eq!(
            enclosing_dims(a, b(2.0, 2.0, 2.0, 2.0)),
            EnclosureDims { width: 3.0, height: 3.0 }
        );
        assert_eq!(
            enclosing_dims(b(0.0, 0.0, 2.0, 2.0), b(10.0, 0.0, 2.0, 2.0)),
            EnclosureDims { width: 12.0, height: 2.0 }
        );
    }

    #[test]
    fn center_distance_examples() {
        assert_eq!(center_dist_sq(b(1.0, 1.0, 1.0, 1.0), b(1.0, 1.0, 3.0, 3.0)), 0.0);
        assert_eq!(center_dist_sq(b(0.0, 0.0, 1.0, 1.0), b(3.0, 4.0, 1.0, 1.0)), 25.0);
        assert_eq!(center_dist_sq(b(1.0, 1.0, 1.0, 1.0), b(2.0, 2.0, 1.0, 1.0)), 2.0);
    }

    #[test]
    fn identical_boxes_are_exact() {
        let a = b(8.17461372718386, 0.3, 0.1, 0.7);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(enclosing_dims(a, a).area(), a.area());
    }

    #[test]
    fn interval_forms_match_corner_forms() {
        let a = b(1.0, 2.0, 3.0, 1.0);
        for c in [b(2.0, 2.0, 1.0, 1.0), b(0.0, 0.0, 8.0, 8.0), b(5.0, 2.0, 1.0, 1.0), b(2.5, 2.2, 2.0, 0.5)] {
            let (ka, kc) = (a.to_corners(), c.to_corners());
            let iw = (ka.x2.min(kc.x2) - ka.x1.max(kc.x1)).max(0.0);
            let sw = ka.x2.max(kc.x2) - ka.x1.min(kc.x1);
            assert!((overlap_extents(a, c).0 - iw).abs() < 1e-15);
            assert!((enclosing_dims(a, c).width - sw).abs() < 1e-15);
        }
    }

    #[test]
    fn corner_round_trip() {
        let a = b(1.5, -2.0, 3.0, 0.5);
        assert_eq!(BBox::from_corners(a.to_corners()), a);
    }

    #[test]
    fn iou_against_raster_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut draw = || {
                let w = rng.gen_range(0.1..5.0);
                let h = rng.gen_range(0.1..5.0);
                b(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), w, h)
            };
            let (p, q) = (draw(), draw());
            assert!((iou(p, q) - raster_iou(p, q, 1e-3)).abs() < 2e-3, "{p:?} {q:?}");
        }
    }
}
