//! Axis-aligned boxes in normalized center-size form, plus the overlap
//! measures used by matching, the box loss, and every IoU >= 0.5 test in the
//! metric suite.
//!
//! Center-size (`cx, cy, w, h`) is the canonical representation because it is
//! what the detector's box head emits. Corner form is derived on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A box in center-size form. `w` and `h` are never negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A box in corner form with `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return Err(Error::domain(format!("non-finite box {self:?}")));
        }
        if self.w < 0.0 || self.h < 0.0 {
            return Err(Error::domain(format!(
                "negative box extent (w = {}, h = {})",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn to_corners(&self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// L1 distance between the center-size coordinate vectors.
    pub fn l1_distance(&self, other: &BBox) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::domain("non-finite corner box"));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::domain(format!("inverted corners ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Corners { x1, y1, x2, y2 })
    }

    pub fn to_center(&self) -> BBox {
        BBox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

fn intersection(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Intersection over union. Two zero-area boxes have IoU 0 by convention.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `iou - (hull - union) / hull` where `hull` is the area of
/// the smallest enclosing box. Fails when the hull is degenerate.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let hull = (ca.x2.max(cb.x2) - ca.x1.min(cb.x1)) * (ca.y2.max(cb.y2) - ca.y1.min(cb.y1));
    if hull <= 0.0 {
        return Err(Error::domain("gIoU undefined: enclosing box has zero area"));
    }
    let inter = intersection(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    Ok(iou - (hull - union) / hull)
}

// d min(a, b) / da with an even split on ties, so that identical boxes sit at
// a stationary point of the gIoU.
fn dmin(a: f64, b: f64) -> f64 {
    if a < b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

fn dmax(a: f64, b: f64) -> f64 {
    dmin(b, a)
}

/// gIoU together with its gradient with respect to `a`'s center-size
/// coordinates `(cx, cy, w, h)`.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> Result<(f64, [f64; 4])> {
    let (ca, cb) = (a.to_corners(), b.to_corners());

    let iw_raw = ca.x2.min(cb.x2) - ca.x1.max(cb.x1);
    let ih_raw = ca.y2.min(cb.y2) - ca.y1.max(cb.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;

    let cw = ca.x2.max(cb.x2) - ca.x1.min(cb.x1);
    let ch = ca.y2.max(cb.y2) - ca.y1.min(cb.y1);
    let hull = cw * ch;
    if hull <= 0.0 {
        return Err(Error::domain("gIoU undefined: enclosing box has zero area"));
    }

    let (aw, ah) = (ca.x2 - ca.x1, ca.y2 - ca.y1);
    let union = aw * ah + cb.area() - inter;
    if union <= 0.0 {
        // Both boxes degenerate inside a non-degenerate hull cannot happen
        // (the hull of two zero-area boxes may still have area), so treat it
        // as a flat region.
        return Ok((-(hull - union) / hull, [0.0; 4]));
    }
    let value = inter / union - (hull - union) / hull;

    // Partials of intersection width/height w.r.t. a's corners.
    let on_w = if iw_raw > 0.0 { 1.0 } else { 0.0 };
    let on_h = if ih_raw > 0.0 { 1.0 } else { 0.0 };
    let diw_dx2 = on_w * dmin(ca.x2, cb.x2);
    let diw_dx1 = -on_w * dmax(ca.x1, cb.x1);
    let dih_dy2 = on_h * dmin(ca.y2, cb.y2);
    let dih_dy1 = -on_h * dmax(ca.y1, cb.y1);

    let dcw_dx2 = dmax(ca.x2, cb.x2);
    let dcw_dx1 = -dmin(ca.x1, cb.x1);
    let dch_dy2 = dmax(ca.y2, cb.y2);
    let dch_dy1 = -dmin(ca.y1, cb.y1);

    // Order: x1, y1, x2, y2.
    let d_inter = [diw_dx1 * ih, dih_dy1 * iw, diw_dx2 * ih, dih_dy2 * iw];
    let d_area = [-ah, -aw, ah, aw];
    let d_hull = [dcw_dx1 * ch, dch_dy1 * cw, dcw_dx2 * ch, dch_dy2 * cw];

    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        d_corner[k] =
            d_inter[k] / union - inter * d_union / (union * union) + d_union / hull - union * d_hull[k] / (hull * hull);
    }

    // x1 = cx - w/2, x2 = cx + w/2 (same for y).
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        Corners::new(x1, y1, x2, y2).unwrap().to_center()
    }

    // Counts unit cells covered by integer-coordinate boxes.
    fn grid_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
        let (mut inter, mut union) = (0, 0);
        for x in -10..20 {
            for y in -10..20 {
                let in_a = x >= a.0 && x < a.2 && y >= a.1 && y < a.3;
                let in_b = x >= b.0 && x < b.2 && y >= b.1 && y < b.3;
                inter += (in_a && in_b) as i32;
                union += (in_a || in_b) as i32;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn unit_box_to_corners() {
        let c = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap().to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 1.0, 1.0));
        let c = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap().to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 0.5, 0.5));
    }

    #[test]
    fn roundtrip_conversion() {
        let b = BBox::new(0.3, 0.7, 0.2, 0.1).unwrap();
        let back = b.to_corners().to_center();
        for (x, y) in b.as_array().iter().zip(back.as_array()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn negative_extent_rejected() {
        assert!(matches!(BBox::new(0.5, 0.5, -0.1, 0.2), Err(Error::Domain(_))));
        assert!(Corners::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = corners(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&corners(0.0, 0.0, 1.0, 1.0), &corners(2.0, 2.0, 3.0, 3.0)), 0.0);
        let v = iou(&a, &corners(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
        assert!((v - grid_iou((0, 0, 2, 2), (1, 1, 3, 3))).abs() < 1e-15);
    }

    #[test]
    fn zero_area_pair_has_zero_iou() {
        let p = BBox::new(0.5, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(iou(&p, &p), 0.0);
        assert!(giou(&p, &p).is_err());
    }

    #[test]
    fn giou_examples() {
        let a = corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let v = giou(&a, &corners(2.0, 0.0, 3.0, 1.0)).unwrap();
        assert!((v + 1.0 / 3.0).abs() < 1e-15);
        let v = giou(&a, &corners(9.0, 0.0, 10.0, 1.0)).unwrap();
        assert!((v + 0.8).abs() < 1e-15);
    }

    #[test]
    fn giou_gradient_vanishes_at_identity() {
        let a = BBox::new(0.4, 0.6, 0.2, 0.3).unwrap();
        let (v, g) = giou_with_grad(&a, &a).unwrap();
        assert_eq!(v, 1.0);
        assert!(g.iter().all(|x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let pairs = [
            (
                BBox::new(0.4, 0.5, 0.3, 0.2).unwrap(),
                BBox::new(0.5, 0.45, 0.2, 0.35).unwrap(),
            ),
            (
                BBox::new(0.2, 0.2, 0.1, 0.1).unwrap(),
                BBox::new(0.7, 0.6, 0.2, 0.3).unwrap(),
            ),
            (
                BBox::new(0.5, 0.5, 0.6, 0.6).unwrap(),
                BBox::new(0.52, 0.48, 0.2, 0.1).unwrap(),
            ),
        ];
        let h = 1e-6;
        for (a, b) in pairs {
            let (_, g) = giou_with_grad(&a, &b).unwrap();
            for k in 0..4 {
                let mut p = a.as_array();
                let mut m = a.as_array();
                p[k] += h;
                m[k] -= h;
                let fp = giou(&BBox::try_from(p).unwrap(), &b).unwrap();
                let fm = giou(&BBox::try_from(m).unwrap(), &b).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "k={k} fd={fd} an={}", g[k]);
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..0.6f64, 0.01..0.6f64).prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn overlap_bounds(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b);
            let g = giou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!(g <= i + 1e-15);
            prop_assert_eq!(i, iou(&b, &a));
            prop_assert!((g - giou(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn containment_gives_equal_giou(a in arb_box(), s in 0.1..1.0f64) {
            let inner = BBox { w: a.w * s, h: a.h * s, ..a };
            let i = iou(&a, &inner);
            let g = giou(&a, &inner).unwrap();
            prop_assert!((g - i).abs() < 1e-12);
        }

        #[test]
        fn iou_matches_grid_count(
            x1 in 0..8i32, y1 in 0..8i32, w1 in 1..6i32, h1 in 1..6i32,
            x2 in 0..8i32, y2 in 0..8i32, w2 in 1..6i32, h2 in 1..6i32,
        ) {
            let a = corners(x1 as f64, y1 as f64, (x1 + w1) as f64, (y1 + h1) as f64);
            let b = corners(x2 as f64, y2 as f64, (x2 + w2) as f64, (y2 + h2) as f64);
            let oracle = grid_iou((x1, y1, x1 + w1, y1 + h1), (x2, y2, x2 + w2, y2 + h2));
            prop_assert!((iou(&a, &b) - oracle).abs() < 1e-9);
        }
    }
}
