//! Normalized center-format boxes, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

/// Areas below this are treated as this value.
pub const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPred {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxPred {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxPred { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxPred {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxPred::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `[x0, y0, x1, y1]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    /// Area from the corners, so identical boxes give bitwise-equal
    /// intersection, union and hull.
    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.corners();
        ((x1 - x0) * (y1 - y0)).max(AREA_EPS)
    }

    /// Inside the unit square with positive extent.
    pub fn is_valid(&self) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        let tol = 1e-12;
        self.w > 0.0 && self.h > 0.0 && x0 >= -tol && y0 >= -tol && x1 <= 1.0 + tol && y1 <= 1.0 + tol
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    hull: f64,
}

fn overlap(a: &BoxPred, b: &BoxPred) -> Overlap {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (a.area() + b.area() - inter).max(AREA_EPS);
    let hull = ((ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0))).max(AREA_EPS);
    Overlap { inter, union, hull }
}

pub fn iou(a: &BoxPred, b: &BoxPred) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// `IoU - (hull - union) / hull`.
pub fn giou(a: &BoxPred, b: &BoxPred) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union - (o.hull - o.union) / o.hull
}

/// GIoU and its gradient with respect to `(cx, cy, w, h)` of `a`.
pub fn giou_and_grad(a: &BoxPred, b: &BoxPred) -> (f64, [f64; 4]) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();

    let iw_raw = ax1.min(bx1) - ax0.max(bx0);
    let ih_raw = ay1.min(by1) - ay0.max(by0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (aw, ah) = (ax1 - ax0, ay1 - ay0);
    let raw_area = aw * ah;
    let area_a = raw_area.max(AREA_EPS);
    let union_raw = area_a + b.area() - inter;
    let union = union_raw.max(AREA_EPS);
    let hw = ax1.max(bx1) - ax0.min(bx0);
    let hh = ay1.max(by1) - ay0.min(by0);
    let hull_raw = hw * hh;
    let hull = hull_raw.max(AREA_EPS);
    let value = inter / union - (hull - union) / hull;

    // value = I/U - 1 + U/H with U = A_a + A_b - I.
    let u_live = union_raw > AREA_EPS;
    let d_u = if u_live { -inter / (union * union) + 1.0 / hull } else { 0.0 };
    let d_inter = 1.0 / union - d_u;
    let d_area = if raw_area > AREA_EPS { d_u } else { 0.0 };
    let d_hull = if hull_raw > AREA_EPS { -union / (hull * hull) } else { 0.0 };

    // Corner gradients [x0, y0, x1, y1].
    let mut g = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let (d_iw, d_ih) = (d_inter * ih, d_inter * iw);
        if ax0 > bx0 {
            g[0] -= d_iw;
        }
        if ax1 < bx1 {
            g[2] += d_iw;
        }
        if ay0 > by0 {
            g[1] -= d_ih;
        }
        if ay1 < by1 {
            g[3] += d_ih;
        }
    }
    let (d_hw, d_hh) = (d_hull * hh, d_hull * hw);
    if ax0 <= bx0 {
        g[0] -= d_hw;
    }
    if ax1 >= bx1 {
        g[2] += d_hw;
    }
    if ay0 <= by0 {
        g[1] -= d_hh;
    }
    if ay1 >= by1 {
        g[3] += d_hh;
    }

    let d_w_area = d_area * ah;
    let d_h_area = d_area * aw;
    let grad = [
        g[0] + g[2],
        g[1] + g[3],
        0.5 * (g[2] - g[0]) + d_w_area,
        0.5 * (g[3] - g[1]) + d_h_area,
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn arb_box() -> impl Strategy<Value = BoxPred> {
        (0.05f64..0.95, 0.05f64..0.95, 0.02f64..0.6, 0.02f64..0.6).prop_map(|(cx, cy, w, h)| BoxPred::new(cx, cy, w, h))
    }

    #[test]
    fn identical_boxes() {
        let a = BoxPred::new(0.3, 0.6, 0.2, 0.4);
        assert_eq!(giou(&a, &a), 1.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn corner_touching_squares() {
        let a = BoxPred::new(0.25, 0.25, 0.5, 0.5);
        let b = BoxPred::new(0.75, 0.75, 0.5, 0.5);
        // IoU 0, hull 1, union 0.5.
        assert!((giou(&a, &b) + 0.5).abs() < 1e-12);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn degenerate_box_is_finite() {
        let a = BoxPred::new(0.5, 0.5, 0.0, 0.0);
        let b = BoxPred::new(0.5, 0.5, 0.2, 0.2);
        assert!(giou(&a, &b).is_finite());
        let (v, g) = giou_and_grad(&a, &a);
        assert!(v.is_finite() && g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn corners_round_trip() {
        let a = BoxPred::new(0.3, 0.4, 0.2, 0.1);
        let [x0, y0, x1, y1] = a.corners();
        let b = BoxPred::from_corners(x0, y0, x1, y1);
        for (p, q) in a.to_array().iter().zip(b.to_array()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
            prop_assert!(g <= iou(&a, &b) + 1e-15);
            prop_assert!(iou(&a, &b) <= 1.0);
            prop_assert!(g > -1.0);
        }

        #[test]
        fn gradient_matches_central_differences(a in arb_box(), b in arb_box()) {
            let (v, g) = giou_and_grad(&a, &b);
            prop_assert!((v - giou(&a, &b)).abs() < 1e-15);
            let h = 1e-6;
            let base = a.to_array();
            for i in 0..4 {
                let mut p = base;
                p[i] += h;
                let mut m = base;
                m[i] -= h;
                let num = (giou(&BoxPred::from_array(p), &b) - giou(&BoxPred::from_array(m), &b)) / (2.0 * h);
                // Kinks where edges coincide are measure-zero; skip if the
                // two one-sided slopes disagree.
                let right = (giou(&BoxPred::from_array(p), &b) - v) / h;
                let left = (v - giou(&BoxPred::from_array(m), &b)) / h;
                if (right - left).abs() < 1e-4 {
                    prop_assert!((g[i] - num).abs() < 1e-6, "coord {}: {} vs {}", i, g[i], num);
                }
            }
        }
    }
}
