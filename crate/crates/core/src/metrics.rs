//! Box metrics (IoU, boundary displacement error) and the Complete-IoU loss
//! with its analytic gradient.

use std::f64::consts::PI;

use thiserror::Error;

use crate::layout::BBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("non-finite bbox")]
    NonFinite,
    #[error("degenerate ground truth")]
    DegenerateGroundTruth,
    #[error("degenerate prediction")]
    DegeneratePrediction,
}

fn finite(b: &BBox) -> Result<(), MetricError> {
    if b.is_finite() {
        Ok(())
    } else {
        Err(MetricError::NonFinite)
    }
}

fn overlap_1d(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> f64 {
    (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0)
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    overlap_1d(a.left, a.right(), b.left, b.right()) * overlap_1d(a.top, a.bottom(), b.top, b.bottom())
}

/// Intersection over union. Two degenerate boxes (zero union) give 0.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, MetricError> {
    finite(a)?;
    finite(b)?;
    let inter = intersection(a, b);
    // edge-based areas make iou(a, a) exactly 1
    let area = |x: &BBox| (x.right() - x.left) * (x.bottom() - x.top);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Mean absolute displacement of the left, right, top and bottom edges.
pub fn bde(pred: &BBox, gt: &BBox) -> Result<f64, MetricError> {
    finite(pred)?;
    finite(gt)?;
    Ok(((pred.left - gt.left).abs()
        + (pred.right() - gt.right()).abs()
        + (pred.top - gt.top).abs()
        + (pred.bottom() - gt.bottom()).abs())
        / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CIoUBreakdown {
    pub iou: f64,
    /// Squared center distance over the squared diagonal of the enclosing box.
    pub center_penalty: f64,
    /// Aspect-ratio consistency term `v`.
    pub aspect_term_v: f64,
    pub alpha: f64,
    pub ciou: f64,
    pub loss: f64,
}

const ASPECT_SCALE: f64 = 4.0 / (PI * PI);

fn aspect_angle(b: &BBox) -> f64 {
    b.width.atan2(b.height)
}

fn enclosing_extent(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> f64 {
    a_hi.max(b_hi) - a_lo.min(b_lo)
}

/// Complete IoU of `pred` against a non-degenerate `gt`.
pub fn ciou(pred: &BBox, gt: &BBox) -> Result<CIoUBreakdown, MetricError> {
    finite(pred)?;
    finite(gt)?;
    if gt.width <= 0.0 || gt.height <= 0.0 {
        return Err(MetricError::DegenerateGroundTruth);
    }
    let iou = iou(pred, gt)?;
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = enclosing_extent(pred.left, pred.right(), gt.left, gt.right());
    let ch = enclosing_extent(pred.top, pred.bottom(), gt.top, gt.bottom());
    let c2 = cw * cw + ch * ch;
    let center_penalty = rho2 / c2;
    let v = ASPECT_SCALE * (aspect_angle(gt) - aspect_angle(pred)).powi(2);
    let denom = (1.0 - iou) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };
    let ciou = iou - center_penalty - alpha * v;
    Ok(CIoUBreakdown {
        iou,
        center_penalty,
        aspect_term_v: v,
        alpha,
        ciou,
        loss: 1.0 - ciou,
    })
}

/// Derivative of `min(a, b)` with respect to `a`; ties split evenly.
fn d_min(a: f64, b: f64) -> f64 {
    if a < b {
        1.0
    } else if a > b {
        0.0
    } else {
        0.5
    }
}

/// Derivative of `max(a, b)` with respect to `a`; ties split evenly.
fn d_max(a: f64, b: f64) -> f64 {
    d_min(b, a)
}

/// Breakdown together with d(loss)/d(left, top, width, height) of `pred`.
///
/// `alpha` is held constant during differentiation. At coincident edges the
/// min/max subgradients are split evenly, which yields a zero gradient at
/// `pred == gt`.
pub fn ciou_loss_and_grad(pred: &BBox, gt: &BBox) -> Result<(CIoUBreakdown, [f64; 4]), MetricError> {
    let b = ciou(pred, gt)?;
    if pred.width <= 0.0 || pred.height <= 0.0 {
        return Err(MetricError::DegeneratePrediction);
    }

    // Per-axis pieces: (position, size) derivatives of overlap and enclosing extent.
    struct Axis {
        overlap: f64,
        d_overlap: [f64; 2],
        extent: f64,
        d_extent: [f64; 2],
    }
    let axis = |lo: f64, size: f64, g_lo: f64, g_size: f64| {
        let (hi, g_hi) = (lo + size, g_lo + g_size);
        let overlap = overlap_1d(lo, hi, g_lo, g_hi);
        let d_overlap = if overlap > 0.0 {
            let d_hi = d_min(hi, g_hi);
            let d_lo = d_max(lo, g_lo);
            [d_hi - d_lo, d_hi]
        } else {
            [0.0, 0.0]
        };
        let d_hi = d_max(hi, g_hi);
        let d_lo = d_min(lo, g_lo);
        Axis {
            overlap,
            d_overlap,
            extent: enclosing_extent(lo, hi, g_lo, g_hi),
            d_extent: [d_hi - d_lo, d_hi],
        }
    };
    let ax = axis(pred.left, pred.width, gt.left, gt.width);
    let ay = axis(pred.top, pred.height, gt.top, gt.height);

    // IoU = I / U with U = A_pred + A_gt - I
    let inter = ax.overlap * ay.overlap;
    let union = pred.area() + gt.area() - inter;
    let d_inter = [
        ax.d_overlap[0] * ay.overlap,
        ay.d_overlap[0] * ax.overlap,
        ax.d_overlap[1] * ay.overlap,
        ay.d_overlap[1] * ax.overlap,
    ];
    let d_area = [0.0, 0.0, pred.height, pred.width];
    let u2 = union * union;
    let d_iou: [f64; 4] = std::array::from_fn(|k| ((union + inter) * d_inter[k] - inter * d_area[k]) / u2);

    // center penalty rho^2 / c^2
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let (dx, dy) = (pcx - gcx, pcy - gcy);
    let rho2 = dx * dx + dy * dy;
    let d_rho2 = [2.0 * dx, 2.0 * dy, dx, dy];
    let c2 = ax.extent * ax.extent + ay.extent * ay.extent;
    let d_c2 = [
        2.0 * ax.extent * ax.d_extent[0],
        2.0 * ay.extent * ay.d_extent[0],
        2.0 * ax.extent * ax.d_extent[1],
        2.0 * ay.extent * ay.d_extent[1],
    ];
    let d_pen: [f64; 4] = std::array::from_fn(|k| (d_rho2[k] * c2 - rho2 * d_c2[k]) / (c2 * c2));

    // v = s (atan(gw/gh) - atan(w/h))^2
    let delta = aspect_angle(gt) - aspect_angle(pred);
    let norm2 = pred.width * pred.width + pred.height * pred.height;
    let d_v = [
        0.0,
        0.0,
        -2.0 * ASPECT_SCALE * delta * pred.height / norm2,
        2.0 * ASPECT_SCALE * delta * pred.width / norm2,
    ];

    let grad = std::array::from_fn(|k| -d_iou[k] + d_pen[k] + b.alpha * d_v[k]);
    Ok((b, grad))
}

/// Gradient of `1 - ciou` with respect to the prediction's four components.
pub fn ciou_loss_grad(pred: &BBox, gt: &BBox) -> Result<[f64; 4], MetricError> {
    ciou_loss_and_grad(pred, gt).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(l: f64, t: f64, w: f64, h: f64) -> BBox {
        BBox::new(l, t, w, h)
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.1, 0.1, 0.3, 0.3);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.5, 0.5, 0.2, 0.2)).unwrap(), 0.0);
        let v = iou(&bb(0.0, 0.0, 0.5, 0.5), &bb(0.25, 0.25, 0.5, 0.5)).unwrap();
        assert!((v - 0.0625 / 0.4375).abs() < 1e-12);
        let flat = bb(0.2, 0.2, 0.0, 0.0);
        assert_eq!(iou(&flat, &flat).unwrap(), 0.0);
        assert_eq!(iou(&bb(f64::NAN, 0.0, 1.0, 1.0), &a), Err(MetricError::NonFinite));
    }

    #[test]
    fn bde_examples() {
        let g = bb(0.2, 0.2, 0.2, 0.2);
        assert_eq!(bde(&g, &g).unwrap(), 0.0);
        assert!((bde(&bb(0.1, 0.1, 0.2, 0.2), &g).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(bde(&bb(0.0, 0.0, 1.0, 1.0), &bb(0.0, 0.0, 0.5, 0.5)).unwrap(), 0.25);
        assert!(bde(&g, &bb(0.0, f64::INFINITY, 0.1, 0.1)).is_err());
    }

    #[test]
    fn ciou_examples() {
        let g = bb(0.3, 0.3, 0.2, 0.2);
        let b = ciou(&g, &g).unwrap();
        assert_eq!((b.iou, b.center_penalty, b.aspect_term_v, b.ciou, b.loss), (1.0, 0.0, 0.0, 1.0, 0.0));

        let b = ciou(&bb(0.375, 0.375, 0.25, 0.25), &bb(0.25, 0.25, 0.5, 0.5)).unwrap();
        assert!(b.center_penalty.abs() < 1e-9 && b.aspect_term_v.abs() < 1e-9);
        assert!((b.ciou - 0.25).abs() < 1e-9 && (b.iou - 0.25).abs() < 1e-9);

        let b = ciou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.8, 0.8, 0.2, 0.2)).unwrap();
        assert!(b.iou.abs() < 1e-9);
        assert!((b.center_penalty - 0.64).abs() < 1e-9);
        assert!(b.aspect_term_v.abs() < 1e-9);
        assert!((b.ciou + 0.64).abs() < 1e-9);
        assert!((b.loss - 1.64).abs() < 1e-9);
    }

    #[test]
    fn ciou_rejects_degenerate_inputs() {
        let p = bb(0.1, 0.1, 0.2, 0.2);
        assert_eq!(ciou(&p, &bb(0.1, 0.1, 0.0, 0.2)), Err(MetricError::DegenerateGroundTruth));
        assert_eq!(
            ciou_loss_grad(&bb(0.1, 0.1, 0.2, 0.0), &p),
            Err(MetricError::DegeneratePrediction)
        );
        assert!(ciou(&p, &p).is_ok());
        assert!(ciou(&bb(0.1, 0.1, 0.0, 0.0), &p).unwrap().loss.is_finite());
    }

    #[test]
    fn gradient_vanishes_at_the_optimum() {
        let g = bb(0.3, 0.3, 0.2, 0.2);
        assert_eq!(ciou_loss_grad(&g, &g).unwrap(), [0.0; 4]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..0.9, 0.0f64..0.9, 0.01f64..0.9, 0.01f64..0.9).prop_map(|(l, t, w, h)| bb(l, t, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn bde_is_symmetric(a in arb_box(), b in arb_box()) {
            let d = bde(&a, &b).unwrap();
            prop_assert_eq!(d, bde(&b, &a).unwrap());
            prop_assert!(d >= 0.0);
        }

        #[test]
        fn ciou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            let c = ciou(&a, &b).unwrap();
            prop_assert!(c.ciou <= c.iou);
            prop_assert!(c.loss >= 0.0);
            prop_assert!((c.ciou - (c.iou - c.center_penalty - c.alpha * c.aspect_term_v)).abs() < 1e-15);
        }

        #[test]
        fn metrics_are_translation_equivariant(a in arb_box(), b in arb_box(), dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
            let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
            prop_assert!((iou(&a, &b).unwrap() - iou(&ta, &tb).unwrap()).abs() < 1e-12);
            prop_assert!((bde(&a, &b).unwrap() - bde(&ta, &tb).unwrap()).abs() < 1e-12);
            prop_assert!((ciou(&a, &b).unwrap().ciou - ciou(&ta, &tb).unwrap().ciou).abs() < 1e-12);
        }
    }
}
