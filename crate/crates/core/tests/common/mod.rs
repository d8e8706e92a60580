//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use boxplace::layout::BBox;
use boxplace::nn::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// Pixel indices `i` whose center `(i + 0.5) / n` lies in `[lo, hi)`.
fn centers_in(lo: f64, hi: f64, n: usize) -> std::ops::Range<i64> {
    let first = (lo * n as f64 - 0.5).ceil() as i64;
    let end = (hi * n as f64 - 0.5).ceil() as i64;
    first.clamp(0, n as i64)..end.clamp(0, n as i64)
}

fn span(r: &std::ops::Range<i64>) -> i64 {
    (r.end - r.start).max(0)
}

fn overlap(a: &std::ops::Range<i64>, b: &std::ops::Range<i64>) -> i64 {
    (a.end.min(b.end) - a.start.max(b.start)).max(0)
}

/// IoU by counting covered pixel centers on an `n x n` grid. Boxes are
/// axis-aligned, so the count factors into per-axis counts.
pub fn grid_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
    let (ax, ay) = (centers_in(a.left, a.left + a.width, n), centers_in(a.top, a.top + a.height, n));
    let (bx, by) = (centers_in(b.left, b.left + b.width, n), centers_in(b.top, b.top + b.height, n));
    let inter = overlap(&ax, &bx) * overlap(&ay, &by);
    let union = span(&ax) * span(&ay) + span(&bx) * span(&by) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn edge_bde(p: &BBox, g: &BBox) -> f64 {
    let edges = |b: &BBox| [b.left, b.top, b.left + b.width, b.top + b.height];
    edges(p).iter().zip(edges(g)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// Plain CIoU terms: (iou, center penalty, v).
pub fn ciou_terms(p: &BBox, g: &BBox) -> (f64, f64, f64) {
    let iw = ((p.left + p.width).min(g.left + g.width) - p.left.max(g.left)).max(0.0);
    let ih = ((p.top + p.height).min(g.top + g.height) - p.top.max(g.top)).max(0.0);
    let inter = iw * ih;
    let union = p.width * p.height + g.width * g.height - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let cw = (p.left + p.width).max(g.left + g.width) - p.left.min(g.left);
    let ch = (p.top + p.height).max(g.top + g.height) - p.top.min(g.top);
    let dx = (p.left + p.width / 2.0) - (g.left + g.width / 2.0);
    let dy = (p.top + p.height / 2.0) - (g.top + g.height / 2.0);
    let rho = (dx * dx + dy * dy) / (cw * cw + ch * ch);
    let v = 4.0 / (PI * PI) * ((g.width / g.height).atan() - (p.width / p.height).atan()).powi(2);
    (iou, rho, v)
}

pub fn ciou_alpha(p: &BBox, g: &BBox) -> f64 {
    let (iou, _, v) = ciou_terms(p, g);
    let d = (1.0 - iou) + v;
    if d == 0.0 {
        0.0
    } else {
        v / d
    }
}

/// CIoU loss with the trade-off weight held at `alpha`.
pub fn ciou_loss_fixed_alpha(p: &BBox, g: &BBox, alpha: f64) -> f64 {
    let (iou, rho, v) = ciou_terms(p, g);
    1.0 - (iou - rho - alpha * v)
}

/// Central-difference gradient of the fixed-alpha loss in (l, t, w, h).
pub fn ciou_fd_grad(p: &BBox, g: &BBox) -> [f64; 4] {
    let alpha = ciou_alpha(p, g);
    let base = p.to_array();
    std::array::from_fn(|i| {
        let mut hi = base;
        let mut lo = base;
        hi[i] += H;
        lo[i] -= H;
        (ciou_loss_fixed_alpha(&BBox::from_array(hi), g, alpha) - ciou_loss_fixed_alpha(&BBox::from_array(lo), g, alpha))
            / (2.0 * H)
    })
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random on-canvas box; sides may be arbitrarily small.
pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let l = rng.gen_range(0.0..0.95);
    let t = rng.gen_range(0.0..0.95);
    BBox::new(l, t, rng.gen_range(0.0..=1.0 - l), rng.gen_range(0.0..=1.0 - t))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Dot product of `x` with fixed random weights, so every entry matters.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let n = g.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let flat = g.reshape(x, vec![1, n]).unwrap();
    let wv = g.input(Tensor::matrix(n, 1, w).unwrap());
    g.matmul(flat, wv).unwrap()
}

/// Worst relative error between tape gradients and central differences over
/// every entry of every parameter in `store`.
pub fn check_param_grads(store: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) -> f64 {
    check_param_grads_against(store, &build, |s| {
        let mut g = Graph::new(s);
        let out = build(&mut g);
        g.value(out)[0]
    })
}

/// Like `check_param_grads`, with central differences taken of `eval`
/// instead of the recorded output.
pub fn check_param_grads_against(
    store: &mut ParamStore,
    build: impl Fn(&mut Graph) -> Var,
    eval: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        g.backward(out)
    };
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + H;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - H;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
