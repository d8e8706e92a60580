//! Per-layout evaluation, split tables, bucketed reports and overlays.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{render_layout, BBox, Layout, LayoutError, Raster};
use crate::metrics::{bde, iou};
use crate::model::PlacementModel;
use crate::vlm::{
    query_predictor, serialize_prompt_with, ChatRequest, PredictorEndpoint, PromptOptions, ResponseStatus,
    RetryPolicy, TranscriptEntry,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no data")]
    NoData,
    #[error("invalid bucket spec: {0}")]
    Buckets(String),
    #[error(transparent)]
    Render(#[from] LayoutError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A predictor's answer for one layout; `bbox` is absent for invalid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: Option<BBox>,
    pub status: ResponseStatus,
}

impl Prediction {
    pub fn valid(bbox: BBox) -> Self {
        Self { bbox: Some(bbox), status: ResponseStatus::Valid }
    }

    pub fn invalid() -> Self {
        Self { bbox: None, status: ResponseStatus::InvalidFormat }
    }
}

pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, layout: &Layout) -> Prediction;
}

/// Returns the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, layout: &Layout) -> Prediction {
        Prediction::valid(layout.target().bbox)
    }
}

pub struct ConstantPredictor(pub BBox);

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        "constant".into()
    }

    fn predict(&self, _layout: &Layout) -> Prediction {
        Prediction::valid(self.0)
    }
}

pub struct TransformerPredictor<'a> {
    pub model: &'a PlacementModel,
    pub label: String,
}

impl Predictor for TransformerPredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, layout: &Layout) -> Prediction {
        match self.model.predict(layout) {
            Ok(b) => Prediction::valid(b),
            Err(e) => {
                log::warn!("{}: transformer failed: {e}", layout.id);
                Prediction::invalid()
            }
        }
    }
}

/// External VLM behind a chat endpoint; every exchange is kept for the
/// transcript.
pub struct VlmPredictor<'a> {
    pub endpoint: &'a dyn PredictorEndpoint,
    pub policy: RetryPolicy,
    pub prompt: PromptOptions,
    transcripts: Mutex<Vec<TranscriptEntry>>,
}

impl<'a> VlmPredictor<'a> {
    pub fn new(endpoint: &'a dyn PredictorEndpoint, policy: RetryPolicy) -> Self {
        Self { endpoint, policy, prompt: PromptOptions::default(), transcripts: Mutex::new(Vec::new()) }
    }

    /// Transcript entries sorted by layout id.
    pub fn transcripts(&self) -> Vec<TranscriptEntry> {
        let mut t = self.transcripts.lock().expect("transcript lock").clone();
        t.sort_by(|a, b| a.layout_id.cmp(&b.layout_id));
        t
    }
}

impl Predictor for VlmPredictor<'_> {
    fn name(&self) -> String {
        self.endpoint.name().to_string()
    }

    fn predict(&self, layout: &Layout) -> Prediction {
        let doc = match serialize_prompt_with(layout, &self.prompt) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("{}: prompt failed: {e}", layout.id);
                return Prediction::invalid();
            }
        };
        let request = ChatRequest::from_prompt(&doc);
        let result = query_predictor(&request, self.endpoint, &self.policy);
        self.transcripts.lock().expect("transcript lock").push(TranscriptEntry::new(&request, &self.name(), &result));
        match result {
            Ok(o) => Prediction { bbox: o.response.parsed, status: o.response.status },
            Err(e) => {
                log::warn!("{}: predictor failed: {e}", layout.id);
                Prediction::invalid()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub layout_id: String,
    pub predictor: String,
    pub pred: Option<BBox>,
    pub gt: BBox,
    pub iou: Option<f64>,
    pub bde: Option<f64>,
    pub n_elements: usize,
    pub n_texts: usize,
    pub gt_area: f64,
    pub status: ResponseStatus,
}

impl EvalRow {
    pub fn is_scored(&self) -> bool {
        self.iou.is_some()
    }
}

pub fn score(name: &str, layout: &Layout, prediction: Prediction) -> EvalRow {
    let gt = layout.target().bbox;
    let mut status = prediction.status;
    let metrics = prediction
        .bbox
        .filter(|_| status != ResponseStatus::InvalidFormat)
        .and_then(|p| Some((iou(&p, &gt).ok()?, bde(&p, &gt).ok()?)));
    if metrics.is_none() {
        status = ResponseStatus::InvalidFormat;
    }
    EvalRow {
        layout_id: layout.id.clone(),
        predictor: name.to_string(),
        pred: prediction.bbox,
        gt,
        iou: metrics.map(|m| m.0),
        bde: metrics.map(|m| m.1),
        n_elements: layout.elements.len(),
        n_texts: layout.text_count(),
        gt_area: gt.area(),
        status,
    }
}

/// One row per layout, in input order.
pub fn evaluate(predictor: &dyn Predictor, layouts: &[Layout]) -> Vec<EvalRow> {
    evaluate_parallel(predictor, layouts, 1)
}

/// As [`evaluate`], fanning out over at most `workers` threads.
pub fn evaluate_parallel(predictor: &dyn Predictor, layouts: &[Layout], workers: usize) -> Vec<EvalRow> {
    let name = predictor.name();
    if workers <= 1 {
        return layouts.iter().map(|l| score(&name, l, predictor.predict(l))).collect();
    }
    let slots: Vec<Mutex<Option<EvalRow>>> = layouts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.min(layouts.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(l) = layouts.get(i) else { break };
                *slots[i].lock().expect("row slot") = Some(score(&name, l, predictor.predict(l)));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("row slot").expect("row filled")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub count: usize,
    pub scored: usize,
    pub invalid: usize,
    pub clamped: usize,
    /// `None` when no row in the split was scored.
    pub mean_iou: Option<f64>,
    pub mean_bde: Option<f64>,
}

fn summarize(split: &str, rows: &[&EvalRow]) -> SplitSummary {
    let scored: Vec<&&EvalRow> = rows.iter().filter(|r| r.is_scored()).collect();
    let mean = |f: fn(&EvalRow) -> f64| {
        (!scored.is_empty()).then(|| scored.iter().map(|r| f(r)).sum::<f64>() / scored.len() as f64)
    };
    SplitSummary {
        split: split.to_string(),
        count: rows.len(),
        scored: scored.len(),
        invalid: rows.iter().filter(|r| r.status == ResponseStatus::InvalidFormat).count(),
        clamped: rows.iter().filter(|r| r.status == ResponseStatus::OutOfRangeClamped).count(),
        mean_iou: mean(|r| r.iou.unwrap_or(0.0)),
        mean_bde: mean(|r| r.bde.unwrap_or(0.0)),
    }
}

/// Single-text, multiple-text and all-layout summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub single_text: SplitSummary,
    pub multiple_text: SplitSummary,
    pub all: SplitSummary,
}

impl ReportTable {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let single: Vec<&EvalRow> = rows.iter().filter(|r| r.n_texts <= 1).collect();
        let multiple: Vec<&EvalRow> = rows.iter().filter(|r| r.n_texts > 1).collect();
        let all: Vec<&EvalRow> = rows.iter().collect();
        Self {
            single_text: summarize("single_text", &single),
            multiple_text: summarize("multiple_text", &multiple),
            all: summarize("all", &all),
        }
    }

    pub fn splits(&self) -> [&SplitSummary; 3] {
        [&self.single_text, &self.multiple_text, &self.all]
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "count", "scored", "invalid", "clamped", "mean_iou", "mean_bde"])?;
        for s in self.splits() {
            w.write_record([
                s.split.clone(),
                s.count.to_string(),
                s.scored.to_string(),
                s.invalid.to_string(),
                s.clamped.to_string(),
                opt(s.mean_iou),
                opt(s.mean_bde),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "empty".to_string(), |x| x.to_string())
}

pub fn write_rows_csv(rows: &[EvalRow], out: impl std::io::Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layout_id", "predictor", "status", "iou", "bde", "n_elements", "n_texts", "gt_area", "gt_left", "gt_top",
        "gt_width", "gt_height", "pred_left", "pred_top", "pred_width", "pred_height",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.layout_id.clone(),
            r.predictor.clone(),
            r.status.as_str().to_string(),
            r.iou.map(|v| v.to_string()).unwrap_or_default(),
            r.bde.map(|v| v.to_string()).unwrap_or_default(),
            r.n_elements.to_string(),
            r.n_texts.to_string(),
            r.gt_area.to_string(),
        ];
        rec.extend(r.gt.to_array().iter().map(f64::to_string));
        match r.pred {
            Some(p) => rec.extend(p.to_array().iter().map(f64::to_string)),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_rows_csv`].
pub fn read_rows_csv(input: impl std::io::Read) -> Result<Vec<EvalRow>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| EvalError::Buckets(format!("metrics row {}: bad {what}", i + 1));
        let get = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize, what: &str| get(k).parse::<f64>().map_err(|_| bad(what));
        let opt_num = |k: usize, what: &str| match get(k) {
            "" => Ok(None),
            v => v.parse::<f64>().map(Some).map_err(|_| bad(what)),
        };
        let status = match get(2) {
            "valid" => ResponseStatus::Valid,
            "invalid_format" => ResponseStatus::InvalidFormat,
            "out_of_range_clamped" => ResponseStatus::OutOfRangeClamped,
            _ => return Err(bad("status")),
        };
        let gt = BBox::new(num(8, "gt")?, num(9, "gt")?, num(10, "gt")?, num(11, "gt")?);
        let pred = match (opt_num(12, "pred")?, opt_num(13, "pred")?, opt_num(14, "pred")?, opt_num(15, "pred")?) {
            (Some(l), Some(t), Some(w), Some(h)) => Some(BBox::new(l, t, w, h)),
            _ => None,
        };
        rows.push(EvalRow {
            layout_id: get(0).to_string(),
            predictor: get(1).to_string(),
            pred,
            gt,
            iou: opt_num(3, "iou")?,
            bde: opt_num(4, "bde")?,
            n_elements: get(5).parse().map_err(|_| bad("n_elements"))?,
            n_texts: get(6).parse().map_err(|_| bad("n_texts"))?,
            gt_area: num(7, "gt_area")?,
            status,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketBy {
    /// `bins` geometric bins spanning the observed ground-truth areas.
    GtArea { bins: usize },
    /// 1, 2, 3, 4 and 5+ text elements.
    NTexts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_iou: Option<f64>,
    pub median_iou: Option<f64>,
    pub mean_bde: Option<f64>,
    pub median_bde: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn bucket(label: String, lo: f64, hi: f64, rows: &[&EvalRow]) -> BucketRow {
    let ious: Vec<f64> = rows.iter().filter_map(|r| r.iou).collect();
    let bdes: Vec<f64> = rows.iter().filter_map(|r| r.bde).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    BucketRow {
        label,
        lo,
        hi,
        count: ious.len(),
        mean_iou: mean(&ious),
        median_iou: median(ious),
        mean_bde: mean(&bdes),
        median_bde: median(bdes),
    }
}

/// Per-bucket statistics over scored rows, in ascending bucket order.
pub fn bucket_report(rows: &[EvalRow], by: BucketBy) -> Result<Vec<BucketRow>, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::NoData);
    }
    let scored: Vec<&EvalRow> = rows.iter().filter(|r| r.is_scored()).collect();
    match by {
        BucketBy::NTexts => Ok((1..=5)
            .map(|k| {
                let members: Vec<&EvalRow> =
                    scored.iter().copied().filter(|r| if k == 5 { r.n_texts >= 5 } else { r.n_texts.max(1) == k }).collect();
                let label = if k == 5 { "5+".to_string() } else { k.to_string() };
                bucket(label, k as f64, if k == 5 { f64::INFINITY } else { k as f64 }, &members)
            })
            .collect()),
        BucketBy::GtArea { bins } => {
            if bins == 0 {
                return Err(EvalError::Buckets("bins must be positive".into()));
            }
            let areas = rows.iter().map(|r| r.gt_area);
            let lo = areas.clone().fold(f64::INFINITY, f64::min);
            let hi = areas.fold(f64::NEG_INFINITY, f64::max);
            if !(lo > 0.0) {
                return Err(EvalError::Buckets("ground-truth areas must be positive".into()));
            }
            let ratio = hi / lo;
            let edges: Vec<f64> = (0..=bins)
                .map(|k| if k == bins { hi } else { lo * ratio.powf(k as f64 / bins as f64) })
                .collect();
            let index = |a: f64| {
                if ratio == 1.0 {
                    return 0;
                }
                let k = ((a / lo).ln() / ratio.ln() * bins as f64).floor() as usize;
                k.min(bins - 1)
            };
            Ok((0..bins)
                .map(|k| {
                    let members: Vec<&EvalRow> = scored.iter().copied().filter(|r| index(r.gt_area) == k).collect();
                    bucket(format!("[{:.6},{:.6}{}", edges[k], edges[k + 1], if k + 1 == bins { "]" } else { ")" }), edges[k], edges[k + 1], &members)
                })
                .collect())
        }
    }
}

pub fn write_buckets_csv(buckets: &[BucketRow], out: impl std::io::Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bucket", "lo", "hi", "count", "mean_iou", "median_iou", "mean_bde", "median_bde"])?;
    for b in buckets {
        w.write_record([
            b.label.clone(),
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            opt(b.mean_iou),
            opt(b.median_iou),
            opt(b.mean_bde),
            opt(b.median_bde),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const GT_COLOR: [u8; 3] = [0, 200, 0];
pub const PRED_COLOR: [u8; 3] = [230, 0, 0];

/// Pixel span `[first, last]` of a box edge pair along an axis of `n` pixels.
fn outline_span(lo: f64, len: f64, n: usize) -> (i64, i64) {
    let first = (lo * n as f64).floor() as i64;
    let last = first.max(((lo + len) * n as f64).ceil() as i64 - 1);
    (first, last)
}

fn draw_outline(canvas: &mut Raster, b: &BBox, color: [u8; 3]) {
    let (x0, x1) = outline_span(b.left, b.width, canvas.width);
    let (y0, y1) = outline_span(b.top, b.height, canvas.height);
    let (w, h) = (canvas.width as i64, canvas.height as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            canvas.set(y as usize, x as usize, color);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// The layout without its target, with 1-px outlines of the ground truth
/// (green) and then the prediction (red).
pub fn render_overlay(layout: &Layout, pred: &BBox, gt: &BBox, width: usize, height: usize) -> Result<Raster, EvalError> {
    let mut canvas = render_layout(layout, true, width, height)?;
    draw_outline(&mut canvas, gt, GT_COLOR);
    draw_outline(&mut canvas, pred, PRED_COLOR);
    Ok(canvas)
}

pub fn write_overlay(
    layout: &Layout,
    pred: &BBox,
    gt: &BBox,
    width: usize,
    height: usize,
    path: &Path,
) -> Result<(), EvalError> {
    render_overlay(layout, pred, gt, width, height)?.write_ppm(path)?;
    Ok(())
}
