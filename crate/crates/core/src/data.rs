//! JSON Lines dataset format, the single/multiple-text split and the seeded
//! synthetic layout generator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{validate_layout, BBox, Element, ElementKind, Layout, LayoutError, Raster};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Raster(#[from] LayoutError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// On-disk element. `char_count` and `line_count` are derived from `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub kind: String,
    #[serde(default)]
    pub text: String,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub angle: f64,
    pub color: [u8; 3],
    #[serde(default)]
    pub font_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raster_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRecord {
    pub id: String,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub elements: Vec<ElementRecord>,
    pub target_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub layouts: Vec<Layout>,
    /// Records dropped because they contain no text element.
    pub skipped_no_text: usize,
}

fn record_to_layout(rec: LayoutRecord, base: &Path) -> Result<Option<Layout>, String> {
    let mut elements = Vec::with_capacity(rec.elements.len());
    for (i, e) in rec.elements.into_iter().enumerate() {
        let kind = ElementKind::from_name(&e.kind).ok_or_else(|| format!("element {i}: unknown kind {:?}", e.kind))?;
        let bbox = BBox::new(e.left, e.top, e.width, e.height);
        let mut el = if kind == ElementKind::Text {
            Element::text(e.text, bbox, e.color, e.font_id)
        } else {
            let mut el = Element::graphic(kind, bbox, e.color);
            el.text = e.text;
            el.font_id = e.font_id;
            el
        };
        el.angle = e.angle;
        if let Some(p) = e.raster_path {
            let raster = Raster::read_ppm(&base.join(&p)).map_err(|err| format!("element {i}: raster {p:?}: {err}"))?;
            el = el.with_raster(raster);
        }
        elements.push(el);
    }
    if !elements.iter().any(|e| e.kind == ElementKind::Text) {
        return Ok(None);
    }
    let layout = Layout {
        id: rec.id,
        canvas_width: rec.canvas_width,
        canvas_height: rec.canvas_height,
        elements,
        target_index: rec.target_index,
    };
    let violations = validate_layout(&layout);
    if !violations.is_empty() {
        let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(msg);
    }
    let target = layout.target().bbox;
    if !(target.width > 0.0 && target.height > 0.0) {
        return Err("target box must have positive width and height".into());
    }
    Ok(Some(layout))
}

/// Reads a JSON Lines dataset. Blank lines are ignored; records without any
/// text element are skipped and counted.
pub fn load_dataset(path: &Path) -> Result<LoadReport, DataError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut report = LoadReport::default();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DataError::Line { line: n + 1, message };
        let rec: LayoutRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match record_to_layout(rec, &base).map_err(err)? {
            Some(l) => report.layouts.push(l),
            None => report.skipped_no_text += 1,
        }
    }
    if report.skipped_no_text > 0 {
        log::info!("{}: skipped {} layouts without text", path.display(), report.skipped_no_text);
    }
    Ok(report)
}

fn raster_dir(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_rasters"))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes layouts as JSON Lines. Element rasters go to PPM files in a
/// `<stem>_rasters` directory next to the dataset.
pub fn save_dataset(path: &Path, layouts: &[Layout]) -> Result<(), DataError> {
    let dir = raster_dir(path);
    let dir_name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = BufWriter::new(File::create(path)?);
    for (li, l) in layouts.iter().enumerate() {
        let mut elements = Vec::with_capacity(l.elements.len());
        for (i, e) in l.elements.iter().enumerate() {
            let raster_path = match &e.raster {
                Some(r) => {
                    std::fs::create_dir_all(&dir)?;
                    let name = format!("{li}_{}_{i}.ppm", sanitize(&l.id));
                    r.write_ppm(&dir.join(&name))?;
                    Some(format!("{dir_name}/{name}"))
                }
                None => None,
            };
            elements.push(ElementRecord {
                kind: e.kind.name().to_string(),
                text: e.text.clone(),
                left: e.bbox.left,
                top: e.bbox.top,
                width: e.bbox.width,
                height: e.bbox.height,
                angle: e.angle,
                color: e.color,
                font_id: e.font_id,
                raster_path,
            });
        }
        let rec = LayoutRecord {
            id: l.id.clone(),
            canvas_width: l.canvas_width,
            canvas_height: l.canvas_height,
            elements,
            target_index: l.target_index,
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Indices of the test layouts with exactly one text element and with more.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub single_text: Vec<usize>,
    pub multiple_text: Vec<usize>,
}

pub fn split_by_text_count(layouts: &[Layout]) -> SplitSpec {
    let mut out = SplitSpec::default();
    for (i, l) in layouts.iter().enumerate() {
        if l.text_count() <= 1 {
            out.single_text.push(i);
        } else {
            out.multiple_text.push(i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub canvas_px: u32,
    /// Inclusive range of non-background context elements.
    pub context_range: (usize, usize),
    pub container_mode: bool,
    /// Range of box widths for context shapes and containers.
    pub shape_width: (f64, f64),
    pub shape_height: (f64, f64),
    /// Target size relative to its container (container mode).
    pub target_fill: (f64, f64),
    pub palette: Vec<[u8; 3]>,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            canvas_px: 256,
            context_range: (0, 6),
            container_mode: false,
            shape_width: (0.2, 0.4),
            shape_height: (0.15, 0.3),
            target_fill: (0.7, 0.4),
            palette: vec![
                [214, 69, 65],
                [38, 110, 182],
                [46, 160, 67],
                [240, 180, 40],
                [120, 70, 160],
                [30, 30, 30],
                [250, 130, 160],
                [20, 150, 150],
            ],
            id_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    /// The text-container benchmark: 2 to 5 svg rectangles, one solid.
    pub fn container_benchmark(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            container_mode: true,
            context_range: (2, 5),
            shape_width: (0.25, 0.4),
            shape_height: (0.2, 0.35),
            target_fill: (0.8, 0.6),
            id_prefix: "container".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Infeasible(m.into()));
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        if self.canvas_px == 0 {
            return bad("canvas size must be positive");
        }
        if !range_ok(self.shape_width) || !range_ok(self.shape_height) {
            return bad("shape sizes must lie in (0, 1]");
        }
        if self.context_range.0 > self.context_range.1 {
            return bad("context range is empty");
        }
        if self.container_mode && self.context_range.1 == 0 {
            return bad("container mode needs at least one context shape");
        }
        if !(self.target_fill.0 > 0.0 && self.target_fill.0 <= 1.0 && self.target_fill.1 > 0.0 && self.target_fill.1 <= 1.0)
        {
            return bad("target fill must lie in (0, 1]");
        }
        if self.palette.is_empty() {
            return bad("palette is empty");
        }
        Ok(())
    }
}

const WORDS: &[&str] = &[
    "Sale", "Make", "Summer", "Open", "Welcome", "Fresh Deals", "Join us", "New", "Coffee", "Thank you",
    "Grand\nOpening", "Free", "Today", "Hello", "Save 50%", "Party",
];

const BACKGROUNDS: &[[u8; 3]] = &[[250, 248, 240], [235, 242, 250], [245, 235, 235], [238, 245, 236]];

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.left < b.right() && b.left < a.right() && a.top < b.bottom() && b.top < a.bottom()
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BBox {
    let w = rng.gen_range(cfg.shape_width.0..=cfg.shape_width.1);
    let h = rng.gen_range(cfg.shape_height.0..=cfg.shape_height.1);
    BBox::new(rng.gen_range(0.0..=1.0 - w), rng.gen_range(0.0..=1.0 - h), w, h)
}

/// Up to `n` pairwise non-overlapping shapes by rejection sampling.
fn place_shapes(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 200 * n.max(1) {
        tries += 1;
        let b = sample_shape(rng, cfg);
        if out.iter().all(|o| !overlaps(o, &b)) {
            out.push(b);
        }
    }
    out
}

fn solid_raster(color: [u8; 3]) -> Raster {
    Raster::filled(8, 8, color).expect("fixed size")
}

fn checker_raster(color: [u8; 3]) -> Raster {
    let mut r = Raster::white(8, 8).expect("fixed size");
    for y in 0..8 {
        for x in 0..8 {
            if (x / 2 + y / 2) % 2 == 0 {
                r.set(y, x, color);
            }
        }
    }
    r
}

fn random_text(rng: &mut ChaCha8Rng, bbox: BBox, color: [u8; 3]) -> Element {
    let word = *WORDS.choose(rng).expect("nonempty");
    Element::text(word, bbox, color, rng.gen_range(1..8))
}

/// Largest all-free rectangle on a `cells x cells` occupancy grid, as
/// (row, col, rows, cols), preferring the topmost then leftmost on ties.
fn largest_free_rect(occupied: &[Vec<bool>]) -> Option<(usize, usize, usize, usize)> {
    let rows = occupied.len();
    let cols = occupied.first().map_or(0, Vec::len);
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    for r0 in 0..rows {
        for c0 in 0..cols {
            let mut max_w = cols - c0;
            for r1 in r0..rows {
                let w = (c0..c0 + max_w).take_while(|&c| !occupied[r1][c]).count();
                max_w = max_w.min(w);
                if max_w == 0 {
                    break;
                }
                let area = max_w * (r1 - r0 + 1);
                if best.is_none_or(|(a, _)| area > a) {
                    best = Some((area, (r0, c0, r1 - r0 + 1, max_w)));
                }
            }
        }
    }
    best.map(|(_, r)| r)
}

const GRID: usize = 16;

/// Target box for a non-container layout: centered in the largest empty grid
/// region, scaled down and capped.
fn free_region_target(shapes: &[BBox]) -> Option<BBox> {
    let cell = 1.0 / GRID as f64;
    let mut occupied = vec![vec![false; GRID]; GRID];
    for b in shapes {
        for (r, row) in occupied.iter_mut().enumerate() {
            for (c, slot) in row.iter_mut().enumerate() {
                let cb = BBox::new(c as f64 * cell, r as f64 * cell, cell, cell);
                if overlaps(&cb, b) {
                    *slot = true;
                }
            }
        }
    }
    let (r, c, h, w) = largest_free_rect(&occupied)?;
    let region = BBox::new(c as f64 * cell, r as f64 * cell, w as f64 * cell, h as f64 * cell);
    let tw = (region.width * 0.8).min(0.8);
    let th = (region.height * 0.6).min(0.25);
    let (cx, cy) = region.center();
    Some(BBox::new(cx - tw / 2.0, cy - th / 2.0, tw, th))
}

fn synth_one(rng: &mut ChaCha8Rng, cfg: &SynthConfig, index: usize) -> Result<Layout, DataError> {
    let background = *BACKGROUNDS.choose(rng).expect("nonempty");
    let mut elements = vec![Element::graphic(ElementKind::ColoredBackground, BBox::FULL, background)];
    let (lo, hi) = cfg.context_range;
    let target_color = [20, 20, 20];
    let target = if cfg.container_mode {
        let n = rng.gen_range(lo.max(1)..=hi);
        let shapes = place_shapes(rng, cfg, n);
        let container = rng.gen_range(0..shapes.len());
        for (i, b) in shapes.iter().enumerate() {
            let color = *cfg.palette.choose(rng).expect("nonempty");
            let raster = if i == container { solid_raster(color) } else { checker_raster(color) };
            elements.push(Element::graphic(ElementKind::Svg, *b, color).with_raster(raster));
        }
        let host = shapes[container];
        let (cx, cy) = host.center();
        let (w, h) = (host.width * cfg.target_fill.0, host.height * cfg.target_fill.1);
        random_text(rng, BBox::new(cx - w / 2.0, cy - h / 2.0, w, h), target_color)
    } else {
        let n = rng.gen_range(lo..=hi);
        let mut shapes = place_shapes(rng, cfg, n);
        let bbox = loop {
            if let Some(b) = free_region_target(&shapes) {
                break b;
            }
            shapes.pop();
        };
        for b in &shapes {
            let color = *cfg.palette.choose(rng).expect("nonempty");
            let el = match rng.gen_range(0..3) {
                0 => Element::graphic(ElementKind::Svg, *b, color),
                1 => Element::graphic(ElementKind::Image, *b, color).with_raster(checker_raster(color)),
                _ => random_text(rng, *b, color),
            };
            elements.push(el);
        }
        random_text(rng, bbox, target_color)
    };
    elements.push(target);
    Ok(Layout {
        id: format!("{}-{index:05}", cfg.id_prefix),
        canvas_width: cfg.canvas_px,
        canvas_height: cfg.canvas_px,
        target_index: elements.len() - 1,
        elements,
    })
}

/// Seeded synthetic corpus.
///
/// Every layout has a colored background, context shapes and a target text
/// drawn last. In container mode the shapes are svg rectangles sharing one
/// geometry distribution; exactly one, chosen uniformly, has a solid raster
/// (the container) while the rest are checkered, and the target is centered
/// in the container. Otherwise the target sits in the largest free region.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Layout>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count).map(|i| synth_one(&mut rng, cfg, i)).collect()
}

/// Index of the solid-raster container in a container-mode layout.
pub fn container_index(layout: &Layout) -> Option<usize> {
    layout.context_indices().find(|&i| {
        let e = &layout.elements[i];
        e.kind == ElementKind::Svg && e.raster.as_ref().is_some_and(|r| r.pixels.chunks(3).all(|p| p == e.color))
    })
}
