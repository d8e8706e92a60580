//! Layered layout domain types, validation and the proxy rasterizer.
//!
//! Coordinates are canvas fractions. Elements are stored bottom-to-top; the
//! rasterizer composites them in list order onto a white canvas. Text is drawn
//! as a filled rectangle of its color and element rotation is ignored.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("invalid raster size {width}x{height}")]
    InvalidRasterSize { width: usize, height: usize },
    #[error("malformed PPM: {0}")]
    MalformedPpm(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Normalized rectangle: left/width are fractions of the canvas width,
/// top/height fractions of the canvas height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub const fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        Self { left, top, width, height }
    }

    pub const FULL: BBox = BBox::new(0.0, 0.0, 1.0, 1.0);

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + 0.5 * self.width, self.top + 0.5 * self.height)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.left, self.top, self.width, self.height]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.left + dx, self.top + dy, self.width, self.height)
    }
}

/// The five layer kinds of a layered design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementKind {
    #[serde(rename = "textElement")]
    Text,
    #[serde(rename = "imageElement")]
    Image,
    #[serde(rename = "maskElement")]
    Mask,
    #[serde(rename = "svgElement")]
    Svg,
    #[serde(rename = "coloredBackground")]
    ColoredBackground,
}

impl ElementKind {
    pub const ALL: [ElementKind; 5] = [
        ElementKind::Text,
        ElementKind::Image,
        ElementKind::Mask,
        ElementKind::Svg,
        ElementKind::ColoredBackground,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ElementKind::Text => "textElement",
            ElementKind::Image => "imageElement",
            ElementKind::Mask => "maskElement",
            ElementKind::Svg => "svgElement",
            ElementKind::ColoredBackground => "coloredBackground",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Position in [`ElementKind::ALL`], used for one-hot features.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// All-white raster.
    pub fn white(width: usize, height: usize) -> Result<Self, LayoutError> {
        Self::filled(width, height, [255, 255, 255])
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self, LayoutError> {
        if width == 0 || height == 0 {
            return Err(LayoutError::InvalidRasterSize { width, height });
        }
        let pixels = color.iter().copied().cycle().take(width * height * 3).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, LayoutError> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(LayoutError::InvalidRasterSize { width, height });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn is_consistent(&self) -> bool {
        self.width > 0 && self.height > 0 && self.pixels.len() == self.width * self.height * 3
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, LayoutError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(LayoutError::MalformedPpm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(LayoutError::MalformedPpm(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| LayoutError::MalformedPpm(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(LayoutError::MalformedPpm(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the pixel data
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(LayoutError::MalformedPpm("truncated pixel data".into()));
        }
        Self::from_pixels(width, height, bytes[pos..pos + need].to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), LayoutError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, LayoutError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ppm(&bytes)
    }
}

/// One layer of a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub kind: ElementKind,
    pub text: String,
    pub char_count: usize,
    pub line_count: usize,
    /// Rotation in degrees. Stored and encoded, never rasterized.
    pub angle: f64,
    pub color: [u8; 3],
    /// Index into the font vocabulary; 0 means none/unknown.
    pub font_id: usize,
    pub bbox: BBox,
    pub raster: Option<Arc<Raster>>,
}

/// Character and line counts of a text payload.
pub fn text_counts(text: &str) -> (usize, usize) {
    let newlines = text.chars().filter(|&c| c == '\n').count();
    (text.chars().count() - newlines, newlines + 1)
}

impl Element {
    pub fn text(text: impl Into<String>, bbox: BBox, color: [u8; 3], font_id: usize) -> Self {
        let text = text.into();
        let (char_count, line_count) = text_counts(&text);
        Self {
            kind: ElementKind::Text,
            text,
            char_count,
            line_count,
            angle: 0.0,
            color,
            font_id,
            bbox,
            raster: None,
        }
    }

    /// A non-text element; text attributes are zeroed.
    pub fn graphic(kind: ElementKind, bbox: BBox, color: [u8; 3]) -> Self {
        Self {
            kind,
            text: String::new(),
            char_count: 0,
            line_count: 0,
            angle: 0.0,
            color,
            font_id: 0,
            bbox,
            raster: None,
        }
    }

    pub fn with_raster(mut self, raster: Raster) -> Self {
        self.raster = Some(Arc::new(raster));
        self
    }

    pub fn with_angle(mut self, angle: f64) -> Self {
        self.angle = angle;
        self
    }
}

/// Canvas plus bottom-to-top elements, one of which is the target text.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub id: String,
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub elements: Vec<Element>,
    pub target_index: usize,
}

impl Layout {
    pub fn target(&self) -> &Element {
        &self.elements[self.target_index]
    }

    /// Indices of every element except the target, in z-order.
    pub fn context_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.elements.len()).filter(move |&i| i != self.target_index)
    }

    pub fn text_count(&self) -> usize {
        self.elements.iter().filter(|e| e.kind == ElementKind::Text).count()
    }

    /// Copy of the layout with the target's geometry replaced.
    pub fn with_target_bbox(&self, bbox: BBox) -> Self {
        let mut out = self.clone();
        out.elements[out.target_index].bbox = bbox;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptyLayout,
    InvalidCanvas,
    TargetOutOfRange,
    TargetNotText,
    NonFiniteGeometry,
    NegativeSize,
    NonTextAttributes,
    CharCountMismatch,
    LineCountMismatch,
    InvalidRaster,
}

impl Rule {
    pub fn describe(self) -> &'static str {
        match self {
            Rule::EmptyLayout => "layout has no elements",
            Rule::InvalidCanvas => "canvas size must be positive",
            Rule::TargetOutOfRange => "target index out of range",
            Rule::TargetNotText => "target not textElement",
            Rule::NonFiniteGeometry => "non-finite geometry",
            Rule::NegativeSize => "negative width or height",
            Rule::NonTextAttributes => "non-text element carries text attributes",
            Rule::CharCountMismatch => "char_count mismatch",
            Rule::LineCountMismatch => "line_count mismatch",
            Rule::InvalidRaster => "raster pixel buffer does not match its size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending element, or `None` for layout-level rules.
    pub element: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.element {
            Some(i) => write!(f, "element {i}: {}", self.rule.describe()),
            None => f.write_str(self.rule.describe()),
        }
    }
}

/// Checks every structural invariant; an empty result means the layout is valid.
pub fn validate_layout(layout: &Layout) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |element, rule| out.push(Violation { element, rule });
    if layout.canvas_width == 0 || layout.canvas_height == 0 {
        push(None, Rule::InvalidCanvas);
    }
    if layout.elements.is_empty() {
        push(None, Rule::EmptyLayout);
    } else if layout.target_index >= layout.elements.len() {
        push(None, Rule::TargetOutOfRange);
    } else if layout.target().kind != ElementKind::Text {
        push(Some(layout.target_index), Rule::TargetNotText);
    }
    for (i, e) in layout.elements.iter().enumerate() {
        if !e.bbox.is_finite() || !e.angle.is_finite() {
            push(Some(i), Rule::NonFiniteGeometry);
        } else if e.bbox.width < 0.0 || e.bbox.height < 0.0 {
            push(Some(i), Rule::NegativeSize);
        }
        if e.kind == ElementKind::Text {
            let (chars, lines) = text_counts(&e.text);
            if e.char_count != chars {
                push(Some(i), Rule::CharCountMismatch);
            }
            if e.line_count != lines {
                push(Some(i), Rule::LineCountMismatch);
            }
        } else if !e.text.is_empty() || e.char_count != 0 || e.line_count != 0 || e.font_id != 0 {
            push(Some(i), Rule::NonTextAttributes);
        }
        if e.raster.as_ref().is_some_and(|r| !r.is_consistent()) {
            push(Some(i), Rule::InvalidRaster);
        }
    }
    out
}

/// Pixel indices along one axis whose centers fall in `[lo, lo + len)`,
/// clipped to `0..n`.
fn covered_span(lo: f64, len: f64, n: usize) -> std::ops::Range<usize> {
    let hi = lo + len;
    let inside = |i: usize| {
        let c = (i as f64 + 0.5) / n as f64;
        c >= lo && c < hi
    };
    let Some(start) = (0..n).find(|&i| inside(i)) else {
        return 0..0;
    };
    let end = (start..n).find(|&i| !inside(i)).unwrap_or(n);
    start..end
}

/// Footprint of a box on an `out_width` x `out_height` grid as (rows, cols).
pub fn pixel_footprint(
    bbox: &BBox,
    out_width: usize,
    out_height: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    (
        covered_span(bbox.top, bbox.height, out_height),
        covered_span(bbox.left, bbox.width, out_width),
    )
}

fn draw_element(canvas: &mut Raster, element: &Element, bbox: &BBox) {
    if !bbox.is_finite() || bbox.width <= 0.0 || bbox.height <= 0.0 {
        return;
    }
    let (rows, cols) = pixel_footprint(bbox, canvas.width, canvas.height);
    let source = match element.kind {
        ElementKind::Image | ElementKind::Mask | ElementKind::Svg => element.raster.as_deref(),
        ElementKind::Text | ElementKind::ColoredBackground => None,
    };
    let (w, h) = (canvas.width as f64, canvas.height as f64);
    for r in rows {
        for c in cols.clone() {
            let rgb = match source {
                Some(src) => {
                    let u = ((c as f64 + 0.5) / w - bbox.left) / bbox.width;
                    let v = ((r as f64 + 0.5) / h - bbox.top) / bbox.height;
                    let sx = ((u * src.width as f64) as usize).min(src.width - 1);
                    let sy = ((v * src.height as f64) as usize).min(src.height - 1);
                    src.get(sy, sx)
                }
                None => element.color,
            };
            canvas.set(r, c, rgb);
        }
    }
}

/// Composites the layout in z-order onto a white canvas, optionally skipping
/// the target element.
pub fn render_layout(
    layout: &Layout,
    exclude_target: bool,
    out_width: usize,
    out_height: usize,
) -> Result<Raster, LayoutError> {
    let mut canvas = Raster::white(out_width, out_height)?;
    for (i, element) in layout.elements.iter().enumerate() {
        if exclude_target && i == layout.target_index {
            continue;
        }
        draw_element(&mut canvas, element, &element.bbox);
    }
    Ok(canvas)
}

/// Renders one element alone into its footprint on a white canvas.
pub fn render_element(element: &Element, out_width: usize, out_height: usize) -> Result<Raster, LayoutError> {
    render_element_in(element, &element.bbox, out_width, out_height)
}

/// Renders an element into an arbitrary box instead of its own geometry.
pub fn render_element_in(
    element: &Element,
    bbox: &BBox,
    out_width: usize,
    out_height: usize,
) -> Result<Raster, LayoutError> {
    let mut canvas = Raster::white(out_width, out_height)?;
    draw_element(&mut canvas, element, bbox);
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const WHITE: [u8; 3] = [255, 255, 255];

    fn single_target() -> Layout {
        Layout {
            id: "t".into(),
            canvas_width: 100,
            canvas_height: 100,
            elements: vec![Element::text("hello", BBox::new(0.1, 0.1, 0.3, 0.1), [0, 0, 0], 1)],
            target_index: 0,
        }
    }

    fn with_context(ctx: Vec<Element>) -> Layout {
        let mut l = single_target();
        let target = l.elements.pop().unwrap();
        l.elements = ctx;
        l.elements.push(target);
        l.target_index = l.elements.len() - 1;
        l
    }

    #[test]
    fn well_formed_layout_has_no_violations() {
        assert!(validate_layout(&single_target()).is_empty());
    }

    #[test]
    fn image_target_is_rejected() {
        let mut l = single_target();
        l.elements[0] = Element::graphic(ElementKind::Image, BBox::FULL, [0, 0, 0]);
        let v = validate_layout(&l);
        assert_eq!(v, vec![Violation { element: Some(0), rule: Rule::TargetNotText }]);
        assert_eq!(v[0].rule.describe(), "target not textElement");
    }

    #[test]
    fn line_count_mismatch_is_reported() {
        let mut l = single_target();
        let e = &mut l.elements[0];
        e.text = "a\nb".into();
        e.char_count = 2;
        e.line_count = 1;
        let v = validate_layout(&l);
        assert_eq!(v, vec![Violation { element: Some(0), rule: Rule::LineCountMismatch }]);
        assert_eq!(v[0].to_string(), "element 0: line_count mismatch");
    }

    #[test]
    fn non_text_attributes_are_reported() {
        let mut bg = Element::graphic(ElementKind::Svg, BBox::FULL, [1, 2, 3]);
        bg.font_id = 3;
        let v = validate_layout(&with_context(vec![bg]));
        assert_eq!(v, vec![Violation { element: Some(0), rule: Rule::NonTextAttributes }]);
    }

    #[test]
    fn counts_follow_newline_rule() {
        assert_eq!(text_counts("classroom\naffects"), (16, 2));
        assert_eq!(text_counts(""), (0, 1));
        assert_eq!(text_counts("日本"), (2, 1));
    }

    #[test]
    fn empty_context_renders_white() {
        let r = render_layout(&single_target(), true, 64, 64).unwrap();
        assert!(r.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn full_background_fills_canvas() {
        let l = with_context(vec![Element::graphic(ElementKind::ColoredBackground, BBox::FULL, [255, 0, 0])]);
        let r = render_layout(&l, true, 4, 4).unwrap();
        assert!(r.pixels.chunks(3).all(|p| p == [255, 0, 0]));
    }

    #[test]
    fn centered_box_covers_rows_and_cols_two_to_five() {
        let blue = [0, 0, 255];
        let l = with_context(vec![Element::graphic(ElementKind::Svg, BBox::new(0.25, 0.25, 0.5, 0.5), blue)]);
        let r = render_layout(&l, true, 8, 8).unwrap();
        // hand trace: pixel centers 2.5/8 .. 5.5/8 lie in [0.25, 0.75)
        for row in 0..8 {
            for col in 0..8 {
                let inside = (2..=5).contains(&row) && (2..=5).contains(&col);
                assert_eq!(r.get(row, col), if inside { blue } else { WHITE }, "({row},{col})");
            }
        }
    }

    #[test]
    fn zero_size_raster_is_an_error() {
        let err = render_layout(&single_target(), true, 0, 8).unwrap_err();
        assert!(err.to_string().contains("invalid raster size"));
        assert!(render_element(single_target().target(), 4, 0).is_err());
    }

    #[test]
    fn render_element_cases() {
        let green = Element::graphic(ElementKind::ColoredBackground, BBox::FULL, [0, 255, 0]);
        let r = render_element(&green, 2, 2).unwrap();
        assert!(r.pixels.chunks(3).all(|p| p == [0, 255, 0]));

        let text = Element::text("x", BBox::new(0.0, 0.0, 0.5, 1.0), [0, 0, 0], 0);
        let r = render_element(&text, 4, 4).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                assert_eq!(r.get(row, col), if col < 2 { [0, 0, 0] } else { WHITE });
            }
        }

        let flat = Element::graphic(ElementKind::Svg, BBox::new(0.2, 0.2, 0.0, 0.5), [9, 9, 9]);
        assert!(render_element(&flat, 8, 8).unwrap().pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn image_raster_is_scaled_into_bbox() {
        let mut src = Raster::white(2, 1).unwrap();
        src.set(0, 0, [10, 20, 30]);
        src.set(0, 1, [40, 50, 60]);
        let e = Element::graphic(ElementKind::Image, BBox::new(0.0, 0.0, 1.0, 0.5), [0, 0, 0]).with_raster(src);
        let r = render_element(&e, 4, 4).unwrap();
        assert_eq!(r.get(0, 0), [10, 20, 30]);
        assert_eq!(r.get(1, 1), [10, 20, 30]);
        assert_eq!(r.get(1, 2), [40, 50, 60]);
        assert_eq!(r.get(2, 2), WHITE);
    }

    #[test]
    fn boxes_past_the_edge_are_clipped() {
        let e = Element::graphic(ElementKind::Svg, BBox::new(0.75, -0.5, 1.0, 1.0), [1, 1, 1]);
        let r = render_element(&e, 4, 4).unwrap();
        assert_eq!(r.get(0, 3), [1, 1, 1]);
        assert_eq!(r.get(1, 3), [1, 1, 1]);
        assert_eq!(r.get(2, 3), WHITE);
        assert_eq!(r.get(0, 2), WHITE);
    }

    #[test]
    fn ppm_header_is_exact_and_round_trips() {
        let mut r = Raster::white(2, 1).unwrap();
        r.set(0, 1, [1, 2, 3]);
        let bytes = r.to_ppm();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 255, 255, 1, 2, 3]);
        assert_eq!(Raster::from_ppm(&bytes).unwrap(), r);
        assert!(Raster::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(Raster::from_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-0.2f64..1.0, -0.2f64..1.0, 0.0f64..0.8, 0.0f64..0.8).prop_map(|(l, t, w, h)| BBox::new(l, t, w, h))
    }

    fn arb_element() -> impl Strategy<Value = Element> {
        (arb_box(), any::<[u8; 3]>(), 0usize..4).prop_map(|(b, c, k)| {
            let kind = [ElementKind::Svg, ElementKind::Image, ElementKind::ColoredBackground, ElementKind::Text][k];
            if kind == ElementKind::Text {
                Element::text("ab", b, c, 1)
            } else {
                Element::graphic(kind, b, c)
            }
        })
    }

    fn arb_layout() -> impl Strategy<Value = Layout> {
        (prop::collection::vec(arb_element(), 0..6), arb_box()).prop_map(|(ctx, tb)| {
            let mut l = with_context(ctx);
            l.elements[l.target_index].bbox = tb;
            l
        })
    }

    proptest! {
        #[test]
        fn rendering_is_deterministic(l in arb_layout()) {
            prop_assert_eq!(render_layout(&l, false, 16, 12).unwrap(), render_layout(&l, false, 16, 12).unwrap());
        }

        #[test]
        fn excluding_target_only_changes_its_footprint(l in arb_layout()) {
            let (w, h) = (16, 12);
            let with = render_layout(&l, false, w, h).unwrap();
            let without = render_layout(&l, true, w, h).unwrap();
            let (rows, cols) = pixel_footprint(&l.target().bbox, w, h);
            for r in 0..h {
                for c in 0..w {
                    if !(rows.contains(&r) && cols.contains(&c)) {
                        prop_assert_eq!(with.get(r, c), without.get(r, c));
                    }
                }
            }
        }

        #[test]
        fn swapping_disjoint_neighbours_keeps_raster(l in arb_layout(), i in 0usize..6) {
            let n = l.elements.len();
            prop_assume!(n >= 2);
            let (i, j) = (i % (n - 1), i % (n - 1) + 1);
            let (w, h) = (16, 12);
            let fp = |e: &Element| pixel_footprint(&e.bbox, w, h);
            let (ri, ci) = fp(&l.elements[i]);
            let (rj, cj) = fp(&l.elements[j]);
            let overlap = ri.start.max(rj.start) < ri.end.min(rj.end) && ci.start.max(cj.start) < ci.end.min(cj.end);
            prop_assume!(!overlap);
            let mut swapped = l.clone();
            swapped.elements.swap(i, j);
            prop_assert_eq!(render_layout(&l, false, w, h).unwrap(), render_layout(&swapped, false, w, h).unwrap());
        }
    }
}
