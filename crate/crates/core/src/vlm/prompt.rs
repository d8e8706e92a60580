use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::layout::{render_layout, validate_layout, ElementKind, Layout, Raster};

use super::VlmError;

/// Placeholder text for non-text records.
pub const BLANK: &str = "{blank}";

/// Instruction preamble sent ahead of every prompt.
pub const PREAMBLE: &str = include_str!("../../resources/preamble_v1.txt");
pub const PREAMBLE_VERSION: u32 = 1;

/// Longest side of the attached layout image, in pixels.
pub const DEFAULT_IMAGE_SIDE: u32 = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOrder {
    /// Ascending (top, left, original index).
    #[default]
    Reading,
    /// Original z-order.
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub order: RecordOrder,
    pub image_side: u32,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { order: RecordOrder::Reading, image_side: DEFAULT_IMAGE_SIDE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub kind: ElementKind,
    pub text: String,
    /// `None` for the target record.
    pub geometry: Option<[f64; 4]>,
}

/// Records in prompt order, the target last, plus the attached image.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDocument {
    pub layout_id: String,
    pub records: Vec<PromptRecord>,
    pub image: Raster,
}

fn fixed6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

impl PromptRecord {
    /// Canonical JSON with keys type, text, left, top, width, height.
    pub fn to_json(&self) -> String {
        let text = serde_json::to_string(&self.text).expect("strings serialize");
        let mut out = format!("{{\"type\":\"{}\",\"text\":{text}", self.kind.name());
        let names = ["left", "top", "width", "height"];
        for (i, name) in names.iter().enumerate() {
            let value = self.geometry.map_or_else(|| "null".to_string(), |g| fixed6(g[i]));
            write!(out, ",\"{name}\":{value}").expect("string write");
        }
        out.push('}');
        out
    }
}

impl PromptDocument {
    /// The records as a compact JSON array.
    pub fn records_json(&self) -> String {
        let parts: Vec<String> = self.records.iter().map(PromptRecord::to_json).collect();
        format!("[{}]", parts.join(","))
    }
}

fn image_size(layout: &Layout, side: u32) -> (usize, usize) {
    let (w, h) = (f64::from(layout.canvas_width), f64::from(layout.canvas_height));
    let scale = (f64::from(side) / w.max(h)).min(1.0);
    (((w * scale).round() as usize).max(1), ((h * scale).round() as usize).max(1))
}

pub fn serialize_prompt(layout: &Layout) -> Result<PromptDocument, VlmError> {
    serialize_prompt_with(layout, &PromptOptions::default())
}

pub fn serialize_prompt_with(layout: &Layout, opts: &PromptOptions) -> Result<PromptDocument, VlmError> {
    let violations = validate_layout(layout);
    if !violations.is_empty() {
        let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(VlmError::InvalidLayout(msg));
    }
    if opts.image_side == 0 {
        return Err(VlmError::InvalidLayout("image side must be positive".into()));
    }
    let mut order: Vec<usize> = layout.context_indices().collect();
    if opts.order == RecordOrder::Reading {
        order.sort_by(|&a, &b| {
            let (ea, eb) = (&layout.elements[a].bbox, &layout.elements[b].bbox);
            ea.top.total_cmp(&eb.top).then(ea.left.total_cmp(&eb.left)).then(a.cmp(&b))
        });
    }
    let mut records: Vec<PromptRecord> = order
        .into_iter()
        .map(|i| {
            let e = &layout.elements[i];
            let text = if e.kind == ElementKind::Text { e.text.clone() } else { BLANK.to_string() };
            PromptRecord { kind: e.kind, text, geometry: Some(e.bbox.to_array()) }
        })
        .collect();
    let target = layout.target();
    records.push(PromptRecord { kind: target.kind, text: target.text.clone(), geometry: None });
    let (w, h) = image_size(layout, opts.image_side);
    let image = render_layout(layout, true, w, h)?;
    Ok(PromptDocument { layout_id: layout.id.clone(), records, image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Element};

    fn make_layout(contexts: Vec<Element>) -> Layout {
        let mut elements = contexts;
        elements.push(Element::text("Make", BBox::new(0.3, 0.3, 0.2, 0.1), [0, 0, 0], 1));
        Layout { id: "p".into(), canvas_width: 64, canvas_height: 64, target_index: elements.len() - 1, elements }
    }

    #[test]
    fn full_canvas_image_and_target() {
        let l = make_layout(vec![Element::graphic(ElementKind::Image, BBox::FULL, [9, 9, 9])]);
        let doc = serialize_prompt(&l).unwrap();
        assert_eq!(
            doc.records_json(),
            concat!(
                r#"[{"type":"imageElement","text":"{blank}","left":0.000000,"top":0.000000,"width":1.000000,"height":1.000000},"#,
                r#"{"type":"textElement","text":"Make","left":null,"top":null,"width":null,"height":null}]"#
            )
        );
        assert_eq!((doc.image.width, doc.image.height), (64, 64));
    }

    #[test]
    fn target_only_layout() {
        let doc = serialize_prompt(&make_layout(vec![])).unwrap();
        assert_eq!(doc.records.len(), 1);
        assert_eq!(doc.records[0].geometry, None);
    }

    #[test]
    fn ties_on_top_break_by_left() {
        let l = make_layout(vec![
            Element::graphic(ElementKind::Svg, BBox::new(0.2, 0.5, 0.1, 0.1), [1, 1, 1]),
            Element::graphic(ElementKind::Svg, BBox::new(0.1, 0.5, 0.1, 0.1), [2, 2, 2]),
        ]);
        let doc = serialize_prompt(&l).unwrap();
        assert_eq!(doc.records[0].geometry.unwrap()[0], 0.1);
        let layered = serialize_prompt_with(&l, &PromptOptions { order: RecordOrder::Layer, ..Default::default() }).unwrap();
        assert_eq!(layered.records[0].geometry.unwrap()[0], 0.2);
    }

    #[test]
    fn text_is_json_escaped() {
        let mut l = make_layout(vec![]);
        l.elements[0] = Element::text("a \"b\"\nc", BBox::new(0.1, 0.1, 0.1, 0.1), [0, 0, 0], 0);
        let json = serialize_prompt(&l).unwrap().records_json();
        assert!(json.contains(r#""text":"a \"b\"\nc""#), "{json}");
    }

    #[test]
    fn image_is_capped_and_keeps_aspect() {
        let mut l = make_layout(vec![]);
        l.canvas_width = 1080;
        l.canvas_height = 1920;
        let doc = serialize_prompt(&l).unwrap();
        assert_eq!((doc.image.width, doc.image.height), (288, 512));
    }

    #[test]
    fn preamble_is_bundled() {
        assert!(PREAMBLE.contains("{blank}"));
    }
}
