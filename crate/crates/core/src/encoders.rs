//! Per-element featurization.
//!
//! Each layout element becomes one token: a raster embedding from a small
//! strided convolution net, a byte-mean text embedding, and the numeric and
//! categorical attributes, all fused by one linear layer. The whole layout
//! image (target removed) is an extra token. Element rasters are rendered
//! full-frame, so appearance and geometry arrive through separate slots. The
//! target token never carries location: its geometry slots are zero.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{render_element, render_element_in, render_layout, validate_layout, BBox, Element, Layout, Raster};
use crate::nn::{Conv2d, Graph, Linear, NnError, ParamId, ParamStore, Tensor, Var};

pub const TYPE_VOCAB: usize = 5;
const ROLE_COUNT: usize = 3;
const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Render(#[from] crate::layout::LayoutError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Side length of every raster fed to the image encoder.
    pub raster_size: usize,
    pub d_model: usize,
    pub font_vocab: usize,
    /// Embed each context element's own raster (the multi-image variant).
    pub use_element_rasters: bool,
    pub conv_channels: [usize; 3],
    pub text_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            raster_size: 32,
            d_model: 64,
            font_vocab: 32,
            use_element_rasters: false,
            conv_channels: [8, 16, 16],
            text_dim: 32,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.raster_size == 0 || self.d_model == 0 || self.font_vocab == 0 || self.text_dim == 0 {
            return Err(EncodeError::InvalidLayout("feature sizes must be positive".into()));
        }
        Ok(())
    }

    /// Width of the numeric/categorical slot block.
    pub fn attribute_width(&self) -> usize {
        4 + 1 + 3 + 2 + TYPE_VOCAB + self.font_vocab + ROLE_COUNT
    }

    fn conv_output(&self) -> usize {
        let mut side = self.raster_size;
        for _ in 0..3 {
            side = (side + 2 - 3) / 2 + 1;
        }
        self.conv_channels[2] * side * side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    TargetText,
    ContextElement,
    WholeImage,
}

impl TokenRole {
    fn index(self) -> usize {
        match self {
            TokenRole::TargetText => 0,
            TokenRole::ContextElement => 1,
            TokenRole::WholeImage => 2,
        }
    }
}

/// Model-ready description of one token, independent of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInput {
    pub role: TokenRole,
    /// Channel-major `[3, s, s]` pixels scaled to `[0, 1]`, when embedded.
    pub image: Option<Vec<f64>>,
    pub text: Vec<u8>,
    pub attributes: Vec<f64>,
}

/// All tokens of one layout; `target` indexes the target-text token.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<TokenInput>,
    pub target: usize,
}

/// Nearest-neighbour resample to `size x size`, channel-major, scaled to [0, 1].
pub fn raster_to_input(raster: &Raster, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        let sy = (y * raster.height) / size;
        for x in 0..size {
            let sx = (x * raster.width) / size;
            let px = raster.get(sy, sx);
            for c in 0..3 {
                out[(c * size + y) * size + x] = f64::from(px[c]) / 255.0;
            }
        }
    }
    out
}

/// Numeric and categorical slots: bbox, angle (radians), color/255,
/// char/line counts /100, one-hot type, one-hot font, one-hot role.
pub fn element_attributes(element: Option<&Element>, role: TokenRole, cfg: &FeatureConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.attribute_width()];
    if let Some(e) = element {
        if role == TokenRole::ContextElement {
            out[..4].copy_from_slice(&e.bbox.to_array());
        }
        out[4] = e.angle.to_radians();
        for c in 0..3 {
            out[5 + c] = f64::from(e.color[c]) / 255.0;
        }
        out[8] = e.char_count as f64 / 100.0;
        out[9] = e.line_count as f64 / 100.0;
        out[10 + e.kind.index()] = 1.0;
        let font = if e.font_id < cfg.font_vocab { e.font_id } else { 0 };
        out[10 + TYPE_VOCAB + font] = 1.0;
    }
    out[10 + TYPE_VOCAB + cfg.font_vocab + role.index()] = 1.0;
    out
}

/// Builds the leak-free token set for a layout: the whole-layout image with
/// the target removed, every context element, and the target text.
pub fn prepare_input(layout: &Layout, cfg: &FeatureConfig) -> Result<ModelInput, EncodeError> {
    let violations = validate_layout(layout);
    if !violations.is_empty() {
        let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(EncodeError::InvalidLayout(msg));
    }
    cfg.validate()?;
    let s = cfg.raster_size;
    let mut tokens = Vec::with_capacity(layout.elements.len() + 1);
    tokens.push(TokenInput {
        role: TokenRole::WholeImage,
        image: Some(raster_to_input(&render_layout(layout, true, s, s)?, s)),
        text: Vec::new(),
        attributes: element_attributes(None, TokenRole::WholeImage, cfg),
    });
    for i in layout.context_indices() {
        let e = &layout.elements[i];
        let image = if cfg.use_element_rasters {
            Some(raster_to_input(&render_element_in(e, &BBox::FULL, s, s)?, s))
        } else {
            None
        };
        tokens.push(TokenInput {
            role: TokenRole::ContextElement,
            image,
            text: e.text.as_bytes().to_vec(),
            attributes: element_attributes(Some(e), TokenRole::ContextElement, cfg),
        });
    }
    let target = layout.target();
    tokens.push(TokenInput {
        role: TokenRole::TargetText,
        image: Some(raster_to_input(&render_element_in(target, &BBox::FULL, s, s)?, s)),
        text: target.text.as_bytes().to_vec(),
        attributes: element_attributes(Some(target), TokenRole::TargetText, cfg),
    });
    let target = tokens.len() - 1;
    Ok(ModelInput { tokens, target })
}

/// Three stride-2 3x3 convolutions with GELU, flattened and projected.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    convs: [Conv2d; 3],
    project: Linear,
    size: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &FeatureConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        let [c1, c2, c3] = cfg.conv_channels;
        Ok(Self {
            convs: [
                Conv2d::new(store, "image.conv1", 3, c1, 3, 2, 1, rng)?,
                Conv2d::new(store, "image.conv2", c1, c2, 3, 2, 1, rng)?,
                Conv2d::new(store, "image.conv3", c2, c3, 3, 2, 1, rng)?,
            ],
            project: Linear::new(store, "image.project", cfg.conv_output(), cfg.d_model, rng)?,
            size: cfg.raster_size,
        })
    }

    /// Embeds channel-major pixels of shape `[3, s, s]`.
    pub fn forward(&self, g: &mut Graph, pixels: &[f64]) -> Result<Var, NnError> {
        let mut x = g.input(Tensor::new(vec![3, self.size, self.size], pixels.to_vec())?);
        for conv in &self.convs {
            x = conv.forward(g, x)?;
            x = g.gelu(x);
        }
        let n = g.shape(x).iter().product();
        let flat = g.reshape(x, vec![n])?;
        self.project.forward(g, flat)
    }
}

/// Byte embeddings averaged over the string, then projected; the empty
/// string maps to a learned null vector.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    bytes: ParamId,
    null: ParamId,
    project: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &FeatureConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        Ok(Self {
            bytes: store.add_uniform("text.bytes", vec![BYTE_VOCAB, cfg.text_dim], 1, rng)?,
            null: store.add_uniform("text.null", vec![cfg.d_model], cfg.d_model, rng)?,
            project: Linear::new(store, "text.project", cfg.text_dim, cfg.d_model, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, text: &[u8]) -> Result<Var, NnError> {
        if text.is_empty() {
            return Ok(g.param(self.null));
        }
        let ids: Vec<usize> = text.iter().map(|&b| usize::from(b)).collect();
        let table = g.param(self.bytes);
        let pooled = g.gather_mean(table, &ids)?;
        self.project.forward(g, pooled)
    }
}

/// Image and text encoders plus the linear fusion into `d_model`.
#[derive(Debug, Clone)]
pub struct ElementEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    fuse: Linear,
    cfg: FeatureConfig,
}

impl ElementEncoder {
    pub fn new(store: &mut ParamStore, cfg: &FeatureConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        let image = ImageEncoder::new(store, cfg, rng)?;
        let text = TextEncoder::new(store, cfg, rng)?;
        let fuse = Linear::new(store, "fuse", 2 * cfg.d_model + cfg.attribute_width(), cfg.d_model, rng)?;
        Ok(Self { image, text, fuse, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// One `[d_model]` token embedding.
    pub fn forward(&self, g: &mut Graph, token: &TokenInput) -> Result<Var, NnError> {
        let image = match &token.image {
            Some(px) => self.image.forward(g, px)?,
            None => g.input(Tensor::zeros(vec![self.cfg.d_model])),
        };
        let text = self.text.forward(g, &token.text)?;
        let attrs = g.input(Tensor::vector(token.attributes.clone()));
        let joined = g.concat(&[image, text, attrs])?;
        self.fuse.forward(g, joined)
    }
}

/// Embedding of one element with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementToken {
    pub embedding: Tensor,
    pub role: TokenRole,
}

pub fn encode_image(encoder: &ImageEncoder, store: &ParamStore, raster: &Raster) -> Result<Tensor, NnError> {
    let mut g = Graph::new(store);
    let v = encoder.forward(&mut g, &raster_to_input(raster, encoder.size))?;
    Ok(Tensor::vector(g.value(v).to_vec()))
}

pub fn encode_text(encoder: &TextEncoder, store: &ParamStore, text: &str) -> Result<Tensor, NnError> {
    let mut g = Graph::new(store);
    let v = encoder.forward(&mut g, text.as_bytes())?;
    Ok(Tensor::vector(g.value(v).to_vec()))
}

/// Encodes a single element in the given role.
///
/// The target role drops location slots. Context elements include their
/// full-frame raster only when `use_element_rasters` is set. For
/// `WholeImage`, pass the layout raster as a full-canvas image element.
pub fn encode_element(
    encoder: &ElementEncoder,
    store: &ParamStore,
    element: &Element,
    role: TokenRole,
) -> Result<ElementToken, EncodeError> {
    let cfg = encoder.config();
    let s = cfg.raster_size;
    if element.bbox.to_array().iter().any(|v| !v.is_finite()) {
        return Err(EncodeError::InvalidLayout("non-finite element geometry".into()));
    }
    let image = match role {
        TokenRole::TargetText => Some(render_element_in(element, &BBox::FULL, s, s)?),
        TokenRole::ContextElement if cfg.use_element_rasters => Some(render_element_in(element, &BBox::FULL, s, s)?),
        TokenRole::ContextElement => None,
        TokenRole::WholeImage => Some(render_element(element, s, s)?),
    };
    let (text, attrs) = match role {
        TokenRole::WholeImage => (Vec::new(), element_attributes(None, role, cfg)),
        _ => (element.text.as_bytes().to_vec(), element_attributes(Some(element), role, cfg)),
    };
    let token = TokenInput { role, image: image.map(|r| raster_to_input(&r, s)), text, attributes: attrs };
    let mut g = Graph::new(store);
    let v = encoder.forward(&mut g, &token)?;
    Ok(ElementToken { embedding: Tensor::vector(g.value(v).to_vec()), role })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::layout::ElementKind;

    fn encoder(cfg: &FeatureConfig) -> (ParamStore, ElementEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let enc = ElementEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn small_cfg() -> FeatureConfig {
        FeatureConfig { raster_size: 8, d_model: 16, font_vocab: 4, text_dim: 8, ..Default::default() }
    }

    #[test]
    fn identical_rasters_embed_identically() {
        let (store, enc) = encoder(&small_cfg());
        let r = Raster::filled(8, 8, [10, 200, 30]).unwrap();
        let a = encode_image(&enc.image, &store, &r).unwrap();
        let b = encode_image(&enc.image, &store, &r.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn white_and_black_rasters_differ() {
        let (store, enc) = encoder(&small_cfg());
        let norm = |r: &Raster| {
            let t = encode_image(&enc.image, &store, r).unwrap();
            t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let w = norm(&Raster::white(8, 8).unwrap());
        let b = norm(&Raster::filled(8, 8, [0, 0, 0]).unwrap());
        assert!((w - b).abs() > 0.0);
    }

    #[test]
    fn empty_text_is_the_null_vector() {
        let (store, enc) = encoder(&small_cfg());
        let t = encode_text(&enc.text, &store, "").unwrap();
        assert_eq!(t.data(), store.get(store.id("text.null").unwrap()).data());
    }

    #[test]
    fn text_pooling_ignores_byte_order() {
        let (store, enc) = encoder(&small_cfg());
        let ab = encode_text(&enc.text, &store, "ab").unwrap();
        let ba = encode_text(&enc.text, &store, "ba").unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn target_token_has_zero_geometry_slots() {
        let cfg = small_cfg();
        let e = Element::text("Make", BBox::new(0.3, 0.4, 0.2, 0.1), [1, 2, 3], 2);
        let attrs = element_attributes(Some(&e), TokenRole::TargetText, &cfg);
        assert_eq!(&attrs[..4], &[0.0; 4]);
        let ctx = element_attributes(Some(&e), TokenRole::ContextElement, &cfg);
        assert_eq!(&ctx[..4], &[0.3, 0.4, 0.2, 0.1]);
        assert_eq!(ctx[8], 0.04);
        assert_eq!(ctx[9], 0.01);
    }

    #[test]
    fn geometry_changes_context_tokens() {
        let (store, enc) = encoder(&small_cfg());
        let a = Element::graphic(ElementKind::Svg, BBox::new(0.1, 0.1, 0.3, 0.3), [9, 9, 9]);
        let mut b = a.clone();
        b.bbox = BBox::new(0.5, 0.2, 0.3, 0.4);
        let ta = encode_element(&enc, &store, &a, TokenRole::ContextElement).unwrap();
        let tb = encode_element(&enc, &store, &b, TokenRole::ContextElement).unwrap();
        assert_ne!(ta.embedding, tb.embedding);
    }

    #[test]
    fn rasters_are_ignored_without_element_images() {
        let cfg = small_cfg();
        let (store, enc) = encoder(&cfg);
        let base = Element::graphic(ElementKind::Image, BBox::new(0.1, 0.1, 0.5, 0.5), [9, 9, 9]);
        let a = base.clone().with_raster(Raster::filled(4, 4, [0, 0, 0]).unwrap());
        let b = base.with_raster(Raster::filled(4, 4, [250, 10, 10]).unwrap());
        let ta = encode_element(&enc, &store, &a, TokenRole::ContextElement).unwrap();
        let tb = encode_element(&enc, &store, &b, TokenRole::ContextElement).unwrap();
        assert_eq!(ta, tb);

        let cfg = FeatureConfig { use_element_rasters: true, ..cfg };
        let (store, enc) = encoder(&cfg);
        let ta = encode_element(&enc, &store, &a, TokenRole::ContextElement).unwrap();
        let tb = encode_element(&enc, &store, &b, TokenRole::ContextElement).unwrap();
        assert_ne!(ta, tb);
    }

    #[test]
    fn prepared_input_has_one_whole_image_and_one_target() {
        let layout = Layout {
            id: "x".into(),
            canvas_width: 10,
            canvas_height: 10,
            elements: vec![
                Element::graphic(ElementKind::ColoredBackground, BBox::FULL, [200, 200, 200]),
                Element::text("hi", BBox::new(0.1, 0.1, 0.2, 0.1), [0, 0, 0], 1),
                Element::text("target", BBox::new(0.5, 0.5, 0.2, 0.1), [0, 0, 0], 1),
            ],
            target_index: 2,
        };
        let input = prepare_input(&layout, &small_cfg()).unwrap();
        let count = |r| input.tokens.iter().filter(|t| t.role == r).count();
        assert_eq!(count(TokenRole::WholeImage), 1);
        assert_eq!(count(TokenRole::TargetText), 1);
        assert_eq!(count(TokenRole::ContextElement), 2);
        assert_eq!(input.tokens[input.target].role, TokenRole::TargetText);

        let moved = layout.with_target_bbox(BBox::new(0.0, 0.9, 0.9, 0.05));
        assert_eq!(prepare_input(&moved, &small_cfg()).unwrap(), input);
    }
}
