//! Cleaning and canonicalization passes.
//!
//! The stages run in a fixed order: [`clean`], [`reshape_primitives`],
//! [`resize_canvas`], [`quantize_precision`]. All but the last leave the
//! 128×128 rasterization bit-for-bit unchanged.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::raster::{flatten_shape, RASTER_TOLERANCE};
use crate::svg::{
    end_point, parse_svg, serialize_svg, Color, CoordMode, Document, Element, ElementKind,
    InheritedStyle, Paint, PathCommand, Point, Shape, SvgError,
};

/// Canvas side the pipeline resizes to by default.
pub const DEFAULT_CANVAS: u32 = 128;
/// Decimal places kept for coordinates by default.
pub const DEFAULT_PRECISION: u32 = 2;
/// Elements whose bounding box is smaller than this (in units of the
/// default canvas) are treated as invisible.
pub const ZERO_AREA_EPSILON: f64 = 1e-6;
/// Decimal places kept for opacity.
pub const OPACITY_PLACES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizeOptions {
    pub canvas: u32,
    pub precision: u32,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            canvas: DEFAULT_CANVAS,
            precision: DEFAULT_PRECISION,
        }
    }
}

/// Output of every pipeline stage, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stages {
    pub cleaned: Document,
    pub reshaped: Document,
    pub resized: Document,
    pub quantized: Document,
}

pub fn normalize_stages(doc: &Document, opts: NormalizeOptions) -> Stages {
    let cleaned = clean(doc);
    let reshaped = reshape_primitives(&cleaned);
    let resized = resize_canvas(&reshaped, opts.canvas);
    let quantized = quantize_precision(&resized, opts.precision);
    Stages {
        cleaned,
        reshaped,
        resized,
        quantized,
    }
}

/// Runs the full pipeline.
pub fn normalize(doc: &Document, opts: NormalizeOptions) -> Document {
    normalize_stages(doc, opts).quantized
}

/// Parses and normalizes SVG text.
pub fn normalize_svg(text: &str, opts: NormalizeOptions) -> Result<Document, SvgError> {
    Ok(normalize(&parse_svg(text)?, opts))
}

/// Parses raw XML and cleans it. Declarations, comments, metadata, `<defs>`
/// and classes are already resolved by the parser; references that cannot
/// be resolved surface as errors here.
pub fn clean_xml(raw_xml: &str) -> Result<Document, SvgError> {
    Ok(clean(&parse_svg(raw_xml)?))
}

/// Flattens groups (pushing fill and opacity down), drops ids, and removes
/// elements that paint nothing.
pub fn clean(doc: &Document) -> Document {
    let scale = f64::from(DEFAULT_CANVAS) / f64::from(doc.canvas.max(1));
    let mut out = Vec::new();
    flatten_into(&doc.elements, InheritedStyle::default(), scale, &mut out);
    Document::with_elements(doc.canvas, out)
}

fn flatten_into(els: &[Element], parent: InheritedStyle, scale: f64, out: &mut Vec<Element>) {
    for el in els {
        let style = parent.apply(el);
        match &el.shape {
            Shape::Group(children) => flatten_into(children, style, scale, out),
            shape => {
                let (_, opacity) = style.resolve();
                if opacity <= 0.0 || is_zero_area(shape, scale) {
                    continue;
                }
                // explicit black is the default; keep one spelling of it
                let fill = match style.fill {
                    Some(Paint::Color(c)) if c == Color::BLACK => None,
                    other => other,
                };
                out.push(Element {
                    shape: shape.clone(),
                    fill,
                    opacity: style.opacity,
                    id: None,
                });
            }
        }
    }
}

fn is_zero_area(shape: &Shape, scale: f64) -> bool {
    let shape = reshape_shape(shape).scaled(scale);
    let polys = flatten_shape(&shape, RASTER_TOLERANCE);
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in polys.iter().flatten() {
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    if !(lo.x <= hi.x) {
        return true;
    }
    (hi.x - lo.x) * (hi.y - lo.y) < ZERO_AREA_EPSILON
}

/// Rewrites every element and command into the canonical vocabulary.
pub fn reshape_primitives(doc: &Document) -> Document {
    Document::with_elements(
        doc.canvas,
        doc.elements
            .iter()
            .map(|el| Element {
                shape: reshape_shape(&el.shape),
                ..el.clone()
            })
            .collect(),
    )
}

/// Canonical form of one shape: lines, polylines and polygons become paths;
/// `H`/`V` become `L`, `S`/`T` become `C`/`Q` with the reflected control
/// point, and arc rotation is brought into [0, 360). Idempotent.
pub fn reshape_shape(shape: &Shape) -> Shape {
    match shape {
        Shape::Path(cmds) => Shape::Path(reshape_path(cmds)),
        Shape::Line { x1, y1, x2, y2 } => Shape::Path(vec![
            PathCommand::Move(Point::new(*x1, *y1)),
            PathCommand::Line(Point::new(*x2, *y2)),
        ]),
        Shape::Polyline(pts) => Shape::Path(points_to_path(pts)),
        Shape::Polygon(pts) => {
            let mut cmds = points_to_path(pts);
            if !cmds.is_empty() {
                cmds.push(PathCommand::Close);
            }
            Shape::Path(cmds)
        }
        Shape::Group(children) => Shape::Group(
            children
                .iter()
                .map(|c| Element {
                    shape: reshape_shape(&c.shape),
                    ..c.clone()
                })
                .collect(),
        ),
        other => other.clone(),
    }
}

fn points_to_path(pts: &[Point]) -> Vec<PathCommand> {
    pts.iter()
        .enumerate()
        .map(|(i, &p)| {
            if i == 0 {
                PathCommand::Move(p)
            } else {
                PathCommand::Line(p)
            }
        })
        .collect()
}

fn canonical_rotation(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

fn reshape_path(cmds: &[PathCommand]) -> Vec<PathCommand> {
    let mut out = Vec::with_capacity(cmds.len());
    let mut pen = Point::default();
    let mut start = Point::default();
    let mut last_cubic_ctrl: Option<Point> = None;
    let mut last_quad_ctrl: Option<Point> = None;
    for cmd in cmds {
        let mut cubic_ctrl = None;
        let mut quad_ctrl = None;
        let rewritten = match *cmd {
            PathCommand::Move(p) => {
                start = p;
                PathCommand::Move(p)
            }
            PathCommand::Horizontal(x) => PathCommand::Line(Point::new(x, pen.y)),
            PathCommand::Vertical(y) => PathCommand::Line(Point::new(pen.x, y)),
            PathCommand::Cubic(a, b, p) => {
                cubic_ctrl = Some(b);
                PathCommand::Cubic(a, b, p)
            }
            PathCommand::SmoothCubic(b, p) => {
                let a = last_cubic_ctrl.map_or(pen, |c| c.reflect_about(pen));
                cubic_ctrl = Some(b);
                PathCommand::Cubic(a, b, p)
            }
            PathCommand::Quad(a, p) => {
                quad_ctrl = Some(a);
                PathCommand::Quad(a, p)
            }
            PathCommand::SmoothQuad(p) => {
                let a = last_quad_ctrl.map_or(pen, |c| c.reflect_about(pen));
                quad_ctrl = Some(a);
                PathCommand::Quad(a, p)
            }
            PathCommand::Arc {
                rx,
                ry,
                rotation,
                large_arc,
                sweep,
                to,
            } => PathCommand::Arc {
                rx: rx.abs(),
                ry: ry.abs(),
                rotation: canonical_rotation(rotation),
                large_arc,
                sweep,
                to,
            },
            other => other,
        };
        pen = match rewritten {
            PathCommand::Close => start,
            ref c => end_point(c, pen, start),
        };
        last_cubic_ctrl = cubic_ctrl;
        last_quad_ctrl = quad_ctrl;
        out.push(rewritten);
    }
    out
}

/// Rounds `x` half away from zero to `places` decimals, on its shortest
/// decimal representation (so 10.005 rounds up even though the nearest
/// double is slightly below it).
pub fn round_half_away(x: f64, places: u32) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x == 0.0 { 0.0 } else { x };
    }
    let sci = format!("{:e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i64 = exp.parse().expect("exponent");
    let digits: Vec<u8> = mantissa.bytes().filter(u8::is_ascii_digit).collect();
    let keep = exp + i64::from(places) + 1;
    if keep < 0 {
        return 0.0;
    }
    let keep = keep as usize;
    if keep >= digits.len() {
        return x;
    }
    let mut kept: Vec<u8> = digits[..keep].to_vec();
    if digits[keep] >= b'5' {
        let mut i = kept.len();
        loop {
            if i == 0 {
                kept.insert(0, b'1');
                break;
            }
            i -= 1;
            if kept[i] == b'9' {
                kept[i] = b'0';
            } else {
                kept[i] += 1;
                break;
            }
        }
    }
    if kept.is_empty() {
        return 0.0;
    }
    let scale = exp - keep as i64 + 1;
    let text = format!("{}e{}", String::from_utf8(kept).expect("digits"), scale);
    let v: f64 = text.parse().expect("decimal literal");
    if v == 0.0 {
        0.0
    } else {
        v.copysign(x)
    }
}

/// Rounds every coordinate, radius, size and arc rotation to `places`
/// decimals, and opacity to three.
pub fn quantize_precision(doc: &Document, places: u32) -> Document {
    let q = |v: f64| round_half_away(v, places);
    Document::with_elements(
        doc.canvas,
        doc.elements
            .iter()
            .map(|el| quantize_element(el, &q))
            .collect(),
    )
}

fn quantize_element(el: &Element, q: &impl Fn(f64) -> f64) -> Element {
    let shape = match &el.shape {
        Shape::Path(cmds) => Shape::Path(
            cmds.iter()
                .map(|c| match c.map_lengths(q) {
                    PathCommand::Arc {
                        rx,
                        ry,
                        rotation,
                        large_arc,
                        sweep,
                        to,
                    } => PathCommand::Arc {
                        rx,
                        ry,
                        rotation: canonical_rotation(q(rotation)),
                        large_arc,
                        sweep,
                        to,
                    },
                    other => other,
                })
                .collect(),
        ),
        Shape::Group(children) => {
            Shape::Group(children.iter().map(|c| quantize_element(c, q)).collect())
        }
        other => other.map_lengths(q),
    };
    let fill = match el.fill {
        Some(Paint::Color(c)) => Some(Paint::Color(c.quantized())),
        other => other,
    };
    Element {
        shape,
        fill,
        opacity: round_half_away(el.opacity, OPACITY_PLACES),
        id: el.id.clone(),
    }
}

/// Scales all geometry uniformly by `target / canvas`.
pub fn resize_canvas(doc: &Document, target: u32) -> Document {
    assert!(doc.canvas > 0, "canvas must be positive");
    if target == doc.canvas {
        return doc.clone();
    }
    let f = f64::from(target) / f64::from(doc.canvas);
    Document::with_elements(
        target,
        doc.elements
            .iter()
            .map(|el| Element {
                shape: el.shape.scaled(f),
                ..el.clone()
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DocStats {
    pub counts: BTreeMap<String, usize>,
    pub bytes: usize,
}

impl DocStats {
    /// Counts every element (groups and their children included).
    pub fn of(doc: &Document, bytes: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = ElementKind::ALL
            .iter()
            .map(|k| (k.tag().to_string(), 0))
            .collect();
        doc.walk(|el| *counts.entry(el.kind().tag().to_string()).or_default() += 1);
        Self { counts, bytes }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub before: DocStats,
    pub after: DocStats,
}

impl StatsReport {
    /// Per-kind `after − before`.
    pub fn deltas(&self) -> BTreeMap<String, i64> {
        self.before
            .counts
            .keys()
            .chain(self.after.counts.keys())
            .map(|k| {
                let b = self.before.counts.get(k).copied().unwrap_or(0) as i64;
                let a = self.after.counts.get(k).copied().unwrap_or(0) as i64;
                (k.clone(), a - b)
            })
            .collect()
    }

    pub fn byte_delta(&self) -> i64 {
        self.after.bytes as i64 - self.before.bytes as i64
    }
}

/// Element counts and serialized sizes of two documents.
pub fn element_stats(before: &Document, after: &Document) -> StatsReport {
    StatsReport {
        file: None,
        before: DocStats::of(before, serialize_svg(before, CoordMode::Absolute).len()),
        after: DocStats::of(after, serialize_svg(after, CoordMode::Absolute).len()),
    }
}
