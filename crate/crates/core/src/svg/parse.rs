//! Strict parser for the supported SVG subset.
//!
//! Non-rendering content (comments, `<title>`, `<desc>`, `<metadata>`,
//! editor-namespace elements) is skipped. `<defs>` children are only
//! reachable through `<use>`, which is expanded into a group holding a copy
//! of the referenced element. Class selectors from `<style>` are applied as
//! if they were presentation attributes.

use std::collections::HashMap;

use roxmltree::{Node, NodeType};

use super::path_data::parse_path_data;
use super::{Color, Document, Element, Paint, Point, Shape, SvgError};

const SVG_NS: &str = "http://www.w3.org/2000/svg";
const MAX_USE_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub element: String,
    pub attr: String,
    pub message: String,
}

/// Parses SVG text into a [`Document`].
pub fn parse_svg(text: &str) -> Result<Document, SvgError> {
    parse_svg_with_warnings(text).map(|(doc, _)| doc)
}

/// Like [`parse_svg`], also returning the unsupported attributes that were
/// ignored.
pub fn parse_svg_with_warnings(text: &str) -> Result<(Document, Vec<ParseWarning>), SvgError> {
    let xml =
        roxmltree::Document::parse(text).map_err(|e| SvgError::MalformedXml(e.to_string()))?;
    let root = xml.root_element();
    if root.tag_name().name() != "svg" {
        return Err(SvgError::UnsupportedElement(
            root.tag_name().name().to_string(),
        ));
    }

    let mut ctx = Context {
        ids: HashMap::new(),
        classes: HashMap::new(),
        warnings: Vec::new(),
    };
    for node in root.descendants().filter(|n| n.is_element()) {
        if let Some(id) = node.attribute("id") {
            ctx.ids.entry(id.to_string()).or_insert(node);
        }
        if node.tag_name().name() == "style" && is_svg_ns(&node) {
            let css: String = node
                .children()
                .filter_map(|c| match c.node_type() {
                    NodeType::Text => c.text(),
                    _ => None,
                })
                .collect();
            parse_stylesheet(&css, &mut ctx.classes)?;
        }
    }

    let (canvas, dx, dy) = canvas_geometry(&root)?;
    check_root_attributes(&root, &mut ctx)?;
    let mut elements = ctx.children(&root, 0)?;
    if dx != 0.0 || dy != 0.0 {
        for el in &mut elements {
            el.shape = el.shape.translated(dx, dy);
        }
    }
    Ok((Document { canvas, elements }, ctx.warnings))
}

fn is_svg_ns(node: &Node) -> bool {
    matches!(node.tag_name().namespace(), None | Some(SVG_NS))
}

/// Square canvas side plus the translation that maps the viewBox into it,
/// centering non-square boxes.
fn canvas_geometry(root: &Node) -> Result<(u32, f64, f64), SvgError> {
    let bad = |attr: &str, reason: &str| SvgError::BadAttribute {
        element: "svg".into(),
        attr: attr.into(),
        reason: reason.into(),
    };
    let (min_x, min_y, w, h) = if let Some(vb) = root.attribute("viewBox") {
        let nums = number_list(vb).map_err(|r| bad("viewBox", &r))?;
        if nums.len() != 4 {
            return Err(bad("viewBox", "expected four numbers"));
        }
        (nums[0], nums[1], nums[2], nums[3])
    } else {
        let w = root
            .attribute("width")
            .ok_or_else(|| bad("viewBox", "missing viewBox and width/height"))?;
        let h = root
            .attribute("height")
            .ok_or_else(|| bad("viewBox", "missing viewBox and width/height"))?;
        let w = length(w).map_err(|r| bad("width", &r))?;
        let h = length(h).map_err(|r| bad("height", &r))?;
        (0.0, 0.0, w, h)
    };
    if !(w > 0.0 && h > 0.0) {
        return Err(bad("viewBox", "canvas must have positive size"));
    }
    let side = w.max(h).ceil();
    if side > f64::from(u32::MAX) {
        return Err(bad("viewBox", "canvas too large"));
    }
    let canvas = side as u32;
    let dx = -min_x + (side - w) / 2.0;
    let dy = -min_y + (side - h) / 2.0;
    Ok((canvas, dx, dy))
}

fn check_root_attributes(root: &Node, ctx: &mut Context) -> Result<(), SvgError> {
    for attr in root.attributes() {
        match attr.name() {
            "viewBox"
            | "width"
            | "height"
            | "version"
            | "id"
            | "class"
            | "baseProfile"
            | "preserveAspectRatio" => {}
            "transform" => {
                return Err(SvgError::BadAttribute {
                    element: "svg".into(),
                    attr: "transform".into(),
                    reason: "transforms are not supported".into(),
                })
            }
            other => ctx.warn("svg", other, "ignored"),
        }
    }
    Ok(())
}

fn parse_stylesheet(
    css: &str,
    classes: &mut HashMap<String, Vec<(String, String)>>,
) -> Result<(), SvgError> {
    let mut rest = css;
    // strip /* comments */
    let mut cleaned = String::new();
    while let Some(start) = rest.find("/*") {
        cleaned.push_str(&rest[..start]);
        match rest[start..].find("*/") {
            Some(end) => rest = &rest[start + end + 2..],
            None => {
                rest = "";
                break;
            }
        }
    }
    cleaned.push_str(rest);

    let bad = |reason: String| SvgError::BadAttribute {
        element: "style".into(),
        attr: "selector".into(),
        reason,
    };
    let mut text = cleaned.as_str();
    while let Some(open) = text.find('{') {
        let selectors = text[..open].trim();
        let close = text[open..]
            .find('}')
            .ok_or_else(|| bad("unterminated rule".into()))?;
        let body = &text[open + 1..open + close];
        let decls = parse_declarations(body);
        for sel in selectors.split(',').map(str::trim) {
            let name = sel
                .strip_prefix('.')
                .filter(|n| {
                    !n.is_empty()
                        && n.chars()
                            .all(|c| c.is_alphanumeric() || c == '-' || c == '_')
                })
                .ok_or_else(|| bad(format!("only class selectors are supported, got {sel:?}")))?;
            classes
                .entry(name.to_string())
                .or_default()
                .extend(decls.iter().cloned());
        }
        text = &text[open + close + 1..];
    }
    if !text.trim().is_empty() {
        return Err(bad("trailing stylesheet text".into()));
    }
    Ok(())
}

fn parse_declarations(body: &str) -> Vec<(String, String)> {
    body.split(';')
        .filter_map(|decl| {
            let (k, v) = decl.split_once(':')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .filter(|(k, _)| !k.is_empty())
        .collect()
}

fn number_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("bad number {s:?}"))
        })
        .collect()
}

fn length(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let t = t.strip_suffix("px").unwrap_or(t);
    if t.ends_with('%') {
        return Err("percentage lengths are not supported".into());
    }
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("bad length {text:?}"))
}

fn opacity_value(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let v = if let Some(p) = t.strip_suffix('%') {
        p.trim().parse::<f64>().map(|v| v / 100.0)
    } else {
        t.parse::<f64>()
    }
    .map_err(|_| format!("bad opacity {text:?}"))?;
    if !v.is_finite() {
        return Err(format!("bad opacity {text:?}"));
    }
    Ok(v.clamp(0.0, 1.0))
}

struct Context<'a, 'input> {
    ids: HashMap<String, Node<'a, 'input>>,
    classes: HashMap<String, Vec<(String, String)>>,
    warnings: Vec<ParseWarning>,
}

#[derive(Default)]
struct Style {
    fill: Option<Paint>,
    opacity: f64,
    fill_opacity: f64,
    hidden: bool,
}

impl<'a, 'input> Context<'a, 'input> {
    fn warn(&mut self, element: &str, attr: &str, message: &str) {
        self.warnings.push(ParseWarning {
            element: element.into(),
            attr: attr.into(),
            message: message.into(),
        });
    }

    fn children(
        &mut self,
        parent: &Node<'a, 'input>,
        depth: usize,
    ) -> Result<Vec<Element>, SvgError> {
        let mut out = Vec::new();
        for child in parent.children().filter(|n| n.is_element()) {
            if let Some(el) = self.element(&child, depth)? {
                out.push(el);
            }
        }
        Ok(out)
    }

    fn element(
        &mut self,
        node: &Node<'a, 'input>,
        depth: usize,
    ) -> Result<Option<Element>, SvgError> {
        let tag = node.tag_name().name();
        if !is_svg_ns(node) {
            self.warn(tag, "", "foreign-namespace element skipped");
            return Ok(None);
        }
        let attr_num = |name: &str, default: Option<f64>| -> Result<f64, SvgError> {
            match node.attribute(name) {
                Some(v) => length(v).map_err(|reason| SvgError::BadAttribute {
                    element: tag.into(),
                    attr: name.into(),
                    reason,
                }),
                None => default.ok_or_else(|| SvgError::BadAttribute {
                    element: tag.into(),
                    attr: name.into(),
                    reason: "required attribute missing".into(),
                }),
            }
        };
        let geometry_attrs: &[&str] = match tag {
            "title" | "desc" | "metadata" | "defs" | "style" => return Ok(None),
            "g" => &[],
            "use" => &["href", "x", "y", "width", "height"],
            "path" => &["d"],
            "circle" => &["cx", "cy", "r"],
            "ellipse" => &["cx", "cy", "rx", "ry"],
            "rect" => &["x", "y", "width", "height", "rx", "ry"],
            "line" => &["x1", "y1", "x2", "y2"],
            "polyline" | "polygon" => &["points"],
            other => return Err(SvgError::UnsupportedElement(other.to_string())),
        };

        let shape = match tag {
            "g" => Shape::Group(self.children(node, depth)?),
            "use" => {
                let href = node
                    .attributes()
                    .find(|a| a.name() == "href")
                    .map(|a| a.value())
                    .ok_or_else(|| SvgError::BadAttribute {
                        element: "use".into(),
                        attr: "href".into(),
                        reason: "missing reference".into(),
                    })?;
                let id = href
                    .strip_prefix('#')
                    .ok_or_else(|| SvgError::BadAttribute {
                        element: "use".into(),
                        attr: "href".into(),
                        reason: "only local #id references are supported".into(),
                    })?;
                if depth >= MAX_USE_DEPTH {
                    return Err(SvgError::UnresolvableReference(id.to_string()));
                }
                let target = *self
                    .ids
                    .get(id)
                    .ok_or_else(|| SvgError::UnresolvableReference(id.to_string()))?;
                let mut inner = match self.element(&target, depth + 1)? {
                    Some(el) => el,
                    None => return Ok(None),
                };
                // the copy is anonymous; the original keeps the id
                inner.id = None;
                let x = attr_num("x", Some(0.0))?;
                let y = attr_num("y", Some(0.0))?;
                if x != 0.0 || y != 0.0 {
                    inner.shape = inner.shape.translated(x, y);
                }
                Shape::Group(vec![inner])
            }
            "path" => {
                let d = node.attribute("d").unwrap_or("");
                Shape::Path(parse_path_data(d).map_err(|reason| SvgError::BadAttribute {
                    element: "path".into(),
                    attr: "d".into(),
                    reason,
                })?)
            }
            "circle" => Shape::Circle {
                cx: attr_num("cx", Some(0.0))?,
                cy: attr_num("cy", Some(0.0))?,
                r: non_negative(tag, "r", attr_num("r", None)?)?,
            },
            "ellipse" => Shape::Ellipse {
                cx: attr_num("cx", Some(0.0))?,
                cy: attr_num("cy", Some(0.0))?,
                rx: non_negative(tag, "rx", attr_num("rx", None)?)?,
                ry: non_negative(tag, "ry", attr_num("ry", None)?)?,
            },
            "rect" => {
                let width = non_negative(tag, "width", attr_num("width", None)?)?;
                let height = non_negative(tag, "height", attr_num("height", None)?)?;
                let rx = node
                    .attribute("rx")
                    .map(|_| attr_num("rx", None))
                    .transpose()?;
                let ry = node
                    .attribute("ry")
                    .map(|_| attr_num("ry", None))
                    .transpose()?;
                let (rx, ry) = match (rx, ry) {
                    (Some(a), Some(b)) => (a, b),
                    (Some(a), None) => (a, a),
                    (None, Some(b)) => (b, b),
                    (None, None) => (0.0, 0.0),
                };
                Shape::Rect {
                    x: attr_num("x", Some(0.0))?,
                    y: attr_num("y", Some(0.0))?,
                    rx: non_negative(tag, "rx", rx)?,
                    ry: non_negative(tag, "ry", ry)?,
                    width,
                    height,
                }
            }
            "line" => Shape::Line {
                x1: attr_num("x1", Some(0.0))?,
                y1: attr_num("y1", Some(0.0))?,
                x2: attr_num("x2", Some(0.0))?,
                y2: attr_num("y2", Some(0.0))?,
            },
            "polyline" | "polygon" => {
                let bad = |reason: String| SvgError::BadAttribute {
                    element: tag.into(),
                    attr: "points".into(),
                    reason,
                };
                let nums = number_list(node.attribute("points").unwrap_or("")).map_err(bad)?;
                if nums.len() % 2 != 0 {
                    return Err(bad("odd number of coordinates".into()));
                }
                let pts: Vec<Point> = nums.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
                if tag == "polygon" {
                    Shape::Polygon(pts)
                } else {
                    Shape::Polyline(pts)
                }
            }
            _ => unreachable!("tag filtered above"),
        };

        let style = self.style(node, tag, geometry_attrs)?;
        let mut opacity = style.opacity * style.fill_opacity;
        if style.hidden {
            opacity = 0.0;
        }
        Ok(Some(Element {
            shape,
            fill: style.fill,
            opacity,
            id: node.attribute("id").map(str::to_string),
        }))
    }

    /// Resolves presentation attributes, class rules and inline style, in
    /// increasing priority.
    fn style(&mut self, node: &Node, tag: &str, geometry: &[&str]) -> Result<Style, SvgError> {
        let mut decls: Vec<(String, String)> = Vec::new();
        for attr in node.attributes() {
            let name = attr.name();
            if geometry.contains(&name) || matches!(name, "id" | "class" | "style") {
                continue;
            }
            if attr.namespace().is_some_and(|ns| ns != SVG_NS) && name != "space" {
                self.warn(tag, name, "foreign-namespace attribute ignored");
                continue;
            }
            decls.push((name.to_string(), attr.value().to_string()));
        }
        if let Some(classes) = node.attribute("class") {
            for class in classes.split_whitespace() {
                match self.classes.get(class) {
                    Some(rules) => decls.extend(rules.iter().cloned()),
                    None => self.warn(tag, "class", &format!("class {class:?} has no rules")),
                }
            }
        }
        if let Some(inline) = node.attribute("style") {
            decls.extend(parse_declarations(inline));
        }

        let mut style = Style {
            opacity: 1.0,
            fill_opacity: 1.0,
            ..Style::default()
        };
        for (name, value) in decls {
            let bad = |reason: &str| SvgError::BadAttribute {
                element: tag.into(),
                attr: name.clone(),
                reason: reason.into(),
            };
            match name.as_str() {
                "fill" => {
                    let v = value.trim();
                    style.fill = Some(if v == "none" {
                        Paint::None
                    } else {
                        Paint::Color(
                            Color::parse(v).ok_or_else(|| bad("unsupported color syntax"))?,
                        )
                    });
                }
                "opacity" => style.opacity = opacity_value(&value).map_err(|r| bad(&r))?,
                "fill-opacity" => {
                    style.fill_opacity = opacity_value(&value).map_err(|r| bad(&r))?
                }
                "stroke" => {
                    if value.trim() != "none" {
                        return Err(bad("strokes are not supported"));
                    }
                }
                "fill-rule" => {
                    if value.trim() != "nonzero" {
                        return Err(bad("only the nonzero fill rule is supported"));
                    }
                }
                "display" => style.hidden |= value.trim() == "none",
                "visibility" => style.hidden |= matches!(value.trim(), "hidden" | "collapse"),
                "transform" => return Err(bad("transforms are not supported")),
                "clip-path" | "mask" | "filter" => {
                    if value.trim() != "none" {
                        return Err(bad("not supported"));
                    }
                }
                "xmlns" | "version" | "space" => {}
                other => self.warn(tag, other, "ignored"),
            }
        }
        Ok(style)
    }
}

fn non_negative(element: &str, attr: &str, v: f64) -> Result<f64, SvgError> {
    if v < 0.0 {
        return Err(SvgError::BadAttribute {
            element: element.into(),
            attr: attr.into(),
            reason: "must be non-negative".into(),
        });
    }
    Ok(v)
}
