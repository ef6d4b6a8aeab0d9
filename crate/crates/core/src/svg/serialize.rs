use std::fmt::Write;

use super::path_data::end_point;
use super::{Document, Element, Paint, PathCommand, Point, Shape};

/// Coordinate convention for path data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordMode {
    #[default]
    Absolute,
    /// Lowercase commands carrying deltas from the current point.
    Relative,
}

/// Serializes a document. The viewBox is always `0 0 V V`.
pub fn serialize_svg(doc: &Document, coords: CoordMode) -> String {
    let mut out = String::new();
    let v = doc.canvas;
    write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {v} {v}""#
    )
    .unwrap();
    if doc.elements.is_empty() {
        out.push_str("/>");
        return out;
    }
    out.push('>');
    for el in &doc.elements {
        write_element(&mut out, el, coords);
    }
    out.push_str("</svg>");
    out
}

fn write_element(out: &mut String, el: &Element, coords: CoordMode) {
    let tag = el.kind().tag();
    out.push('<');
    out.push_str(tag);
    if let Some(id) = &el.id {
        write!(out, r#" id="{}""#, escape(id)).unwrap();
    }
    let num = |out: &mut String, name: &str, v: f64| {
        write!(out, r#" {name}="{}""#, fmt_num(v)).unwrap();
    };
    match &el.shape {
        Shape::Path(cmds) => {
            write!(out, r#" d="{}""#, path_data(cmds, coords)).unwrap();
        }
        Shape::Circle { cx, cy, r } => {
            num(out, "cx", *cx);
            num(out, "cy", *cy);
            num(out, "r", *r);
        }
        Shape::Ellipse { cx, cy, rx, ry } => {
            num(out, "cx", *cx);
            num(out, "cy", *cy);
            num(out, "rx", *rx);
            num(out, "ry", *ry);
        }
        Shape::Rect {
            x,
            y,
            rx,
            ry,
            width,
            height,
        } => {
            if *x != 0.0 {
                num(out, "x", *x);
            }
            if *y != 0.0 {
                num(out, "y", *y);
            }
            num(out, "width", *width);
            num(out, "height", *height);
            if *rx != 0.0 || *ry != 0.0 {
                num(out, "rx", *rx);
                if ry != rx {
                    num(out, "ry", *ry);
                }
            }
        }
        Shape::Line { x1, y1, x2, y2 } => {
            num(out, "x1", *x1);
            num(out, "y1", *y1);
            num(out, "x2", *x2);
            num(out, "y2", *y2);
        }
        Shape::Polyline(pts) | Shape::Polygon(pts) => {
            let list: Vec<String> = pts
                .iter()
                .map(|p| format!("{},{}", fmt_num(p.x), fmt_num(p.y)))
                .collect();
            write!(out, r#" points="{}""#, list.join(" ")).unwrap();
        }
        Shape::Group(_) => {}
    }
    match el.fill {
        Some(Paint::Color(c)) => write!(out, r#" fill="{}""#, c.to_hex()).unwrap(),
        Some(Paint::None) => out.push_str(r#" fill="none""#),
        None => {}
    }
    if el.opacity != 1.0 {
        num(out, "opacity", el.opacity);
    }
    if let Shape::Group(children) = &el.shape {
        out.push('>');
        for child in children {
            write_element(out, child, coords);
        }
        out.push_str("</g>");
    } else {
        out.push_str("/>");
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
}

/// Shortest round-tripping decimal, without a leading zero before the point.
pub(crate) fn fmt_num(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    let s = format!("{v}");
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

/// Decimal text `d` such that `origin + parse(d) == target` exactly, preferring
/// the shortest one found.
fn exact_delta(origin: f64, target: f64) -> Option<String> {
    let raw = target - origin;
    let check = |s: &str| s.parse::<f64>().ok().is_some_and(|d| origin + d == target);
    for places in 0..=17 {
        let scale = 10f64.powi(places);
        let rounded = (raw * scale).round() / scale;
        if !rounded.is_finite() {
            break;
        }
        let s = fmt_num(rounded);
        if check(&s) {
            return Some(s);
        }
    }
    let mut d = raw;
    for _ in 0..4 {
        let s = fmt_num(d);
        if check(&s) {
            return Some(s);
        }
        d = next_toward(
            d,
            if origin + d < target {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
        );
    }
    None
}

fn next_toward(x: f64, dir: f64) -> f64 {
    if x == dir {
        return x;
    }
    if x == 0.0 {
        let tiny = f64::from_bits(1);
        return if dir > 0.0 { tiny } else { -tiny };
    }
    let bits = x.to_bits();
    let up = (dir > x) == (x > 0.0);
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}

struct PathWriter {
    out: String,
}

impl PathWriter {
    fn command(&mut self, letter: char) {
        self.out.push(letter);
    }

    fn number(&mut self, text: &str) {
        let after_command = self
            .out
            .chars()
            .last()
            .is_none_or(|c| c.is_ascii_alphabetic());
        // "-" always starts a new number; "." does when the previous number
        // already has a decimal point
        let prev_has_dot = self
            .out
            .rsplit(|c: char| !(c.is_ascii_digit() || c == '.'))
            .next()
            .is_some_and(|tok| tok.contains('.'));
        let self_delimiting = text.starts_with('-') || (text.starts_with('.') && prev_has_dot);
        if !after_command && !self_delimiting {
            self.out.push(' ');
        }
        self.out.push_str(text);
    }

    fn flag(&mut self, f: bool) {
        self.number(if f { "1" } else { "0" });
    }
}

/// Path data in the requested convention. A relative segment whose delta
/// cannot be made to round-trip exactly falls back to the absolute form.
fn path_data(cmds: &[PathCommand], coords: CoordMode) -> String {
    let mut w = PathWriter { out: String::new() };
    let mut pen = Point::default();
    let mut start = Point::default();

    for cmd in cmds {
        let rel_pts: Option<Vec<String>> = match coords {
            CoordMode::Absolute => None,
            CoordMode::Relative => relative_args(cmd, pen),
        };
        let letter = cmd.kind().letter();
        match rel_pts {
            Some(args) => {
                w.command(letter.to_ascii_lowercase());
                for a in &args {
                    w.number(a);
                }
            }
            None => {
                w.command(letter);
                match *cmd {
                    PathCommand::Arc {
                        rx,
                        ry,
                        rotation,
                        large_arc,
                        sweep,
                        to,
                    } => {
                        w.number(&fmt_num(rx));
                        w.number(&fmt_num(ry));
                        w.number(&fmt_num(rotation));
                        w.flag(large_arc);
                        w.flag(sweep);
                        w.number(&fmt_num(to.x));
                        w.number(&fmt_num(to.y));
                    }
                    _ => {
                        for a in cmd.args() {
                            w.number(&fmt_num(a));
                        }
                    }
                }
            }
        }
        if let PathCommand::Move(p) = cmd {
            start = *p;
        }
        pen = end_point(cmd, pen, start);
    }
    w.out
}

fn relative_args(cmd: &PathCommand, pen: Point) -> Option<Vec<String>> {
    let dp = |p: Point| -> Option<[String; 2]> {
        Some([exact_delta(pen.x, p.x)?, exact_delta(pen.y, p.y)?])
    };
    let mut args = Vec::new();
    match *cmd {
        PathCommand::Move(p) | PathCommand::Line(p) | PathCommand::SmoothQuad(p) => {
            args.extend(dp(p)?);
        }
        PathCommand::Cubic(a, b, p) => {
            args.extend(dp(a)?);
            args.extend(dp(b)?);
            args.extend(dp(p)?);
        }
        PathCommand::Quad(a, p) | PathCommand::SmoothCubic(a, p) => {
            args.extend(dp(a)?);
            args.extend(dp(p)?);
        }
        PathCommand::Arc {
            rx,
            ry,
            rotation,
            large_arc,
            sweep,
            to,
        } => {
            args.push(fmt_num(rx));
            args.push(fmt_num(ry));
            args.push(fmt_num(rotation));
            args.push(if large_arc { "1" } else { "0" }.into());
            args.push(if sweep { "1" } else { "0" }.into());
            args.extend(dp(to)?);
        }
        PathCommand::Close => {}
        PathCommand::Horizontal(x) => args.push(exact_delta(pen.x, x)?),
        PathCommand::Vertical(y) => args.push(exact_delta(pen.y, y)?),
    }
    Some(args)
}
