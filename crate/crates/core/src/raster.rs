//! CPU rasterizer for the supported primitive set: curve flattening plus a
//! supersampled nonzero-winding scanline filler.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{self, Write};

use thiserror::Error;

use crate::normalize::reshape_shape;
use crate::svg::{Color, Document, Element, InheritedStyle, PathCommand, Point, Shape};

/// Flattening tolerance used by [`rasterize`], in pixels.
pub const RASTER_TOLERANCE: f64 = 0.05;

const SUBSAMPLES: usize = 4;
const MAX_DEPTH: u32 = 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("arc with zero radius")]
    DegenerateArc,
    #[error("raster dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Closed polygon; the closing edge from the last point back to the first
/// is implicit.
pub type Polygon = Vec<Point>;

/// Row-major RGB image over a white background.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RasterGrid {
    pub fn white(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[1.0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, mut out: impl Write) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.to_rgb8())
    }
}

/// Mean absolute per-channel difference.
pub fn raster_diff(a: &RasterGrid, b: &RasterGrid) -> Result<f64, RasterError> {
    if a.width != b.width || a.height != b.height {
        return Err(RasterError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    if a.pixels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>())
        .sum();
    Ok(total / (3 * a.pixels.len()) as f64)
}

/// Flattens a leaf element into closed polygons in its own units. Fails on
/// arcs with a zero radius; see [`flatten_lenient`] for the rendering rule.
pub fn flatten(element: &Element, tol: f64) -> Result<Vec<Polygon>, RasterError> {
    Flattener::new(tol, true).shape(&element.shape)
}

/// Like [`flatten`], but zero-radius arcs become straight lines.
pub fn flatten_lenient(element: &Element, tol: f64) -> Vec<Polygon> {
    Flattener::new(tol, false)
        .shape(&element.shape)
        .expect("lenient flattening is infallible")
}

pub(crate) fn flatten_shape(shape: &Shape, tol: f64) -> Vec<Polygon> {
    Flattener::new(tol, false)
        .shape(shape)
        .expect("lenient flattening is infallible")
}

struct Flattener {
    tol: f64,
    strict: bool,
    polys: Vec<Polygon>,
    current: Polygon,
}

impl Flattener {
    fn new(tol: f64, strict: bool) -> Self {
        assert!(tol > 0.0, "flattening tolerance must be positive");
        Self {
            tol,
            strict,
            polys: Vec::new(),
            current: Vec::new(),
        }
    }

    fn finish_subpath(&mut self) {
        let poly = std::mem::take(&mut self.current);
        if poly.len() >= 2 {
            self.polys.push(poly);
        }
    }

    fn shape(mut self, shape: &Shape) -> Result<Vec<Polygon>, RasterError> {
        match shape {
            Shape::Path(cmds) => self.path(cmds)?,
            Shape::Circle { cx, cy, r } => self.ellipse(*cx, *cy, *r, *r),
            Shape::Ellipse { cx, cy, rx, ry } => self.ellipse(*cx, *cy, *rx, *ry),
            Shape::Rect {
                x,
                y,
                rx,
                ry,
                width,
                height,
            } => self.rect(*x, *y, *rx, *ry, *width, *height),
            Shape::Line { .. } | Shape::Polyline(_) | Shape::Polygon(_) => {
                self.path(&path_of(shape))?
            }
            Shape::Group(children) => {
                for child in children {
                    let polys = Flattener::new(self.tol, self.strict).shape(&child.shape)?;
                    self.polys.extend(polys);
                }
            }
        }
        self.finish_subpath();
        Ok(self.polys)
    }

    fn path(&mut self, cmds: &[PathCommand]) -> Result<(), RasterError> {
        let mut pen = Point::default();
        let mut start = Point::default();
        let mut last_cubic_ctrl: Option<Point> = None;
        let mut last_quad_ctrl: Option<Point> = None;
        for cmd in cmds {
            let mut cubic_ctrl = None;
            let mut quad_ctrl = None;
            match *cmd {
                PathCommand::Move(p) => {
                    self.finish_subpath();
                    self.current.push(p);
                    start = p;
                    pen = p;
                }
                PathCommand::Line(p) => {
                    self.line_to(p);
                    pen = p;
                }
                PathCommand::Horizontal(x) => {
                    pen = Point::new(x, pen.y);
                    self.line_to(pen);
                }
                PathCommand::Vertical(y) => {
                    pen = Point::new(pen.x, y);
                    self.line_to(pen);
                }
                PathCommand::Cubic(a, b, p) => {
                    self.cubic(pen, a, b, p, 0);
                    cubic_ctrl = Some(b);
                    pen = p;
                }
                PathCommand::SmoothCubic(b, p) => {
                    let a = last_cubic_ctrl.map_or(pen, |c| c.reflect_about(pen));
                    self.cubic(pen, a, b, p, 0);
                    cubic_ctrl = Some(b);
                    pen = p;
                }
                PathCommand::Quad(a, p) => {
                    self.quad(pen, a, p);
                    quad_ctrl = Some(a);
                    pen = p;
                }
                PathCommand::SmoothQuad(p) => {
                    let a = last_quad_ctrl.map_or(pen, |c| c.reflect_about(pen));
                    self.quad(pen, a, p);
                    quad_ctrl = Some(a);
                    pen = p;
                }
                PathCommand::Arc {
                    rx,
                    ry,
                    rotation,
                    large_arc,
                    sweep,
                    to,
                } => {
                    if pen != to {
                        if rx == 0.0 || ry == 0.0 {
                            if self.strict {
                                return Err(RasterError::DegenerateArc);
                            }
                            self.line_to(to);
                        } else {
                            for [a, b, p] in
                                arc_to_cubics(pen, rx, ry, rotation, large_arc, sweep, to)
                            {
                                self.cubic(*self.current.last().unwrap_or(&pen), a, b, p, 0);
                            }
                        }
                    }
                    pen = to;
                }
                PathCommand::Close => {
                    self.finish_subpath();
                    pen = start;
                }
            }
            last_cubic_ctrl = cubic_ctrl;
            last_quad_ctrl = quad_ctrl;
        }
        Ok(())
    }

    fn line_to(&mut self, p: Point) {
        self.current.push(p);
    }

    fn quad(&mut self, p0: Point, c: Point, p: Point) {
        let a = p0.lerp(c, 2.0 / 3.0);
        let b = p.lerp(c, 2.0 / 3.0);
        self.cubic(p0, a, b, p, 0);
    }

    fn cubic(&mut self, p0: Point, p1: Point, p2: Point, p3: Point, depth: u32) {
        let flat = dist_to_segment(p1, p0, p3).max(dist_to_segment(p2, p0, p3));
        if flat <= self.tol || depth >= MAX_DEPTH {
            self.line_to(p3);
            return;
        }
        let m01 = p0.lerp(p1, 0.5);
        let m12 = p1.lerp(p2, 0.5);
        let m23 = p2.lerp(p3, 0.5);
        let a = m01.lerp(m12, 0.5);
        let b = m12.lerp(m23, 0.5);
        let mid = a.lerp(b, 0.5);
        self.cubic(p0, m01, a, mid, depth + 1);
        self.cubic(mid, b, m23, p3, depth + 1);
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64) {
        if rx <= 0.0 || ry <= 0.0 {
            return;
        }
        let n = segments_for_radius(rx.max(ry), self.tol, 2.0 * PI);
        self.finish_subpath();
        for i in 0..n {
            let t = 2.0 * PI * i as f64 / n as f64;
            self.current
                .push(Point::new(cx + rx * t.cos(), cy + ry * t.sin()));
        }
        self.finish_subpath();
    }

    fn rect(&mut self, x: f64, y: f64, rx: f64, ry: f64, w: f64, h: f64) {
        if w <= 0.0 || h <= 0.0 {
            return;
        }
        self.finish_subpath();
        let rx = rx.min(w / 2.0);
        let ry = ry.min(h / 2.0);
        if rx <= 0.0 || ry <= 0.0 {
            self.current.extend([
                Point::new(x, y),
                Point::new(x + w, y),
                Point::new(x + w, y + h),
                Point::new(x, y + h),
            ]);
        } else {
            let corners = [
                (x + w - rx, y + ry, -FRAC_PI_2),
                (x + w - rx, y + h - ry, 0.0),
                (x + rx, y + h - ry, FRAC_PI_2),
                (x + rx, y + ry, PI),
            ];
            let n = segments_for_radius(rx.max(ry), self.tol, FRAC_PI_2);
            for (cx, cy, a0) in corners {
                for i in 0..=n {
                    let t = a0 + FRAC_PI_2 * i as f64 / n as f64;
                    self.current
                        .push(Point::new(cx + rx * t.cos(), cy + ry * t.sin()));
                }
            }
        }
        self.finish_subpath();
    }
}

/// Number of chords keeping the sagitta of an arc of radius `r` and
/// angular extent `sweep` below `tol`.
fn segments_for_radius(r: f64, tol: f64, sweep: f64) -> usize {
    let step = if tol >= r {
        FRAC_PI_2
    } else {
        2.0 * (1.0 - tol / r).acos()
    };
    let n = (sweep / step.max(1e-4)).ceil() as usize;
    n.max((sweep / FRAC_PI_2).ceil() as usize * 2).min(1 << 16)
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return (p.x - a.x).hypot(p.y - a.y);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    (p.x - (a.x + t * dx)).hypot(p.y - (a.y + t * dy))
}

/// Endpoint-parameterized elliptical arc as cubic segments of at most 90°,
/// via the SVG arc-to-center conversion. Returns control points and end
/// for each segment.
pub(crate) fn arc_to_cubics(
    from: Point,
    rx: f64,
    ry: f64,
    rotation: f64,
    large_arc: bool,
    sweep: bool,
    to: Point,
) -> Vec<[Point; 3]> {
    let Some(arc) = CenterArc::from_endpoints(from, rx, ry, rotation, large_arc, sweep, to) else {
        return vec![[from, to, to]];
    };
    let n = (arc.delta.abs() / FRAC_PI_2 - 1e-9).ceil().max(1.0) as usize;
    let step = arc.delta / n as f64;
    let k = 4.0 / 3.0 * (step / 4.0).tan();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = arc.theta1 + step * i as f64;
        let b = a + step;
        let (ca, sa) = (a.cos(), a.sin());
        let (cb, sb) = (b.cos(), b.sin());
        let p1 = arc.map(ca - k * sa, sa + k * ca);
        let p2 = arc.map(cb + k * sb, sb - k * cb);
        let p3 = if i + 1 == n { to } else { arc.map(cb, sb) };
        out.push([p1, p2, p3]);
    }
    out
}

/// Center parameterization of an elliptical arc.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CenterArc {
    pub center: Point,
    pub rx: f64,
    pub ry: f64,
    pub cos_phi: f64,
    pub sin_phi: f64,
    pub theta1: f64,
    pub delta: f64,
}

impl CenterArc {
    /// `None` when the endpoints coincide or a radius is zero.
    pub fn from_endpoints(
        from: Point,
        rx: f64,
        ry: f64,
        rotation: f64,
        large_arc: bool,
        sweep: bool,
        to: Point,
    ) -> Option<CenterArc> {
        if from == to || rx == 0.0 || ry == 0.0 {
            return None;
        }
        let phi = rotation.to_radians();
        let (sin_phi, cos_phi) = phi.sin_cos();
        let hx = (from.x - to.x) / 2.0;
        let hy = (from.y - to.y) / 2.0;
        let x1 = cos_phi * hx + sin_phi * hy;
        let y1 = -sin_phi * hx + cos_phi * hy;
        let mut rx = rx.abs();
        let mut ry = ry.abs();
        let lambda = (x1 * x1) / (rx * rx) + (y1 * y1) / (ry * ry);
        if lambda > 1.0 {
            let s = lambda.sqrt();
            rx *= s;
            ry *= s;
        }
        let num = rx * rx * ry * ry - rx * rx * y1 * y1 - ry * ry * x1 * x1;
        let den = rx * rx * y1 * y1 + ry * ry * x1 * x1;
        let mut coef = (num / den).max(0.0).sqrt();
        if large_arc == sweep {
            coef = -coef;
        }
        let cxp = coef * rx * y1 / ry;
        let cyp = -coef * ry * x1 / rx;
        let center = Point::new(
            cos_phi * cxp - sin_phi * cyp + (from.x + to.x) / 2.0,
            sin_phi * cxp + cos_phi * cyp + (from.y + to.y) / 2.0,
        );
        let ux = (x1 - cxp) / rx;
        let uy = (y1 - cyp) / ry;
        let vx = (-x1 - cxp) / rx;
        let vy = (-y1 - cyp) / ry;
        let theta1 = uy.atan2(ux);
        let mut delta = (ux * vy - uy * vx).atan2(ux * vx + uy * vy);
        if !sweep && delta > 0.0 {
            delta -= 2.0 * PI;
        } else if sweep && delta < 0.0 {
            delta += 2.0 * PI;
        }
        Some(CenterArc {
            center,
            rx,
            ry,
            cos_phi,
            sin_phi,
            theta1,
            delta,
        })
    }

    /// Maps a point on the unit circle onto the ellipse.
    pub fn map(&self, ux: f64, uy: f64) -> Point {
        let x = self.rx * ux;
        let y = self.ry * uy;
        Point::new(
            self.center.x + self.cos_phi * x - self.sin_phi * y,
            self.center.y + self.sin_phi * x + self.cos_phi * y,
        )
    }
}

fn path_of(shape: &Shape) -> Vec<PathCommand> {
    match reshape_shape(shape) {
        Shape::Path(cmds) => cmds,
        _ => Vec::new(),
    }
}

/// Paints `doc` at `size`×`size` pixels.
///
/// Each leaf is reshaped in canvas units, scaled to pixels, flattened, and
/// filled with the nonzero rule at 4×4 samples per pixel, then composited
/// over what is already painted using its opacity.
pub fn rasterize(doc: &Document, size: usize) -> RasterGrid {
    let mut grid = RasterGrid::white(size, size);
    if size == 0 || doc.canvas == 0 {
        return grid;
    }
    let scale = size as f64 / f64::from(doc.canvas);
    let mut coverage = vec![0u8; size * size];
    for_each_leaf(
        &doc.elements,
        InheritedStyle::default(),
        &mut |el, style| {
            let (color, opacity) = style.resolve();
            if opacity <= 0.0 {
                return;
            }
            let shape = reshape_shape(&el.shape).scaled(scale);
            let polys = flatten_shape(&shape, RASTER_TOLERANCE);
            coverage.fill(0);
            fill_nonzero(&polys, size, &mut coverage);
            composite(&mut grid, &coverage, color, opacity);
        },
    );
    grid
}

fn for_each_leaf(
    elements: &[Element],
    parent: InheritedStyle,
    visit: &mut impl FnMut(&Element, InheritedStyle),
) {
    for el in elements {
        let style = parent.apply(el);
        match &el.shape {
            Shape::Group(children) => for_each_leaf(children, style, visit),
            _ => visit(el, style),
        }
    }
}

fn composite(grid: &mut RasterGrid, coverage: &[u8], color: Color, opacity: f64) {
    let total = (SUBSAMPLES * SUBSAMPLES) as f64;
    let c = color.channels();
    for (px, &cov) in grid.pixels.iter_mut().zip(coverage) {
        if cov == 0 {
            continue;
        }
        let a = opacity * f64::from(cov) / total;
        for k in 0..3 {
            px[k] = px[k] * (1.0 - a) + c[k] * a;
        }
    }
}

struct Edge {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    ymin: f64,
    ymax: f64,
    dir: i32,
}

/// Counts, per pixel, the samples inside the polygons under the nonzero rule.
fn fill_nonzero(polys: &[Polygon], size: usize, coverage: &mut [u8]) {
    let mut edges: Vec<Edge> = Vec::new();
    for poly in polys {
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            if a.y == b.y
                || !(a.x.is_finite() && a.y.is_finite() && b.x.is_finite() && b.y.is_finite())
            {
                continue;
            }
            edges.push(Edge {
                x0: a.x,
                y0: a.y,
                x1: b.x,
                y1: b.y,
                ymin: a.y.min(b.y),
                ymax: a.y.max(b.y),
                dir: if b.y > a.y { 1 } else { -1 },
            });
        }
    }
    if edges.is_empty() {
        return;
    }
    edges.sort_by(|a, b| a.ymin.total_cmp(&b.ymin));
    let top = edges[0].ymin;
    let bottom = edges.iter().map(|e| e.ymax).fold(f64::MIN, f64::max);
    let n_sub = size * SUBSAMPLES;
    let sub = SUBSAMPLES as f64;
    let first_row = ((top * sub - 0.5).ceil().max(0.0)) as usize;
    let last_row = ((bottom * sub - 0.5).ceil().min(n_sub as f64)).max(0.0) as usize;

    let mut crossings: Vec<(f64, i32)> = Vec::new();
    let mut active_end = 0;
    for row in first_row..last_row {
        let y = (row as f64 + 0.5) / sub;
        while active_end < edges.len() && edges[active_end].ymin <= y {
            active_end += 1;
        }
        crossings.clear();
        for e in &edges[..active_end] {
            if e.ymin <= y && y < e.ymax {
                let x = e.x0 + (y - e.y0) * (e.x1 - e.x0) / (e.y1 - e.y0);
                crossings.push((x, e.dir));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|a, b| a.0.total_cmp(&b.0));
        let pixel_row = row / SUBSAMPLES;
        let mut winding = 0;
        for w in 0..crossings.len() - 1 {
            winding += crossings[w].1;
            if winding == 0 {
                continue;
            }
            let xa = crossings[w].0;
            let xb = crossings[w + 1].0;
            let s0 = ((xa * sub - 0.5).ceil().max(0.0)) as usize;
            let s1 = ((xb * sub - 0.5).ceil().min(n_sub as f64)).max(0.0) as usize;
            for s in s0..s1 {
                coverage[pixel_row * size + s / SUBSAMPLES] += 1;
            }
        }
    }
}
