//! Domain model for the supported SVG subset.
//!
//! A [`Document`] is a square canvas plus a list of elements in paint order.
//! Pre-normalization documents may still contain groups, lines, polylines,
//! polygons and the `H`/`V`/`S`/`T` path shorthands; the normalization
//! pipeline reduces them to paths, circles, ellipses and rects built from
//! `M`/`L`/`C`/`Q`/`A`/`Z`.

mod color;
mod parse;
mod path_data;
mod serialize;

pub use color::Color;
pub use parse::{parse_svg, parse_svg_with_warnings, ParseWarning};
pub(crate) use path_data::end_point;
pub use path_data::parse_path_data;
pub use serialize::{serialize_svg, CoordMode};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvgError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("unsupported element <{0}>")]
    UnsupportedElement(String),
    #[error("bad attribute {attr:?} on <{element}>: {reason}")]
    BadAttribute {
        element: String,
        attr: String,
        reason: String,
    },
    #[error("unresolvable reference #{0}")]
    UnresolvableReference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    /// Reflection of `self` about `center`.
    pub fn reflect_about(self, center: Point) -> Point {
        Point::new(2.0 * center.x - self.x, 2.0 * center.y - self.y)
    }

    pub(crate) fn map(self, f: &impl Fn(f64) -> f64) -> Point {
        Point::new(f(self.x), f(self.y))
    }
}

/// Fill paint. `None` is the `fill="none"` keyword.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Paint {
    Color(Color),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Path,
    Circle,
    Ellipse,
    Rect,
    Line,
    Polyline,
    Polygon,
    Group,
}

impl ElementKind {
    pub const ALL: [ElementKind; 8] = [
        ElementKind::Path,
        ElementKind::Circle,
        ElementKind::Ellipse,
        ElementKind::Rect,
        ElementKind::Line,
        ElementKind::Polyline,
        ElementKind::Polygon,
        ElementKind::Group,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ElementKind::Path => "path",
            ElementKind::Circle => "circle",
            ElementKind::Ellipse => "ellipse",
            ElementKind::Rect => "rect",
            ElementKind::Line => "line",
            ElementKind::Polyline => "polyline",
            ElementKind::Polygon => "polygon",
            ElementKind::Group => "g",
        }
    }

    /// True for the four kinds that survive normalization.
    pub fn is_canonical(self) -> bool {
        matches!(
            self,
            ElementKind::Path | ElementKind::Circle | ElementKind::Ellipse | ElementKind::Rect
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommandKind {
    M,
    L,
    C,
    Q,
    A,
    Z,
    H,
    V,
    S,
    T,
}

impl CommandKind {
    pub fn letter(self) -> char {
        match self {
            CommandKind::M => 'M',
            CommandKind::L => 'L',
            CommandKind::C => 'C',
            CommandKind::Q => 'Q',
            CommandKind::A => 'A',
            CommandKind::Z => 'Z',
            CommandKind::H => 'H',
            CommandKind::V => 'V',
            CommandKind::S => 'S',
            CommandKind::T => 'T',
        }
    }

    pub fn arg_count(self) -> usize {
        match self {
            CommandKind::M | CommandKind::L | CommandKind::T => 2,
            CommandKind::C => 6,
            CommandKind::Q | CommandKind::S => 4,
            CommandKind::A => 7,
            CommandKind::Z => 0,
            CommandKind::H | CommandKind::V => 1,
        }
    }

    pub fn is_canonical(self) -> bool {
        !matches!(
            self,
            CommandKind::H | CommandKind::V | CommandKind::S | CommandKind::T
        )
    }
}

/// One path command with absolute coordinates in canvas units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathCommand {
    Move(Point),
    Line(Point),
    Cubic(Point, Point, Point),
    Quad(Point, Point),
    Arc {
        rx: f64,
        ry: f64,
        rotation: f64,
        large_arc: bool,
        sweep: bool,
        to: Point,
    },
    Close,
    Horizontal(f64),
    Vertical(f64),
    SmoothCubic(Point, Point),
    SmoothQuad(Point),
}

impl PathCommand {
    pub fn kind(&self) -> CommandKind {
        match self {
            PathCommand::Move(_) => CommandKind::M,
            PathCommand::Line(_) => CommandKind::L,
            PathCommand::Cubic(..) => CommandKind::C,
            PathCommand::Quad(..) => CommandKind::Q,
            PathCommand::Arc { .. } => CommandKind::A,
            PathCommand::Close => CommandKind::Z,
            PathCommand::Horizontal(_) => CommandKind::H,
            PathCommand::Vertical(_) => CommandKind::V,
            PathCommand::SmoothCubic(..) => CommandKind::S,
            PathCommand::SmoothQuad(_) => CommandKind::T,
        }
    }

    /// Arguments in SVG order; arc flags are reported as 0.0 / 1.0.
    pub fn args(&self) -> Vec<f64> {
        match *self {
            PathCommand::Move(p) | PathCommand::Line(p) | PathCommand::SmoothQuad(p) => {
                vec![p.x, p.y]
            }
            PathCommand::Cubic(a, b, p) => vec![a.x, a.y, b.x, b.y, p.x, p.y],
            PathCommand::Quad(a, p) | PathCommand::SmoothCubic(a, p) => vec![a.x, a.y, p.x, p.y],
            PathCommand::Arc {
                rx,
                ry,
                rotation,
                large_arc,
                sweep,
                to,
            } => vec![
                rx,
                ry,
                rotation,
                f64::from(u8::from(large_arc)),
                f64::from(u8::from(sweep)),
                to.x,
                to.y,
            ],
            PathCommand::Close => vec![],
            PathCommand::Horizontal(x) => vec![x],
            PathCommand::Vertical(y) => vec![y],
        }
    }

    /// Applies `f` to every length-valued argument (coordinates and radii).
    /// Arc rotation and flags are left untouched.
    pub fn map_lengths(&self, f: &impl Fn(f64) -> f64) -> PathCommand {
        match *self {
            PathCommand::Move(p) => PathCommand::Move(p.map(f)),
            PathCommand::Line(p) => PathCommand::Line(p.map(f)),
            PathCommand::Cubic(a, b, p) => PathCommand::Cubic(a.map(f), b.map(f), p.map(f)),
            PathCommand::Quad(a, p) => PathCommand::Quad(a.map(f), p.map(f)),
            PathCommand::Arc {
                rx,
                ry,
                rotation,
                large_arc,
                sweep,
                to,
            } => PathCommand::Arc {
                rx: f(rx),
                ry: f(ry),
                rotation,
                large_arc,
                sweep,
                to: to.map(f),
            },
            PathCommand::Close => PathCommand::Close,
            PathCommand::Horizontal(x) => PathCommand::Horizontal(f(x)),
            PathCommand::Vertical(y) => PathCommand::Vertical(f(y)),
            PathCommand::SmoothCubic(a, p) => PathCommand::SmoothCubic(a.map(f), p.map(f)),
            PathCommand::SmoothQuad(p) => PathCommand::SmoothQuad(p.map(f)),
        }
    }

    /// Maps x and y coordinates separately (used for translation). Radii
    /// are not positions and stay as they are.
    pub fn map_points(&self, f: &impl Fn(Point) -> Point) -> PathCommand {
        match *self {
            PathCommand::Move(p) => PathCommand::Move(f(p)),
            PathCommand::Line(p) => PathCommand::Line(f(p)),
            PathCommand::Cubic(a, b, p) => PathCommand::Cubic(f(a), f(b), f(p)),
            PathCommand::Quad(a, p) => PathCommand::Quad(f(a), f(p)),
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
                rotation,
                large_arc,
                sweep,
                to: f(to),
            },
            PathCommand::Close => PathCommand::Close,
            PathCommand::Horizontal(x) => PathCommand::Horizontal(f(Point::new(x, 0.0)).x),
            PathCommand::Vertical(y) => PathCommand::Vertical(f(Point::new(0.0, y)).y),
            PathCommand::SmoothCubic(a, p) => PathCommand::SmoothCubic(f(a), f(p)),
            PathCommand::SmoothQuad(p) => PathCommand::SmoothQuad(f(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Path(Vec<PathCommand>),
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    Rect {
        x: f64,
        y: f64,
        rx: f64,
        ry: f64,
        width: f64,
        height: f64,
    },
    Line {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    Polyline(Vec<Point>),
    Polygon(Vec<Point>),
    Group(Vec<Element>),
}

impl Shape {
    pub fn kind(&self) -> ElementKind {
        match self {
            Shape::Path(_) => ElementKind::Path,
            Shape::Circle { .. } => ElementKind::Circle,
            Shape::Ellipse { .. } => ElementKind::Ellipse,
            Shape::Rect { .. } => ElementKind::Rect,
            Shape::Line { .. } => ElementKind::Line,
            Shape::Polyline(_) => ElementKind::Polyline,
            Shape::Polygon(_) => ElementKind::Polygon,
            Shape::Group(_) => ElementKind::Group,
        }
    }

    /// Uniform scaling of every length (positions, radii, sizes).
    pub fn scaled(&self, f: f64) -> Shape {
        self.map_lengths(&|v: f64| v * f)
    }

    /// Applies `f` to every length-valued parameter. Arc rotation and
    /// flags are left untouched.
    pub fn map_lengths(&self, f: &impl Fn(f64) -> f64) -> Shape {
        match self {
            Shape::Path(cmds) => Shape::Path(cmds.iter().map(|c| c.map_lengths(f)).collect()),
            Shape::Circle { cx, cy, r } => Shape::Circle {
                cx: f(*cx),
                cy: f(*cy),
                r: f(*r),
            },
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: f(*cx),
                cy: f(*cy),
                rx: f(*rx),
                ry: f(*ry),
            },
            Shape::Rect {
                x,
                y,
                rx,
                ry,
                width,
                height,
            } => Shape::Rect {
                x: f(*x),
                y: f(*y),
                rx: f(*rx),
                ry: f(*ry),
                width: f(*width),
                height: f(*height),
            },
            Shape::Line { x1, y1, x2, y2 } => Shape::Line {
                x1: f(*x1),
                y1: f(*y1),
                x2: f(*x2),
                y2: f(*y2),
            },
            Shape::Polyline(pts) => Shape::Polyline(pts.iter().map(|p| p.map(f)).collect()),
            Shape::Polygon(pts) => Shape::Polygon(pts.iter().map(|p| p.map(f)).collect()),
            Shape::Group(children) => Shape::Group(
                children
                    .iter()
                    .map(|c| Element {
                        shape: c.shape.map_lengths(f),
                        ..c.clone()
                    })
                    .collect(),
            ),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Shape {
        let t = |p: Point| Point::new(p.x + dx, p.y + dy);
        match self {
            Shape::Path(cmds) => Shape::Path(cmds.iter().map(|c| c.map_points(&t)).collect()),
            Shape::Circle { cx, cy, r } => Shape::Circle {
                cx: cx + dx,
                cy: cy + dy,
                r: *r,
            },
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx: *rx,
                ry: *ry,
            },
            Shape::Rect {
                x,
                y,
                rx,
                ry,
                width,
                height,
            } => Shape::Rect {
                x: x + dx,
                y: y + dy,
                rx: *rx,
                ry: *ry,
                width: *width,
                height: *height,
            },
            Shape::Line { x1, y1, x2, y2 } => Shape::Line {
                x1: x1 + dx,
                y1: y1 + dy,
                x2: x2 + dx,
                y2: y2 + dy,
            },
            Shape::Polyline(pts) => Shape::Polyline(pts.iter().map(|p| t(*p)).collect()),
            Shape::Polygon(pts) => Shape::Polygon(pts.iter().map(|p| t(*p)).collect()),
            Shape::Group(children) => Shape::Group(
                children
                    .iter()
                    .map(|c| Element {
                        shape: c.shape.translated(dx, dy),
                        ..c.clone()
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub shape: Shape,
    /// `None` when no fill was specified (inherits, defaults to black).
    pub fill: Option<Paint>,
    pub opacity: f64,
    pub id: Option<String>,
}

impl Element {
    pub fn new(shape: Shape) -> Self {
        Self {
            shape,
            fill: None,
            opacity: 1.0,
            id: None,
        }
    }

    pub fn with_fill(mut self, color: Color) -> Self {
        self.fill = Some(Paint::Color(color));
        self
    }

    pub fn with_opacity(mut self, opacity: f64) -> Self {
        self.opacity = opacity;
        self
    }

    pub fn kind(&self) -> ElementKind {
        self.shape.kind()
    }

    /// Effective fill color of a leaf element, ignoring inheritance.
    pub fn fill_color(&self) -> Color {
        match self.fill {
            Some(Paint::Color(c)) => c,
            _ => Color::BLACK,
        }
    }

    /// Opacity actually used when painting: `fill="none"` paints nothing.
    pub fn effective_opacity(&self) -> f64 {
        match self.fill {
            Some(Paint::None) => 0.0,
            _ => self.opacity,
        }
    }
}

/// Fill and opacity a group hands down to its children.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InheritedStyle {
    pub fill: Option<Paint>,
    pub opacity: f64,
}

impl Default for InheritedStyle {
    fn default() -> Self {
        Self {
            fill: None,
            opacity: 1.0,
        }
    }
}

impl InheritedStyle {
    /// Style seen by `child` under `self`. Group fill applies only to
    /// children without their own fill; opacities multiply.
    pub fn apply(self, child: &Element) -> InheritedStyle {
        InheritedStyle {
            fill: child.fill.or(self.fill),
            opacity: self.opacity * child.opacity,
        }
    }

    /// Resolved (color, opacity) for a leaf painted with this style.
    pub fn resolve(self) -> (Color, f64) {
        match self.fill {
            Some(Paint::Color(c)) => (c, self.opacity),
            Some(Paint::None) => (Color::BLACK, 0.0),
            None => (Color::BLACK, self.opacity),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    /// Side of the square canvas in canvas units.
    pub canvas: u32,
    /// Elements in paint order.
    pub elements: Vec<Element>,
}

impl Document {
    pub fn new(canvas: u32) -> Self {
        Self {
            canvas,
            elements: Vec::new(),
        }
    }

    pub fn with_elements(canvas: u32, elements: Vec<Element>) -> Self {
        Self { canvas, elements }
    }

    /// Visits every element depth-first, groups before their children.
    pub fn walk(&self, mut visit: impl FnMut(&Element)) {
        fn go(els: &[Element], visit: &mut impl FnMut(&Element)) {
            for el in els {
                visit(el);
                if let Shape::Group(children) = &el.shape {
                    go(children, visit);
                }
            }
        }
        go(&self.elements, &mut visit);
    }

    /// True when only canonical element and command kinds remain.
    pub fn is_canonical(&self) -> bool {
        let mut ok = true;
        self.walk(|el| {
            if !el.kind().is_canonical() {
                ok = false;
            }
            if let Shape::Path(cmds) = &el.shape {
                if cmds.iter().any(|c| !c.kind().is_canonical()) {
                    ok = false;
                }
            }
        });
        ok
    }
}
