//! Matrix and embedding codec.
//!
//! A normalized [`Document`] becomes an `N × 14` matrix: one row per path
//! command or basic shape, framed by SOS/EOS and padded with PAD rows. Each
//! row holds the element index ρ, the command index τ, eight geometry slots
//! `(μ0, ν0, …, μ3, ν3)` in canvas units, the fill color and the opacity.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::normalize::round_half_away;
use crate::svg::{Color, Document, Element, PathCommand, Point, Shape};

/// Width of a matrix row.
pub const ROW_WIDTH: usize = 14;
/// Number of continuous columns (slots, color, opacity).
pub const CONTINUOUS: usize = 12;
/// Default sequence length.
pub const DEFAULT_SEQ_LEN: usize = 1024;
/// Default width of each discrete embedding table.
pub const DEFAULT_D_TOK: usize = 32;

const MAT_MAGIC: &[u8; 4] = b"VXM1";

pub type Row = [f64; ROW_WIDTH];

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("document needs {0} command rows, more than the sequence allows")]
    TooManyCommands(usize),
    #[error("bad framing: {0}")]
    BadFraming(String),
    #[error("row {row}: unknown {field} index {value}")]
    UnknownIndex {
        row: usize,
        field: &'static str,
        value: f64,
    },
    #[error("canvas mismatch: document is {doc}, codec expects {codec}")]
    CanvasMismatch { doc: u32, codec: u32 },
    #[error("not a matrix file (bad magic)")]
    BadMagic,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Element table ρ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ElementToken {
    Sos = 0,
    Eos = 1,
    Path = 2,
    Circle = 3,
    Ellipse = 4,
    Pad = 5,
    Rect = 6,
}

/// Command table τ. Non-path rows use `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CommandToken {
    None = 0,
    M = 1,
    L = 2,
    C = 3,
    Q = 4,
    A = 5,
    Z = 6,
}

/// The fixed element and command tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const ELEMENTS: [ElementToken; 7] = [
        ElementToken::Sos,
        ElementToken::Eos,
        ElementToken::Path,
        ElementToken::Circle,
        ElementToken::Ellipse,
        ElementToken::Pad,
        ElementToken::Rect,
    ];
    pub const COMMANDS: [CommandToken; 7] = [
        CommandToken::None,
        CommandToken::M,
        CommandToken::L,
        CommandToken::C,
        CommandToken::Q,
        CommandToken::A,
        CommandToken::Z,
    ];

    pub fn element(self, index: usize) -> Option<ElementToken> {
        Self::ELEMENTS.get(index).copied()
    }

    pub fn command(self, index: usize) -> Option<CommandToken> {
        Self::COMMANDS.get(index).copied()
    }

    pub fn element_count(self) -> usize {
        Self::ELEMENTS.len()
    }

    pub fn command_count(self) -> usize {
        Self::COMMANDS.len()
    }
}

/// Exact small non-negative integer stored in a float cell.
fn as_index(v: f64) -> Option<usize> {
    (v >= 0.0 && v.fract() == 0.0 && v < 256.0).then_some(v as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgMatrix {
    pub rows: Vec<Row>,
}

impl SvgMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn element_index(&self, row: usize) -> f64 {
        self.rows[row][0]
    }

    pub fn command_index(&self, row: usize) -> f64 {
        self.rows[row][1]
    }

    /// Index of the first EOS row, if any.
    pub fn eos_position(&self) -> Option<usize> {
        self.rows
            .iter()
            .position(|r| r[0] == ElementToken::Eos as u8 as f64)
    }

    /// Mask over rows SOS..=EOS (the rows that carry content).
    pub fn valid_mask(&self) -> Vec<bool> {
        let end = self
            .eos_position()
            .unwrap_or(self.rows.len().saturating_sub(1));
        (0..self.rows.len()).map(|i| i <= end).collect()
    }

    /// `(ρ, τ)` for each row as integers; non-integral cells round.
    pub fn tokens(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .map(|r| {
                (
                    r[0].round().max(0.0) as usize,
                    r[1].round().max(0.0) as usize,
                )
            })
            .collect()
    }

    pub fn write_mat(&self, mut out: impl Write) -> io::Result<()> {
        out.write_all(MAT_MAGIC)?;
        out.write_all(&(self.rows.len() as u32).to_le_bytes())?;
        out.write_all(&(ROW_WIDTH as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.rows.len() * ROW_WIDTH * 4);
        for row in &self.rows {
            for v in row {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out.write_all(&buf)
    }

    pub fn read_mat(mut input: impl Read) -> Result<SvgMatrix, CodecError> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| CodecError::BadMagic)?;
        if &magic != MAT_MAGIC {
            return Err(CodecError::BadMagic);
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let width = u32::from_le_bytes(word) as usize;
        if width != ROW_WIDTH {
            return Err(CodecError::ShapeMismatch {
                expected: format!("{ROW_WIDTH} columns"),
                got: format!("{width} columns"),
            });
        }
        let mut data = vec![0u8; n * width * 4];
        input.read_exact(&mut data)?;
        let rows = data
            .chunks_exact(width * 4)
            .map(|chunk| {
                let mut row = [0.0; ROW_WIDTH];
                for (slot, b) in row.iter_mut().zip(chunk.chunks_exact(4)) {
                    *slot = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
                }
                row
            })
            .collect();
        Ok(SvgMatrix { rows })
    }
}

/// Encoder/decoder between documents and matrices for a fixed canvas and
/// sequence length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Codec {
    pub vocab: Vocabulary,
    pub seq_len: usize,
    pub canvas: u32,
    /// Decimal places decoded coordinates are rounded to; `None` keeps the
    /// raw values.
    pub places: Option<u32>,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            vocab: Vocabulary,
            seq_len: DEFAULT_SEQ_LEN,
            canvas: crate::normalize::DEFAULT_CANVAS,
            places: Some(crate::normalize::DEFAULT_PRECISION),
        }
    }
}

fn marker_row(token: ElementToken) -> Row {
    let mut row = [0.0; ROW_WIDTH];
    row[0] = f64::from(token as u8);
    row
}

fn style_cells(el: &Element) -> [f64; 4] {
    let c = el.fill_color();
    [c.r, c.g, c.b, el.effective_opacity()]
}

fn content_row(el: ElementToken, cmd: CommandToken, slots: [Point; 4], style: [f64; 4]) -> Row {
    let mut row = [0.0; ROW_WIDTH];
    row[0] = f64::from(el as u8);
    row[1] = f64::from(cmd as u8);
    for (i, p) in slots.iter().enumerate() {
        row[2 + 2 * i] = p.x;
        row[3 + 2 * i] = p.y;
    }
    row[10..14].copy_from_slice(&style);
    row
}

fn slot(row: &Row, i: usize) -> Point {
    Point::new(row[2 + 2 * i], row[3 + 2 * i])
}

impl Codec {
    pub fn new(seq_len: usize, canvas: u32) -> Self {
        Self {
            seq_len,
            canvas,
            ..Self::default()
        }
    }

    /// Number of content rows `doc` needs (excluding SOS/EOS).
    pub fn rows_needed(doc: &Document) -> usize {
        doc.elements
            .iter()
            .map(|el| match &el.shape {
                Shape::Path(cmds) => cmds.len(),
                _ => 1,
            })
            .sum()
    }

    /// Encodes a normalized document.
    ///
    /// Path rows carry the current point in `(μ0, ν0)`. The first `M` of a
    /// path element repeats its target in all four slots; any later `M`
    /// carries the pen and two interpolation points like `L`, which is what
    /// lets the decoder tell element boundaries from subpath starts.
    pub fn encode(&self, doc: &Document) -> Result<SvgMatrix, CodecError> {
        if doc.canvas != self.canvas {
            return Err(CodecError::CanvasMismatch {
                doc: doc.canvas,
                codec: self.canvas,
            });
        }
        let needed = Self::rows_needed(doc);
        if needed + 2 > self.seq_len {
            return Err(CodecError::TooManyCommands(needed));
        }
        let v = f64::from(self.canvas);
        let mut rows = Vec::with_capacity(self.seq_len);
        rows.push(marker_row(ElementToken::Sos));
        for el in &doc.elements {
            let style = style_cells(el);
            match &el.shape {
                Shape::Circle { cx, cy, r } => {
                    let c = Point::new(*cx, *cy);
                    rows.push(content_row(
                        ElementToken::Circle,
                        CommandToken::None,
                        [c, Point::new(*r, *r), Point::default(), c],
                        style,
                    ));
                }
                Shape::Ellipse { cx, cy, rx, ry } => {
                    let c = Point::new(*cx, *cy);
                    rows.push(content_row(
                        ElementToken::Ellipse,
                        CommandToken::None,
                        [c, Point::new(*rx, *ry), Point::default(), c],
                        style,
                    ));
                }
                Shape::Rect {
                    x,
                    y,
                    rx,
                    ry,
                    width,
                    height,
                } => rows.push(content_row(
                    ElementToken::Rect,
                    CommandToken::None,
                    [
                        Point::new(*x, *y),
                        Point::new(*rx, *ry),
                        Point::new(*width, *height),
                        Point::new(x + width, y + height),
                    ],
                    style,
                )),
                Shape::Path(cmds) => encode_path(cmds, v, style, &mut rows),
                other => {
                    return Err(CodecError::BadFraming(format!(
                        "element <{}> is not in normalized form",
                        other.kind().tag()
                    )))
                }
            }
        }
        rows.push(marker_row(ElementToken::Eos));
        rows.resize(self.seq_len, marker_row(ElementToken::Pad));
        Ok(SvgMatrix { rows })
    }

    fn round(&self, v: f64) -> f64 {
        match self.places {
            Some(p) => round_half_away(v, p),
            None => v,
        }
    }

    /// Strict inverse of [`Codec::encode`].
    pub fn decode(&self, m: &SvgMatrix) -> Result<Document, CodecError> {
        self.decode_impl(m, true)
    }

    /// Best-effort decoding for generated matrices: indices are rounded and
    /// clamped, stray markers are skipped, and a path that does not start
    /// with `M` gets one at its first slot.
    pub fn decode_lenient(&self, m: &SvgMatrix) -> Document {
        self.decode_impl(m, false)
            .expect("lenient decoding is infallible")
    }

    fn decode_impl(&self, m: &SvgMatrix, strict: bool) -> Result<Document, CodecError> {
        let v = f64::from(self.canvas);
        let mut doc = Document::new(self.canvas);
        let Some(first) = m.rows.first() else {
            return if strict {
                Err(CodecError::BadFraming("empty matrix".into()))
            } else {
                Ok(doc)
            };
        };
        if strict && first[0] != f64::from(ElementToken::Sos as u8) {
            return Err(CodecError::BadFraming("row 0 is not SOS".into()));
        }
        let mut current: Option<PathBuilder> = None;
        let mut saw_eos = false;
        for (i, row) in m.rows.iter().enumerate().skip(1) {
            let (el, cmd) = if strict {
                let el = as_index(row[0]).and_then(|x| self.vocab.element(x)).ok_or(
                    CodecError::UnknownIndex {
                        row: i,
                        field: "element",
                        value: row[0],
                    },
                )?;
                let cmd = as_index(row[1]).and_then(|x| self.vocab.command(x)).ok_or(
                    CodecError::UnknownIndex {
                        row: i,
                        field: "command",
                        value: row[1],
                    },
                )?;
                (el, cmd)
            } else {
                let pick = |x: f64, n: usize| {
                    if x.is_finite() {
                        x.round().clamp(0.0, (n - 1) as f64) as usize
                    } else {
                        0
                    }
                };
                (
                    self.vocab.element(pick(row[0], 7)).expect("in range"),
                    self.vocab.command(pick(row[1], 7)).expect("in range"),
                )
            };
            let style = self.decode_style(row);
            match el {
                ElementToken::Eos => {
                    saw_eos = true;
                    break;
                }
                ElementToken::Sos | ElementToken::Pad => {
                    if strict {
                        return Err(CodecError::BadFraming(format!(
                            "unexpected {el:?} at row {i} before EOS"
                        )));
                    }
                    continue;
                }
                ElementToken::Path => {
                    if cmd == CommandToken::None {
                        if strict {
                            return Err(CodecError::UnknownIndex {
                                row: i,
                                field: "command",
                                value: row[1],
                            });
                        }
                        continue;
                    }
                    let starts_new = match &current {
                        None => true,
                        Some(b) => {
                            b.style != style || (cmd == CommandToken::M && b.is_fresh_move(row))
                        }
                    };
                    if starts_new {
                        if let Some(b) = current.take() {
                            doc.elements.push(b.finish());
                        }
                        if strict && cmd != CommandToken::M {
                            return Err(CodecError::BadFraming(format!(
                                "path at row {i} does not start with M"
                            )));
                        }
                        current = Some(PathBuilder::new(style));
                    }
                    let b = current.as_mut().expect("builder exists");
                    b.push(cmd, row, v, |x| self.round(x));
                }
                ElementToken::Circle | ElementToken::Ellipse | ElementToken::Rect => {
                    if strict && cmd != CommandToken::None {
                        return Err(CodecError::UnknownIndex {
                            row: i,
                            field: "command",
                            value: row[1],
                        });
                    }
                    if let Some(b) = current.take() {
                        doc.elements.push(b.finish());
                    }
                    let r = |x: f64| self.round(x);
                    let radius = |x: f64| if strict { r(x) } else { r(x).abs() };
                    let size = |x: f64| if strict { r(x) } else { r(x).max(0.0) };
                    let shape = match el {
                        ElementToken::Circle => Shape::Circle {
                            cx: r(row[2]),
                            cy: r(row[3]),
                            r: radius(row[4]),
                        },
                        ElementToken::Ellipse => Shape::Ellipse {
                            cx: r(row[2]),
                            cy: r(row[3]),
                            rx: radius(row[4]),
                            ry: radius(row[5]),
                        },
                        _ => Shape::Rect {
                            x: r(row[2]),
                            y: r(row[3]),
                            rx: radius(row[4]),
                            ry: radius(row[5]),
                            width: size(row[6]),
                            height: size(row[7]),
                        },
                    };
                    doc.elements.push(style.apply(Element::new(shape)));
                }
            }
        }
        if let Some(b) = current.take() {
            doc.elements.push(b.finish());
        }
        if strict && !saw_eos {
            return Err(CodecError::BadFraming("no EOS row".into()));
        }
        Ok(doc)
    }

    fn decode_style(&self, row: &Row) -> Style {
        let ch = |x: f64| {
            let x = if x.is_finite() {
                x.clamp(0.0, 1.0)
            } else {
                0.0
            };
            (x * 255.0).round() as u8
        };
        let color = Color::from_rgb8(ch(row[10]), ch(row[11]), ch(row[12]));
        let opacity = if row[13].is_finite() {
            round_half_away(row[13].clamp(0.0, 1.0), crate::normalize::OPACITY_PLACES)
        } else {
            0.0
        };
        Style { color, opacity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Style {
    color: Color,
    opacity: f64,
}

impl Style {
    /// Default black is left implicit so normalized documents round-trip.
    fn apply(self, el: Element) -> Element {
        let el = el.with_opacity(self.opacity);
        if self.color == Color::BLACK {
            el
        } else {
            el.with_fill(self.color)
        }
    }
}

struct PathBuilder {
    style: Style,
    cmds: Vec<PathCommand>,
    pen: Point,
}

impl PathBuilder {
    fn new(style: Style) -> Self {
        Self {
            style,
            cmds: Vec::new(),
            pen: Point::default(),
        }
    }

    /// An `M` row whose first slot is not the pen opens a new element.
    fn is_fresh_move(&self, row: &Row) -> bool {
        slot(row, 0) != self.pen
    }

    fn push(&mut self, cmd: CommandToken, row: &Row, v: f64, r: impl Fn(f64) -> f64) {
        let rp = |p: Point| Point::new(r(p.x), r(p.y));
        let end = rp(slot(row, 3));
        if self.cmds.is_empty() && cmd != CommandToken::M {
            self.cmds.push(PathCommand::Move(rp(slot(row, 0))));
        }
        let c = match cmd {
            CommandToken::M => PathCommand::Move(end),
            CommandToken::L => PathCommand::Line(end),
            CommandToken::C => PathCommand::Cubic(rp(slot(row, 1)), rp(slot(row, 2)), end),
            CommandToken::Q => PathCommand::Quad(rp(slot(row, 1)), end),
            CommandToken::A => {
                let radii = slot(row, 1);
                let level = if row[7].is_finite() {
                    (row[7] * 3.0 / v).round().clamp(0.0, 3.0) as u8
                } else {
                    0
                };
                let rotation = r((row[6] * 360.0 / v).clamp(0.0, 360.0));
                PathCommand::Arc {
                    rx: r(radii.x).abs(),
                    ry: r(radii.y).abs(),
                    rotation: if rotation >= 360.0 { 0.0 } else { rotation },
                    large_arc: level & 2 != 0,
                    sweep: level & 1 != 0,
                    to: end,
                }
            }
            CommandToken::Z => PathCommand::Close,
            CommandToken::None => unreachable!("filtered by caller"),
        };
        // track the pen with the exact cell values the encoder wrote
        self.pen = if cmd == CommandToken::Z {
            slot(row, 0)
        } else {
            slot(row, 3)
        };
        self.cmds.push(c);
    }

    fn finish(self) -> Element {
        self.style.apply(Element::new(Shape::Path(self.cmds)))
    }
}

fn encode_path(cmds: &[PathCommand], v: f64, style: [f64; 4], rows: &mut Vec<Row>) {
    let mut pen = Point::default();
    let mut start = Point::default();
    let line_slots = |a: Point, b: Point| [a, a.lerp(b, 1.0 / 3.0), a.lerp(b, 2.0 / 3.0), b];
    for (i, cmd) in cmds.iter().enumerate() {
        let (tok, slots) = match *cmd {
            PathCommand::Move(p) => {
                start = p;
                let slots = if i == 0 { [p; 4] } else { line_slots(pen, p) };
                (CommandToken::M, slots)
            }
            PathCommand::Line(p) => (CommandToken::L, line_slots(pen, p)),
            PathCommand::Cubic(a, b, p) => (CommandToken::C, [pen, a, b, p]),
            PathCommand::Quad(a, p) => (CommandToken::Q, [pen, a, a, p]),
            PathCommand::Arc {
                rx,
                ry,
                rotation,
                large_arc,
                sweep,
                to,
            } => {
                let level = 2.0 * f64::from(u8::from(large_arc)) + f64::from(u8::from(sweep));
                (
                    CommandToken::A,
                    [
                        pen,
                        Point::new(rx, ry),
                        Point::new(rotation / 360.0 * v, level * v / 3.0),
                        to,
                    ],
                )
            }
            PathCommand::Close => (CommandToken::Z, [start; 4]),
            PathCommand::Horizontal(_)
            | PathCommand::Vertical(_)
            | PathCommand::SmoothCubic(..)
            | PathCommand::SmoothQuad(_) => {
                unreachable!("shorthand commands are removed by normalization")
            }
        };
        pen = match cmd {
            PathCommand::Close => start,
            _ => slots[3],
        };
        rows.push(content_row(ElementToken::Path, tok, slots, style));
    }
}

/// Affine map of canvas coordinates to [−1, 1].
pub fn normalize_coord(c: f64, canvas: u32) -> f64 {
    2.0 * c / f64::from(canvas) - 1.0
}

/// Inverse of [`normalize_coord`] after clamping to [−1, 1].
pub fn denormalize_coords(c_rec: f64, canvas: u32) -> f64 {
    (c_rec.clamp(-1.0, 1.0) + 1.0) / 2.0 * f64::from(canvas)
}

/// Maps the geometry slots by `c ↦ 2c/V − 1` and color/opacity from [0, 1]
/// to [−1, 1]. Discrete columns are untouched.
pub fn normalize_continuous(m: &SvgMatrix, canvas: u32) -> SvgMatrix {
    SvgMatrix {
        rows: m
            .rows
            .iter()
            .map(|row| {
                let mut out = *row;
                for c in &mut out[2..10] {
                    *c = normalize_coord(*c, canvas);
                }
                for c in &mut out[10..14] {
                    *c = 2.0 * *c - 1.0;
                }
                out
            })
            .collect(),
    }
}

/// Inverse of [`normalize_continuous`], clamping every continuous cell to
/// [−1, 1] first.
pub fn denormalize_continuous(m: &SvgMatrix, canvas: u32) -> SvgMatrix {
    SvgMatrix {
        rows: m
            .rows
            .iter()
            .map(|row| {
                let mut out = *row;
                for c in &mut out[2..10] {
                    *c = denormalize_coords(*c, canvas);
                }
                for c in &mut out[10..14] {
                    *c = (c.clamp(-1.0, 1.0) + 1.0) / 2.0;
                }
                out
            })
            .collect(),
    }
}

/// Row-major `rows × cols` matrix of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TokenMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub type SvgEmbedding = TokenMatrix;

/// Embedding tables: element and command tables (`7 × d_tok` each), the
/// projection of the concatenated `2·d_tok + 12` vector to `D_e`, and a
/// positional table (`N × D_e`).
///
/// The tables are drawn once from a seed and kept frozen. Element and
/// command rows are orthonormal, the projection has orthonormal rows, and
/// positional rows lie in the orthogonal complement of the projection, so
/// the transpose of the projection is an exact left inverse of embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTables {
    pub d_tok: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub element: TokenMatrix,
    pub command: TokenMatrix,
    pub projection: TokenMatrix,
    pub positional: TokenMatrix,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Modified Gram–Schmidt; rows must be linearly independent.
fn orthonormalize(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..rows.len() {
        for j in 0..i {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let prev = rows[j].clone();
            for (a, b) in rows[i].iter_mut().zip(&prev) {
                *a -= d * b;
            }
        }
        let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "degenerate random draw");
        for a in &mut rows[i] {
            *a /= norm;
        }
    }
    rows
}

fn to_matrix(rows: Vec<Vec<f64>>, cols: usize) -> TokenMatrix {
    TokenMatrix {
        rows: rows.len(),
        cols,
        data: rows.into_iter().flatten().collect(),
    }
}

impl EmbedTables {
    /// Width of the concatenated pre-projection vector.
    pub fn concat_width(d_tok: usize) -> usize {
        2 * d_tok + CONTINUOUS
    }

    /// Draws tables from `seed`. Needs `d_tok ≥ 7` and
    /// `d_model > 2·d_tok + 12`.
    pub fn new(seed: u64, seq_len: usize, d_model: usize, d_tok: usize) -> Self {
        let k = Self::concat_width(d_tok);
        assert!(d_tok >= 7, "d_tok must fit 7 orthogonal rows");
        assert!(d_model > k, "d_model must exceed 2*d_tok + 12");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let element = orthonormalize(gaussian_rows(&mut rng, 7, d_tok));
        let command = orthonormalize(gaussian_rows(&mut rng, 7, d_tok));
        let basis = orthonormalize(gaussian_rows(&mut rng, d_model, d_model));
        let (proj, complement) = basis.split_at(k);
        let free = complement.len();
        let scale = 1.0 / (free as f64).sqrt();
        let positional: Vec<Vec<f64>> = (0..seq_len)
            .map(|_| {
                let coef: Vec<f64> = (0..free)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut v = vec![0.0; d_model];
                for (c, b) in coef.iter().zip(complement) {
                    for (x, y) in v.iter_mut().zip(b) {
                        *x += c * scale * y;
                    }
                }
                v
            })
            .collect();
        Self {
            d_tok,
            d_model,
            seq_len,
            element: to_matrix(element, d_tok),
            command: to_matrix(command, d_tok),
            projection: to_matrix(proj.to_vec(), d_model),
            positional: to_matrix(positional, d_model),
        }
    }

    /// Token `i` = `concat(elem[ρ], cmd[τ], continuous) · P + pos[i]` for a
    /// matrix whose continuous columns are already normalized.
    pub fn embed(&self, m: &SvgMatrix) -> SvgEmbedding {
        assert_eq!(m.len(), self.seq_len, "matrix length must match tables");
        let k = Self::concat_width(self.d_tok);
        let mut out = TokenMatrix::zeros(m.len(), self.d_model);
        let mut concat = vec![0.0; k];
        for (i, row) in m.rows.iter().enumerate() {
            let rho = (row[0].round().clamp(0.0, 6.0)) as usize;
            let tau = (row[1].round().clamp(0.0, 6.0)) as usize;
            concat[..self.d_tok].copy_from_slice(self.element.row(rho));
            concat[self.d_tok..2 * self.d_tok].copy_from_slice(self.command.row(tau));
            concat[2 * self.d_tok..].copy_from_slice(&row[2..]);
            let dst = out.row_mut(i);
            dst.copy_from_slice(self.positional.row(i));
            for (j, c) in concat.iter().enumerate() {
                if *c == 0.0 {
                    continue;
                }
                for (d, p) in dst.iter_mut().zip(self.projection.row(j)) {
                    *d += c * p;
                }
            }
        }
        out
    }

    /// Recovers a normalized matrix: the projection transpose gives back
    /// the concatenated vector, tied logits pick ρ and τ (ties go to the
    /// lower index), and continuous cells are returned unclamped.
    pub fn unembed(&self, rec: &SvgEmbedding) -> SvgMatrix {
        assert_eq!(rec.cols, self.d_model, "embedding width must match tables");
        let k = Self::concat_width(self.d_tok);
        let mut rows = Vec::with_capacity(rec.rows);
        let mut concat = vec![0.0; k];
        for i in 0..rec.rows {
            let token = rec.row(i);
            for (j, c) in concat.iter_mut().enumerate() {
                *c = self
                    .projection
                    .row(j)
                    .iter()
                    .zip(token)
                    .map(|(p, t)| p * t)
                    .sum();
            }
            let mut row = [0.0; ROW_WIDTH];
            row[0] = argmax_logits(&self.element, &concat[..self.d_tok]) as f64;
            row[1] = argmax_logits(&self.command, &concat[self.d_tok..2 * self.d_tok]) as f64;
            row[2..].copy_from_slice(&concat[2 * self.d_tok..]);
            rows.push(row);
        }
        SvgMatrix { rows }
    }

    /// Logits of the tied element and command heads for one token.
    pub fn logits(&self, token: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let back: Vec<f64> = (0..2 * self.d_tok)
            .map(|j| {
                self.projection
                    .row(j)
                    .iter()
                    .zip(token)
                    .map(|(p, t)| p * t)
                    .sum()
            })
            .collect();
        let dots = |table: &TokenMatrix, v: &[f64]| -> Vec<f64> {
            (0..table.rows)
                .map(|r| table.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        (
            dots(&self.element, &back[..self.d_tok]),
            dots(&self.command, &back[self.d_tok..]),
        )
    }
}

fn argmax_logits(table: &TokenMatrix, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for r in 0..table.rows {
        let s: f64 = table.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        if s > best_score {
            best = r;
            best_score = s;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svg::parse_svg;

    fn codec(n: usize) -> Codec {
        Codec::new(n, 128)
    }

    #[test]
    fn rect_row_layout() {
        let doc = parse_svg(
            r#"<svg viewBox="0 0 128 128"><rect x="10" y="20" width="50" height="80"/></svg>"#,
        )
        .unwrap();
        let m = codec(8).encode(&doc).unwrap();
        assert_eq!(
            m.rows[1],
            [6.0, 0.0, 10.0, 20.0, 0.0, 0.0, 50.0, 80.0, 60.0, 100.0, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(m.rows[0], marker_row(ElementToken::Sos));
        assert_eq!(m.rows[2], marker_row(ElementToken::Eos));
        assert!(m.rows[3..]
            .iter()
            .all(|r| *r == marker_row(ElementToken::Pad)));
    }

    #[test]
    fn empty_document_framing() {
        let m = codec(6).encode(&Document::new(128)).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.rows[0][0], 0.0);
        assert_eq!(m.rows[1][0], 1.0);
        assert!(m.rows[2..].iter().all(|r| r[0] == 5.0));
        assert_eq!(codec(6).decode(&m).unwrap(), Document::new(128));
    }

    #[test]
    fn line_row_interpolates() {
        let doc = Document::with_elements(
            128,
            vec![Element::new(Shape::Path(vec![
                PathCommand::Move(Point::new(0.0, 0.0)),
                PathCommand::Line(Point::new(10.0, 0.0)),
            ]))],
        );
        let m = codec(8).encode(&doc).unwrap();
        assert_eq!(
            &m.rows[1][..10],
            &[2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(m.rows[2][0..4], [2.0, 2.0, 0.0, 0.0]);
        assert!((m.rows[2][4] - 10.0 / 3.0).abs() < 1e-12);
        assert!((m.rows[2][6] - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.rows[2][8..10], [10.0, 0.0]);
    }

    #[test]
    fn too_many_commands() {
        let cmds: Vec<PathCommand> = std::iter::once(PathCommand::Move(Point::default()))
            .chain((0..10).map(|i| PathCommand::Line(Point::new(i as f64, 1.0))))
            .collect();
        let doc = Document::with_elements(128, vec![Element::new(Shape::Path(cmds))]);
        assert!(matches!(
            codec(12).encode(&doc),
            Err(CodecError::TooManyCommands(11))
        ));
        assert!(codec(13).encode(&doc).is_ok());
    }

    #[test]
    fn handbuilt_circle_row_decodes() {
        let mut m = codec(4).encode(&Document::new(128)).unwrap();
        m.rows[1] = [
            3.0, 0.0, 64.0, 64.0, 20.0, 20.0, 0.0, 0.0, 64.0, 64.0, 0.0, 0.0, 0.0, 1.0,
        ];
        m.rows[2] = marker_row(ElementToken::Eos);
        let doc = codec(4).decode(&m).unwrap();
        assert_eq!(
            doc.elements,
            vec![Element::new(Shape::Circle {
                cx: 64.0,
                cy: 64.0,
                r: 20.0
            })]
        );
    }

    #[test]
    fn strict_decode_errors() {
        let good = codec(4).encode(&Document::new(128)).unwrap();
        let mut no_sos = good.clone();
        no_sos.rows[0][0] = 2.0;
        assert!(matches!(
            codec(4).decode(&no_sos),
            Err(CodecError::BadFraming(_))
        ));
        let mut no_eos = good.clone();
        no_eos.rows[1] = marker_row(ElementToken::Pad);
        assert!(matches!(
            codec(4).decode(&no_eos),
            Err(CodecError::BadFraming(_))
        ));
        let mut bad = good.clone();
        bad.rows[1][0] = 9.0;
        assert!(matches!(
            codec(4).decode(&bad),
            Err(CodecError::UnknownIndex { .. })
        ));
        let mut frac = good;
        frac.rows[1][1] = 0.5;
        assert!(matches!(
            codec(4).decode(&frac),
            Err(CodecError::UnknownIndex { .. })
        ));
    }

    #[test]
    fn adjacent_same_style_paths_stay_separate() {
        let doc = parse_svg(
            r#"<svg viewBox="0 0 128 128"><path d="M1 1 L9 1 L9 9 Z M1 1 L0 5"/><path d="M20 20 L30 20 L30 30 Z"/><path d="M40 40 A5 6 30 1 0 50 50"/></svg>"#,
        )
        .unwrap();
        let c = codec(32);
        assert_eq!(c.decode(&c.encode(&doc).unwrap()).unwrap(), doc);
    }

    #[test]
    fn arc_flags_and_rotation_round_trip() {
        for (large, sweep) in [(false, false), (false, true), (true, false), (true, true)] {
            let doc = Document::with_elements(
                128,
                vec![Element::new(Shape::Path(vec![
                    PathCommand::Move(Point::new(3.0, 4.0)),
                    PathCommand::Arc {
                        rx: 7.25,
                        ry: 3.5,
                        rotation: 359.99,
                        large_arc: large,
                        sweep,
                        to: Point::new(30.0, 40.0),
                    },
                ]))
                .with_fill(Color::from_rgb8(10, 200, 30))
                .with_opacity(0.5)],
            );
            let c = codec(8);
            let m = c.encode(&doc).unwrap();
            let mut bytes = Vec::new();
            m.write_mat(&mut bytes).unwrap();
            let back = SvgMatrix::read_mat(bytes.as_slice()).unwrap();
            assert_eq!(c.decode(&back).unwrap(), doc);
        }
    }

    #[test]
    fn mat_errors() {
        assert!(matches!(
            SvgMatrix::read_mat(&b"XXXX"[..]),
            Err(CodecError::BadMagic)
        ));
        assert!(matches!(
            SvgMatrix::read_mat(&b"VX"[..]),
            Err(CodecError::BadMagic)
        ));
        let mut bytes = Vec::new();
        codec(4)
            .encode(&Document::new(128))
            .unwrap()
            .write_mat(&mut bytes)
            .unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            SvgMatrix::read_mat(bytes.as_slice()),
            Err(CodecError::Io(_))
        ));
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_coord(0.0, 128), -1.0);
        assert_eq!(normalize_coord(64.0, 128), 0.0);
        assert_eq!(normalize_coord(128.0, 128), 1.0);
        assert_eq!(denormalize_coords(0.0, 128), 64.0);
        assert_eq!(denormalize_coords(-1.0, 128), 0.0);
        assert_eq!(denormalize_coords(1.0, 128), 128.0);
        assert_eq!(denormalize_coords(1.3, 128), 128.0);
    }

    fn sample_matrix(n: usize) -> SvgMatrix {
        let doc = parse_svg(
            r##"<svg viewBox="0 0 128 128"><rect x="10" y="20" width="50" height="80" fill="#123456"/><path d="M1 2 C3 4 5 6 7 8 Q9 10 11 12 Z" opacity=".25"/><circle cx="64" cy="64" r="9"/></svg>"##,
        )
        .unwrap();
        normalize_continuous(&Codec::new(n, 128).encode(&doc).unwrap(), 128)
    }

    #[test]
    fn embed_unembed_inverse() {
        let t = EmbedTables::new(7, 16, 64, 16);
        let m = sample_matrix(16);
        let back = t.unembed(&t.embed(&m));
        for (a, b) in m.rows.iter().zip(&back.rows) {
            assert_eq!(a[0], b[0]);
            assert_eq!(a[1], b[1]);
            for k in 2..ROW_WIDTH {
                assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn pad_rows_differ_only_by_position() {
        let t = EmbedTables::new(3, 16, 64, 16);
        let m = sample_matrix(16);
        let e = t.embed(&m);
        let (i, j) = (12, 14);
        for d in 0..64 {
            let diff = e.row(i)[d] - e.row(j)[d];
            let pos = t.positional.row(i)[d] - t.positional.row(j)[d];
            assert!((diff - pos).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_embedding_ties_to_lowest_index() {
        let t = EmbedTables::new(1, 4, 64, 16);
        let m = t.unembed(&TokenMatrix::zeros(4, 64));
        assert!(m.rows.iter().all(|r| r[0] == 0.0 && r[1] == 0.0));
    }

    #[test]
    fn tables_are_deterministic_and_distinct() {
        let a = EmbedTables::new(5, 8, 64, 16);
        assert_eq!(a, EmbedTables::new(5, 8, 64, 16));
        for r in 0..7 {
            for s in 0..r {
                let d: f64 = a
                    .element
                    .row(r)
                    .iter()
                    .zip(a.element.row(s))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d > 0.5);
            }
        }
    }
}
