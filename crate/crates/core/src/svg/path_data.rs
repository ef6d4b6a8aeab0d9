//! Path `d` attribute grammar. Relative commands are resolved to absolute
//! coordinates while parsing, so the domain model only holds absolute data.

use super::{PathCommand, Point};

struct Lexer<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | b',' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_separators();
        self.bytes.get(self.pos).copied()
    }

    fn at_number(&mut self) -> bool {
        matches!(self.peek(), Some(b'0'..=b'9' | b'.' | b'-' | b'+'))
    }

    fn number(&mut self) -> Result<f64, String> {
        self.skip_separators();
        let start = self.pos;
        let b = self.bytes;
        let mut i = self.pos;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let int_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        let mut digits = i - int_start;
        if i < b.len() && b[i] == b'.' {
            i += 1;
            let frac_start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            digits += i - frac_start;
        }
        if digits == 0 {
            return Err(format!("expected number at offset {start}"));
        }
        if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
            let mut j = i + 1;
            if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                j += 1;
            }
            let exp_start = j;
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            if j > exp_start {
                i = j;
            }
        }
        self.pos = i;
        let text = std::str::from_utf8(&b[start..i]).expect("ascii slice");
        let v: f64 = text.parse().map_err(|_| format!("bad number {text:?}"))?;
        if !v.is_finite() {
            return Err(format!("non-finite number {text:?}"));
        }
        Ok(v)
    }

    fn flag(&mut self) -> Result<bool, String> {
        match self.peek() {
            Some(b'0') => {
                self.pos += 1;
                Ok(false)
            }
            Some(b'1') => {
                self.pos += 1;
                Ok(true)
            }
            _ => Err(format!("expected arc flag at offset {}", self.pos)),
        }
    }

    fn point(&mut self, origin: Point) -> Result<Point, String> {
        let x = self.number()?;
        let y = self.number()?;
        Ok(Point::new(origin.x + x, origin.y + y))
    }
}

/// Parses path data into absolute commands.
///
/// A drawing command directly after `Z` gets an explicit `M` to the subpath
/// start so every subpath begins with a move.
pub fn parse_path_data(d: &str) -> Result<Vec<PathCommand>, String> {
    let mut lx = Lexer::new(d);
    let mut out = Vec::new();
    let mut pen = Point::default();
    let mut start = Point::default();
    let mut needs_move = true;
    let mut command: Option<u8> = None;

    while let Some(c) = lx.peek() {
        let letter = if c.is_ascii_alphabetic() {
            lx.pos += 1;
            c
        } else {
            match command {
                // implicit repetition; extra pairs after a move are lines
                Some(b'M') => b'L',
                Some(b'm') => b'l',
                Some(b'Z' | b'z') | None => {
                    return Err(format!("number without command at offset {}", lx.pos))
                }
                Some(prev) => prev,
            }
        };
        let relative = letter.is_ascii_lowercase();
        let origin = if relative { pen } else { Point::default() };
        let upper = letter.to_ascii_uppercase();

        if out.is_empty() && upper != b'M' {
            return Err("path data must start with a move".into());
        }
        if upper != b'M' && upper != b'Z' && needs_move {
            out.push(PathCommand::Move(start));
            needs_move = false;
        }

        let cmd = match upper {
            b'M' => {
                let p = lx.point(origin)?;
                start = p;
                needs_move = false;
                PathCommand::Move(p)
            }
            b'L' => PathCommand::Line(lx.point(origin)?),
            b'H' => {
                let x = lx.number()? + origin.x;
                PathCommand::Horizontal(x)
            }
            b'V' => {
                let y = lx.number()? + origin.y;
                PathCommand::Vertical(y)
            }
            b'C' => {
                let a = lx.point(origin)?;
                let b = lx.point(origin)?;
                PathCommand::Cubic(a, b, lx.point(origin)?)
            }
            b'S' => {
                let b = lx.point(origin)?;
                PathCommand::SmoothCubic(b, lx.point(origin)?)
            }
            b'Q' => {
                let a = lx.point(origin)?;
                PathCommand::Quad(a, lx.point(origin)?)
            }
            b'T' => PathCommand::SmoothQuad(lx.point(origin)?),
            b'A' => {
                let rx = lx.number()?;
                let ry = lx.number()?;
                let rotation = lx.number()?;
                let large_arc = lx.flag()?;
                let sweep = lx.flag()?;
                let to = lx.point(origin)?;
                PathCommand::Arc {
                    rx,
                    ry,
                    rotation,
                    large_arc,
                    sweep,
                    to,
                }
            }
            b'Z' => {
                needs_move = true;
                PathCommand::Close
            }
            other => return Err(format!("unknown path command {:?}", other as char)),
        };
        pen = end_point(&cmd, pen, start);
        out.push(cmd);
        command = Some(letter);
        if upper == b'Z' {
            // Z takes no arguments; a number right after it is an error
            if lx.at_number() {
                return Err(format!("number after close at offset {}", lx.pos));
            }
        }
    }
    Ok(out)
}

/// Pen position after `cmd`, given the pen before it and the subpath start.
pub(crate) fn end_point(cmd: &PathCommand, pen: Point, start: Point) -> Point {
    match *cmd {
        PathCommand::Move(p)
        | PathCommand::Line(p)
        | PathCommand::Cubic(_, _, p)
        | PathCommand::Quad(_, p)
        | PathCommand::SmoothCubic(_, p)
        | PathCommand::SmoothQuad(p) => p,
        PathCommand::Arc { to, .. } => to,
        PathCommand::Close => start,
        PathCommand::Horizontal(x) => Point::new(x, pen.y),
        PathCommand::Vertical(y) => Point::new(pen.x, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svg::PathCommand::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn absolute_and_relative() {
        let cmds = parse_path_data("M10 10 l5 0 L20,20 z").unwrap();
        assert_eq!(
            cmds,
            vec![
                Move(p(10.0, 10.0)),
                Line(p(15.0, 10.0)),
                Line(p(20.0, 20.0)),
                Close
            ]
        );
    }

    #[test]
    fn implicit_lineto_after_move() {
        let cmds = parse_path_data("m1 1 2 2 3 3").unwrap();
        assert_eq!(
            cmds,
            vec![Move(p(1.0, 1.0)), Line(p(3.0, 3.0)), Line(p(6.0, 6.0))]
        );
    }

    #[test]
    fn compact_numbers_and_flags() {
        let cmds = parse_path_data("M0 0a5 5 0 0110 0h-1.5.5V1e1").unwrap();
        assert_eq!(cmds.len(), 5);
        assert_eq!(
            cmds[1],
            Arc {
                rx: 5.0,
                ry: 5.0,
                rotation: 0.0,
                large_arc: false,
                sweep: true,
                to: p(10.0, 0.0)
            }
        );
        assert_eq!(cmds[2], Horizontal(8.5));
        assert_eq!(cmds[3], Horizontal(9.0));
        assert_eq!(cmds[4], Vertical(10.0));
    }

    #[test]
    fn command_after_close_gets_explicit_move() {
        let cmds = parse_path_data("M1 1 L5 1 L5 5 Z L0 9").unwrap();
        assert_eq!(cmds[4], Move(p(1.0, 1.0)));
        assert_eq!(cmds[5], Line(p(0.0, 9.0)));
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_path_data("L1 1").is_err());
        assert!(parse_path_data("M1").is_err());
        assert!(parse_path_data("M1 1 X2 2").is_err());
        assert!(parse_path_data("M0 0 A1 1 0 2 0 3 3").is_err());
        assert!(parse_path_data("M0 0 Z 3").is_err());
    }

    #[test]
    fn empty_is_empty() {
        assert!(parse_path_data("  ").unwrap().is_empty());
    }
}
