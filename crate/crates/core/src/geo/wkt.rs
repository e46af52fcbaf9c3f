//! Minimal WKT dialect: POINT, LINESTRING, POLYGON and MULTIPOLYGON, one
//! geometry per line, optionally followed by a tab and a suffix (a class tag
//! for label files, a segment id for road networks).

use std::fmt::Write;

use super::{Geometry, LatLon, Polygon, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Num(f64),
    Open,
    Close,
    Comma,
}

fn tokenize(s: &str, line: usize) -> Result<Vec<Token>> {
    let err = |m: String| Error::Parse { line, message: m };
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '(' => {
                out.push(Token::Open);
                i += 1;
            }
            ')' => {
                out.push(Token::Close);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphabetic() {
                    i += 1;
                }
                out.push(Token::Word(s[start..i].to_ascii_uppercase()));
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    let exp_sign = (d == '-' || d == '+') && matches!(bytes[i - 1], b'e' | b'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign || i == start {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let v: f64 = s[start..i]
                    .parse()
                    .map_err(|_| err(format!("bad number '{}'", &s[start..i])))?;
                out.push(Token::Num(v));
            }
            other => return Err(err(format!("unexpected character '{other}'"))),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    line: usize,
}

impl Parser {
    fn err(&self, m: impl Into<String>) -> Error {
        Error::Parse { line: self.line, message: m.into() }
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expect(&mut self, t: Token) -> Result<()> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => Err(self.err(format!("expected {t:?}, found {got:?}"))),
        }
    }

    fn number(&mut self) -> Result<f64> {
        match self.next() {
            Some(Token::Num(v)) => Ok(v),
            got => Err(self.err(format!("expected number, found {got:?}"))),
        }
    }

    fn coord(&mut self) -> Result<LatLon> {
        let lon = self.number()?;
        let lat = self.number()?;
        Ok(LatLon { lon, lat })
    }

    // ( x y, x y, ... )
    fn coord_list(&mut self) -> Result<Vec<LatLon>> {
        self.expect(Token::Open)?;
        let mut v = vec![self.coord()?];
        loop {
            match self.next() {
                Some(Token::Comma) => v.push(self.coord()?),
                Some(Token::Close) => return Ok(v),
                got => return Err(self.err(format!("expected ',' or ')', found {got:?}"))),
            }
        }
    }

    // ( (ring), (ring) )
    fn polygon(&mut self) -> Result<Polygon> {
        self.expect(Token::Open)?;
        let exterior = self.coord_list()?;
        let mut holes = Vec::new();
        loop {
            match self.next() {
                Some(Token::Comma) => holes.push(self.coord_list()?),
                Some(Token::Close) => return Ok(Polygon { exterior, holes }),
                got => return Err(self.err(format!("expected ',' or ')', found {got:?}"))),
            }
        }
    }

    fn shape(&mut self) -> Result<Shape> {
        let kind = match self.next() {
            Some(Token::Word(w)) => w,
            got => return Err(self.err(format!("expected geometry keyword, found {got:?}"))),
        };
        let shape = match kind.as_str() {
            "POINT" => {
                self.expect(Token::Open)?;
                let p = self.coord()?;
                self.expect(Token::Close)?;
                Shape::Point(p)
            }
            "LINESTRING" => Shape::LineString(self.coord_list()?),
            "POLYGON" => Shape::Polygon(self.polygon()?),
            "MULTIPOLYGON" => {
                self.expect(Token::Open)?;
                let mut polys = vec![self.polygon()?];
                loop {
                    match self.next() {
                        Some(Token::Comma) => polys.push(self.polygon()?),
                        Some(Token::Close) => break,
                        got => return Err(self.err(format!("expected ',' or ')', found {got:?}"))),
                    }
                }
                Shape::MultiPolygon(polys)
            }
            other => return Err(self.err(format!("unsupported geometry type {other}"))),
        };
        if let Some(t) = self.peek() {
            return Err(self.err(format!("trailing input {t:?}")));
        }
        Ok(shape)
    }
}

/// Parses one line into an untagged geometry and its raw tab suffix.
/// Validation errors are reported with the line number.
pub fn parse_wkt_line(text: &str, line: usize) -> Result<(Geometry, Option<&str>)> {
    let (body, suffix) = match text.split_once('\t') {
        Some((b, s)) => (b, Some(s.trim())),
        None => (text, None),
    };
    let mut p = Parser { tokens: tokenize(body, line)?, pos: 0, line };
    let shape = p.shape()?;
    let g = Geometry { shape, class_tag: None };
    g.validate().map_err(|e| match e {
        Error::Validation(m) | Error::Domain(m) => Error::Validation(format!("line {line}: {m}")),
        other => other,
    })?;
    Ok((g, suffix))
}

/// Parses a label file: one geometry per line with an optional `\t<int>`
/// class tag. Blank lines and `#` comments are skipped.
pub fn parse_wkt(text: &str) -> Result<Vec<Geometry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let (mut g, suffix) = parse_wkt_line(trimmed, line)?;
        if let Some(s) = suffix.filter(|s| !s.is_empty()) {
            let tag = s
                .parse::<u32>()
                .map_err(|_| Error::Parse { line, message: format!("class tag '{s}' is not a non-negative integer") })?;
            g.class_tag = Some(tag);
        }
        out.push(g);
    }
    Ok(out)
}

fn write_coords(out: &mut String, coords: &[LatLon]) {
    out.push('(');
    for (i, c) in coords.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{} {}", c.lon, c.lat);
    }
    out.push(')');
}

fn write_polygon(out: &mut String, p: &Polygon) {
    out.push('(');
    for (i, ring) in p.rings().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_coords(out, ring);
    }
    out.push(')');
}

/// Serializes the shape; coordinates use the shortest round-tripping form.
pub fn serialize_wkt(shape: &Shape) -> String {
    let mut out = String::new();
    match shape {
        Shape::Point(p) => {
            let _ = write!(out, "POINT ({} {})", p.lon, p.lat);
        }
        Shape::LineString(v) => {
            out.push_str("LINESTRING ");
            write_coords(&mut out, v);
        }
        Shape::Polygon(p) => {
            out.push_str("POLYGON ");
            write_polygon(&mut out, p);
        }
        Shape::MultiPolygon(ps) => {
            out.push_str("MULTIPOLYGON (");
            for (i, p) in ps.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_polygon(&mut out, p);
            }
            out.push(')');
        }
    }
    out
}
