use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Frame, Point, Sequence};
use crate::error::{Error, Result};

pub const HEADER: &str = "ESPPCT-SEQ v1";

/// Canonical text form. Floats use the shortest representation that parses
/// back to the identical bit pattern.
pub fn render_sequence(seq: &Sequence) -> Result<String> {
    seq.validate()?;
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for f in &seq.frames {
        writeln!(out, "F {} {}", f.timestamp_index, f.points.len()).expect("string write");
        for p in &f.points {
            writeln!(
                out,
                "{} {} {} {} {}",
                p.x, p.y, p.z, p.velocity, p.intensity
            )
            .expect("string write");
        }
    }
    for (k, v) in &seq.meta {
        writeln!(out, "M {k}={v}").expect("string write");
    }
    if let Some(label) = seq.label {
        writeln!(out, "L {label}").expect("string write");
    }
    Ok(out)
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_field(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("line {line}: {tok}")));
    }
    Ok(v)
}

pub fn parse_sequence(text: &str) -> Result<Sequence> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        Some((n, h)) => return Err(parse_err(n, format!("expected header {HEADER:?}, got {h:?}"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut seq = Sequence::default();
    while let Some((n, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "F" => {
                let mut it = rest.split_whitespace();
                let ts: u64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(n, "bad frame timestamp"))?;
                let count: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(n, "bad point count"))?;
                if it.next().is_some() {
                    return Err(parse_err(n, "trailing tokens on frame line"));
                }
                let mut points = Vec::with_capacity(count);
                for _ in 0..count {
                    let (pn, pl) = lines
                        .next()
                        .ok_or_else(|| parse_err(n, "file ends inside a frame"))?;
                    let toks: Vec<&str> = pl.split_whitespace().collect();
                    if toks.len() != 5 {
                        return Err(parse_err(pn, format!("expected 5 fields, got {}", toks.len())));
                    }
                    let mut v = [0.0; 5];
                    for (slot, tok) in v.iter_mut().zip(&toks) {
                        *slot = parse_field(tok, pn)?;
                    }
                    let p = Point::new(v[0], v[1], v[2], v[3], v[4]);
                    if p.intensity < 0.0 {
                        return Err(parse_err(pn, "negative intensity"));
                    }
                    points.push(p);
                }
                if let Some(prev) = seq.frames.last() {
                    if ts <= prev.timestamp_index {
                        return Err(parse_err(
                            n,
                            format!("timestamp {ts} does not increase past {}", prev.timestamp_index),
                        ));
                    }
                }
                seq.frames.push(Frame::new(ts, points));
            }
            "M" => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| parse_err(n, "meta line without '='"))?;
                if k.is_empty() {
                    return Err(parse_err(n, "empty meta key"));
                }
                seq.meta.insert(k.to_string(), v.to_string());
            }
            "L" => {
                let label = rest
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad label {rest:?}")))?;
                seq.label = Some(label);
            }
            other => return Err(parse_err(n, format!("unknown record tag {other:?}"))),
        }
    }
    seq.validate()?;
    Ok(seq)
}

pub fn read_sequence(reader: impl std::io::Read) -> Result<Sequence> {
    let mut text = String::new();
    let mut reader = reader;
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<reader>", e))?;
    parse_sequence(&text)
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<Sequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence(&text)
}

pub fn write_sequence(seq: &Sequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render_sequence(seq)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
