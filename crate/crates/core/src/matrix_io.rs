//! Plain-text matrix files shared by every on-disk artifact.
//!
//! A matrix file is zero or more `#` comment lines, a header line
//! `rows cols rate`, then `rows` lines of `cols` whitespace-separated decimal
//! numbers. Values are written with 17 significant digits so a save/load
//! cycle reproduces every `f64` bit-exactly. The `rate` field carries the
//! sample rate for trials and is `0` where it has no meaning.
//!
//! A bundle concatenates several named matrices in one file, each introduced
//! by an `@ name` line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TextMatrix {
    pub data: DMatrix<f64>,
    pub rate: f64,
    pub comments: Vec<String>,
}

impl TextMatrix {
    pub fn new(data: DMatrix<f64>, rate: f64) -> Self {
        Self {
            data,
            rate,
            comments: Vec::new(),
        }
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comments.push(comment.into());
        self
    }
}

fn push_value(out: &mut String, v: f64) {
    // {:.16e} gives 17 significant digits, enough for an exact round trip.
    let _ = write!(out, "{v:.16e}");
}

fn push_body(out: &mut String, m: &DMatrix<f64>, rate: f64) {
    let _ = writeln!(out, "{} {} {}", m.nrows(), m.ncols(), rate);
    if m.ncols() == 0 {
        return;
    }
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(' ');
            }
            push_value(out, m[(r, c)]);
        }
        out.push('\n');
    }
}

pub fn format_matrix(m: &TextMatrix) -> String {
    let mut out = String::new();
    for c in &m.comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    push_body(&mut out, &m.data, m.rate);
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: &'a Path,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
            path,
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn last_line(&mut self) -> usize {
        self.inner.peek().map(|(i, _)| i + 1).unwrap_or(0)
    }

    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            if !l.trim().is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }

    fn comments(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        while let Some((_, l)) = self.inner.peek() {
            let t = l.trim();
            if t.is_empty() {
                self.inner.next();
            } else if let Some(rest) = t.strip_prefix('#') {
                out.push(rest.trim().to_string());
                self.inner.next();
            } else {
                break;
            }
        }
        out
    }

    fn body(&mut self) -> Result<(DMatrix<f64>, f64)> {
        let (line_no, header) = self
            .next_content()
            .ok_or_else(|| self.err(0, "missing `rows cols rate` header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(self.err(line_no, "header must be `rows cols rate`"));
        }
        let rows: usize = fields[0]
            .parse()
            .map_err(|_| self.err(line_no, format!("bad row count `{}`", fields[0])))?;
        let cols: usize = fields[1]
            .parse()
            .map_err(|_| self.err(line_no, format!("bad column count `{}`", fields[1])))?;
        let rate: f64 = fields[2]
            .parse()
            .map_err(|_| self.err(line_no, format!("bad rate `{}`", fields[2])))?;

        let mut m = DMatrix::zeros(rows, cols);
        if cols == 0 {
            return Ok((m, rate));
        }
        for r in 0..rows {
            let Some((ln, line)) = self.next_content() else {
                let at = self.last_line();
                return Err(self.err(at, format!("expected {rows} rows, found {r}")));
            };
            let mut n = 0;
            for tok in line.split_whitespace() {
                if n >= cols {
                    return Err(self.err(ln, format!("row has more than {cols} values")));
                }
                m[(r, n)] = tok.parse().map_err(|_| self.err(ln, format!("bad number `{tok}`")))?;
                n += 1;
            }
            if n != cols {
                return Err(self.err(ln, format!("expected {cols} values, found {n}")));
            }
        }
        Ok((m, rate))
    }
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<TextMatrix> {
    let mut lines = Lines::new(text, path);
    let comments = lines.comments();
    let (data, rate) = lines.body()?;
    if let Some((ln, _)) = lines.next_content() {
        return Err(lines.err(ln, "trailing content after matrix"));
    }
    Ok(TextMatrix { data, rate, comments })
}

pub fn save_matrix(path: &Path, m: &TextMatrix) -> Result<()> {
    fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<TextMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

/// An ordered collection of named matrices stored in a single file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixBundle {
    pub entries: Vec<(String, DMatrix<f64>)>,
}

impl MatrixBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: DMatrix<f64>) {
        self.entries.push((name.into(), m));
    }

    pub fn push_row(&mut self, name: impl Into<String>, values: &[f64]) {
        self.push(name, DMatrix::from_row_slice(1, values.len(), values));
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::ShapeMismatch(format!("bundle has no matrix `{name}`")))
    }

    pub fn row(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.get(name)?;
        if m.nrows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` should be a single row, has {} rows",
                m.nrows()
            )));
        }
        Ok(m.iter().copied().collect())
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for (name, m) in &self.entries {
            let _ = writeln!(out, "@ {name}");
            push_body(&mut out, m, 0.0);
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = Lines::new(text, path);
        let mut bundle = MatrixBundle::new();
        lines.comments();
        while let Some((ln, line)) = lines.next_content() {
            let name = line
                .trim()
                .strip_prefix('@')
                .ok_or_else(|| lines.err(ln, "expected `@ name` entry marker"))?
                .trim()
                .to_string();
            let (m, _) = lines.body()?;
            bundle.entries.push((name, m));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.format()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
