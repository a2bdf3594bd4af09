//! Shared helpers for the line-oriented text artifacts (models, fitted
//! transforms, aggregates).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any
/// `f64` exactly.
pub fn f64_17(x: f64) -> String {
    format!("{:.16e}", x)
}

pub(crate) fn parse_f64(what: &'static str, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(what, line, format!("bad number `{tok}`")))
}

pub(crate) fn parse_usize(what: &'static str, line: usize, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(what, line, format!("bad integer `{tok}`")))
}

/// Names may contain spaces or `=`; they are written percent-escaped so every
/// record stays whitespace-tokenizable.
pub(crate) fn escape_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for ch in name.chars() {
        match ch {
            '%' => out.push_str("%25"),
            ' ' => out.push_str("%20"),
            '\t' => out.push_str("%09"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            c => out.push(c),
        }
    }
    if out.is_empty() {
        out.push_str("%00");
    }
    out
}

pub(crate) fn unescape_name(tok: &str) -> String {
    if tok == "%00" {
        return String::new();
    }
    tok.replace("%20", " ")
        .replace("%09", "\t")
        .replace("%0A", "\n")
        .replace("%0D", "\r")
        .replace("%25", "%")
}

/// Iterator over non-empty, non-comment lines split into whitespace tokens,
/// carrying 1-based line numbers for error messages.
pub(crate) struct Records<'a> {
    what: &'static str,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Records<'a> {
    pub(crate) fn new(what: &'static str, text: &'a str) -> Self {
        Records {
            what,
            lines: text.lines().enumerate(),
        }
    }

    pub(crate) fn next_record(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, line) in self.lines.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Some((i + 1, line.split_whitespace().collect()));
        }
        None
    }

    /// Next record, which must start with `key` and have exactly `arity`
    /// tokens after it.
    pub(crate) fn expect(&mut self, key: &str, arity: usize) -> Result<(usize, Vec<&'a str>)> {
        let (line, toks) = self
            .next_record()
            .ok_or_else(|| Error::parse(self.what, 0, format!("unexpected end, wanted `{key}`")))?;
        if toks[0] != key || toks.len() != arity + 1 {
            return Err(Error::parse(
                self.what,
                line,
                format!("expected `{key}` with {arity} fields"),
            ));
        }
        Ok((line, toks[1..].to_vec()))
    }

    pub(crate) fn what(&self) -> &'static str {
        self.what
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.12345679, f64::MIN_POSITIVE] {
            let s = f64_17(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn names_escape() {
        for name in ["a b", "x=1", "100%", "", "tab\tname"] {
            let e = escape_name(name);
            assert!(!e.contains(char::is_whitespace));
            assert_eq!(unescape_name(&e), name);
        }
    }
}
