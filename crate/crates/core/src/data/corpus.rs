use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reads two line-aligned UTF-8 files into sentence pairs.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Writes one sentence per line, newline-terminated.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes pairs to two aligned files.
pub fn write_parallel(src: &Path, tgt: &Path, pairs: &[(String, String)]) -> Result<()> {
    let (s, t): (Vec<&str>, Vec<&str>) = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).unzip();
    write_lines(src, &s)?;
    write_lines(tgt, &t)
}
