//! CSV and JSON emitters. Every file starts with a comment block carrying
//! the fully resolved experiment description so runs are reproducible from
//! the output alone.

use std::io::Write;
use std::path::Path;

/// Formats one float with shortest round-trip precision; infinities render
/// as `inf` so downstream tools can spot blind cells.
pub fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Writes a CSV with `# `-prefixed header lines, a column-name row, and the
/// given data rows.
pub fn write_csv(
    path: &Path,
    header_lines: &[String],
    columns: &[&str],
    rows: &[Vec<String>],
) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header_lines {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "{}", columns.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()
}

/// Serializes a value as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// One-line JSON rendering of the resolved experiment for header blocks.
pub fn spec_line<T: serde::Serialize>(label: &str, value: &T) -> String {
    format!(
        "{label}: {}",
        serde_json::to_string(value).unwrap_or_else(|_| "<unserializable>".into())
    )
}

/// Reads a CSV written by [`write_csv`]: returns `(columns, rows)`.
pub fn read_csv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("empty csv"))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((columns, rows))
}
