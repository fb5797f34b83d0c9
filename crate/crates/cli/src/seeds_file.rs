//! Seed lists on disk.
//!
//! Accepted forms: a JSON array of `[x, y, z]` triples, a JSON object with a
//! `positions` array (the layout written by the service), or plain text with
//! one `x,y,z` (or `x y z`) per line and `#` comments.

use std::path::Path;

use faith_core::volume::Position;

#[derive(Debug, thiserror::Error)]
pub enum SeedFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON seed list: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum JsonSeeds {
    List(Vec<Position>),
    Object { positions: Vec<Position> },
}

/// Parses `"x,y,z"` or `"x y z"`.
pub fn parse_position(text: &str) -> Result<Position, String> {
    let parts: Vec<&str> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() != 3 {
        return Err(format!("expected three coordinates, got {text:?}"));
    }
    let mut p = [0usize; 3];
    for (slot, part) in p.iter_mut().zip(parts) {
        *slot = part
            .parse()
            .map_err(|_| format!("coordinate {part:?} is not a nonnegative integer"))?;
    }
    Ok(p)
}

pub fn parse_seeds(text: &str) -> Result<Vec<Position>, SeedFileError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') || trimmed.starts_with('{') {
        return Ok(match serde_json::from_str(trimmed)? {
            JsonSeeds::List(p) | JsonSeeds::Object { positions: p } => p,
        });
    }
    let mut seeds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        seeds.push(
            parse_position(line).map_err(|message| SeedFileError::Line {
                line: i + 1,
                message,
            })?,
        );
    }
    Ok(seeds)
}

pub fn read_seeds(path: &Path) -> Result<Vec<Position>, SeedFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| SeedFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_seeds(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats() {
        let expected = vec![[1, 2, 3], [4, 5, 6]];
        assert_eq!(parse_seeds("[[1,2,3],[4,5,6]]").unwrap(), expected);
        assert_eq!(
            parse_seeds(r#"{"positions": [[1,2,3],[4,5,6]], "env_size": 5}"#).unwrap(),
            expected
        );
        assert_eq!(
            parse_seeds("# seeds\n1,2,3\n\n4 5 6  # last\n").unwrap(),
            expected
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_seeds("1,2,3\n1,2\n"),
            Err(SeedFileError::Line { line: 2, .. })
        ));
        assert!(parse_seeds("1,-2,3").is_err());
        assert!(parse_seeds("[[1,2]]").is_err());
        assert!(parse_position(" 7, 8 ,9").is_ok());
    }
}
