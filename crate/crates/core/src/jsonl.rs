//! JSON-lines reading and writing. UTF-8, LF line endings, one object per
//! line.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{CctError, Result};

/// Parses every non-blank line; a malformed line aborts with its 1-based
/// line number.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| CctError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| CctError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample_builder::InstructionSample;

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"instruction\":\"a\",\"input\":null,\"output\":\"b\"}\n\n{oops\n",
        )
        .unwrap();
        let err = read::<InstructionSample>(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/d.jsonl");
        let items = vec![InstructionSample::new("i", "o")];
        write(&p, &items).unwrap();
        assert_eq!(read::<InstructionSample>(&p).unwrap(), items);
    }
}
