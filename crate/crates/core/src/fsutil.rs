//! Atomic file writes: outputs are either complete or absent, never torn.

use crate::error::{Error, Result};
use std::path::Path;

/// Write bytes to a sibling temp file, then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let named = |e| Error::io(path.display().to_string(), e);
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new(),
    }
    .map_err(named)?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(named)?;
    tmp.persist(path)
        .map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}
