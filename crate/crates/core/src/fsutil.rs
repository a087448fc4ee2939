//! Small filesystem helpers shared by checkpointing and corpus writers.

use std::fs;
use std::io;
use std::path::Path;

/// Write a file via a temporary sibling and rename, so interrupted runs never
/// leave partial outputs behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
