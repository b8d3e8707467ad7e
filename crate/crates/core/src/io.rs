//! Small filesystem helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes to a sibling temporary file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `name` into `dir` listing `path,bytes,sha256` for every produced
/// file (paths relative to `dir` when possible).
pub fn write_manifest(dir: &Path, name: &str, files: &[std::path::PathBuf]) -> Result<std::path::PathBuf> {
    use sha2::{Digest, Sha256};
    let mut text = String::from("path,bytes,sha256\n");
    for f in files {
        let bytes = fs::read(f)?;
        let shown = f.strip_prefix(dir).unwrap_or(f);
        text.push_str(&format!("{},{},{}\n", shown.display(), bytes.len(), crate::model::checkpoint::hex(&Sha256::digest(&bytes))));
    }
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
