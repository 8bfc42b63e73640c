//! Output locations that appear all at once or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, Result};

/// A directory built under a temporary sibling name and renamed into place by
/// [`StagedDir::commit`]. Dropping it uncommitted removes the partial contents.
pub struct StagedDir {
    target: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl StagedDir {
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a directory name", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        Ok(StagedDir { target: target.to_path_buf(), tmp, committed: false })
    }

    /// Where files go until the commit.
    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            let r = if self.target.is_dir() { fs::remove_dir_all(&self.target) } else { fs::remove_file(&self.target) };
            r.map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_file(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".partial-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staging_is_all_or_nothing() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        {
            let staged = StagedDir::create(&target, false).unwrap();
            fs::write(staged.path().join("a"), "x").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);

        let staged = StagedDir::create(&target, false).unwrap();
        fs::write(staged.path().join("a"), "x").unwrap();
        staged.commit().unwrap();
        assert!(target.join("a").exists());

        assert!(matches!(StagedDir::create(&target, false), Err(CliError::Usage(_))));
        let staged = StagedDir::create(&target, true).unwrap();
        fs::write(staged.path().join("b"), "y").unwrap();
        staged.commit().unwrap();
        assert!(!target.join("a").exists() && target.join("b").exists());
    }
}
