//! Output-directory discipline: every file lands under one root, writes are
//! atomic (temp file + rename) and existing files are only replaced when
//! forced.

use std::io::Write;
use std::path::{Component, Path, PathBuf};

use crate::error::{Error, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
    force: bool,
}

impl OutputDir {
    /// Creates the root if missing.
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root, force })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn force(&self) -> bool {
        self.force
    }

    /// Resolves a relative path under the root, rejecting escapes.
    pub fn resolve(&self, relative: impl AsRef<Path>) -> Result<PathBuf> {
        let relative = relative.as_ref();
        let escapes = relative.is_absolute()
            || relative.components().any(|c| {
                matches!(
                    c,
                    Component::ParentDir | Component::Prefix(_) | Component::RootDir
                )
            });
        if escapes {
            return Err(Error::OutsideOutput(relative.to_path_buf()));
        }
        Ok(self.root.join(relative))
    }

    /// Writes `bytes` to `relative`, refusing to replace an existing file
    /// unless forced.
    pub fn write(&self, relative: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.resolve(relative)?;
        if path.exists() && !self.force {
            return Err(Error::Clobber(path));
        }
        write_atomic(&path, bytes)?;
        Ok(path)
    }
}
