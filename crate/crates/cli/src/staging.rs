//! Artifacts are written under a `.partial` suffix and renamed only once
//! the whole run has succeeded.

use std::path::{Path, PathBuf};

use ptdiff_core::Result;

pub struct Staging {
    dir: PathBuf,
    pending: Vec<PathBuf>,
}

impl Staging {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            pending: Vec::new(),
        })
    }

    /// Path to write `name` to before commit.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let final_path = self.dir.join(name);
        let partial = partial_of(&final_path);
        self.pending.push(final_path);
        partial
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn commit(self) -> Result<()> {
        for target in &self.pending {
            let partial = partial_of(target);
            if target.is_dir() {
                std::fs::remove_dir_all(target)?;
            }
            std::fs::rename(&partial, target)?;
        }
        Ok(())
    }
}

fn partial_of(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .expect("artifact has a name")
        .to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_renames_and_drop_leaves_partials() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Staging::new(dir.path()).unwrap();
        s.write("a.json", "{}").unwrap();
        assert!(dir.path().join("a.json.partial").exists());
        s.commit().unwrap();
        assert!(dir.path().join("a.json").exists());
        assert!(!dir.path().join("a.json.partial").exists());

        let mut s = Staging::new(dir.path()).unwrap();
        s.write("b.json", "{}").unwrap();
        drop(s);
        assert!(dir.path().join("b.json.partial").exists());
        assert!(!dir.path().join("b.json").exists());
    }
}
