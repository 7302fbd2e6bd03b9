//! Files under the output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Failure;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| Failure::Config(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through a buffered writer handed to `fill`.
    pub fn write<F>(&self, name: &str, fill: F) -> Result<PathBuf, Failure>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), Failure>,
    {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        fill(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Failure::Numerical(std::io::Error::from(e).into()))?;
            writeln!(w)?;
            Ok(())
        })
    }
}

/// Formats alpha for file names: `0.05` becomes `0p05`.
pub fn tag(alpha: f64) -> String {
    format!("{alpha}").replace('.', "p").replace('-', "m")
}

#[cfg(test)]
mod tests {
    use super::tag;

    #[test]
    fn alpha_tags_are_file_safe() {
        assert_eq!(tag(0.05), "0p05");
        assert_eq!(tag(1.0), "1");
        assert_eq!(tag(-0.5), "m0p5");
    }
}
