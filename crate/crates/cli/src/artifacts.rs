//! Stage artifacts under the output directory, written atomically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use dupimage::classifier::{DataSplit, SplitSpec};
use dupimage::eval::ConfigName;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CmdResult, Exit, Failure};

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn questions(&self) -> PathBuf {
        self.root.join("questions.jsonl")
    }

    pub fn ingest_report(&self) -> PathBuf {
        self.root.join("ingest.json")
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn images_report(&self) -> PathBuf {
        self.root.join("images.json")
    }

    pub fn features(&self, config: ConfigName) -> PathBuf {
        self.root.join("features").join(format!("{config}.csv"))
    }

    pub fn model(&self, config: ConfigName) -> PathBuf {
        self.root.join("models").join(format!("{config}.json"))
    }

    pub fn rankings(&self, config: ConfigName) -> PathBuf {
        self.root.join("rankings").join(format!("{config}.jsonl"))
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn delta_audit(&self) -> PathBuf {
        self.root.join("delta_audit.csv")
    }
}

/// Fail with a data error naming the missing artifact and the command that
/// produces it.
pub fn require(path: &Path, what: &str, producer: &str) -> CmdResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new(
            Exit::Data,
            anyhow::anyhow!(
                "missing artifact: {what} ({}); run `dupimage {producer}` first",
                path.display()
            ),
        ))
    }
}

/// Write through a temporary sibling file and rename it into place, so
/// readers never observe a partial artifact.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
        Ok::<_, anyhow::Error>(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.context(format!("cannot write {}", path.display())));
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        out.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("invalid JSON in {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub spec: SplitSpec,
    #[serde(flatten)]
    pub split: DataSplit,
}
