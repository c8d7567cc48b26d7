//! Input files and output writers.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use dlm_core::TokenId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One prompt to decode. Task files hold one record per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    pub prompt_tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Response offset where the synthetic script starts predicting EOS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_offset: Option<usize>,
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_with_path<T: DeserializeOwned>(text: &str) -> Result<T, (usize, String)> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let line = e.inner().line();
        let field = e.path().to_string();
        let msg = if field == "." {
            e.inner().to_string()
        } else {
            format!("field `{field}`: {}", e.inner())
        };
        (line, msg)
    })
}

/// Parses a whole JSON file, reporting the failing line and field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    parse_with_path(&text).map_err(|(line, msg)| CliError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

pub fn read_tasks(path: &Path) -> CliResult<Vec<TaskRecord>> {
    let text = read_text(path)?;
    let mut tasks = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let task: TaskRecord = parse_with_path(line).map_err(|(_, msg)| err(msg))?;
        if task.prompt_tokens.is_empty() {
            return Err(err("field `prompt_tokens`: must not be empty".into()));
        }
        if task.id.is_empty() || task.id.contains(['/', '\\']) || task.id.starts_with('.') {
            return Err(err(format!("field `id`: {:?} is not a usable file name", task.id)));
        }
        if !ids.insert(task.id.clone()) {
            return Err(err(format!("field `id`: duplicate id {:?}", task.id)));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no tasks".into(),
        });
    }
    Ok(tasks)
}

/// Output directory of one invocation.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, contents: &[u8]) -> CliResult<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serialisable output");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::io(&self.path(rel), e.into()))?;
        }
        let bytes = w.into_inner().expect("in-memory writer");
        self.write(rel, &bytes)
    }

    /// CSV from explicit header and string rows.
    pub fn write_table(&self, rel: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let path = self.path(rel);
        w.write_record(header).map_err(|e| CliError::io(&path, e.into()))?;
        for r in rows {
            w.write_record(r).map_err(|e| CliError::io(&path, e.into()))?;
        }
        let bytes = w.into_inner().expect("in-memory writer");
        self.write(rel, &bytes)
    }
}
