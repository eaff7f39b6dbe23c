//! Task files: one JSON header line followed by one example per line.
//! A directory of task files carries a `manifest.json` listing them.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset};
use crate::error::{Error, Result};

pub const TASK_FORMAT_VERSION: u32 = 1;
const TASK_FORMAT: &str = "metametric-task";
const MANIFEST_FORMAT: &str = "metametric-tasks";
pub const MANIFEST_FILE: &str = "manifest.json";

/// What produced a set of files: the resolved configuration hash and seed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task_id: String,
    feature_dim: usize,
    group: Option<usize>,
    config_hash: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    task_id: String,
    file: String,
    group: Option<usize>,
    n_classes: usize,
    n_examples: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config_hash: String,
    seed: u64,
    tasks: Vec<ManifestEntry>,
}

/// Writes through a temporary sibling file and renames it into place.
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

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

pub fn write_task_file(path: &Path, task: &TaskDataset, prov: &Provenance) -> Result<()> {
    task.validate()?;
    let header = Header {
        format: TASK_FORMAT.into(),
        version: TASK_FORMAT_VERSION,
        task_id: task.task_id.clone(),
        feature_dim: task.feature_dim,
        group: task.group,
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
    };
    let mut out = to_json(&header);
    out.push('\n');
    for ex in task.examples() {
        if ex.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("example {} has a non-finite feature", ex.id)));
        }
        out.push_str(&to_json(ex));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_task_file(path: &Path) -> Result<TaskDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.format != TASK_FORMAT {
        return Err(parse_err(1, format!("unexpected format {:?}", header.format)));
    }
    if header.version != TASK_FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header.version)));
    }
    let mut task = TaskDataset::new(header.task_id, header.feature_dim);
    task.group = header.group;
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if ex.features.len() != task.feature_dim {
            return Err(parse_err(
                i + 1,
                format!(
                    "example {} has {} features, header declares {}",
                    ex.id,
                    ex.features.len(),
                    task.feature_dim
                ),
            ));
        }
        if ex.task_id != task.task_id {
            return Err(parse_err(i + 1, format!("example {} belongs to task {}", ex.id, ex.task_id)));
        }
        task.classes.entry(ex.class_id.clone()).or_default().push(ex);
    }
    Ok(task)
}

fn task_file_name(task_id: &str) -> String {
    format!("{}.jsonl", task_id.replace(['/', '\\'], "_"))
}

pub fn save_tasks(tasks: &[TaskDataset], dir: &Path, prov: &Provenance) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tasks.len());
    for task in tasks {
        let file = task_file_name(&task.task_id);
        write_task_file(&dir.join(&file), task, prov)?;
        entries.push(ManifestEntry {
            task_id: task.task_id.clone(),
            file,
            group: task.group,
            n_classes: task.n_classes(),
            n_examples: task.n_examples(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: TASK_FORMAT_VERSION,
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        tasks: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("plain data serializes");
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Loads the tasks listed in `dir/manifest.json`, in manifest order.
pub fn load_tasks(dir: &Path) -> Result<Vec<TaskDataset>> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != TASK_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{} is not a version {TASK_FORMAT_VERSION} task manifest",
            manifest_path.display()
        )));
    }
    manifest
        .tasks
        .iter()
        .map(|entry| {
            let task = read_task_file(&dir.join(&entry.file))?;
            if task.task_id != entry.task_id {
                return Err(Error::Data(format!(
                    "{} holds task {}, manifest expects {}",
                    entry.file, task.task_id, entry.task_id
                )));
            }
            Ok(task)
        })
        .collect()
}
