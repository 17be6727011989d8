//! Layered settings (defaults, then a JSON file, then flags) and the files
//! every run directory carries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .collect::<Map<_, _>>(),
        ),
        other => other,
    }
}

/// Resolve `T` from its defaults, the optional config file and the flags.
///
/// The file may hold a top-level object per section; every object-valued
/// default key (e.g. `analytic`) also picks up a top-level section of the
/// same name, and the command section (`command`) is applied last.
pub fn resolve<T, F>(command: &str, file: Option<&Path>, flags: &F) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut v = serde_json::to_value(T::default()).map_err(CliError::internal)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        let cfg: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        if !cfg.is_object() {
            return Err(CliError::validation(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        }
        let keys: Vec<String> = v
            .as_object()
            .map(|m| m.iter().filter(|(_, x)| x.is_object()).map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        for k in keys {
            if let Some(section) = cfg.get(&k).filter(|s| s.is_object()) {
                merge(&mut v[k.as_str()], section);
            }
        }
        if let Some(section) = cfg.get(command) {
            if !section.is_object() {
                return Err(CliError::validation(format!("config section {command} must be an object")));
            }
            merge(&mut v, section);
        }
    }
    let flags = strip_nulls(serde_json::to_value(flags).map_err(CliError::internal)?);
    merge(&mut v, &flags);
    serde_json::from_value(v).map_err(|e| CliError::validation(format!("{command} settings: {e}")))
}

/// `resolved_config.json`: tool version, command and the resolved settings.
pub fn write_resolved<T: Serialize>(dir: &Path, command: &str, settings: &T) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let doc = json!({
        "tool": "minkgeo",
        "version": VERSION,
        "command": command,
        "settings": settings,
    });
    fs::write(
        dir.join("resolved_config.json"),
        serde_json::to_vec_pretty(&doc).map_err(CliError::internal)?,
    )?;
    Ok(())
}

fn collect(dir: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in fs::read_dir(dir.join(rel))? {
        let e = e?;
        let r = rel.join(e.file_name());
        if e.file_type()?.is_dir() {
            collect(dir, &r, out)?;
        } else {
            out.push(r);
        }
    }
    Ok(())
}

/// `manifest.json` listing every other file under `dir` with its SHA-256.
pub fn write_manifest(dir: &Path) -> Result<(), CliError> {
    let mut files = Vec::new();
    collect(dir, Path::new(""), &mut files)?;
    files.retain(|f| f != Path::new("manifest.json"));
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(dir.join(&f))?;
        entries.push(json!({
            "file": f.to_string_lossy().replace('\\', "/"),
            "bytes": bytes.len(),
            "sha256": hex::encode(Sha256::digest(&bytes)),
        }));
    }
    let doc = json!({ "tool": "minkgeo", "version": VERSION, "files": entries });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&doc).map_err(CliError::internal)?,
    )?;
    Ok(())
}
