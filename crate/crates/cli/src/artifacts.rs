//! Run-config dumps and the digest each output file carries.

use std::fs;
use std::path::{Path, PathBuf};

use idu_core::checkpoint::load_checkpoint;
use idu_core::digest::json_digest;
use idu_core::forest::FeatureManifest;
use idu_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

pub const DIGEST_KEY: &str = "run_config_digest";

/// Fully resolved invocation; its digest is embedded in every output.
#[derive(Serialize)]
pub struct RunConfig<'a> {
    pub command: &'a str,
    pub config_file: Option<&'a Path>,
    pub args: &'a crate::args::Command,
}

impl RunConfig<'_> {
    /// Digest of the key-sorted JSON form, so it can be re-derived from the dump.
    pub fn digest(&self) -> String {
        json_digest(&serde_json::to_value(self).expect("serializable run config"))
    }
}

pub fn run_config_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("run_config.{command}.json"))
}

/// Writes `run_config.<command>.json`; `outputs` lists sibling files
/// produced under this digest.
pub fn dump_run_config(dir: &Path, run: &RunConfig, outputs: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = json!({
        "digest": run.digest(),
        "run": serde_json::to_value(run)?,
        "outputs": outputs,
    });
    write(&run_config_path(dir, run.command), &serde_json::to_string_pretty(&v)?)
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `# run_config_digest=<d>` comment line prefixed to a text body.
pub fn with_digest_line(digest: &str, body: &str) -> String {
    format!("# {DIGEST_KEY}={digest}\n{body}")
}

pub fn strip_digest_line(text: &str) -> &str {
    match text.split_once('\n') {
        Some((first, rest)) if first.starts_with(&format!("# {DIGEST_KEY}=")) => rest,
        _ => text,
    }
}

/// The run-config digest recorded inside an output file.
pub fn embedded_digest(path: &Path) -> Result<String> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".ckpt") {
        return Ok(load_checkpoint(path)?.1.run_config_digest);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if name.ends_with(".json") {
        let v: Value = serde_json::from_str(&text)?;
        return v
            .get(DIGEST_KEY)
            .or_else(|| v.get("config_digest"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("{}: no {DIGEST_KEY} field", path.display())));
    }
    let prefix = format!("# {DIGEST_KEY}=");
    text.lines()
        .take(4)
        .find_map(|l| l.strip_prefix(&prefix))
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("{}: no {DIGEST_KEY} line", path.display())))
}

#[derive(Debug, Default)]
pub struct VerifyReport {
    pub checked: Vec<String>,
    pub problems: Vec<String>,
}

/// Re-derives every run-config digest in `dir` and compares it with what
/// the listed outputs carry. Checkpoints are also checked against the
/// feature manifest beside them.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport> {
    let mut rep = VerifyReport::default();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let configs: Vec<&PathBuf> = entries
        .iter()
        .filter(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            n.starts_with("run_config.") && n.ends_with(".json")
        })
        .collect();
    if configs.is_empty() {
        return Err(Error::Data(format!("{}: no run_config.*.json files", dir.display())));
    }
    for cfg in configs {
        let text = fs::read_to_string(cfg).map_err(|e| Error::io(cfg, e))?;
        let v: Value = serde_json::from_str(&text)?;
        let name = cfg.file_name().unwrap().to_string_lossy().to_string();
        let recorded = v.get("digest").and_then(Value::as_str).unwrap_or_default();
        let run = v.get("run").cloned().unwrap_or(Value::Null);
        let derived = json_digest(&run);
        if derived != recorded {
            rep.problems.push(format!("{name}: recorded digest {recorded}, re-derived {derived}"));
            continue;
        }
        rep.checked.push(name);
        for out in v.get("outputs").and_then(Value::as_array).into_iter().flatten() {
            let Some(out) = out.as_str() else { continue };
            match embedded_digest(&dir.join(out)) {
                Ok(d) if d == recorded => rep.checked.push(out.to_string()),
                Ok(d) => rep.problems.push(format!("{out}: carries {d}, expected {recorded}")),
                Err(e) => rep.problems.push(format!("{out}: {e}")),
            }
        }
    }
    let (ckpt, feats) = (dir.join("model.ckpt"), dir.join("features.txt"));
    if ckpt.is_file() && feats.is_file() {
        match (load_checkpoint(&ckpt), FeatureManifest::read(&feats)) {
            (Ok((_, meta)), Ok(m)) if meta.feature_digest != m.digest() => rep.problems.push(format!(
                "model.ckpt: feature digest {} does not match features.txt {}",
                meta.feature_digest,
                m.digest()
            )),
            (Err(e), _) | (_, Err(e)) => rep.problems.push(e.to_string()),
            _ => {}
        }
    }
    Ok(rep)
}
