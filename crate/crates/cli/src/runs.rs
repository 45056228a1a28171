//! Run-directory layout: every artifact lands under a directory named by
//! the config digest and the experiment seed, so identical settings map to
//! the same location and different settings can never collide.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "VITAL_OUTPUT_ROOT";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Resolves the run directory. Precedence for the root: `--output`
    /// flag, then the environment variable, then the config, then `runs/`.
    pub fn resolve(cfg: &RunConfig, flag_output: Option<&Path>) -> Result<Self, CliError> {
        let root = match flag_output {
            Some(p) => p.to_path_buf(),
            None => match std::env::var_os(OUTPUT_ROOT_ENV) {
                Some(v) => PathBuf::from(v),
                None => cfg.output_root.clone().unwrap_or_else(|| PathBuf::from("runs")),
            },
        };
        let dir = root.join(format!("{}-s{}", cfg.digest()?, cfg.seed));
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { path: dir })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Refuses to clobber an existing artifact unless `--force` was given.
    pub fn guard(&self, name: &str, force: bool) -> Result<PathBuf, CliError> {
        let path = self.file(name);
        if path.exists() && !force {
            return Err(CliError::Validation(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(path)
    }

    /// Writes the canonical config echo so the run is self-describing.
    pub fn echo_config(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let body = cfg.canonical_json()?;
        let path = self.file("config.json");
        fs::write(&path, body)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_config_maps_to_same_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let a = RunDir::resolve(&cfg, Some(tmp.path())).unwrap();
        let b = RunDir::resolve(&cfg, Some(tmp.path())).unwrap();
        assert_eq!(a.path, b.path);
    }

    #[test]
    fn guard_blocks_existing_files_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let run = RunDir::resolve(&cfg, Some(tmp.path())).unwrap();
        fs::write(run.file("x.json"), b"{}").unwrap();
        assert!(run.guard("x.json", false).is_err());
        assert!(run.guard("x.json", true).is_ok());
        assert!(run.guard("y.json", false).is_ok());
    }
}
