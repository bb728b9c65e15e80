//! Run orchestration for the command-line tool: multi-seed training with a
//! manifest, and aggregation of metrics files into plot-ready curves.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_config, Mode, TrainerConfig};
use crate::error::{Error, Result};
use crate::trainer::{fan_out_seed, read_metrics, run_dir, train_to_dir};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "message")]
pub enum RunStatus {
    Pending,
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub directory: PathBuf,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainerConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunEntry>,
}

/// `<crate version>-g<lineage hash prefix>`.
pub fn version_string(config: &TrainerConfig) -> String {
    format!(
        "{}-g{:07x}",
        env!("CARGO_PKG_VERSION"),
        config.lineage_hash() >> 36
    )
}

/// Seeds of a study: `count` runs fanned out from the configured seed.
pub fn study_seeds(config: &TrainerConfig, count: usize) -> Vec<u64> {
    (0..count).map(|i| fan_out_seed(config.seed, i)).collect()
}

impl RunManifest {
    pub fn new(config: &TrainerConfig, seeds: &[u64], out: &Path) -> Self {
        let runs = seeds
            .iter()
            .map(|&seed| {
                let mut c = config.clone();
                c.seed = seed;
                RunEntry {
                    seed,
                    directory: run_dir(out, &c),
                    status: RunStatus::Pending,
                }
            })
            .collect();
        Self {
            version: version_string(config),
            config: config.clone(),
            seeds: seeds.to_vec(),
            runs,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn failures(&self) -> Vec<(u64, &str)> {
        self.runs
            .iter()
            .filter_map(|r| match &r.status {
                RunStatus::Failed(m) => Some((r.seed, m.as_str())),
                _ => None,
            })
            .collect()
    }
}

/// Trains one run per seed under `out`, keeping `out/manifest.json` current.
/// A failing run is recorded and the remaining seeds still run.
pub fn train_seeds(config: &TrainerConfig, seeds: &[u64], out: &Path) -> Result<RunManifest> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::new(config, seeds, out);
    manifest.save(&manifest_path)?;
    for i in 0..manifest.runs.len() {
        let mut c = config.clone();
        c.seed = manifest.runs[i].seed;
        let dir = manifest.runs[i].directory.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join(RUN_CONFIG_FILE);
        fs::write(&cfg_path, c.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        manifest.runs[i].status = match train_to_dir(&c, &dir) {
            Ok(_) => RunStatus::Completed,
            Err(e) => RunStatus::Failed(e.to_string()),
        };
        manifest.save(&manifest_path)?;
    }
    Ok(manifest)
}

/// One row of an exported curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: String,
    pub env_steps: usize,
    pub mean_return: f64,
    /// Population standard deviation across seeds.
    pub std_return: f64,
    pub seeds: usize,
}

/// Mode label of a metrics file, read from the run config stored next to it.
fn mode_of(path: &Path) -> String {
    path.parent()
        .map(|d| d.join(RUN_CONFIG_FILE))
        .filter(|p| p.exists())
        .and_then(|p| parse_config(&p).ok())
        .map(|c| c.mode.as_str().to_string())
        .unwrap_or_else(|| "unlabeled".to_string())
}

/// Mean and spread of `mean_episode_return` across seeds at each step, per
/// mode. Files of one mode must share the same step grid.
pub fn aggregate_curves(paths: &[PathBuf]) -> Result<Vec<CurvePoint>> {
    if paths.is_empty() {
        return Err(Error::Usage("export needs at least one metrics file".into()));
    }
    let mut groups: BTreeMap<String, Vec<(PathBuf, Vec<(usize, f64)>)>> = BTreeMap::new();
    for p in paths {
        let rows = read_metrics(p)?;
        if rows.is_empty() {
            return Err(Error::Alignment(format!("{} has no rows", p.display())));
        }
        let series = rows.iter().map(|r| (r.env_steps, r.mean_episode_return)).collect();
        groups.entry(mode_of(p)).or_default().push((p.clone(), series));
    }
    let mut out = Vec::new();
    for (mode, runs) in groups {
        let (first_path, first) = &runs[0];
        for (path, series) in &runs[1..] {
            let same = series.len() == first.len() && series.iter().zip(first).all(|(a, b)| a.0 == b.0);
            if !same {
                return Err(Error::Alignment(format!(
                    "{} and {} have different step grids",
                    first_path.display(),
                    path.display()
                )));
            }
        }
        for (i, &(step, _)) in first.iter().enumerate() {
            let values: Vec<f64> = runs.iter().map(|(_, s)| s[i].1).collect();
            let (mean, std) = crate::gae::mean_std(&values);
            out.push(CurvePoint {
                mode: mode.clone(),
                env_steps: step,
                mean_return: mean,
                std_return: std,
                seeds: values.len(),
            });
        }
    }
    Ok(out)
}

pub fn export_curves(paths: &[PathBuf], out: &Path) -> Result<Vec<CurvePoint>> {
    let points = aggregate_curves(paths)?;
    let mut w = csv::Writer::from_path(out)?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(points)
}

/// Parses `--seeds`: either a run count (`5`) or an explicit list (`3,7,11`).
pub fn parse_seeds(spec: &str, config: &TrainerConfig) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if spec.contains(',') {
        spec.split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::config("seeds", format!("{s:?} is not a seed")))
            })
            .collect()
    } else {
        let n: usize = spec
            .parse()
            .map_err(|_| Error::config("seeds", "a run count or a comma-separated seed list"))?;
        if n == 0 {
            return Err(Error::config("seeds", "must request at least one run"));
        }
        Ok(study_seeds(config, n))
    }
}

/// Applies a command-line mode override.
pub fn with_mode(config: &TrainerConfig, mode: Option<Mode>) -> TrainerConfig {
    let mut c = config.clone();
    if let Some(m) = mode {
        c.mode = m;
    }
    c
}
