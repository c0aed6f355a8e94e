//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use facegraph::blocks::AdjacencyOverride;
use facegraph::networks::Ablation;
use facegraph::patchgraph::{Adjacency, AdjacencyScheme};
use facegraph::trainer::{Task, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Name of the resolved config written next to every command's outputs.
pub const RUN_FILE: &str = "run.toml";

/// Network width preset used before the config file is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Full,
    Toy,
}

/// Flags shared by every subcommand. `None` means "not given".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run config; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Input image directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long, global = true)]
    pub mask_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub scale: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    /// Adjacency text file; its first line picks the patch scale it replaces. Repeatable.
    #[arg(long, global = true)]
    pub adjacency: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: facegraph::Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: facegraph::Error| e.to_string())
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub profile: Profile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjacency: Vec<PathBuf>,
    pub train: TrainConfig,
}

/// Top level of a config file. Everything is optional; `[train]` may be partial.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    profile: Option<Profile>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    adjacency: Vec<PathBuf>,
    train: Option<toml::Table>,
}

/// Overlay `patch` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl RunConfig {
    /// Resolve `flags > file > defaults`. `base` replaces the profile defaults
    /// of the training config, e.g. the config stored in a checkpoint being resumed.
    pub fn resolve(command: &str, flags: &Overrides, base: Option<TrainConfig>) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| validation(format!("config {}: {e}", path.display())))?;
                toml::from_str::<FileConfig>(&text).map_err(|e| validation(format!("config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let profile = flags.profile.or(file.profile).unwrap_or_default();
        let patch = file.train.unwrap_or_default();

        let file_task = match patch.get("task") {
            Some(v) => Some(v.clone().try_into::<Task>().map_err(|e| validation(format!("train.task: {e}")))?),
            None => None,
        };
        let mut train = match base {
            Some(cfg) => cfg,
            None => {
                let task = flags.task.or(file_task).unwrap_or(Task::Srfc4);
                match profile {
                    Profile::Full => TrainConfig::new(task),
                    Profile::Toy => TrainConfig::toy(task),
                }
            }
        };
        if let Some(t) = file_task {
            train.set_task(t);
        }
        let mut table = toml::Table::try_from(&train).map_err(validation)?;
        merge(&mut table, &patch);
        train = table.try_into().map_err(|e| validation(format!("config [train]: {e}")))?;
        let explicit_input = patch.get("generator").and_then(|g| g.get("input_size")).is_some();
        if !explicit_input {
            train.set_degradation(train.scale, train.mask_fraction);
        }

        if let Some(t) = flags.task {
            train.set_task(t);
        }
        if flags.scale.is_some() || flags.mask_fraction.is_some() {
            train.set_degradation(flags.scale.unwrap_or(train.scale), flags.mask_fraction.unwrap_or(train.mask_fraction));
        }
        if let Some(v) = flags.seed {
            train.seed = v;
        }
        if let Some(v) = flags.steps {
            train.steps = v;
        }
        if let Some(v) = flags.batch {
            train.batch = v;
        }
        if let Some(v) = flags.ablation {
            train.ablation = v;
        }

        let mut adjacency = file.adjacency;
        adjacency.extend(flags.adjacency.iter().cloned());
        for path in &adjacency {
            apply_adjacency(&mut train, path)?;
        }
        train.validate()?;

        Ok(Self {
            command: command.to_string(),
            profile,
            data: flags.data.clone().or(file.data),
            out: flags.out.clone().or(file.out),
            checkpoint: flags.checkpoint.clone().or(file.checkpoint),
            adjacency,
            train,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing run config: {e}")))
    }

    pub fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| validation(format!("{}: --data is required", self.command)))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| validation(format!("{}: --out is required", self.command)))
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| validation(format!("{}: --checkpoint is required", self.command)))
    }

    /// Create the output directory and record this config in it.
    pub fn prepare_out(&self) -> Result<&Path> {
        let out = self.out()?;
        if let Some(data) = &self.data {
            if let (Ok(a), Ok(b)) = (data.canonicalize(), out.canonicalize()) {
                if a == b {
                    return Err(validation("--out must differ from --data; inputs are never modified"));
                }
            }
        }
        std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
        facegraph::data::write_atomic(&out.join(RUN_FILE), self.to_toml()?.as_bytes())?;
        Ok(out)
    }
}

/// Use the adjacency in `path` for its patch scale in both networks.
fn apply_adjacency(train: &mut TrainConfig, path: &Path) -> Result<()> {
    let adj = Adjacency::load(path)?;
    for plan in [&mut train.generator.adjacency, &mut train.discriminator.adjacency] {
        plan.overrides.retain(|o| o.k != adj.k());
        plan.overrides.push(AdjacencyOverride {
            k: adj.k(),
            scheme: AdjacencyScheme::Custom(path.to_path_buf()),
        });
    }
    Ok(())
}
