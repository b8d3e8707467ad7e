//! Declarative run configuration (TOML with sections).
//!
//! Unknown keys are rejected. Every command writes the fully resolved
//! configuration next to its outputs, and checkpoints carry its digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    ingest_sequences, load_synthetic, synth_generate, Dataset, DatasetSplit, SplitPreset, SynthConfig,
};
use crate::engine::{OptimConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::model::{HeadKind, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated in memory from `[data.synth]`.
    Synthetic,
    /// Directories written by the `synth` command.
    SyntheticDir,
    /// KITTI odometry layout under `kitti_root`.
    Kitti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    /// Held-out synthetic windows, generated with ids after the training ids.
    pub eval_count: usize,
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub kitti_root: Option<PathBuf>,
    pub split: String,
    pub window_stride: usize,
    pub flip_probability: f64,
    pub pixel_means: [f64; 3],
    /// Precompute the frozen encoder prefix once per window and orientation.
    pub cache_prefix: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synth: SynthConfig::default(),
            eval_count: 200,
            train_dir: None,
            eval_dir: None,
            kitti_root: None,
            split: "paper-big".into(),
            window_stride: 1,
            flip_probability: 0.5,
            pixel_means: crate::data::PIXEL_MEANS,
            cache_prefix: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("run"),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key (`train.epochs=5`) inside a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with::<&str>(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides.
    pub fn from_toml_with<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        match (self.loss.kind, self.model.head) {
            (LossKind::MseRegression, HeadKind::Regression) | (LossKind::Bce | LossKind::Focal, HeadKind::Ordinal) => {}
            (kind, head) => {
                return Err(Error::config(format!("loss {kind:?} does not fit the {head:?} head")));
            }
        }
        if !(0.0..=1.0).contains(&self.data.flip_probability) {
            return Err(Error::config("flip_probability must lie in [0, 1]"));
        }
        if self.data.pixel_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("pixel means must lie in [0, 1]"));
        }
        if self.data.window_stride == 0 {
            return Err(Error::config("window_stride must be positive"));
        }
        if self.data.source == DataSource::Synthetic {
            if self.data.synth.frames != self.model.frames {
                return Err(Error::config(format!(
                    "synthetic windows have {} frames, the model expects {}",
                    self.data.synth.frames, self.model.frames
                )));
            }
            self.data.synth.validate()?;
        }
        Ok(())
    }

    /// Training and held-out datasets named by `[data]`. `default_kitti_root`
    /// is used when `kitti_root` is unset.
    pub fn datasets(&self, default_kitti_root: Option<&Path>) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                let train = synth_generate(&d.synth)?;
                let eval = (d.eval_count > 0)
                    .then(|| synth_generate(&SynthConfig { count: d.eval_count, first_id: d.synth.first_id + d.synth.count, ..d.synth.clone() }))
                    .transpose()?;
                Ok((train, eval))
            }
            DataSource::SyntheticDir => {
                let dir = d.train_dir.as_deref().ok_or_else(|| Error::config("data.train_dir is required for synthetic_dir"))?;
                let train = load_synthetic(dir, false)?;
                let eval = d.eval_dir.as_deref().map(|e| load_synthetic(e, false)).transpose()?;
                Ok((train, eval))
            }
            DataSource::Kitti => {
                let root = d
                    .kitti_root
                    .as_deref()
                    .or(default_kitti_root)
                    .ok_or_else(|| Error::config("data.kitti_root is unset and no default KITTI root was given"))?;
                let split = DatasetSplit::preset(d.split.parse::<SplitPreset>()?);
                let load = |seqs: &[String]| {
                    ingest_sequences(root, seqs, self.model.frames, d.window_stride, self.model.codec.d_max).map(|s| Dataset::from_windows(s.windows))
                };
                Ok((load(&split.train)?, Some(load(&split.test)?)))
            }
        }
    }

    /// SHA-256 over the settings that determine training results. The epoch
    /// budget, stopping rules and output location are excluded so a run may
    /// be resumed with a longer budget or from a moved directory.
    pub fn digest(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.train = TrainConfig { epochs: 0, early_stop_patience: 0, target_acc: None, target_rmse: None, ..c.train };
        Sha256::digest(c.to_toml().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[model.codec]\nk = 31\nwat = 2\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_with("[train]\nepochs = 3\n", &["train.epochs=7", "model.hidden=16", "output=out/x"]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.output, PathBuf::from("out/x"));
        assert!(RunConfig::from_toml_with("", &["noequals"]).is_err());
    }

    #[test]
    fn digest_tracks_training_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs += 10;
        b.output = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.optim.lr *= 2.0;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn head_and_loss_must_agree() {
        assert!(RunConfig::from_toml("[loss]\nkind = \"mse_regression\"\n").is_err());
        assert!(RunConfig::from_toml("[loss]\nkind = \"mse_regression\"\n[model]\nhead = \"regression\"\n").is_ok());
    }
}
