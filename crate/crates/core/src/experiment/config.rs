use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::backbones::{BackboneId, BackboneName, LayerSelect};
use crate::dataset::NameSchema;
use crate::heads::{HeadConfig, HeadKind};
use crate::trainer::{ExperimentConfig, SplitConfig, TrainConfig};

/// Overrides the default feature cache location.
pub const CACHE_DIR_ENV: &str = "BAVED_SER_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    #[serde(default)]
    pub schema: NameSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub name: BackboneName,
    /// Defaults to the published checkpoint for `name`.
    pub checkpoint_ref: Option<String>,
    pub layer: LayerSelect,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection { name: BackboneName::Wav2vec2Arabic, checkpoint_ref: None, layer: LayerSelect::Last }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheSection {
    pub root: Option<PathBuf>,
    pub enabled: bool,
}

impl Default for CacheSection {
    fn default() -> Self {
        CacheSection { root: None, enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub backbones: Vec<BackboneName>,
    pub heads: Vec<HeadKind>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { backbones: BackboneName::ALL.to_vec(), heads: vec![HeadKind::Mlp, HeadKind::Bilstm] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/latest") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    /// Worker threads for reentrant backbones; 0 means one per core.
    pub workers: usize,
}

/// The TOML run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub extract: ExtractSection,
}

impl RunConfig {
    pub fn new(dataset_root: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset: DatasetSection { root: dataset_root.into(), schema: NameSchema::default() },
            backbone: BackboneSection::default(),
            cache: CacheSection::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            compare: CompareSection::default(),
            output: OutputSection::default(),
            extract: ExtractSection::default(),
        }
    }

    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.dataset.root = base_dir.join(&config.dataset.root);
        config.output.dir = base_dir.join(&config.output.dir);
        if let Some(root) = config.cache.root.take() {
            config.cache.root = Some(base_dir.join(root));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.dataset.schema.validate().map_err(ExperimentError::Config)?;
        if self.compare.backbones.is_empty() || self.compare.heads.is_empty() {
            return Err(ExperimentError::Config("compare needs at least one backbone and one head".into()));
        }
        for name in &self.compare.backbones {
            self.experiment(*name, self.head.kind).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.experiment(self.backbone.name, self.head.kind)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn backbone_id(&self, name: BackboneName) -> BackboneId {
        match (&self.backbone.checkpoint_ref, name == self.backbone.name) {
            (Some(reference), true) => BackboneId { name, checkpoint_ref: reference.clone() },
            _ => BackboneId::new(name),
        }
    }

    /// The head section with its kind replaced; other head keys are shared.
    pub fn head_for(&self, kind: HeadKind) -> HeadConfig {
        HeadConfig { kind, ..self.head.clone() }
    }

    pub fn experiment(&self, name: BackboneName, head: HeadKind) -> ExperimentConfig {
        ExperimentConfig {
            backbone: self.backbone_id(name),
            layer: self.backbone.layer,
            head: self.head_for(head),
            train: self.train.clone(),
            split: self.split.clone(),
        }
    }

    pub fn cache_root(&self) -> PathBuf {
        if let Some(root) = &self.cache.root {
            return root.clone();
        }
        if let Some(root) = std::env::var_os(CACHE_DIR_ENV) {
            return PathBuf::from(root);
        }
        let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        home.join(".cache").join("baved-ser").join("features")
    }

    pub fn workers(&self) -> usize {
        match self.extract.workers {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            n => n,
        }
    }
}

/// Cache directory for one feature source. Stub features, non-final layers
/// and non-default checkpoints live in their own subtrees.
pub fn cache_namespace(cache_root: &Path, id: &BackboneId, layer: LayerSelect, stub: bool) -> PathBuf {
    let mut root = cache_root.to_path_buf();
    if stub {
        root.push("stub");
    }
    if let LayerSelect::Index(k) = layer {
        root.push(format!("layer{k}"));
    }
    if id.checkpoint_ref != id.name.default_checkpoint() {
        let safe: String = id
            .checkpoint_ref
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        root.push(format!("ckpt-{safe}"));
    }
    root
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_toml("[dataset]\nroot = \"corpus\"\n", Path::new("/base")).unwrap();
        assert_eq!(c.dataset.root, PathBuf::from("/base/corpus"));
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.split.ratios(), (0.8, 0.2));
        assert_eq!(c.compare.backbones.len(), 3);
        assert_eq!(c.head.hidden_sizes, vec![256, 64]);
    }

    #[test]
    fn dotted_keys_and_sections_are_equivalent() {
        let dotted = "dataset.root = \"/c\"\nbackbone.name = \"hubert_base\"\nbackbone.layer = 3\ntrain.epochs = 7\nhead.kind = \"bilstm\"\n";
        let sections = "[dataset]\nroot = \"/c\"\n[backbone]\nname = \"hubert_base\"\nlayer = 3\n[train]\nepochs = 7\n[head]\nkind = \"bilstm\"\n";
        let a = RunConfig::from_toml(dotted, Path::new("/")).unwrap();
        let b = RunConfig::from_toml(sections, Path::new("/")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.backbone.layer, LayerSelect::Index(3));
        assert_eq!(a.head.kind, HeadKind::Bilstm);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_config_errors() {
        for bad in [
            "dataset.root = \"/c\"\ntrain.epoch = 5\n",
            "dataset.root = \"/c\"\ntrain.epochs = 0\n",
            "dataset.root = \"/c\"\ntrain.learning_rate = 0.0\n",
            "dataset.root = \"/c\"\nbackbone.name = \"wav2vec\"\n",
            "dataset.root = \"/c\"\nhead.dropout = 1.5\n",
            "train.epochs = 5\n",
        ] {
            assert!(matches!(RunConfig::from_toml(bad, Path::new("/")), Err(ExperimentError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::new("/corpus");
        c.output.dir = PathBuf::from("/runs/x");
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn namespaces_keep_sources_apart() {
        let root = Path::new("/cache");
        let id = BackboneId::new(BackboneName::HubertBase);
        assert_eq!(cache_namespace(root, &id, LayerSelect::Last, false), PathBuf::from("/cache"));
        assert_eq!(cache_namespace(root, &id, LayerSelect::Last, true), PathBuf::from("/cache/stub"));
        assert_eq!(cache_namespace(root, &id, LayerSelect::Index(4), false), PathBuf::from("/cache/layer4"));
        let custom = BackboneId { checkpoint_ref: "me/my model".into(), ..id };
        assert_eq!(cache_namespace(root, &custom, LayerSelect::Last, false), PathBuf::from("/cache/ckpt-me_my_model"));
    }
}
