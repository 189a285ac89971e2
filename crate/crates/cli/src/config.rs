//! Run configuration: one TOML file with sectioned keys, strict parsing,
//! and `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use lossguard_core::bench::BenchConfig;
use lossguard_core::losses::{AuxKind, LossConfig, PairScheme};
use lossguard_core::nets::ArchConfig;
use lossguard_core::synthdata::{InlierSpec, OodKind, OodSpec};
use lossguard_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed every stage derives its randomness from.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub odin: OdinSection,
    pub ood: OodSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            odin: OdinSection::default(),
            ood: OodSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub dim: usize,
    pub n: usize,
    pub imbalance_ratio: f64,
    pub separation: f64,
    pub base_spread: f64,
    pub val_fraction: f64,
    pub ood_pool: usize,
    /// Classes withheld for the unseen-class runs.
    pub held_out: Vec<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = InlierSpec::default();
        let b = BenchConfig::default();
        DataSection {
            num_classes: s.num_classes,
            dim: s.dim,
            n: s.n,
            imbalance_ratio: s.imbalance_ratio,
            separation: s.separation,
            base_spread: s.base_spread,
            val_fraction: b.val_fraction,
            ood_pool: b.ood_pool,
            held_out: BenchConfig::unseen_split().held_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub hidden_dims: Vec<usize>,
    pub tap_layers: Vec<usize>,
    pub tap_embed_dim: usize,
    pub dropout: f64,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        ArchSection {
            hidden_dims: a.hidden_dims,
            tap_layers: a.tap_layers,
            tap_embed_dim: a.tap_embed_dim,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub weighted_sampling: bool,
    pub weighted_loss: bool,
    pub augment_noise: f64,
    pub augment_flip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: 1e-3,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            weighted_sampling: t.weighted_sampling,
            weighted_loss: t.weighted_loss,
            augment_noise: t.augment_noise,
            augment_flip: t.augment_flip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// `contrastive`, `mse` or `none`.
    pub aux: String,
    pub lambda: f64,
    pub margin: f64,
    /// `disjoint` or `all`.
    pub pairs: String,
    /// Empty derives weights from the training labels.
    pub class_weights: Vec<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        LossSection {
            aux: l.aux.as_str().into(),
            lambda: l.lambda,
            margin: l.margin,
            pairs: "disjoint".into(),
            class_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdinSection {
    pub temperatures: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl Default for OdinSection {
    fn default() -> Self {
        OdinSection {
            temperatures: vec![1.0, 10.0, 100.0, 1000.0],
            epsilons: vec![0.0, 0.001, 0.002, 0.005, 0.01, 0.02],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    /// Evaluation kinds, by name.
    pub kinds: Vec<String>,
    pub mask_fraction: f64,
    pub heavy_mask_fraction: f64,
    pub far_magnitude: f64,
    pub near_inflation: f64,
    pub shift_magnitude: f64,
    /// Also report the tuning set in the evaluation table.
    pub include_tune_set: bool,
}

impl Default for OodSection {
    fn default() -> Self {
        let std = |k| OodSpec::standard(k, 0);
        OodSection {
            kinds: OodKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            mask_fraction: std(OodKind::MaskPatch).mask_fraction,
            heavy_mask_fraction: std(OodKind::MaskPatchHeavy).mask_fraction,
            far_magnitude: std(OodKind::Far).magnitude,
            near_inflation: std(OodKind::Near).inflation,
            shift_magnitude: std(OodKind::Shift).magnitude,
            include_tune_set: false,
        }
    }
}

impl RunConfig {
    /// Parses TOML text, rejecting unknown keys, then applies `overrides`
    /// (each `section.key=value`, value in TOML syntax or a bare string).
    pub fn parse(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, overrides).with_context(|| match path {
            Some(p) => format!("in {}", p.display()),
            None => "in the default config".into(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.aux_kind()?;
        self.pair_scheme()?;
        self.ood_kinds()?;
        self.arch(self.data.num_classes).validate()?;
        self.train_config(self.aux_kind()?)?.validate()?;
        if self.odin.temperatures.is_empty() || self.odin.epsilons.is_empty() {
            bail!("odin.temperatures and odin.epsilons must be nonempty");
        }
        if self.data.held_out.iter().any(|&c| c >= self.data.num_classes) {
            bail!("data.held_out names a class outside 0..{}", self.data.num_classes);
        }
        Ok(())
    }

    pub fn aux_kind(&self) -> anyhow::Result<AuxKind> {
        AuxKind::parse(&self.loss.aux)
            .with_context(|| format!("loss.aux: unknown kind `{}` (contrastive, mse, none)", self.loss.aux))
    }

    pub fn pair_scheme(&self) -> anyhow::Result<PairScheme> {
        match self.loss.pairs.as_str() {
            "disjoint" => Ok(PairScheme::Disjoint),
            "all" => Ok(PairScheme::All),
            other => bail!("loss.pairs: unknown scheme `{other}` (disjoint, all)"),
        }
    }

    pub fn ood_kinds(&self) -> anyhow::Result<Vec<OodKind>> {
        self.ood
            .kinds
            .iter()
            .map(|k| OodKind::parse(k).with_context(|| format!("ood.kinds: unknown kind `{k}`")))
            .collect()
    }

    pub fn arch(&self, num_classes: usize) -> ArchConfig {
        ArchConfig {
            input_dim: self.data.dim,
            hidden_dims: self.arch.hidden_dims.clone(),
            num_classes,
            tap_layers: self.arch.tap_layers.clone(),
            tap_embed_dim: self.arch.tap_embed_dim,
            dropout: self.arch.dropout,
        }
    }

    /// Training settings for one auxiliary kind; the seed is derived from
    /// the root seed, independent of the kind, so paired runs see the same
    /// minibatch stream.
    pub fn train_config(&self, aux: AuxKind) -> anyhow::Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            seed: lossguard_core::seed::derive(self.seed, "train"),
            loss: LossConfig {
                lambda: self.loss.lambda,
                margin: self.loss.margin,
                class_weights: self.loss.class_weights.clone(),
                aux,
                pairs: self.pair_scheme()?,
            },
            weighted_sampling: t.weighted_sampling,
            weighted_loss: t.weighted_loss,
            augment_noise: t.augment_noise,
            augment_flip: t.augment_flip,
        })
    }

    /// Benchmark layout; `unseen` withholds `data.held_out`.
    pub fn bench(&self, unseen: bool) -> anyhow::Result<BenchConfig> {
        let d = &self.data;
        let kinds = self.ood_kinds()?;
        let o = &self.ood;
        let overrides = kinds
            .iter()
            .map(|&k| {
                let mut s = OodSpec::standard(k, 0);
                match k {
                    OodKind::MaskPatch => s.mask_fraction = o.mask_fraction,
                    OodKind::MaskPatchHeavy => s.mask_fraction = o.heavy_mask_fraction,
                    OodKind::Far => s.magnitude = o.far_magnitude,
                    OodKind::Near => s.inflation = o.near_inflation,
                    OodKind::Shift => s.magnitude = o.shift_magnitude,
                }
                s
            })
            .collect();
        Ok(BenchConfig {
            inliers: InlierSpec {
                num_classes: d.num_classes,
                dim: d.dim,
                n: d.n,
                imbalance_ratio: d.imbalance_ratio,
                separation: d.separation,
                base_spread: d.base_spread,
            },
            val_fraction: d.val_fraction,
            ood_pool: d.ood_pool,
            held_out: if unseen { d.held_out.clone() } else { Vec::new() },
            ood_kinds: kinds,
            ood_overrides: overrides,
        })
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key=value"))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{spec}`: `{k}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// TOML value syntax when it parses (`3`, `1e-3`, `true`, `[5, 6]`),
/// otherwise the raw text as a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[train]\nepoch = 3\n", &[]).unwrap_err();
        assert!(format!("{err:#}").contains("epoch"), "{err:#}");
        assert!(RunConfig::parse("bogus = 1", &[]).is_err());
        assert!(RunConfig::parse("", &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_win() {
        let text = "seed = 4\n[train]\nepochs = 7\n";
        let cfg = RunConfig::parse(
            text,
            &["train.epochs=3".into(), "loss.aux=mse".into(), "data.held_out=[6, 7]".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.aux_kind().unwrap(), AuxKind::Mse);
        assert_eq!(cfg.data.held_out, vec![6, 7]);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("", &["loss.aux=hinge".into()]).is_err());
        assert!(RunConfig::parse("", &["ood.kinds=[\"sideways\"]".into()]).is_err());
        assert!(RunConfig::parse("", &["train.lr_decay_factor=2".into()]).is_err());
        assert!(RunConfig::parse("", &["data.held_out=[9]".into()]).is_err());
        assert!(RunConfig::parse("", &["odin.epsilons=[]".into()]).is_err());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = RunConfig::parse("seed = 1\n[train\n", &[]).unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
    }
}
