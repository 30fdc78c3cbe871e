use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::PersonalityShape;
use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::microlm::{ModelConfig, OptimizerKind, Schedule, TrainConfig};
use crate::selfplay::{FilterConfig, SelfPlayConfig};

/// Which stages [`super::cmd_pipeline`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub datagen: bool,
    pub ipt: bool,
    pub sft: bool,
    pub selfplay: bool,
    pub dpo: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            datagen: true,
            ipt: true,
            sft: true,
            selfplay: true,
            dpo: true,
            eval: true,
        }
    }
}

impl StageToggles {
    pub const NAMES: [&'static str; 6] = ["datagen", "ipt", "sft", "selfplay", "dpo", "eval"];

    pub fn get(&self, stage: &str) -> Option<bool> {
        Some(match stage {
            "datagen" => self.datagen,
            "ipt" => self.ipt,
            "sft" => self.sft,
            "selfplay" => self.selfplay,
            "dpo" => self.dpo,
            "eval" => self.eval,
            _ => return None,
        })
    }

    /// Applies a `stage=on|off` override.
    pub fn apply(&mut self, toggle: &str) -> Result<()> {
        let (stage, value) = toggle
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("stage toggle `{toggle}` is not stage=on|off")))?;
        let on = match value {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            _ => return Err(Error::Config(format!("stage toggle value `{value}` is not on/off"))),
        };
        let slot = match stage {
            "datagen" => &mut self.datagen,
            "ipt" => &mut self.ipt,
            "sft" => &mut self.sft,
            "selfplay" => &mut self.selfplay,
            "dpo" => &mut self.dpo,
            "eval" => &mut self.eval,
            _ => return Err(Error::Config(format!("unknown stage `{stage}`"))),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub seed: u64,
    pub cards: usize,
    /// Casual lines; `psr_holdout` of them are kept out of the rewriter pairs.
    pub casual_lines: usize,
    pub psr_holdout: usize,
    pub narrative_records: usize,
    pub factual_pairs: usize,
    #[serde(default = "one")]
    pub personas_per_pair: usize,
    #[serde(default)]
    pub shape: PersonalityShape,
    /// Fraction of the merged dataset and of the narrative corpus held out
    /// for evaluation.
    pub val_fraction: f64,
    /// Language-model warm-up of the rewriter's base model on the pair text.
    pub psr_warmup: TrainConfig,
    pub psr_train: TrainConfig,
    #[serde(default)]
    pub assets_dir: Option<PathBuf>,
    /// Hand-edited chat samples replacing generated ones.
    #[serde(default)]
    pub overlay: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSection {
    /// Responses sampled from the fine-tuned model to pair with negatives.
    pub generations: usize,
    pub heldout_fraction: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub train: DpoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub probe_cards: usize,
    pub probe_questions: usize,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub stages: StageToggles,
    pub model: ModelConfig,
    pub datagen: DatagenSection,
    pub ipt: TrainSection,
    pub sft: TrainSection,
    pub selfplay: SelfPlayConfig,
    pub dpo: DpoSection,
    pub eval: EvalSection,
}

/// Tables whose missing `seed` key takes the global seed.
const SEEDED: &[&[&str]] = &[
    &["model"],
    &["datagen"],
    &["datagen", "psr_warmup"],
    &["datagen", "psr_train"],
    &["ipt", "train"],
    &["sft", "train"],
    &["selfplay"],
    &["selfplay", "train"],
    &["dpo", "train"],
];

fn adam(steps: usize, lr: f64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        learning_rate: lr,
        optimizer: OptimizerKind::Adam,
        schedule: Schedule::Linear,
        ..Default::default()
    }
}

impl PipelineConfig {
    /// The desk-scale configuration: the full pipeline in a few minutes on
    /// one CPU core.
    pub fn desk(run_dir: impl Into<PathBuf>) -> Self {
        let seed = 7;
        let with_seed = |t: TrainConfig| TrainConfig { seed, ..t };
        PipelineConfig {
            seed,
            run_dir: run_dir.into(),
            stages: StageToggles::default(),
            model: ModelConfig {
                init_seed: seed,
                ..ModelConfig::desk()
            },
            datagen: DatagenSection {
                seed,
                cards: 24,
                casual_lines: 416,
                psr_holdout: 32,
                narrative_records: 200,
                factual_pairs: 48,
                personas_per_pair: 1,
                shape: PersonalityShape {
                    turns_per_sample: 1,
                    questions_per_card: Some(6),
                },
                val_fraction: 0.1,
                psr_warmup: with_seed(adam(300, 0.003, 8)),
                psr_train: with_seed(adam(500, 0.003, 8)),
                assets_dir: None,
                overlay: None,
            },
            ipt: TrainSection {
                train: with_seed(adam(300, 0.003, 8)),
            },
            sft: TrainSection {
                train: with_seed(adam(300, 0.003, 8)),
            },
            selfplay: SelfPlayConfig {
                iterations: 2,
                gen_budget: 48,
                max_turns: 2,
                max_turn_tokens: 48,
                filter: FilterConfig::default(),
                train: with_seed(adam(300, 0.003, 8)),
                refresh_ask: false,
                persona_conditioning: true,
                temperature: 0.8,
                top_k: 40,
                seed,
            },
            dpo: DpoSection {
                generations: 192,
                heldout_fraction: 0.125,
                max_new_tokens: 64,
                temperature: 0.8,
                top_k: 40,
                train: DpoConfig {
                    beta: 0.1,
                    steps: 150,
                    batch_size: 4,
                    learning_rate: 0.001,
                    seed,
                    optimizer: OptimizerKind::Adam,
                    ..Default::default()
                },
            },
            eval: EvalSection {
                probe_cards: 4,
                probe_questions: 6,
                max_new_tokens: 48,
            },
        }
    }

    /// Parses TOML, filling unset stage seeds with the global `seed`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = value
            .get("seed")
            .cloned()
            .ok_or_else(|| Error::Config("missing global `seed`".into()))?;
        for path in SEEDED {
            let mut cur = Some(&mut value);
            for key in *path {
                cur = cur.and_then(|v| v.get_mut(*key));
            }
            if let Some(toml::Value::Table(t)) = cur {
                let key = if path == &["model"] { "init_seed" } else { "seed" };
                t.entry(key).or_insert_with(|| seed.clone());
            }
        }
        value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.run_dir);
        if let Some(p) = cfg.datagen.assets_dir.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.datagen.overlay.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    /// Replaces the global seed. Stage seeds equal to the old global seed
    /// follow it; seeds set to some other value stay.
    pub fn set_seed(&mut self, seed: u64) {
        let old = self.seed;
        self.seed = seed;
        let stage_seeds = [
            &mut self.model.init_seed,
            &mut self.datagen.seed,
            &mut self.datagen.psr_warmup.seed,
            &mut self.datagen.psr_train.seed,
            &mut self.ipt.train.seed,
            &mut self.sft.train.seed,
            &mut self.selfplay.seed,
            &mut self.selfplay.train.seed,
            &mut self.dpo.train.seed,
        ];
        debug_assert_eq!(stage_seeds.len(), SEEDED.len());
        for s in stage_seeds {
            if *s == old {
                *s = seed;
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Checks every section and every referenced path before anything runs.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.datagen;
        if d.cards == 0 || d.narrative_records == 0 || d.factual_pairs == 0 || d.personas_per_pair == 0 {
            return Err(Error::Config("datagen counts must be positive".into()));
        }
        if d.psr_holdout >= d.casual_lines {
            return Err(Error::Config("psr_holdout must be below casual_lines".into()));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        d.psr_warmup.validate()?;
        d.psr_train.validate()?;
        for p in [&d.assets_dir, &d.overlay].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        self.ipt.train.validate()?;
        self.sft.train.validate()?;
        self.selfplay.validate()?;
        self.dpo.train.validate()?;
        let dp = &self.dpo;
        if dp.generations == 0 || dp.max_new_tokens == 0 || dp.top_k == 0 || !(dp.temperature > 0.0) {
            return Err(Error::Config("dpo generation settings must be positive".into()));
        }
        if !(dp.heldout_fraction > 0.0 && dp.heldout_fraction < 1.0) {
            return Err(Error::Config("dpo heldout_fraction must lie in (0, 1)".into()));
        }
        if self.eval.max_new_tokens == 0 || self.eval.probe_questions == 0 {
            return Err(Error::Config("eval max_new_tokens and probe_questions must be positive".into()));
        }
        Ok(())
    }
}
