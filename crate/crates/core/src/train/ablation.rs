//! Single-factor ablations: every variant trains from the same seeds on the
//! same data order, then the runs are compared.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::probe::{probe_model, ProbeConfig, ProbeReport};
use super::{toy_arch, toy_model, train, SyntheticDataset, TrainConfig, TrainLog};
use crate::arch::{ArchConfig, Family};
use crate::conditioning::{ConditionMode, ConditioningSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub arch: ArchConfig,
    /// Replaces the shared training config for this variant.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl Variant {
    pub fn new(label: impl Into<String>, arch: ArchConfig) -> Self {
        Self {
            label: label.into(),
            arch,
            train: None,
        }
    }

    pub fn with_train(mut self, train: TrainConfig) -> Self {
        self.train = Some(train);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationOptions {
    /// Steps averaged for the smoothed final loss.
    pub smoothing_window: usize,
    pub model_seed: u64,
    pub probe: Option<ProbeConfig>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            smoothing_window: 100,
            model_seed: 0,
            probe: None,
        }
    }
}

/// Everything needed to rerun an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub name: String,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub options: AblationOptions,
}

/// Names accepted by [`standard_ablation`].
pub const STANDARD_ABLATIONS: [&str; 3] = ["skip", "text", "inpaint"];

/// The three toy ablations: U-ViT long skips on/off, trainable vs frozen text
/// embedder on the single-modulation cross-attention family, and token vs
/// channel inpainting. `seed` drives both the model init and the data order.
pub fn standard_ablation(name: &str, seed: u64) -> Result<AblationPlan> {
    let train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let options = AblationOptions {
        model_seed: seed,
        ..AblationOptions::default()
    };
    let uvit = toy_arch(Family::UVit, 32, 4);
    let (variants, options) = match name {
        "skip" => (
            vec![
                Variant::new("skip_on", uvit.clone()),
                Variant::new("skip_off", ArchConfig { use_skip: false, ..uvit }),
            ],
            options,
        ),
        "text" => {
            let pix = toy_arch(Family::CrossAttnSingle, 32, 4);
            (
                vec![
                    Variant::new("trainable", pix.clone()),
                    Variant::new("frozen", pix).with_train(TrainConfig {
                        text_frozen: true,
                        ..train.clone()
                    }),
                ],
                options,
            )
        }
        "inpaint" => {
            let with = |mode| ArchConfig {
                conditioning: Some(ConditioningSpec::inpaint(mode, uvit.latent_channels)),
                ..uvit.clone()
            };
            (
                vec![
                    Variant::new("token", with(ConditionMode::TokenConcat)),
                    Variant::new("channel", with(ConditionMode::ChannelConcat)),
                ],
                AblationOptions {
                    probe: Some(ProbeConfig::default()),
                    ..options
                },
            )
        }
        _ => {
            return Err(Error::Input(format!(
                "unknown ablation {name:?}; expected one of {}",
                STANDARD_ABLATIONS.join(", ")
            )))
        }
    };
    Ok(AblationPlan {
        name: name.to_string(),
        variants,
        train,
        options,
    })
}

impl AblationPlan {
    pub fn run(&self) -> Result<AblationReport> {
        run_ablation(&self.name, &self.variants, &self.train, &self.options)
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub label: String,
    pub log: TrainLog,
    pub smoothed_loss: f64,
    pub probe: Option<ProbeReport>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub name: String,
    /// Dotted path of the one setting that differs, if any.
    pub factor: Option<String>,
    pub results: Vec<VariantResult>,
}

fn diff_paths(a: &Value, b: &Value, prefix: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                diff_paths(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &p, out);
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

/// Settings (as dotted paths) on which any variant departs from the first.
pub fn differing_factors(variants: &[Variant], base: &TrainConfig) -> Result<Vec<String>> {
    let flat = |v: &Variant| -> Result<Value> {
        Ok(serde_json::json!({
            "arch": serde_json::to_value(&v.arch)?,
            "train": serde_json::to_value(v.train.as_ref().unwrap_or(base))?,
        }))
    };
    let mut out = Vec::new();
    if let Some(first) = variants.first() {
        let f = flat(first)?;
        for v in &variants[1..] {
            diff_paths(&f, &flat(v)?, "", &mut out);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Trains every variant on `train_split` and probes on `held_out` when asked.
pub fn run_ablation(
    name: &str,
    variants: &[Variant],
    train_config: &TrainConfig,
    options: &AblationOptions,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Input("ablation needs at least one variant".into()));
    }
    let factors = differing_factors(variants, train_config)?;
    if factors.len() > 1 {
        return Err(Error::Input(format!(
            "ablation {name:?}: variants differ in more than one factor: {}",
            factors.join(", ")
        )));
    }
    let train_seed = variants[0].train.as_ref().unwrap_or(train_config).seed;
    let mut results: Vec<VariantResult> = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.train.as_ref().unwrap_or(train_config);
        let mut model = toy_model(&v.arch, options.model_seed)?;
        let log = train(&mut model, cfg, vec![SyntheticDataset::train_split()])?;
        if let Some(prev) = results.first() {
            if prev.log.order_hash != log.order_hash && cfg.seed == train_seed {
                return Err(Error::Data(format!(
                    "variant {:?} saw a different data order than {:?}",
                    v.label, prev.label
                )));
            }
        }
        let probe = match &options.probe {
            Some(pc) => Some(probe_model(&model, &SyntheticDataset::held_out(), pc)?),
            None => None,
        };
        results.push(VariantResult {
            label: v.label.clone(),
            smoothed_loss: log.tail_mean(options.smoothing_window),
            log,
            probe,
        });
    }
    Ok(AblationReport {
        name: name.to_string(),
        factor: factors.into_iter().next(),
        results,
    })
}

impl AblationReport {
    pub fn get(&self, label: &str) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.label == label)
    }

    /// Loss curves side by side: `step,<label>...`.
    pub fn write_curves<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend(self.results.iter().map(|r| r.label.clone()));
        out.write_record(&header)?;
        let n = self.results.iter().map(|r| r.log.steps.len()).max().unwrap_or(0);
        for i in 0..n {
            let mut row = vec![(i + 1).to_string()];
            for r in &self.results {
                row.push(r.log.steps.get(i).map(|s| format!("{:.9e}", s.loss)).unwrap_or_default());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per variant with the smoothed loss and probe score.
    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variant", "factor", "smoothed_loss", "probe_score", "probe_chance", "order_hash"])?;
        for r in &self.results {
            out.write_record([
                r.label.clone(),
                self.factor.clone().unwrap_or_default(),
                format!("{:.9e}", r.smoothed_loss),
                r.probe.as_ref().map(|p| format!("{:.6}", p.score)).unwrap_or_default(),
                r.probe.as_ref().map(|p| format!("{:.6}", p.chance)).unwrap_or_default(),
                format!("{:016x}", r.log.order_hash),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
