use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use ditlab::conditioning::{ConditionMode, ConditioningSpec};
use ditlab::diffusion::{ddim_sample, write_ppm, DiffusionSchedule, SamplerConfig};
use ditlab::text::TextBatch;
use ditlab::train::data::{CHANNELS, SIDE};
use ditlab::train::probe::{classify, hits};
use ditlab::train::{
    scene_vocab, standard_ablation, toy_arch, toy_model, AblationPlan, ModelGenerator, ProbeConfig, SceneGenerator,
    SyntheticDataset, TrainConfig, STANDARD_ABLATIONS,
};
use ditlab::{ArchConfig, Family, TextToImage};
use ditlab_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::manifest::{config_error, create_out, csv_writer, load_spec, write_manifest};
use crate::Common;

/// Toy presets trainable on the scene data.
pub const TOY_PRESETS: [&str; 3] = ["toy-uvit", "toy-pixart", "toy-largedit"];

fn toy_preset(name: &str) -> Result<ArchConfig> {
    let fam = match name {
        "toy-uvit" => Family::UVit,
        "toy-pixart" => Family::CrossAttnSingle,
        "toy-largedit" => Family::CrossAttnPerBlock,
        _ => {
            return Err(config_error(format!(
                "unknown training preset {name:?}; expected one of {}",
                TOY_PRESETS.join(", ")
            )))
        }
    };
    Ok(toy_arch(fam, 32, 4))
}

fn parse_condition(s: &str) -> Result<ConditionMode, String> {
    s.parse()
}

/// Architecture and schedule flags shared by `train` and `ablate`.
#[derive(Args, Clone, Debug)]
pub struct ToyFlags {
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seeds both the model init and the data order.
    #[arg(long)]
    seed: Option<u64>,
}

impl ToyFlags {
    fn apply_arch(&self, arch: &mut ArchConfig) {
        if let Some(h) = self.hidden_dim {
            arch.hidden_dim = h;
        }
        if let Some(d) = self.depth {
            arch.depth = d;
        }
    }

    fn apply_train(&self, t: &mut TrainConfig) {
        if let Some(s) = self.steps {
            t.steps = s;
            t.warmup = t.warmup.min(s);
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(lr) = self.lr {
            t.lr = lr;
            t.text_lr = lr;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
    }
}

// ---------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// toy-uvit, toy-pixart or toy-largedit.
    #[arg(long)]
    preset: Option<String>,
    /// Attach an inpainting condition by token or channel concatenation.
    #[arg(long, value_parser = parse_condition)]
    condition: Option<ConditionMode>,
    /// Turn off the U-ViT long skips.
    #[arg(long)]
    no_skip: bool,
    /// Freeze the text embedder.
    #[arg(long)]
    freeze_text: bool,
    #[command(flatten)]
    toy: ToyFlags,
    /// Skip writing the checkpoint.
    #[arg(long)]
    no_checkpoint: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    #[serde(default = "yes")]
    pub checkpoint: bool,
}

fn yes() -> bool {
    true
}

fn train_spec(a: &TrainArgs) -> Result<TrainSpec> {
    let mut spec = match &a.common.config {
        Some(p) => load_spec(p, "train")?,
        None => TrainSpec {
            arch: toy_preset("toy-uvit")?,
            train: TrainConfig::default(),
            model_seed: 0,
            checkpoint: true,
        },
    };
    if let Some(p) = &a.preset {
        spec.arch = toy_preset(p)?;
    }
    a.toy.apply_arch(&mut spec.arch);
    a.toy.apply_train(&mut spec.train);
    if let Some(s) = a.toy.seed {
        spec.model_seed = s;
    }
    if let Some(mode) = a.condition {
        spec.arch.conditioning = Some(ConditioningSpec::inpaint(mode, spec.arch.latent_channels));
    }
    if a.no_skip {
        spec.arch.use_skip = false;
    }
    if a.freeze_text {
        spec.train.text_frozen = true;
    }
    if a.no_checkpoint {
        spec.checkpoint = false;
    }
    spec.arch.validate().into_result()?;
    spec.train.check()?;
    Ok(spec)
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let spec = train_spec(&a)?;
    let out = &a.common.out;
    create_out(out)?;
    let mut model = toy_model(&spec.arch, spec.model_seed)?;
    let log = ditlab::train::train(&mut model, &spec.train, vec![SyntheticDataset::train_split()])?;
    log.save_csv(&out.join("log.csv"))?;
    let mut outputs = vec!["log.csv".to_string()];
    if spec.checkpoint {
        let dir = out.join("checkpoint");
        create_out(&dir)?;
        model.save(&dir, &scene_vocab())?;
        outputs.push("checkpoint".into());
    }
    let w = (spec.train.steps / 2).clamp(1, 100);
    println!(
        "{} steps: first {w} mean {:.4}, last {w} mean {:.4}",
        spec.train.steps,
        log.head_mean(w),
        log.tail_mean(w)
    );
    write_manifest(out, "train", &spec, &outputs)?;
    Ok(0)
}

// --------------------------------------------------------------------- ablate

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// skip, text or inpaint.
    #[arg(long)]
    which: Option<String>,
    #[command(flatten)]
    toy: ToyFlags,
    /// Probe samples per variant (inpaint probes by default).
    #[arg(long)]
    probe_samples: Option<usize>,
    #[arg(long)]
    probe_ddim_steps: Option<usize>,
}

fn ablate_spec(a: &AblateArgs) -> Result<AblationPlan> {
    let mut plan = match (&a.common.config, &a.which) {
        (Some(p), None) => load_spec(p, "ablate")?,
        (None, Some(w)) => standard_ablation(w, a.toy.seed.unwrap_or(0))?,
        (None, None) => {
            return Err(config_error(format!(
                "give --which ({}) or --config",
                STANDARD_ABLATIONS.join(", ")
            )))
        }
        (Some(_), Some(_)) => return Err(config_error("--which and --config are exclusive")),
    };
    for v in &mut plan.variants {
        a.toy.apply_arch(&mut v.arch);
        if let Some(t) = &mut v.train {
            a.toy.apply_train(t);
        }
    }
    a.toy.apply_train(&mut plan.train);
    if let Some(s) = a.toy.seed {
        plan.options.model_seed = s;
    }
    if a.probe_samples.is_some() || a.probe_ddim_steps.is_some() {
        let p = plan.options.probe.get_or_insert_with(ProbeConfig::default);
        if let Some(n) = a.probe_samples {
            p.n_samples = n;
        }
        if let Some(s) = a.probe_ddim_steps {
            p.ddim_steps = s;
        }
    }
    plan.options.smoothing_window = plan.options.smoothing_window.min(plan.train.steps);
    Ok(plan)
}

pub fn ablate(a: AblateArgs) -> Result<u8> {
    let plan = ablate_spec(&a)?;
    let out = &a.common.out;
    create_out(out)?;
    let report = plan.run()?;
    let f = std::fs::File::create(out.join("curves.csv")).context("creating curves.csv")?;
    report.write_curves(f)?;
    let f = std::fs::File::create(out.join("summary.csv")).context("creating summary.csv")?;
    report.write_summary(f)?;
    for r in &report.results {
        let probe = r.probe.as_ref().map(|p| format!("  probe {:.3}", p.score)).unwrap_or_default();
        println!("{:<12} smoothed loss {:.5}{probe}", r.label, r.smoothed_loss);
    }
    write_manifest(out, "ablate", &plan, &["curves.csv".to_string(), "summary.csv".to_string()])?;
    Ok(0)
}

// --------------------------------------------------------------------- sample

#[derive(Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `train`.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Caption to sample; repeat for several. Without captions, held-out scenes are used.
    #[arg(long)]
    caption: Vec<String>,
    /// Number of held-out scenes to sample when no caption is given.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub captions: Vec<String>,
    pub scenes: usize,
    pub sampler: SamplerConfig,
    pub preview_scale: usize,
}

fn sample_spec(a: &SampleArgs) -> Result<SampleSpec> {
    let mut spec = match &a.common.config {
        Some(p) => load_spec(p, "sample")?,
        None => SampleSpec {
            checkpoint: a
                .checkpoint
                .clone()
                .ok_or_else(|| config_error("give --checkpoint or --config"))?,
            captions: Vec::new(),
            scenes: 4,
            sampler: SamplerConfig {
                ddim_steps: 25,
                cfg_scale: 3.0,
                seed: 0,
                eta: 0.0,
            },
            preview_scale: 16,
        },
    };
    if let Some(c) = &a.checkpoint {
        spec.checkpoint = c.clone();
    }
    if !a.caption.is_empty() {
        spec.captions = a.caption.clone();
    }
    if let Some(n) = a.scenes {
        spec.scenes = n;
    }
    if let Some(s) = a.ddim_steps {
        spec.sampler.ddim_steps = s;
    }
    if let Some(s) = a.cfg_scale {
        spec.sampler.cfg_scale = s;
    }
    if let Some(s) = a.seed {
        spec.sampler.seed = s;
    }
    if spec.captions.is_empty() && spec.scenes == 0 {
        return Err(config_error("nothing to sample: no captions and zero scenes"));
    }
    Ok(spec)
}

pub fn sample(a: SampleArgs) -> Result<u8> {
    let spec = sample_spec(&a)?;
    let (model, vocab) = TextToImage::load(&spec.checkpoint)
        .with_context(|| format!("loading checkpoint {}", spec.checkpoint.display()))?;
    let arch = model.net.config().clone();
    let out = &a.common.out;
    create_out(out)?;
    let mut outputs = vec!["samples.csv".to_string()];

    let (captions, latents) = if spec.captions.is_empty() {
        let held = SyntheticDataset::held_out();
        let scenes: Vec<_> = (0..spec.scenes).map(|i| held.scenes[i % held.len()]).collect();
        let mut generator = ModelGenerator {
            model: &model,
            config: ProbeConfig {
                n_samples: scenes.len(),
                ddim_steps: spec.sampler.ddim_steps,
                cfg_scale: spec.sampler.cfg_scale,
                seed: spec.sampler.seed,
            },
        };
        let x = generator.generate(&scenes)?;
        let per = CHANNELS * SIDE * SIDE;
        let mut w = csv_writer(out, "probe.csv")?;
        w.write_record(["index", "caption", "foreground", "background", "shape", "position"])?;
        for (i, s) in scenes.iter().enumerate() {
            let h = hits(&classify(&x.data()[i * per..(i + 1) * per], s.placement.count()), s);
            let mut rec = vec![i.to_string(), s.long_caption()];
            rec.extend(h.iter().map(|b| u8::from(*b).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        outputs.push("probe.csv".into());
        (scenes.iter().map(|s| s.long_caption()).collect::<Vec<_>>(), x)
    } else {
        if arch.conditioning.is_some() {
            return Err(config_error(
                "this checkpoint needs a local condition; sample held-out scenes instead of free captions",
            ));
        }
        let refs: Vec<&str> = spec.captions.iter().map(String::as_str).collect();
        let text = TextBatch::encode(&vocab, &refs, model.embedder.len);
        let side = arch.latent_side();
        let x = ddim_sample(
            &model,
            &text,
            None,
            &spec.sampler,
            &DiffusionSchedule::default(),
            &[refs.len(), arch.latent_channels, side, side],
        )?;
        (spec.captions.clone(), x)
    };

    write_samples(out, &captions, &latents, spec.preview_scale, &mut outputs)?;
    println!("wrote {} samples to {}", captions.len(), out.display());
    write_manifest(out, "sample", &spec, &outputs)?;
    Ok(0)
}

fn write_samples(
    out: &std::path::Path,
    captions: &[String],
    x: &Tensor,
    scale: usize,
    outputs: &mut Vec<String>,
) -> Result<()> {
    let s = x.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut wr = csv_writer(out, "samples.csv")?;
    wr.write_record(["index", "caption", "channel", "row", "col", "value"])?;
    for (i, cap) in captions.iter().enumerate() {
        let lat = &x.data()[i * per..(i + 1) * per];
        for (k, v) in lat.iter().enumerate() {
            wr.write_record([
                i.to_string(),
                cap.clone(),
                (k / (h * w)).to_string(),
                (k / w % h).to_string(),
                (k % w).to_string(),
                format!("{v:.6e}"),
            ])?;
        }
        let name = format!("sample_{i:03}.ppm");
        write_ppm(&out.join(&name), &Tensor::new(vec![c, h, w], lat.to_vec())?, scale)?;
        outputs.push(name);
    }
    wr.flush()?;
    Ok(())
}
