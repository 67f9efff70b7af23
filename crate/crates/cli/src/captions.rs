use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use ditlab::captions::{
    density_report, length_histogram, match_elements, CaptionCorpus, DensityReport, ElementLexicon, MatchOptions,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{config_error, create_out, csv_writer, load_spec, write_manifest};
use crate::Common;

#[derive(Args)]
pub struct CaptionArgs {
    #[command(flatten)]
    common: Common,
    /// `source<TAB>caption` file; repeat for several.
    #[arg(long, value_name = "FILE")]
    corpus: Vec<PathBuf>,
    /// `type<TAB>phrase` element lexicon.
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    /// Token-length bucket width.
    #[arg(long)]
    bucket_width: Option<usize>,
    /// Match on Snowball stems instead of exact tokens.
    #[arg(long)]
    stem: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionSpec {
    pub corpora: Vec<PathBuf>,
    pub lexicon: PathBuf,
    pub bucket_width: usize,
    #[serde(default)]
    pub options: MatchOptions,
}

fn caption_spec(a: &CaptionArgs) -> Result<CaptionSpec> {
    let mut spec = match &a.common.config {
        Some(p) => load_spec(p, "caption-stats")?,
        None => CaptionSpec {
            corpora: Vec::new(),
            lexicon: a
                .lexicon
                .clone()
                .ok_or_else(|| config_error("give --lexicon or --config"))?,
            bucket_width: 5,
            options: MatchOptions::default(),
        },
    };
    if !a.corpus.is_empty() {
        spec.corpora = a.corpus.clone();
    }
    if let Some(l) = &a.lexicon {
        spec.lexicon = l.clone();
    }
    if let Some(w) = a.bucket_width {
        spec.bucket_width = w;
    }
    if a.stem {
        spec.options.stem = true;
    }
    if spec.corpora.is_empty() {
        return Err(config_error("give at least one --corpus"));
    }
    Ok(spec)
}

pub fn caption_stats(a: CaptionArgs) -> Result<u8> {
    let spec = caption_spec(&a)?;
    let lexicon = ElementLexicon::load(&spec.lexicon).with_context(|| format!("lexicon {}", spec.lexicon.display()))?;
    let mut all = CaptionCorpus::default();
    for p in &spec.corpora {
        let c = CaptionCorpus::load(p).with_context(|| format!("corpus {}", p.display()))?;
        all.captions.extend(c.captions);
    }
    let sources: Vec<(String, CaptionCorpus)> = all.by_source().into_iter().collect();
    if sources.is_empty() {
        return Err(config_error("the corpus files hold no captions"));
    }
    let out = &a.common.out;
    create_out(out)?;

    let mut w = csv_writer(out, "lengths.csv")?;
    w.write_record(["source", "low", "high", "count"])?;
    for (name, c) in &sources {
        let h = length_histogram(c, spec.bucket_width)?;
        for (k, n) in h.counts.iter().enumerate() {
            w.write_record([
                name.clone(),
                (k * h.width).to_string(),
                ((k + 1) * h.width).to_string(),
                n.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let report = if sources.len() >= 2 {
        density_report(&sources, &lexicon, spec.options)?
    } else {
        DensityReport {
            names: vec![sources[0].0.clone()],
            coverage: vec![match_elements(&sources[0].1, &lexicon, spec.options)?],
        }
    };
    let f = std::fs::File::create(out.join("elements.csv")).context("creating elements.csv")?;
    report.write_csv(f)?;
    for (name, m) in report.names.iter().zip(report.means()) {
        println!("{name:<16} mean element coverage {m:.2}%");
    }
    write_manifest(out, "caption-stats", &spec, &["lengths.csv".to_string(), "elements.csv".to_string()])?;
    Ok(0)
}
