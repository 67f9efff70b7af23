//! Caption statistics: token-length histograms and element-phrase matching.
//!
//! Tokens are maximal runs of characters that are neither whitespace nor
//! punctuation, so "ice-cream," gives `ice`, `cream`. Lengths count these
//! word tokens, not text-encoder subwords.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ElementType {
    AnimalHuman,
    Object,
    Location,
    Activity,
    Color,
    Spatial,
    Attribute,
    Food,
    Counting,
    Material,
    Shape,
    Other,
}

impl ElementType {
    pub const ALL: [ElementType; 12] = [
        Self::AnimalHuman,
        Self::Object,
        Self::Location,
        Self::Activity,
        Self::Color,
        Self::Spatial,
        Self::Attribute,
        Self::Food,
        Self::Counting,
        Self::Material,
        Self::Shape,
        Self::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AnimalHuman => "animal/human",
            Self::Object => "object",
            Self::Location => "location",
            Self::Activity => "activity",
            Self::Color => "color",
            Self::Spatial => "spatial",
            Self::Attribute => "attribute",
            Self::Food => "food",
            Self::Counting => "counting",
            Self::Material => "material",
            Self::Shape => "shape",
            Self::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_lowercase();
        let alias = match s.as_str() {
            "animal" | "human" | "animal_human" | "animal-human" => "animal/human",
            "colour" => "color",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|t| t.name() == alias)
            .ok_or_else(|| Error::Input(format!("unknown element type {s:?}")))
    }
}

/// Splits on whitespace and punctuation; case is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || is_unicode_punct(c))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205e}' | '\u{3001}'..='\u{3003}' | '\u{00a1}' | '\u{00ab}' | '\u{00b7}' | '\u{00bb}' | '\u{00bf}'
    )
}

/// Matching options. Stemming applies the Snowball English stemmer to caption
/// and phrase tokens alike.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub stem: bool,
}

struct Normalizer {
    stemmer: Option<Stemmer>,
}

impl Normalizer {
    fn new(opts: MatchOptions) -> Self {
        Self {
            stemmer: opts.stem.then(|| Stemmer::create(Algorithm::English)),
        }
    }

    fn tokens(&self, text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .map(|t| {
                let t = t.to_lowercase();
                match &self.stemmer {
                    Some(s) => s.stem(&t).into_owned(),
                    None => t,
                }
            })
            .collect()
    }
}

/// True when `phrase` occurs as a contiguous run of whole tokens in `tokens`.
pub fn contains_phrase<S: AsRef<str>>(tokens: &[S], phrase: &[S]) -> bool {
    !phrase.is_empty()
        && tokens
            .windows(phrase.len())
            .any(|w| w.iter().zip(phrase).all(|(a, b)| a.as_ref() == b.as_ref()))
}

/// Element phrases grouped by type.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementLexicon {
    phrases: BTreeMap<ElementType, Vec<String>>,
}

impl ElementLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a phrase, lowercased with whitespace collapsed. Duplicates are ignored.
    pub fn insert(&mut self, kind: ElementType, phrase: &str) -> Result<()> {
        let norm = tokenize(&phrase.to_lowercase()).join(" ");
        if norm.is_empty() {
            return Err(Error::Input(format!("empty element phrase {phrase:?}")));
        }
        let list = self.phrases.entry(kind).or_default();
        if !list.contains(&norm) {
            list.push(norm);
        }
        Ok(())
    }

    /// Parses `type<TAB>phrase` lines; blank lines and `#` comments are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, phrase) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("lexicon line {}: expected type<TAB>phrase", i + 1)))?;
            let kind: ElementType = kind
                .parse()
                .map_err(|e| Error::Data(format!("lexicon line {}: {e}", i + 1)))?;
            lex.insert(kind, phrase)
                .map_err(|e| Error::Data(format!("lexicon line {}: {e}", i + 1)))?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn phrases(&self, kind: ElementType) -> &[String] {
        self.phrases.get(&kind).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.phrases.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub source: String,
    pub text: String,
}

/// Captions tagged with their source.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionCorpus {
    pub captions: Vec<Caption>,
}

impl CaptionCorpus {
    /// Builds a corpus from one source; blank captions are an error.
    pub fn from_texts<I, S>(source: &str, texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut c = Self::default();
        for t in texts {
            c.push(source, t)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, source: &str, text: impl Into<String>) -> Result<()> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Data(format!("empty caption in source {source:?}")));
        }
        self.captions.push(Caption {
            source: source.to_string(),
            text,
        });
        Ok(())
    }

    /// Parses newline-delimited `source<TAB>caption` lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (source, caption) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("corpus line {}: expected source<TAB>caption", i + 1)))?;
            c.push(source, caption)
                .map_err(|e| Error::Data(format!("corpus line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Splits by source tag, sorted by tag.
    pub fn by_source(&self) -> BTreeMap<String, CaptionCorpus> {
        let mut out: BTreeMap<String, CaptionCorpus> = BTreeMap::new();
        for c in &self.captions {
            out.entry(c.source.clone()).or_default().captions.push(c.clone());
        }
        out
    }
}

/// Counts of caption lengths in buckets `[k w, (k + 1) w)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub width: usize,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `(low, high, count)` for non-empty buckets.
    pub fn buckets(&self) -> Vec<(usize, usize, usize)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(k, &n)| (k * self.width, (k + 1) * self.width, n))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["low", "high", "count"])?;
        for (k, n) in self.counts.iter().enumerate() {
            out.write_record([(k * self.width).to_string(), ((k + 1) * self.width).to_string(), n.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn length_histogram(corpus: &CaptionCorpus, bucket_width: usize) -> Result<Histogram> {
    if bucket_width == 0 {
        return Err(Error::Input("bucket width must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Data("cannot histogram an empty corpus".into()));
    }
    let mut counts = Vec::new();
    for c in &corpus.captions {
        let k = tokenize(&c.text).len() / bucket_width;
        if counts.len() <= k {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
    }
    Ok(Histogram {
        width: bucket_width,
        counts,
    })
}

/// Percentage of captions with at least one matched phrase, per type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeCoverage {
    pub captions: usize,
    pub percent: [f64; 12],
}

impl TypeCoverage {
    pub fn get(&self, kind: ElementType) -> f64 {
        self.percent[kind.index()]
    }

    pub fn mean(&self) -> f64 {
        self.percent.iter().sum::<f64>() / self.percent.len() as f64
    }
}

pub fn match_elements(corpus: &CaptionCorpus, lexicon: &ElementLexicon, opts: MatchOptions) -> Result<TypeCoverage> {
    if lexicon.is_empty() {
        return Err(Error::Input("element lexicon is empty".into()));
    }
    let norm = Normalizer::new(opts);
    let phrases: Vec<(usize, Vec<Vec<String>>)> = ElementType::ALL
        .iter()
        .map(|&k| (k.index(), lexicon.phrases(k).iter().map(|p| norm.tokens(p)).collect()))
        .collect();
    let mut hits = [0usize; 12];
    for c in &corpus.captions {
        let toks = norm.tokens(&c.text);
        for (k, list) in &phrases {
            if list.iter().any(|p| contains_phrase(&toks, p)) {
                hits[*k] += 1;
            }
        }
    }
    let n = corpus.len();
    Ok(TypeCoverage {
        captions: n,
        percent: hits.map(|h| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 }),
    })
}

/// Per-type coverage of several corpora side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub names: Vec<String>,
    pub coverage: Vec<TypeCoverage>,
}

pub fn density_report(
    corpora: &[(String, CaptionCorpus)],
    lexicon: &ElementLexicon,
    opts: MatchOptions,
) -> Result<DensityReport> {
    if corpora.len() < 2 {
        return Err(Error::Input(format!(
            "a density comparison needs at least two corpora, got {}",
            corpora.len()
        )));
    }
    let coverage = corpora
        .iter()
        .map(|(_, c)| match_elements(c, lexicon, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityReport {
        names: corpora.iter().map(|(n, _)| n.clone()).collect(),
        coverage,
    })
}

impl DensityReport {
    pub fn means(&self) -> Vec<f64> {
        self.coverage.iter().map(TypeCoverage::mean).collect()
    }

    /// One row per element type plus a final `mean` row; one column per corpus.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["element_type".to_string()];
        header.extend(self.names.iter().cloned());
        out.write_record(&header)?;
        for k in ElementType::ALL {
            let mut row = vec![k.name().to_string()];
            row.extend(self.coverage.iter().map(|c| format!("{:.2}", c.get(k))));
            out.write_record(&row)?;
        }
        let mut row = vec!["mean".to_string()];
        row.extend(self.means().iter().map(|m| format!("{m:.2}")));
        out.write_record(&row)?;
        out.flush()?;
        Ok(())
    }
}
