use std::path::PathBuf;

use ditlab::captions::{
    density_report, length_histogram, match_elements, tokenize, CaptionCorpus, ElementLexicon, ElementType,
    MatchOptions,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn lexicon() -> ElementLexicon {
    ElementLexicon::load(&fixture("lexicon.tsv")).unwrap()
}

fn corpora() -> (CaptionCorpus, CaptionCorpus) {
    let all = CaptionCorpus::load(&fixture("captions.tsv")).unwrap();
    let mut by = all.by_source();
    (by.remove("short").unwrap(), by.remove("long").unwrap())
}

fn one(text: &str) -> CaptionCorpus {
    CaptionCorpus::from_texts("t", [text]).unwrap()
}

const OFF: MatchOptions = MatchOptions { stem: false };

/// Lowercases, blanks out every non-alphanumeric character and looks for
/// ` phrase ` inside ` caption `.
fn scan(caption: &str, phrase: &str) -> bool {
    let clean = |s: &str| {
        let blanked: String = s
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect();
        format!(" {} ", blanked.split_whitespace().collect::<Vec<_>>().join(" "))
    };
    clean(caption).contains(&clean(phrase))
}

fn oracle_percent(corpus: &CaptionCorpus, lex: &ElementLexicon, kind: ElementType) -> f64 {
    let mut hit = 0;
    for c in &corpus.captions {
        let mut any = false;
        for p in lex.phrases(kind) {
            any |= scan(&c.text, p);
        }
        hit += any as usize;
    }
    100.0 * hit as f64 / corpus.len() as f64
}

#[test]
fn single_caption_hits_both_types() {
    let mut lex = ElementLexicon::new();
    lex.insert(ElementType::Color, "red").unwrap();
    lex.insert(ElementType::AnimalHuman, "surfer").unwrap();
    let cov = match_elements(&one("a red surfer"), &lex, OFF).unwrap();
    assert_eq!(cov.get(ElementType::Color), 100.0);
    assert_eq!(cov.get(ElementType::AnimalHuman), 100.0);
    assert_eq!(cov.get(ElementType::Food), 0.0);
}

#[test]
fn phrases_match_whole_tokens_only() {
    let mut lex = ElementLexicon::new();
    lex.insert(ElementType::Food, "ice cream").unwrap();
    let food = |t: &str| match_elements(&one(t), &lex, OFF).unwrap().get(ElementType::Food);
    assert_eq!(food("vanilla ice cream cone"), 100.0);
    assert_eq!(food("Vanilla ICE CREAM."), 100.0);
    assert_eq!(food("icecream"), 0.0);
    assert_eq!(food("ice creams"), 0.0);
    assert_eq!(food("cream ice"), 0.0);
    assert_eq!(food("nice cream"), 0.0);
}

#[test]
fn repeated_matches_count_once() {
    let mut lex = ElementLexicon::new();
    lex.insert(ElementType::Color, "red").unwrap();
    lex.insert(ElementType::Color, "blue").unwrap();
    let c = CaptionCorpus::from_texts("t", ["red red blue", "green"]).unwrap();
    assert_eq!(match_elements(&c, &lex, OFF).unwrap().get(ElementType::Color), 50.0);
}

#[test]
fn fixture_matches_all_pairs_scan() {
    let lex = lexicon();
    assert!(lex.len() >= 30);
    let (short, long) = corpora();
    assert!(short.len() >= 20 && long.len() >= 20);
    for corpus in [&short, &long] {
        let cov = match_elements(corpus, &lex, OFF).unwrap();
        for k in ElementType::ALL {
            assert_eq!(cov.get(k), oracle_percent(corpus, &lex, k), "{k}");
        }
    }
}

#[test]
fn long_fixture_captions_are_denser() {
    let lex = lexicon();
    let (short, long) = corpora();
    let rep = density_report(&[("short".into(), short), ("long".into(), long)], &lex, OFF).unwrap();
    let m = rep.means();
    assert!(m[1] > m[0], "{m:?}");
}

#[test]
fn histogram_hand_count() {
    let c = CaptionCorpus::from_texts("t", ["a dog", "red kite", "one two three four five six seven"]).unwrap();
    let h = length_histogram(&c, 5).unwrap();
    assert_eq!(h.buckets(), vec![(0, 5, 2), (5, 10, 1)]);
    assert_eq!(h.total(), 3);

    let h = length_histogram(&one("just one caption here"), 3).unwrap();
    assert_eq!(h.buckets(), vec![(3, 6, 1)]);
}

#[test]
fn histogram_errors() {
    assert!(length_histogram(&CaptionCorpus::default(), 5).is_err());
    assert!(length_histogram(&one("x"), 0).is_err());
}

#[test]
fn histogram_equals_direct_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let words = ["cat", "on", "a", "mat", "red", "ice", "cream"];
    let seps = [" ", ", ", " - ", "; ", "  "];
    let mut lengths = Vec::new();
    let mut texts = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(1..60usize);
        let mut s = String::new();
        for i in 0..n {
            if i > 0 {
                s.push_str(seps[rng.random_range(0..seps.len())]);
            }
            s.push_str(words[rng.random_range(0..words.len())]);
        }
        if rng.random_bool(0.3) {
            s.push('.');
        }
        lengths.push(n);
        texts.push(s);
    }
    let c = CaptionCorpus::from_texts("syn", texts).unwrap();
    for width in [1, 4, 7, 10] {
        let h = length_histogram(&c, width).unwrap();
        let mut tally = std::collections::BTreeMap::new();
        for &n in &lengths {
            *tally.entry(n / width).or_insert(0usize) += 1;
        }
        let got: std::collections::BTreeMap<usize, usize> =
            h.buckets().into_iter().map(|(lo, _, n)| (lo / width, n)).collect();
        assert_eq!(got, tally);
        assert_eq!(h.total(), 1000);
    }
}

#[test]
fn identical_corpora_give_identical_columns() {
    let lex = lexicon();
    let (short, _) = corpora();
    let rep = density_report(&[("a".into(), short.clone()), ("b".into(), short)], &lex, OFF).unwrap();
    assert_eq!(rep.coverage[0], rep.coverage[1]);
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 12 + 1);
    assert!(text.starts_with("element_type,a,b\n"));
    assert!(text.trim_end().lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn density_needs_two_corpora() {
    let (short, _) = corpora();
    assert!(density_report(&[("a".into(), short)], &lexicon(), OFF).is_err());
}

#[test]
fn appended_attributes_never_lower_coverage() {
    let lex = lexicon();
    let (short, _) = corpora();
    let mut more = short.clone();
    for (i, c) in more.captions.iter_mut().enumerate() {
        if i % 2 == 0 {
            c.text.push_str(" made of glass and wooden");
        }
    }
    let rep = density_report(&[("a".into(), short), ("b".into(), more)], &lex, OFF).unwrap();
    for k in ElementType::ALL {
        assert!(rep.coverage[1].get(k) >= rep.coverage[0].get(k), "{k}");
    }
    assert!(rep.coverage[1].get(ElementType::Material) > rep.coverage[0].get(ElementType::Material));
    assert!(rep.coverage[1].get(ElementType::Attribute) > rep.coverage[0].get(ElementType::Attribute));
}

#[test]
fn injected_long_corpus_is_denser() {
    // every long caption carries phrases of at least four types; short ones carry one
    let lex = lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pick = |k: ElementType, rng: &mut ChaCha8Rng| lex.phrases(k)[rng.random_range(0..lex.phrases(k).len())].clone();
    let mut short = Vec::new();
    let mut long = Vec::new();
    for _ in 0..200 {
        let mut kinds = ElementType::ALL.to_vec();
        kinds.shuffle(&mut rng);
        short.push(format!("a photo of {}", pick(kinds[0], &mut rng)));
        let parts: Vec<String> = kinds[..4].iter().map(|&k| pick(k, &mut rng)).collect();
        long.push(format!("a photo of {} with {} and {}, {}", parts[0], parts[1], parts[2], parts[3]));
    }
    let rep = density_report(
        &[
            ("short".into(), CaptionCorpus::from_texts("short", short).unwrap()),
            ("long".into(), CaptionCorpus::from_texts("long", long).unwrap()),
        ],
        &lex,
        OFF,
    )
    .unwrap();
    let m = rep.means();
    assert!(m[1] > m[0], "{m:?}");
}

fn caption_strategy() -> impl Strategy<Value = String> {
    let word = prop::sample::select(vec![
        "a", "red", "dog", "ice", "cream", "next", "to", "beach", "two", "glass", "Round", "KITE", "sunset",
    ]);
    let sep = prop::sample::select(vec![" ", ", ", ". ", " - ", "\t"]);
    prop::collection::vec((word, sep), 1..15)
        .prop_map(|v| v.into_iter().map(|(w, s)| format!("{w}{s}")).collect::<String>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenizing_is_idempotent(text in ".{0,80}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn coverage_is_a_shuffle_invariant_percentage(caps in prop::collection::vec(caption_strategy(), 1..30), seed in any::<u64>()) {
        let lex = lexicon();
        let c = CaptionCorpus::from_texts("p", caps.clone()).unwrap();
        let mut shuffled = caps;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s = CaptionCorpus::from_texts("p", shuffled).unwrap();
        let a = match_elements(&c, &lex, OFF).unwrap();
        let b = match_elements(&s, &lex, OFF).unwrap();
        prop_assert_eq!(&a, &b);
        for v in a.percent {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn adding_a_phrase_never_lowers_coverage(
        caps in prop::collection::vec(caption_strategy(), 1..20),
        kind in 0usize..12,
        phrase in caption_strategy(),
    ) {
        let lex = lexicon();
        let c = CaptionCorpus::from_texts("p", caps).unwrap();
        let before = match_elements(&c, &lex, OFF).unwrap();
        let mut bigger = lex.clone();
        if bigger.insert(ElementType::ALL[kind], &phrase).is_ok() {
            let after = match_elements(&c, &bigger, OFF).unwrap();
            for k in ElementType::ALL {
                prop_assert!(after.get(k) >= before.get(k));
            }
        }
    }
}
