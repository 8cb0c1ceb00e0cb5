//! Synthetic corpus generator.
//!
//! Words are strings of phones, each phone rendered as a short two-tone burst
//! (or shaped noise for fricatives) with per-phone frequencies, scaled by a
//! per-speaker pitch factor. Female speakers use alternative phone labels for
//! some words while the audio is always rendered from the base
//! pronunciation, so the label variation is only predictable from gender
//! metadata. Speaker pitch is drawn independently of gender.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::corpus::{Gender, SplitSpec, DIALECTS};
use crate::embeddings::{fnv1a, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng::{substream, Substream};
use crate::signal::{write_wav, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LexiconEntry {
    pub word: &'static str,
    pub phones: &'static [&'static str],
    /// Labels used for female speakers, when they differ.
    pub female: Option<&'static [&'static str]>,
}

const fn entry(
    word: &'static str,
    phones: &'static [&'static str],
    female: Option<&'static [&'static str]>,
) -> LexiconEntry {
    LexiconEntry {
        word,
        phones,
        female,
    }
}

pub const LEXICON: [LexiconEntry; 20] = [
    entry(
        "street",
        &["s", "t", "r", "iy", "t"],
        Some(&["s", "t", "r", "ih", "d"]),
    ),
    entry(
        "streets",
        &["s", "t", "r", "iy", "t", "s"],
        Some(&["s", "t", "r", "ih", "d", "s"]),
    ),
    entry("come", &["k", "ah", "m"], Some(&["k", "ax", "n"])),
    entry(
        "comes",
        &["k", "ah", "m", "z"],
        Some(&["k", "ax", "n", "z"]),
    ),
    entry("it", &["ih", "t"], None),
    entry("its", &["ih", "t", "s"], None),
    entry(
        "project",
        &["p", "r", "aa", "jh", "eh", "k", "t"],
        Some(&["p", "r", "ah", "jh", "ih", "k", "t"]),
    ),
    entry(
        "projects",
        &["p", "r", "aa", "jh", "eh", "k", "t", "s"],
        Some(&["p", "r", "ah", "jh", "ih", "k", "t", "s"]),
    ),
    entry(
        "investigation",
        &[
            "ih", "n", "v", "eh", "s", "t", "ih", "g", "ey", "sh", "ax", "n",
        ],
        None,
    ),
    entry(
        "investigations",
        &[
            "ih", "n", "v", "eh", "s", "t", "ih", "g", "ey", "sh", "ax", "n", "z",
        ],
        None,
    ),
    entry("few", &["f", "y", "uw"], Some(&["f", "ih", "ax"])),
    entry("new", &["n", "uw"], Some(&["n", "y", "ax"])),
    entry(
        "bright",
        &["b", "r", "ay", "t"],
        Some(&["b", "r", "ey", "d"]),
    ),
    entry("night", &["n", "ay", "t"], Some(&["n", "ey", "d"])),
    entry(
        "bedroom",
        &["b", "eh", "d", "r", "uw", "m"],
        Some(&["b", "ih", "d", "r", "ax", "m"]),
    ),
    entry("room", &["r", "uw", "m"], Some(&["r", "ax", "n"])),
    entry("kata", &["k", "a", "t", "a"], None),
    entry("that", &["dh", "ae", "tcl"], None),
    entry("near", &["n", "ih", "axr"], None),
    entry("heck", &["hv", "eh", "kcl", "k"], None),
];

/// Morphologically related pairs (plural/singular and similar).
pub const PAIRS_SET1: [(&str, &str); 5] = [
    ("street", "streets"),
    ("come", "comes"),
    ("it", "its"),
    ("project", "projects"),
    ("investigation", "investigations"),
];

/// Rhyming or overlapping pairs.
pub const PAIRS_SET2: [(&str, &str); 4] = [
    ("few", "new"),
    ("bright", "night"),
    ("bedroom", "room"),
    ("near", "heck"),
];

pub fn lexicon_entry(word: &str) -> Option<&'static LexiconEntry> {
    LEXICON.iter().find(|e| e.word == word)
}

/// Phone labels of `word` as spoken by a speaker of `gender`.
pub fn labels_for(entry: &LexiconEntry, gender: Gender) -> &'static [&'static str] {
    match (gender, entry.female) {
        (Gender::F, Some(f)) => f,
        _ => entry.phones,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub utterances: usize,
    pub seed: u64,
    /// Defaults to `max(2, utterances / 5)`.
    pub speakers: Option<usize>,
    pub min_words: usize,
    pub max_words: usize,
    /// Mean phone duration in milliseconds.
    pub phone_ms: f64,
    pub embedding_dim: usize,
    /// Fraction of speakers assigned to the test split.
    pub test_fraction: f64,
    /// Whether female speakers use the alternative labels.
    pub gender_variants: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            utterances: 50,
            seed: 0,
            speakers: None,
            min_words: 3,
            max_words: 6,
            phone_ms: 20.0,
            embedding_dim: 50,
            test_fraction: 0.2,
            gender_variants: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub utterances: usize,
    pub speakers: usize,
    pub word_tokens: usize,
    pub train_speakers: usize,
    pub test_speakers: usize,
}

#[derive(Debug, Clone)]
struct Speaker {
    id: String,
    gender: Gender,
    dialect: u8,
    pitch: f64,
    rate: f64,
}

/// Fixed acoustic signature of a phone, derived from its name.
struct PhoneVoice {
    f1: f64,
    f2: f64,
    noisy: bool,
}

const FRICATIVES: [&str; 7] = ["s", "z", "sh", "f", "hv", "dh", "v"];

fn voice(phone: &str) -> PhoneVoice {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(phone.as_bytes()));
    PhoneVoice {
        f1: rng.random_range(250.0..1000.0),
        f2: rng.random_range(1200.0..3400.0),
        noisy: FRICATIVES.contains(&phone),
    }
}

fn render_phone(
    phone: &str,
    speaker: &Speaker,
    samples: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) {
    let v = voice(phone);
    let sr = f64::from(SAMPLE_RATE);
    let ramp = (samples / 6).max(1);
    let (f1, f2) = (v.f1 * speaker.pitch, v.f2 * speaker.pitch);
    let mut lowpass = 0.0;
    for i in 0..samples {
        let t = i as f64 / sr;
        let env = (i.min(samples - 1 - i) as f64 / ramp as f64).min(1.0);
        let x = if v.noisy {
            // Crude band shaping: a one-pole high-pass of white noise plus a
            // weak tone so fricatives stay distinguishable.
            let w: f64 = StandardNormal.sample(rng);
            let hp = w - lowpass;
            lowpass = 0.7 * lowpass + 0.3 * w;
            2500.0 * hp + 1500.0 * (2.0 * std::f64::consts::PI * f2 * t).sin()
        } else {
            5000.0 * (2.0 * std::f64::consts::PI * f1 * t).sin()
                + 3000.0 * (2.0 * std::f64::consts::PI * f2 * t).sin()
        };
        out.push(env * x);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a complete corpus into `out`: audio, alignments, manifest, speaker
/// split, text embeddings, a similarity benchmark and pair lists.
pub fn synth_corpus(out: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    if cfg.utterances == 0 {
        return Err(Error::Contract("at least one utterance is required".into()));
    }
    if cfg.min_words == 0 || cfg.max_words < cfg.min_words {
        return Err(Error::Contract(format!(
            "bad word count range {}..={}",
            cfg.min_words, cfg.max_words
        )));
    }
    if cfg.embedding_dim == 0 {
        return Err(Error::Contract(
            "embedding dimension must be positive".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = substream(cfg.seed, Substream::Synth);
    let n_speakers = cfg.speakers.unwrap_or((cfg.utterances / 5).max(2)).max(1);
    let speakers: Vec<Speaker> = (0..n_speakers)
        .map(|i| Speaker {
            id: format!("spk{i:03}"),
            gender: if i % 2 == 0 { Gender::F } else { Gender::M },
            dialect: rng.random_range(1..=DIALECTS as u8),
            pitch: rng.random_range(0.85..1.15),
            rate: rng.random_range(0.9..1.1),
        })
        .collect();
    let noise = Normal::new(0.0, 60.0).expect("valid deviation");
    let sr = f64::from(SAMPLE_RATE);
    let ms = |v: f64| (v * sr / 1000.0).round() as usize;

    let mut manifest = String::from("utterance_id\twav\tspeaker\tgender\tdialect\n");
    let mut word_tokens = 0;
    for u in 0..cfg.utterances {
        let speaker = &speakers[u % n_speakers];
        let id = format!("utt{u:05}");
        let count = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut audio: Vec<f64> = Vec::new();
        let mut words_txt = String::new();
        let mut phones_txt = String::new();
        let lead = ms(rng.random_range(30.0..60.0));
        audio.extend(std::iter::repeat_n(0.0, lead));
        for w in 0..count {
            let e = &LEXICON[rng.random_range(0..LEXICON.len())];
            let start = audio.len();
            for p in e.phones {
                let dur = cfg.phone_ms * speaker.rate * rng.random_range(0.8..1.2);
                render_phone(p, speaker, ms(dur).max(32), &mut rng, &mut audio);
            }
            let end = audio.len();
            writeln!(words_txt, "{} {start} {end}", e.word).unwrap();
            let labels = if cfg.gender_variants {
                labels_for(e, speaker.gender)
            } else {
                e.phones
            };
            writeln!(phones_txt, "{w} {}", labels.join(" ")).unwrap();
            let gap = ms(rng.random_range(20.0..50.0));
            audio.extend(std::iter::repeat_n(0.0, gap));
            word_tokens += 1;
        }
        audio.extend(std::iter::repeat_n(0.0, ms(40.0)));
        let samples: Vec<i16> = audio
            .iter()
            .map(|&x| {
                (x + noise.sample(&mut rng))
                    .round()
                    .clamp(-32768.0, 32767.0) as i16
            })
            .collect();
        write_wav(&out.join(format!("{id}.wav")), &samples)?;
        write_text(&out.join(format!("{id}.words")), &words_txt)?;
        write_text(&out.join(format!("{id}.phones")), &phones_txt)?;
        writeln!(
            manifest,
            "{id}\t{id}.wav\t{}\t{}\t{}",
            speaker.id, speaker.gender, speaker.dialect
        )
        .unwrap();
    }
    write_text(&out.join("manifest.tsv"), &manifest)?;

    // The last speakers form the test split; genders alternate, so an even
    // count stays balanced.
    let n_test = if n_speakers < 2 {
        0
    } else {
        ((n_speakers as f64 * cfg.test_fraction).round() as usize).clamp(1, n_speakers - 1)
    };
    let mut split = SplitSpec::default();
    for (i, s) in speakers.iter().enumerate() {
        if i >= n_speakers - n_test {
            split.test.insert(s.id.clone());
        } else {
            split.train.insert(s.id.clone());
        }
    }
    write_text(&out.join("split.tsv"), &split.to_text())?;

    embeddings(cfg, &mut rng)?.save_vec_text(&out.join("embeddings.vec"))?;
    write_text(&out.join("benchmark.tsv"), &benchmark_tsv())?;
    let pairs = |set: &[(&str, &str)]| {
        set.iter()
            .map(|(a, b)| format!("{a}\t{b}\n"))
            .collect::<String>()
    };
    write_text(&out.join("pairs_set1.tsv"), &pairs(&PAIRS_SET1))?;
    write_text(&out.join("pairs_set2.tsv"), &pairs(&PAIRS_SET2))?;

    Ok(SynthSummary {
        utterances: cfg.utterances,
        speakers: n_speakers,
        word_tokens,
        train_speakers: split.train.len(),
        test_speakers: split.test.len(),
    })
}

/// Random unit vectors; words in a related pair share most of their direction.
fn embeddings(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    let dim = cfg.embedding_dim;
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let mut table = EmbeddingTable::new(dim);
    for e in &LEXICON {
        if table.contains(e.word) {
            continue;
        }
        let base = gaussian(rng);
        table.insert(e.word, &base)?;
        if let Some((_, partner)) = PAIRS_SET1.iter().find(|(a, _)| *a == e.word) {
            let jitter = gaussian(rng);
            let v: Vec<f32> = base
                .iter()
                .zip(&jitter)
                .map(|(b, j)| 0.9 * b + 0.3 * j)
                .collect();
            table.insert(partner, &v)?;
        }
    }
    Ok(table)
}

/// Word pairs scored by the overlap of their base phone sets (0 to 10).
pub fn benchmark_tsv() -> String {
    let mut out = String::from("word_a\tword_b\tscore\n");
    for (i, a) in LEXICON.iter().enumerate() {
        for b in LEXICON.iter().skip(i + 1).step_by(3) {
            let sa: std::collections::BTreeSet<_> = a.phones.iter().collect();
            let sb: std::collections::BTreeSet<_> = b.phones.iter().collect();
            let inter = sa.intersection(&sb).count() as f64;
            let union = sa.union(&sb).count() as f64;
            writeln!(out, "{}\t{}\t{:.2}", a.word, b.word, 10.0 * inter / union).unwrap();
        }
    }
    out
}
