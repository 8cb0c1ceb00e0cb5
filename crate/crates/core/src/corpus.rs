//! Aligned speech corpus ingestion and training-example construction.
//!
//! Layout under a corpus root:
//!
//! * `manifest.tsv`: `utterance_id  wav_path  speaker_id  gender(M/F)  dialect(1-8)`
//! * `<id>.words`: `word start_sample end_sample` per line
//! * `<id>.phones`: `word_index  phone phone …` per line
//!
//! `wav_path` is resolved relative to the root.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::{substream, Substream};
use crate::signal::{self, pad_to_n, AcousticSegment, MfccExtractor};

/// Fixed length of every encoded phoneme target.
pub const TARGET_LEN: usize = 50;
/// Upper bound on the corpus-level segment length `n`.
pub const MAX_FRAMES: usize = 128;
pub const DIALECTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Gender::M => 0,
            Gender::F => 1,
        }
    }
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" | "m" => Ok(Gender::M),
            "F" | "f" => Ok(Gender::F),
            other => Err(format!("unknown gender code {other:?} (expected M or F)")),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

/// Which speaker metadata is fused into the latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AuxMode {
    #[default]
    #[serde(rename = "none")]
    None,
    D,
    G,
    DG,
}

impl AuxMode {
    pub fn dim(self) -> usize {
        match self {
            AuxMode::None => 0,
            AuxMode::D => DIALECTS,
            AuxMode::G => 2,
            AuxMode::DG => DIALECTS + 2,
        }
    }

    /// One-hot speaker vector; dialect block precedes gender block.
    pub fn encode(self, dialect: u8, gender: Gender) -> Vec<f32> {
        let mut v = vec![0.0; self.dim()];
        let d = usize::from(dialect) - 1;
        match self {
            AuxMode::None => {}
            AuxMode::D => v[d] = 1.0,
            AuxMode::G => v[gender.index()] = 1.0,
            AuxMode::DG => {
                v[d] = 1.0;
                v[DIALECTS + gender.index()] = 1.0;
            }
        }
        v
    }
}

impl FromStr for AuxMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AuxMode::None),
            "D" => Ok(AuxMode::D),
            "G" => Ok(AuxMode::G),
            "DG" => Ok(AuxMode::DG),
            other => Err(format!(
                "unknown aux mode {other:?} (expected none, D, G or DG)"
            )),
        }
    }
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxMode::None => "none",
            AuxMode::D => "D",
            AuxMode::G => "G",
            AuxMode::DG => "DG",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Sops,
    Sep,
    Pad,
    Eops,
}

/// Corpus phones (sorted) followed by the four special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    phones: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub const SPECIAL_NAMES: [&'static str; 4] = ["[SOPS]", "[SEP]", "[PAD]", "[EOPS]"];

    pub fn new<I, S>(phones: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = phones.into_iter().map(Into::into).collect();
        let phones: Vec<String> = set.into_iter().collect();
        let ids = phones
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        PhonemeInventory { phones, ids }
    }

    pub fn from_records(records: &[UtteranceRecord]) -> Self {
        PhonemeInventory::new(
            records
                .iter()
                .flat_map(|r| r.phones.iter().flatten().cloned()),
        )
    }

    /// Re-derives the id map after deserialization.
    pub fn rebuilt(self) -> Self {
        PhonemeInventory::new(self.phones)
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    /// Vocabulary size `V`.
    pub fn size(&self) -> usize {
        self.phones.len() + 4
    }

    pub fn special(&self, s: Special) -> usize {
        self.phones.len()
            + match s {
                Special::Sops => 0,
                Special::Sep => 1,
                Special::Pad => 2,
                Special::Eops => 3,
            }
    }

    pub fn sops(&self) -> usize {
        self.special(Special::Sops)
    }

    pub fn sep(&self) -> usize {
        self.special(Special::Sep)
    }

    pub fn pad(&self) -> usize {
        self.special(Special::Pad)
    }

    pub fn eops(&self) -> usize {
        self.special(Special::Eops)
    }

    pub fn id(&self, phone: &str) -> Option<usize> {
        self.ids.get(phone).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        if id < self.phones.len() {
            &self.phones[id]
        } else {
            Self::SPECIAL_NAMES[id - self.phones.len()]
        }
    }

    /// `[SOPS] p1 [SEP] p2 … pj [EOPS] [PAD]…` padded to [`TARGET_LEN`].
    /// Phones that would push `[EOPS]` past the end are dropped.
    pub fn encode(&self, phones: &[String]) -> Result<Vec<usize>> {
        let max_phones = (TARGET_LEN - 1) / 2;
        if phones.len() > max_phones {
            log::warn!(
                "phone sequence of {} truncated to {max_phones} to fit {TARGET_LEN} slots",
                phones.len()
            );
        }
        let mut out = Vec::with_capacity(TARGET_LEN);
        out.push(self.sops());
        for (i, p) in phones.iter().take(max_phones).enumerate() {
            if i > 0 {
                out.push(self.sep());
            }
            out.push(
                self.id(p)
                    .ok_or_else(|| Error::Corpus(format!("phone {p:?} not in inventory")))?,
            );
        }
        out.push(self.eops());
        out.resize(TARGET_LEN, self.pad());
        Ok(out)
    }

    /// Phone symbols of a token sequence with specials removed, stopping at `[EOPS]`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != self.eops())
            .filter(|&&id| id < self.phones.len())
            .map(|&id| self.phones[id].clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordAlignment {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub wav_path: PathBuf,
    pub speaker_id: String,
    pub gender: Gender,
    pub dialect: u8,
    pub words: Vec<WordAlignment>,
    /// One phone list per entry of `words`.
    pub phones: Vec<Vec<String>>,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=DIALECTS as u8).contains(&self.dialect) {
            return Err(Error::Corpus(format!(
                "utterance {}: dialect {} outside 1..=8",
                self.id, self.dialect
            )));
        }
        let mut prev_end = 0;
        for (i, w) in self.words.iter().enumerate() {
            if w.start >= w.end {
                return Err(Error::Corpus(format!(
                    "utterance {}: word {i} ({}) has empty span {}..{}",
                    self.id, w.word, w.start, w.end
                )));
            }
            if w.start < prev_end {
                return Err(Error::Corpus(format!(
                    "utterance {}: word {i} ({}) starts at {} before previous word ends at {prev_end}",
                    self.id, w.word, w.start
                )));
            }
            prev_end = w.end;
        }
        if self.phones.len() != self.words.len() {
            return Err(Error::Corpus(format!(
                "utterance {}: {} words but {} phone lines",
                self.id,
                self.words.len(),
                self.phones.len()
            )));
        }
        if let Some(i) = self.phones.iter().position(Vec::is_empty) {
            return Err(Error::Corpus(format!(
                "utterance {}: word {i} has no phones",
                self.id
            )));
        }
        Ok(())
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect())
}

pub fn load_corpus(root: &Path) -> Result<Vec<UtteranceRecord>> {
    let manifest = root.join("manifest.tsv");
    let mut records = Vec::new();
    for (line_no, line) in read_lines(&manifest)? {
        let bad = |message: String| Error::Parse {
            path: manifest.clone(),
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.first() == Some(&"utterance_id") {
            continue;
        }
        if cols.len() != 5 {
            return Err(bad(format!(
                "expected 5 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let gender: Gender = cols[3].parse().map_err(bad)?;
        let dialect: u8 = cols[4]
            .parse()
            .map_err(|_| bad(format!("dialect {:?} is not a number", cols[4])))?;
        if !(1..=DIALECTS as u8).contains(&dialect) {
            return Err(bad(format!("dialect {dialect} outside 1..=8")));
        }
        let id = cols[0].to_string();
        let wav_path = root.join(cols[1]);
        if !wav_path.exists() {
            return Err(Error::MissingFile(wav_path));
        }
        let words = load_words(&root.join(format!("{id}.words")))?;
        let phones = load_phones(&root.join(format!("{id}.phones")), words.len())?;
        let record = UtteranceRecord {
            id,
            wav_path,
            speaker_id: cols[2].to_string(),
            gender,
            dialect,
            words,
            phones,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

fn load_words(path: &Path) -> Result<Vec<WordAlignment>> {
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            if f.len() != 3 {
                return Err(bad(format!(
                    "expected `word start end`, found {} fields",
                    f.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(format!("{s:?} is not a sample index")))
            };
            Ok(WordAlignment {
                word: f[0].to_string(),
                start: num(f[1])?,
                end: num(f[2])?,
            })
        })
        .collect()
}

fn load_phones(path: &Path, n_words: usize) -> Result<Vec<Vec<String>>> {
    let mut out = vec![Vec::new(); n_words];
    for (line_no, line) in read_lines(path)? {
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let mut fields = line.split_whitespace();
        let idx: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing word index".into()))?;
        if idx >= n_words {
            return Err(bad(format!("word index {idx} but only {n_words} words")));
        }
        out[idx] = fields.map(str::to_string).collect();
    }
    Ok(out)
}

/// Speaker-level train/test assignment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitSpec {
    /// Parses `split<TAB>speaker_id` lines where split is `train` or `test`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = SplitSpec::default();
        for (line_no, line) in read_lines(path)? {
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 {
                return Err(bad("expected `train|test speaker_id`".into()));
            }
            match f[0] {
                "train" => spec.train.insert(f[1].to_string()),
                "test" => spec.test.insert(f[1].to_string()),
                other => return Err(bad(format!("unknown split {other:?}"))),
            };
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.train {
            out.push_str(&format!("train\t{s}\n"));
        }
        for s in &self.test {
            out.push_str(&format!("test\t{s}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitOutcome {
    pub train: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    /// Speakers absent from the split file; their utterances went to `train`.
    pub unlisted_speakers: Vec<String>,
}

pub fn split_train_test(records: &[UtteranceRecord], spec: &SplitSpec) -> Result<SplitOutcome> {
    if let Some(both) = spec.train.intersection(&spec.test).next() {
        return Err(Error::Corpus(format!(
            "speaker {both} is listed in both train and test"
        )));
    }
    let mut out = SplitOutcome::default();
    let mut unlisted = BTreeSet::new();
    for r in records {
        if spec.test.contains(&r.speaker_id) {
            out.test.push(r.clone());
        } else {
            if !spec.train.contains(&r.speaker_id) && unlisted.insert(r.speaker_id.clone()) {
                log::warn!(
                    "speaker {} not in split file; assigned to train",
                    r.speaker_id
                );
            }
            out.train.push(r.clone());
        }
    }
    out.unlisted_speakers = unlisted.into_iter().collect();
    Ok(out)
}

/// Moves a seeded `fraction` of the training speakers (at least one when
/// there are two or more) into a development set.
pub fn hold_out_dev(
    train: Vec<UtteranceRecord>,
    fraction: f64,
    seed: u64,
) -> (Vec<UtteranceRecord>, Vec<UtteranceRecord>) {
    let mut speakers: Vec<String> = train
        .iter()
        .map(|r| r.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if fraction <= 0.0 || speakers.len() < 2 {
        return (train, Vec::new());
    }
    speakers.shuffle(&mut substream(seed, Substream::DevSplit));
    let count = ((speakers.len() as f64 * fraction).round() as usize).clamp(1, speakers.len() - 1);
    let dev: BTreeSet<String> = speakers.into_iter().take(count).collect();
    train
        .into_iter()
        .partition(|r| !dev.contains(&r.speaker_id))
}

/// An utterance with every word converted to a padded acoustic segment.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub record: UtteranceRecord,
    pub segments: Vec<Arc<AcousticSegment>>,
}

#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub utterances: Vec<PreparedUtterance>,
    pub n: usize,
    pub silence: Arc<AcousticSegment>,
}

/// Nearest-rank 99th percentile of the frame counts, capped at [`MAX_FRAMES`].
pub fn choose_n(frame_counts: &[usize]) -> usize {
    if frame_counts.is_empty() {
        return 1;
    }
    let mut sorted = frame_counts.to_vec();
    sorted.sort_unstable();
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1].clamp(1, MAX_FRAMES)
}

/// Computes MFCCs for every word; `n` is derived from the data when `None`.
pub fn prepare(
    records: &[UtteranceRecord],
    extractor: &MfccExtractor,
    n: Option<usize>,
) -> Result<PreparedCorpus> {
    let mut raw = Vec::with_capacity(records.len());
    for r in records {
        let wave = signal::read_wav(&r.wav_path)?;
        let mut frames = Vec::with_capacity(r.words.len());
        for w in &r.words {
            if w.end > wave.samples().len() {
                return Err(Error::Corpus(format!(
                    "utterance {}: word {} ends at {} beyond {} samples",
                    r.id,
                    w.word,
                    w.end,
                    wave.samples().len()
                )));
            }
            frames.push(extractor.compute(&wave.slice(w.start, w.end)?));
        }
        raw.push(frames);
    }
    let n = match n {
        Some(n) => n,
        None => choose_n(&raw.iter().flatten().map(|f| f.rows()).collect::<Vec<_>>()),
    };
    let silence_vec = extractor.silence_vector();
    let utterances = records
        .iter()
        .zip(raw)
        .map(|(r, frames)| {
            let segments = frames
                .iter()
                .map(|f| pad_to_n(f, n, &silence_vec).map(Arc::new))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedUtterance {
                record: r.clone(),
                segments,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCorpus {
        utterances,
        n,
        silence: Arc::new(AcousticSegment::silence(n, &silence_vec)),
    })
}

/// One target word with its context and phoneme target.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub word: String,
    pub utterance_id: String,
    pub speaker_id: String,
    pub target: Arc<AcousticSegment>,
    /// Left context, oldest first (`m` entries).
    pub left: Vec<Arc<AcousticSegment>>,
    /// Right context, nearest first (`m` entries).
    pub right: Vec<Arc<AcousticSegment>>,
    /// `2m + 1` text vectors: left context, target, right context.
    pub word_vectors: Vec<Vec<f32>>,
    pub aux: Vec<f32>,
    pub targets: Vec<usize>,
}

impl TrainingExample {
    pub fn m(&self) -> usize {
        self.left.len()
    }
}

/// One example per word occurrence. Context never crosses utterance
/// boundaries; missing slots get silence segments and zero text vectors.
pub fn build_examples(
    corpus: &PreparedCorpus,
    m: usize,
    inventory: &PhonemeInventory,
    embeddings: &EmbeddingTable,
    aux_mode: AuxMode,
) -> Result<Vec<TrainingExample>> {
    if m == 0 {
        return Err(Error::Contract(
            "context window m must be at least 1".into(),
        ));
    }
    let d_w = embeddings.dim();
    let mut oov = BTreeMap::new();
    let mut out = Vec::new();
    for utt in &corpus.utterances {
        let rec = &utt.record;
        let lowered: Vec<String> = rec.words.iter().map(|w| w.word.to_lowercase()).collect();
        let vectors: Vec<Vec<f32>> = lowered
            .iter()
            .map(|w| {
                if !embeddings.contains(w) {
                    *oov.entry(w.clone()).or_insert(0usize) += 1;
                }
                embeddings.lookup(w)
            })
            .collect();
        let count = rec.words.len() as isize;
        let aux = aux_mode.encode(rec.dialect, rec.gender);
        for t in 0..count {
            let slot = |j: isize| (0..count).contains(&j).then_some(j as usize);
            let seg = |j: isize| {
                slot(j).map_or_else(|| corpus.silence.clone(), |j| utt.segments[j].clone())
            };
            let vec_at = |j: isize| slot(j).map_or_else(|| vec![0.0; d_w], |j| vectors[j].clone());
            let m = m as isize;
            let left = (t - m..t).map(seg).collect();
            let right = (t + 1..=t + m).map(seg).collect();
            let word_vectors = (t - m..=t + m).map(vec_at).collect();
            let ti = t as usize;
            out.push(TrainingExample {
                word: lowered[ti].clone(),
                utterance_id: rec.id.clone(),
                speaker_id: rec.speaker_id.clone(),
                target: utt.segments[ti].clone(),
                left,
                right,
                word_vectors,
                aux: aux.clone(),
                targets: inventory.encode(&rec.phones[ti])?,
            });
        }
    }
    if !oov.is_empty() {
        log::warn!(
            "{} word types missing from embeddings; using hashed vectors: {:?}",
            oov.len(),
            oov.keys().take(10).collect::<Vec<_>>()
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{write_wav, MfccConfig};
    use std::fs;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn that_encodes_with_separators() {
        let inv = PhonemeInventory::new(["dh", "ae", "tcl"]);
        let y = inv.encode(&strings(&["dh", "ae", "tcl"])).unwrap();
        let mut expected = vec![
            inv.sops(),
            inv.id("dh").unwrap(),
            inv.sep(),
            inv.id("ae").unwrap(),
            inv.sep(),
            inv.id("tcl").unwrap(),
            inv.eops(),
        ];
        expected.extend(std::iter::repeat_n(inv.pad(), 43));
        assert_eq!(y, expected);
        assert_eq!(inv.decode(&y), strings(&["dh", "ae", "tcl"]));
    }

    #[test]
    fn inventory_size_is_phones_plus_four() {
        let phones: Vec<String> = (0..27).map(|i| format!("p{i}")).collect();
        let inv = PhonemeInventory::new(phones);
        assert_eq!(inv.size(), 31);
        assert_eq!(inv.symbol(inv.pad()), "[PAD]");
    }

    #[test]
    fn overlong_phone_list_keeps_eops() {
        let phones: Vec<String> = (0..30).map(|i| format!("p{i:02}")).collect();
        let inv = PhonemeInventory::new(phones.clone());
        let y = inv.encode(&phones).unwrap();
        assert_eq!(y.len(), TARGET_LEN);
        assert_eq!(y.iter().filter(|&&t| t == inv.eops()).count(), 1);
        assert_eq!(y[48], inv.eops());
        assert_eq!(y[49], inv.pad());
        assert_eq!(inv.decode(&y), phones[..24].to_vec());
    }

    #[test]
    fn aux_dg_female_dialect_five() {
        let v = AuxMode::DG.encode(5, Gender::F);
        assert_eq!(v.len(), 10);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 2);
        assert_eq!(v[4], 1.0);
        assert_eq!(v[9], 1.0);
        assert_eq!(AuxMode::None.encode(3, Gender::M).len(), 0);
        assert_eq!(AuxMode::G.encode(3, Gender::M), vec![1.0, 0.0]);
    }

    fn rec(id: &str, speaker: &str) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            wav_path: PathBuf::new(),
            speaker_id: speaker.into(),
            gender: Gender::M,
            dialect: 1,
            words: vec![],
            phones: vec![],
        }
    }

    #[test]
    fn split_disjoint_lists() {
        let records = vec![rec("a", "s1"), rec("b", "s2"), rec("c", "s3")];
        let spec = SplitSpec {
            train: ["s1", "s2"].iter().map(|s| s.to_string()).collect(),
            test: ["s3"].iter().map(|s| s.to_string()).collect(),
        };
        let out = split_train_test(&records, &spec).unwrap();
        assert_eq!((out.train.len(), out.test.len()), (2, 1));
        assert!(out.unlisted_speakers.is_empty());
    }

    #[test]
    fn split_rejects_shared_speaker_and_assigns_unlisted() {
        let records = vec![rec("a", "s1"), rec("b", "s9")];
        let mut spec = SplitSpec::default();
        spec.test.insert("s1".into());
        let out = split_train_test(&records, &spec).unwrap();
        assert_eq!(out.train.len(), 1);
        assert_eq!(out.unlisted_speakers, vec!["s9".to_string()]);
        spec.train.insert("s1".into());
        assert!(split_train_test(&records, &spec).is_err());
    }

    #[test]
    fn dev_holdout_is_speaker_disjoint() {
        let records: Vec<_> = (0..20)
            .map(|i| rec(&format!("u{i}"), &format!("s{}", i % 10)))
            .collect();
        let (train, dev) = hold_out_dev(records, 0.2, 3);
        assert_eq!(dev.len(), 4);
        let dev_speakers: BTreeSet<_> = dev.iter().map(|r| &r.speaker_id).collect();
        assert!(train.iter().all(|r| !dev_speakers.contains(&r.speaker_id)));
    }

    #[test]
    fn percentile_n() {
        let counts: Vec<usize> = (1..=100).collect();
        assert_eq!(choose_n(&counts), 99);
        assert_eq!(choose_n(&[500, 3]), MAX_FRAMES);
    }

    /// Two utterances with 3 and 4 words.
    fn write_fixture(root: &Path) {
        let mut manifest = String::from("utterance_id\twav_path\tspeaker_id\tgender\tdialect\n");
        let words = [vec!["The", "cat", "sat"], vec!["a", "dog", "ran", "off"]];
        for (u, ws) in words.iter().enumerate() {
            let id = format!("u{u}");
            manifest.push_str(&format!(
                "{id}\t{id}.wav\tspk{u}\t{}\t{}\n",
                if u == 0 { "F" } else { "M" },
                u + 3
            ));
            let samples: Vec<i16> = (0..ws.len() * 1600)
                .map(|i| ((i as f32 * 0.3).sin() * 5000.0) as i16)
                .collect();
            write_wav(&root.join(format!("{id}.wav")), &samples).unwrap();
            let mut wf = String::new();
            let mut pf = String::new();
            for (i, w) in ws.iter().enumerate() {
                wf.push_str(&format!("{w} {} {}\n", i * 1600, (i + 1) * 1600 - 100));
                pf.push_str(&format!("{i}\t{} x\n", w.to_lowercase()));
            }
            fs::write(root.join(format!("{id}.words")), wf).unwrap();
            fs::write(root.join(format!("{id}.phones")), pf).unwrap();
        }
        fs::write(root.join("manifest.tsv"), manifest).unwrap();
    }

    #[test]
    fn load_fixture_and_build_examples() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let records = load_corpus(dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].words.len(), 3);
        assert_eq!(records[1].words.len(), 4);

        let ex = MfccExtractor::new(&MfccConfig::with_dim(3)).unwrap();
        let corpus = prepare(&records, &ex, None).unwrap();
        let inv = PhonemeInventory::from_records(&records);
        let mut emb = EmbeddingTable::new(3);
        emb.insert("the", &[1.0, 0.0, 0.0]).unwrap();
        emb.insert("cat", &[0.0, 1.0, 0.0]).unwrap();
        let examples = build_examples(&corpus, 3, &inv, &emb, AuxMode::DG).unwrap();
        assert_eq!(examples.len(), 7);

        let first = &examples[0];
        assert_eq!(first.word, "the");
        assert!(first.left.iter().all(|s| Arc::ptr_eq(s, &corpus.silence)));
        assert_eq!(first.word_vectors.len(), 7);
        assert!(first.word_vectors[..3].iter().all(|v| v == &vec![0.0; 3]));
        assert_eq!(first.word_vectors[3], vec![1.0, 0.0, 0.0]);
        assert_eq!(first.word_vectors[4], vec![0.0, 1.0, 0.0]);
        // right context of the last word of utterance 0 must not leak into utterance 1
        let last = &examples[2];
        assert!(last.right.iter().all(|s| Arc::ptr_eq(s, &corpus.silence)));
        assert!(Arc::ptr_eq(
            &last.left[2],
            &corpus.utterances[0].segments[1]
        ));
        for e in &examples {
            assert_eq!(e.target.n(), corpus.n);
            assert!(e.word_vectors.iter().all(|v| v.len() == 3));
            assert_eq!(e.aux.len(), 10);
        }
    }

    #[test]
    fn empty_manifest_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.tsv"), "").unwrap();
        assert!(load_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn overlapping_alignment_names_utterance() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::write(
            dir.path().join("u1.words"),
            "a 0 2000\ndog 1500 3000\nran 3200 4000\noff 4000 4500\n",
        )
        .unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("u1"), "{err}");
    }

    #[test]
    fn malformed_manifest_and_missing_audio() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::write(dir.path().join("manifest.tsv"), "u0\tu0.wav\tspk\tX\t1\n").unwrap();
        match load_corpus(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join("manifest.tsv"), "u0\tnope.wav\tspk\tM\t1\n").unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("nope.wav"), "{err}");
    }
}
