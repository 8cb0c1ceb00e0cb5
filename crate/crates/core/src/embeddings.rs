//! Pretrained text word vectors in the plain `.vec` text format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
    mean_norm: f32,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            mean_norm: 0.0,
        }
    }

    /// Adds `word`; returns `false` (keeping the first vector) for duplicates.
    pub fn insert(&mut self, word: &str, vector: &[f32]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "vector for {word:?} has {} values, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(word) {
            return Ok(false);
        }
        let count = self.words.len() as f32;
        let norm = l2_norm(vector);
        self.mean_norm = (self.mean_norm * count + norm) / (count + 1.0);
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn mean_norm(&self) -> f32 {
        self.mean_norm
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Stored vector, or the deterministic out-of-vocabulary vector.
    pub fn lookup(&self, word: &str) -> Vec<f32> {
        match self.get(word) {
            Some(v) => v.to_vec(),
            None => self.oov_vector(word),
        }
    }

    /// Pseudo-random vector seeded by a hash of `word`, rescaled to the
    /// table's mean norm (unit norm for an empty table).
    pub fn oov_vector(&self, word: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
        let mut v: Vec<f32> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = l2_norm(&v);
        let target = if self.is_empty() { 1.0 } else { self.mean_norm };
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x *= target / norm);
        }
        v
    }

    /// Text form: `count dim` header then one `word v1 … vd` line per entry.
    pub fn to_vec_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for x in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save_vec_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_vec_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_vec_text(path: &Path) -> Result<EmbeddingTable> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vec_text(&text, path)
}

pub fn parse_vec_text(text: &str, path: &Path) -> Result<EmbeddingTable> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut table: Option<EmbeddingTable> = None;
    let mut declared_count = None;
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        if table.is_none() && declared_count.is_none() && fields.len() == 2 {
            if let (Ok(count), Ok(dim)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                declared_count = Some(count);
                table = Some(EmbeddingTable::new(dim));
                continue;
            }
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| parse_err(line_no, format!("bad number: {e}")))?;
        let table = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.len() != table.dim() || values.is_empty() {
            return Err(parse_err(
                line_no,
                format!("expected {} values, found {}", table.dim(), values.len()),
            ));
        }
        if !table.insert(fields[0], &values)? {
            log::warn!(
                "{}:{line_no}: duplicate word {:?} ignored",
                path.display(),
                fields[0]
            );
        }
    }
    let table = table.unwrap_or_else(|| EmbeddingTable::new(0));
    if let Some(count) = declared_count {
        if count != table.len() {
            log::warn!(
                "{}: header declares {count} words, file holds {}",
                path.display(),
                table.len()
            );
        }
    }
    Ok(table)
}

fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// 64-bit FNV-1a; stable across platforms and runs.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<EmbeddingTable> {
        parse_vec_text(text, &PathBuf::from("mem.vec"))
    }

    #[test]
    fn two_words_no_header() {
        let t = parse("cat 1 2 3\ndog 4 5 6\n").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert_eq!(t.lookup("dog"), vec![4., 5., 6.]);
    }

    #[test]
    fn header_sets_dim() {
        let mut text = String::from("1000 50\n");
        for i in 0..1000 {
            text.push_str(&format!("w{i}"));
            for j in 0..50 {
                text.push_str(&format!(" {}", (i * j) as f32 * 0.001));
            }
            text.push('\n');
        }
        let t = parse(&text).unwrap();
        assert_eq!((t.len(), t.dim()), (1000, 50));
    }

    #[test]
    fn short_line_reports_line_number() {
        let mut text = String::from("2 50\na");
        text.push_str(&" 0.5".repeat(50));
        text.push_str("\nb");
        text.push_str(&" 0.5".repeat(49));
        match parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn crlf_and_duplicates() {
        let t = parse("2 2\r\nx 1 2\r\nx 3 4\r\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.lookup("x"), vec![1., 2.]);
    }

    #[test]
    fn oov_is_deterministic_and_scaled() {
        let t = parse("a 3 4\nb 6 8\n").unwrap();
        let v1 = t.lookup("zebra");
        assert_eq!(v1, t.lookup("zebra"));
        let mean = (5.0 + 10.0) / 2.0;
        let norm = l2_norm(&v1);
        assert!((norm - mean).abs() / mean < 0.1, "{norm}");
    }

    proptest! {
        #[test]
        fn text_roundtrip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f32::NORMAL, 12)
        ) {
            let mut t = EmbeddingTable::new(4);
            for (i, chunk) in vals.chunks(4).enumerate() {
                t.insert(&format!("w{i}"), chunk).unwrap();
            }
            let back = parse(&t.to_vec_text()).unwrap();
            for w in t.words() {
                let a: Vec<u32> = t.get(w).unwrap().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = back.get(w).unwrap().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
