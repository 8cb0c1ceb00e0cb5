//! Measurements on a trained model: phonetic accuracy, word similarity and
//! the PCA view of difference vectors.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::model::{
    argmax, decode_greedy, decode_teacher_forced, encode, time_major_targets, ModelParams,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Accuracy {
    /// Teacher-forced accuracy over positions whose gold token is not `[PAD]`.
    pub token_acc: f64,
    /// Fraction of examples whose greedy decode equals the gold sequence.
    pub seq_acc: f64,
    /// Mean per-example cross-entropy (all 50 positions).
    pub mean_loss: f64,
    pub tokens: usize,
    pub sequences: usize,
}

/// Teacher-forced token accuracy, greedy sequence accuracy and loss.
pub fn phonetic_accuracy(
    params: &ModelParams,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<Accuracy> {
    evaluate(params, examples, batch_size, true)
}

/// As [`phonetic_accuracy`] without the greedy pass (`seq_acc` is left at 0).
pub fn teacher_forced_accuracy(
    params: &ModelParams,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<Accuracy> {
    evaluate(params, examples, batch_size, false)
}

fn evaluate(
    params: &ModelParams,
    examples: &[TrainingExample],
    batch_size: usize,
    greedy: bool,
) -> Result<Accuracy> {
    let cfg = &params.config;
    let pad = cfg.pad();
    let (mut correct, mut tokens, mut seq_ok) = (0usize, 0usize, 0usize);
    let mut loss = 0.0f64;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch: Vec<&TrainingExample> = chunk.iter().collect();
        let b = batch.len();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let enc = encode(&mut tape, cfg, &p, &batch)?;
        let logits = decode_teacher_forced(&mut tape, cfg, &p, enc.z_new, &batch)?;
        let targets = time_major_targets(cfg, &batch);
        let ce = tape.cross_entropy(logits, &targets)?;
        loss += f64::from(tape.value(ce).item());
        let lv = tape.value(logits);
        for (r, &gold) in targets.iter().enumerate() {
            if gold != pad {
                tokens += 1;
                if argmax(lv.row(r)) == gold {
                    correct += 1;
                }
            }
        }
        if greedy {
            let (decoded, _) = decode_greedy(&mut tape, cfg, &p, enc.z_new)?;
            seq_ok += decoded
                .iter()
                .zip(&batch)
                .filter(|(d, ex)| **d == ex.targets)
                .count();
        }
        debug_assert_eq!(targets.len(), b * cfg.k());
    }
    let n = examples.len();
    Ok(Accuracy {
        token_acc: if tokens > 0 {
            correct as f64 / tokens as f64
        } else {
            0.0
        },
        seq_acc: if n > 0 { seq_ok as f64 / n as f64 } else { 0.0 },
        mean_loss: if n > 0 { loss / n as f64 } else { 0.0 },
        tokens,
        sequences: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordRepresentation {
    pub word: String,
    pub vector: Vec<f32>,
    pub occurrence_count: usize,
}

/// Mean `z_new` per lowercase word, sorted by word.
pub fn word_representations(
    params: &ModelParams,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<Vec<WordRepresentation>> {
    let latents = crate::model::latent_vectors(params, examples, batch_size)?;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (ex, z) in examples.iter().zip(latents) {
        let entry = sums
            .entry(ex.word.to_lowercase())
            .or_insert_with(|| (vec![0.0; z.len()], 0));
        entry
            .0
            .iter_mut()
            .zip(&z)
            .for_each(|(s, &v)| *s += f64::from(v));
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(word, (sum, count))| WordRepresentation {
            word,
            vector: sum.iter().map(|s| (s / count as f64) as f32).collect(),
            occurrence_count: count,
        })
        .collect())
}

/// Cosine similarity; a zero vector gives 0 with a warning.
pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    let nu: f64 = u.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        log::warn!("cosine with a zero vector, returning 0");
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) hold equal values: mean rank (i+1 + j)/2.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Analysis(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Analysis(
            "correlation needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Analysis(
            "correlation is undefined for a constant input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Analysis(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBenchmark {
    pub name: String,
    pub pairs: Vec<(String, String, f64)>,
}

impl SimilarityBenchmark {
    /// Reads `word_a<TAB>word_b<TAB>score` lines; a non-numeric score on the
    /// first line marks a header. Words are lowercased and repeated pairs
    /// (in either order) keep their first score.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "benchmark".into());
        Self::parse(&name, &text, path)
    }

    pub fn parse(name: &str, text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        let mut first = true;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if fields.len() < 3 {
                return Err(err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let is_first = std::mem::replace(&mut first, false);
            let score = match fields[2].trim().parse::<f64>() {
                Ok(s) => s,
                Err(_) if is_first => continue,
                Err(e) => return Err(err(format!("bad score {:?}: {e}", fields[2]))),
            };
            if !score.is_finite() {
                return Err(err(format!("score {score} is not finite")));
            }
            let a = fields[0].trim().to_lowercase();
            let b = fields[1].trim().to_lowercase();
            let key = if a <= b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            if seen.insert(key) {
                pairs.push((a, b, score));
            }
        }
        Ok(SimilarityBenchmark {
            name: name.to_string(),
            pairs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityResult {
    pub rho: f64,
    pub used_pairs: usize,
    pub skipped_pairs: usize,
}

pub fn lookup_table(reps: &[WordRepresentation]) -> BTreeMap<&str, &[f32]> {
    reps.iter()
        .map(|r| (r.word.as_str(), r.vector.as_slice()))
        .collect()
}

/// Spearman ρ between model cosines and human scores on pairs whose words
/// both have representations.
pub fn similarity_eval(
    reps: &[WordRepresentation],
    bench: &SimilarityBenchmark,
) -> Result<SimilarityResult> {
    let table = lookup_table(reps);
    let mut model = Vec::new();
    let mut human = Vec::new();
    for (a, b, score) in &bench.pairs {
        if let (Some(va), Some(vb)) = (table.get(a.as_str()), table.get(b.as_str())) {
            model.push(cosine(va, vb));
            human.push(*score);
        }
    }
    let used = model.len();
    let skipped = bench.pairs.len() - used;
    if used < 2 {
        return Err(Error::Analysis(format!(
            "benchmark {}: only {used} usable pairs ({skipped} skipped)",
            bench.name
        )));
    }
    Ok(SimilarityResult {
        rho: spearman_rho(&model, &human)?,
        used_pairs: used,
        skipped_pairs: skipped,
    })
}

/// Eigen-decomposition of a symmetric `n × n` row-major matrix by cyclic
/// Jacobi rotations. Eigenvalues come back in descending order; column `j`
/// of the returned row-major matrix is the eigenvector of value `j`.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(Error::Dimension(format!(
            "{} values do not form a {n}x{n} matrix",
            matrix.len()
        )));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `(label, x, y)` per usable pair, in input order.
    pub points: Vec<(String, f64, f64)>,
    /// Variance along the two leading components.
    pub explained_variance: [f64; 2],
    pub total_variance: f64,
    pub components: [Vec<f64>; 2],
    /// Pairs dropped because a word had no representation.
    pub skipped: Vec<(String, String)>,
}

/// Projects the difference vectors `vec(a) - vec(b)` onto their top two
/// principal components (covariance with `p - 1` normalization). Each
/// component is signed so that its largest-magnitude entry is positive.
pub fn pca_diff_vectors(
    reps: &[WordRepresentation],
    pairs: &[(String, String)],
) -> Result<PcaResult> {
    let table = lookup_table(reps);
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for (a, b) in pairs {
        match (
            table.get(a.to_lowercase().as_str()),
            table.get(b.to_lowercase().as_str()),
        ) {
            (Some(va), Some(vb)) => {
                diffs.push(
                    va.iter()
                        .zip(vb.iter())
                        .map(|(&x, &y)| f64::from(x) - f64::from(y))
                        .collect(),
                );
                labels.push(format!("{a}-{b}"));
            }
            _ => {
                log::warn!("pair ({a}, {b}) skipped: word without representation");
                skipped.push((a.clone(), b.clone()));
            }
        }
    }
    if diffs.len() < 2 {
        return Err(Error::Analysis(format!(
            "PCA needs at least two usable pairs, found {}",
            diffs.len()
        )));
    }
    let (points, explained_variance, total_variance, components) = pca_2d(&diffs)?;
    Ok(PcaResult {
        points: labels
            .into_iter()
            .zip(points)
            .map(|(l, [x, y])| (l, x, y))
            .collect(),
        explained_variance,
        total_variance,
        components,
        skipped,
    })
}

type Pca2d = (Vec<[f64; 2]>, [f64; 2], f64, [Vec<f64>; 2]);

/// Top-two PCA of row vectors.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca2d> {
    let p = rows.len();
    let dim = rows.first().map_or(0, |r| r.len());
    if p < 2 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Analysis(
            "PCA needs at least two rows of equal length".into(),
        ));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / p as f64)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for r in &centered {
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i * dim + j] /= (p - 1) as f64;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }
    let total = (0..dim).map(|i| cov[i * dim + i]).sum();
    let (values, vectors) = symmetric_eigen(&cov, dim)?;
    let mut comps: [Vec<f64>; 2] = [vec![0.0; dim], vec![0.0; dim]];
    let mut explained = [0.0; 2];
    for c in 0..2.min(dim) {
        let mut col: Vec<f64> = (0..dim).map(|r| vectors[r * dim + c]).collect();
        let lead = col
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        comps[c] = col;
        explained[c] = values[c];
    }
    let points = centered
        .iter()
        .map(|r| {
            let proj = |c: &[f64]| r.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
            [proj(&comps[0]), proj(&comps[1])]
        })
        .collect();
    Ok((points, explained, total, comps))
}

pub fn similarity_report_csv(rows: &[(String, SimilarityResult)]) -> String {
    let mut out = String::from("benchmark,n_pairs,rho\n");
    for (name, r) in rows {
        writeln!(out, "{name},{},{}", r.used_pairs, r.rho).unwrap();
    }
    out
}

/// `pair_label,x,y` rows; skipped pairs are listed in `#` footer lines.
pub fn pca_points_csv(result: &PcaResult) -> String {
    let mut out = String::from("pair_label,x,y\n");
    for (label, x, y) in &result.points {
        writeln!(out, "{label},{x},{y}").unwrap();
    }
    for (a, b) in &result.skipped {
        writeln!(out, "# skipped {a}-{b}: missing representation").unwrap();
    }
    out
}

/// Scatter of the projected points with labeled arrows from the origin.
pub fn pca_svg(result: &PcaResult) -> String {
    let size = 480.0;
    let margin = 60.0;
    let extent = result
        .points
        .iter()
        .flat_map(|(_, x, y)| [x.abs(), y.abs()])
        .fold(1e-12f64, f64::max);
    let map = |v: f64| size / 2.0 + v / extent * (size / 2.0 - margin);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .unwrap();
    out.push_str(
        "<defs><marker id=\"head\" markerWidth=\"8\" markerHeight=\"8\" refX=\"7\" refY=\"4\" orient=\"auto\">\
         <path d=\"M0,0 L8,4 L0,8 z\" fill=\"#335\"/></marker></defs>\n",
    );
    writeln!(
        out,
        r##"<rect width="{size}" height="{size}" fill="#fff"/>"##
    )
    .unwrap();
    let c = size / 2.0;
    writeln!(
        out,
        r##"<line x1="0" y1="{c}" x2="{size}" y2="{c}" stroke="#ccc"/>"##
    )
    .unwrap();
    writeln!(
        out,
        r##"<line x1="{c}" y1="0" x2="{c}" y2="{size}" stroke="#ccc"/>"##
    )
    .unwrap();
    for (label, x, y) in &result.points {
        let (px, py) = (map(*x), size - map(*y));
        writeln!(
            out,
            r##"<line x1="{c}" y1="{c}" x2="{px:.2}" y2="{py:.2}" stroke="#335" marker-end="url(#head)"/>"##
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            px + 4.0,
            py - 4.0,
            escape_xml(label)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
