//! Independent f64 reference implementations used by the acceptance checks.
//! Nothing here calls into the library's numeric code.

#![allow(dead_code)]

use std::f64::consts::PI;

use stepsrl::corpus::TrainingExample;
use stepsrl::model::{is_regularized, ModelConfig, ModelParams};
use stepsrl::signal::MfccConfig;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W` for a row-major `rows × cols` matrix.
pub fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &xr) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xr * w[r * cols + c];
        }
    }
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Summed `-log softmax(row)[target]`.
pub fn cross_entropy(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    rows.iter()
        .zip(targets)
        .map(|(r, &t)| log_sum_exp(r) - r[t])
        .sum()
}

/// One LSTM over `inputs` in time order (or reversed); returns hidden states
/// indexed by time. Gate blocks are `[i, f, g, o]`.
pub fn lstm(
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    hidden: usize,
    inputs: &[Vec<f64>],
    h0: Option<&[f64]>,
    reverse: bool,
) -> Vec<Vec<f64>> {
    let g4 = 4 * hidden;
    let mut h = h0.map_or_else(|| vec![0.0; hidden], <[f64]>::to_vec);
    let mut c = vec![0.0; hidden];
    let mut out = vec![Vec::new(); inputs.len()];
    for s in 0..inputs.len() {
        let t = if reverse { inputs.len() - 1 - s } else { s };
        let xg = vec_mat(&inputs[t], wx, g4);
        let hg = vec_mat(&h, wh, g4);
        let gates: Vec<f64> = (0..g4).map(|j| xg[j] + hg[j] + b[j]).collect();
        for j in 0..hidden {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[hidden + j]);
            let g = gates[2 * hidden + j].tanh();
            let o = sigmoid(gates[3 * hidden + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        out[t] = h.clone();
    }
    out
}

/// The full network evaluated per example in f64.
pub struct ModelOracle {
    pub cfg: ModelConfig,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ModelOracle {
    pub fn new(params: &ModelParams) -> Self {
        let named = params.named();
        ModelOracle {
            cfg: params.config.clone(),
            names: named.iter().map(|(n, _)| n.to_string()).collect(),
            values: named
                .iter()
                .map(|(_, t)| t.data().iter().map(|&x| f64::from(x)).collect())
                .collect(),
        }
    }

    fn get(&self, name: &str) -> &[f64] {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no tensor {name}"));
        &self.values[i]
    }

    fn run_lstm(
        &self,
        prefix: &str,
        hidden: usize,
        inputs: &[Vec<f64>],
        h0: Option<&[f64]>,
        reverse: bool,
    ) -> Vec<Vec<f64>> {
        lstm(
            self.get(&format!("{prefix}.w_x")),
            self.get(&format!("{prefix}.w_h")),
            self.get(&format!("{prefix}.b")),
            hidden,
            inputs,
            h0,
            reverse,
        )
    }

    /// Per-step `h⃗ ⊕ h⃖` and the context vector `h⃗_T ⊕ h⃖_1`.
    fn bilstm(&self, prefix: &str, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let h = self.cfg.hidden;
        let fwd = self.run_lstm(&format!("{prefix}.fwd"), h, inputs, None, false);
        let bwd = self.run_lstm(&format!("{prefix}.bwd"), h, inputs, None, true);
        let steps = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| [f.as_slice(), b.as_slice()].concat())
            .collect();
        let f = [fwd.last().unwrap().as_slice(), bwd[0].as_slice()].concat();
        (steps, f)
    }

    fn attention(&self, h_t: &[Vec<f64>], f: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = h_t.iter().map(|h| dot(h, f)).collect();
        if !self.cfg.normalize_attention {
            return raw;
        }
        let lse = log_sum_exp(&raw);
        raw.iter().map(|a| (a - lse).exp()).collect()
    }

    /// `z_new` for one example.
    pub fn latent(&self, ex: &TrainingExample) -> Vec<f64> {
        let cfg = &self.cfg;
        let rows = |seg: &stepsrl::signal::AcousticSegment| -> Vec<Vec<f64>> {
            (0..seg.n())
                .map(|i| seg.row(i).iter().map(|&x| f64::from(x)).collect())
                .collect()
        };
        let context: Vec<Vec<f64>> = ex
            .left
            .iter()
            .chain(&ex.right)
            .flat_map(|s| rows(s))
            .collect();
        let target = rows(&ex.target);
        let words: Vec<Vec<f64>> = ex
            .word_vectors
            .iter()
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .collect();

        let (_, f_c) = self.bilstm("bilstm_c", &context);
        let (h_t, _) = self.bilstm("bilstm_t", &target);
        let (_, f_w) = self.bilstm("bilstm_w", &words);
        let a_c = self.attention(&h_t, &f_c);
        let a_w = self.attention(&h_t, &f_w);
        let enc_in: Vec<Vec<f64>> = h_t
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let mut row: Vec<f64> = h.iter().map(|x| a_c[i] * x).collect();
                row.extend(h.iter().map(|x| a_w[i] * x));
                row.extend_from_slice(h);
                row
            })
            .collect();
        let enc = self.run_lstm("encoder", cfg.d, &enc_in, None, false);
        let z = enc.last().unwrap();
        let mut z_new = vec_mat(z, self.get("fusion.w1"), cfg.d_e);
        if cfg.d_a > 0 {
            let aux: Vec<f64> = ex.aux.iter().map(|&x| f64::from(x)).collect();
            let extra = vec_mat(&aux, self.get("fusion.w2"), cfg.d_e);
            z_new.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        z_new
            .iter_mut()
            .zip(self.get("fusion.b"))
            .for_each(|(a, b)| *a += b);
        z_new
    }

    /// Teacher-forced logits, one row per target slot.
    pub fn logits(&self, ex: &TrainingExample) -> Vec<Vec<f64>> {
        let cfg = &self.cfg;
        let z_new = self.latent(ex);
        let table = self.get("token_embedding");
        let embed = |id: usize| table[id * cfg.d_e..(id + 1) * cfg.d_e].to_vec();
        let inputs: Vec<Vec<f64>> = (0..cfg.k())
            .map(|i| {
                embed(if i == 0 {
                    cfg.sops()
                } else {
                    ex.targets[i - 1]
                })
            })
            .collect();
        let hs = self.run_lstm("decoder", cfg.d_e, &inputs, Some(&z_new), false);
        let (w, b) = (self.get("proj.w"), self.get("proj.b"));
        hs.iter()
            .map(|h| {
                vec_mat(h, w, cfg.vocab)
                    .iter()
                    .zip(b)
                    .map(|(x, y)| x + y)
                    .collect()
            })
            .collect()
    }

    /// Mean cross-entropy over the batch plus `l2 · Σ‖W‖²` on LSTM weights.
    pub fn loss(&self, batch: &[TrainingExample], l2: f64) -> f64 {
        let ce: f64 = batch
            .iter()
            .map(|ex| cross_entropy(&self.logits(ex), &ex.targets))
            .sum();
        let reg: f64 = self
            .names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| is_regularized(n))
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum();
        ce / batch.len() as f64 + l2 * reg
    }

    /// Finite-difference gradient of [`ModelOracle::loss`] for every scalar.
    pub fn numeric_gradient(
        &mut self,
        batch: &[TrainingExample],
        l2: f64,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.values.len());
        for t in 0..self.values.len() {
            let mut g = vec![0.0; self.values[t].len()];
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = self.values[t][i];
                let mut at = |offset: f64| {
                    self.values[t][i] = orig + offset;
                    self.loss(batch, l2)
                };
                *gi = five_point(&mut at, step);
                self.values[t][i] = orig;
            }
            out.push(g);
        }
        out
    }
}

/// Five-point central difference, truncation error O(step⁴). A wide step
/// keeps f64 round-off far below the smallest gradients being checked.
pub fn five_point(f: &mut dyn FnMut(f64) -> f64, step: f64) -> f64 {
    (-f(2.0 * step) + 8.0 * f(step) - 8.0 * f(-step) + f(-2.0 * step)) / (12.0 * step)
}

/// Finite-difference gradients of a scalar function of several inputs.
pub fn numeric_gradients(
    inputs: &[Vec<f64>],
    step: f64,
    f: &dyn Fn(&[Vec<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut x = inputs.to_vec();
    let mut out = Vec::new();
    for t in 0..x.len() {
        let mut g = vec![0.0; x[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = x[t][i];
            let mut at = |offset: f64| {
                x[t][i] = orig + offset;
                f(&x)
            };
            *gi = five_point(&mut at, step);
            x[t][i] = orig;
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// MFCCs by direct definition: pre-emphasis, Hamming frames, a naive DFT,
/// triangular mel filters on the magnitude spectrum, log and an orthonormal
/// DCT-II.
pub fn mfcc(samples: &[i16], cfg: &MfccConfig, sample_rate: f64) -> Vec<Vec<f64>> {
    let x: Vec<f64> = samples.iter().map(|&s| f64::from(s) / 32768.0).collect();
    let y: Vec<f64> = (0..x.len())
        .map(|i| {
            if i == 0 {
                x[0]
            } else {
                x[i] - cfg.pre_emphasis * x[i - 1]
            }
        })
        .collect();
    let win = (cfg.frame_ms * sample_rate / 1000.0).round() as usize;
    let hop = (cfg.hop_ms * sample_rate / 1000.0).round() as usize;
    let frames = if y.len() <= win {
        1
    } else {
        1 + (y.len() - win) / hop
    };
    let n_fft = cfg.n_fft;
    let bins = n_fft / 2 + 1;
    let n_mels = cfg.n_mels.unwrap_or(cfg.d_mfcc.max(40));

    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| inv(top * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * hop;
        let frame: Vec<f64> = (0..win)
            .map(|i| {
                let s = y.get(start + i).copied().unwrap_or(0.0);
                let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos();
                s * w
            })
            .collect();
        let spectrum: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, s) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i % n_fft) as f64 / n_fft as f64;
                    re += s * ang.cos();
                    im += s * ang.sin();
                }
                re.hypot(im)
            })
            .collect();
        let log_mel: Vec<f64> = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
                let e: f64 = spectrum
                    .iter()
                    .enumerate()
                    .map(|(k, mag)| {
                        let hz = k as f64 * sample_rate / n_fft as f64;
                        let w = if hz <= l || hz >= r {
                            0.0
                        } else if hz <= c {
                            (hz - l) / (c - l)
                        } else {
                            (r - hz) / (r - c)
                        };
                        w * mag
                    })
                    .sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        let coeffs = (0..cfg.d_mfcc)
            .map(|k| {
                let norm = if k == 0 {
                    (1.0 / n_mels as f64).sqrt()
                } else {
                    (2.0 / n_mels as f64).sqrt()
                };
                norm * log_mel
                    .iter()
                    .enumerate()
                    .map(|(m, v)| {
                        v * (PI * k as f64 * (2 * m + 1) as f64 / (2 * n_mels) as f64).cos()
                    })
                    .sum::<f64>()
            })
            .collect();
        out.push(coeffs);
    }
    out
}

/// Rank of each entry counted directly: 1 + (values below) + (ties − 1)/2.
pub fn brute_force_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&brute_force_ranks(x), &brute_force_ranks(y))
}
