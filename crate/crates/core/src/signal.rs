//! 16 kHz PCM word segments to fixed-length MFCC matrices.
//!
//! Per frame: pre-emphasis, Hamming window, magnitude spectrum, triangular mel
//! filterbank over 0 Hz to Nyquist, natural log with a floor, orthonormal
//! DCT-II truncated to `d_mfcc` coefficients. Arithmetic runs in f64 and the
//! result is stored as f32.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Waveform {
    samples: Vec<i16>,
}

impl Waveform {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Contract(format!(
                "waveform sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Contract("waveform has no samples".into()));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Sub-range `[start, end)` as its own waveform.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.samples.len() {
            return Err(Error::Contract(format!(
                "segment {start}..{end} outside waveform of {} samples",
                self.samples.len()
            )));
        }
        Waveform::new(self.samples[start..end].to_vec(), SAMPLE_RATE)
    }
}

/// Reads a RIFF/WAVE file holding 16-bit little-endian mono PCM at 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let audio_err = |message: String| Error::Audio {
        path: path.to_path_buf(),
        message,
    };
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(format!(
            "expected 16-bit integer PCM, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(audio_err(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(audio_err(format!(
            "expected {SAMPLE_RATE} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    Waveform::new(samples, SAMPLE_RATE).map_err(|e| audio_err(e.to_string()))
}

pub fn write_wav(path: &Path, samples: &[i16]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in samples {
        writer.write_sample(s).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub d_mfcc: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    /// Filterbank size; `None` resolves to `max(40, d_mfcc)`.
    pub n_mels: Option<usize>,
    pub log_floor: f64,
    pub pre_emphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            d_mfcc: 50,
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: None,
            log_floor: 1e-10,
            pre_emphasis: 0.97,
        }
    }
}

impl MfccConfig {
    pub fn with_dim(d_mfcc: usize) -> Self {
        MfccConfig {
            d_mfcc,
            ..MfccConfig::default()
        }
    }

    pub fn resolved_n_mels(&self) -> usize {
        self.n_mels.unwrap_or(self.d_mfcc.max(40))
    }

    pub fn frame_len(&self) -> usize {
        (self.frame_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    /// Problems with this configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_mfcc == 0 {
            out.push("mfcc.d_mfcc must be positive".to_string());
        }
        if self.d_mfcc > self.resolved_n_mels() {
            out.push(format!(
                "mfcc.d_mfcc ({}) exceeds n_mels ({})",
                self.d_mfcc,
                self.resolved_n_mels()
            ));
        }
        if self.frame_len() == 0 || self.hop_len() == 0 {
            out.push("mfcc.frame_ms and mfcc.hop_ms must cover at least one sample".to_string());
        }
        if self.frame_len() > self.n_fft {
            out.push(format!(
                "mfcc.n_fft ({}) is shorter than the frame ({} samples)",
                self.n_fft,
                self.frame_len()
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            out.push("mfcc.log_floor must be a positive finite number".to_string());
        }
        out
    }
}

/// Frame count for `len` samples: `1 + floor((len - W) / H)`, and one
/// zero-padded frame when the input is shorter than a window.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len <= frame_len {
        1
    } else {
        1 + (len - frame_len) / hop
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT basis and FFT plan for one config.
pub struct MfccExtractor {
    config: MfccConfig,
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    /// `n_mels` rows of `n_fft / 2 + 1` weights.
    filterbank: Vec<Vec<f64>>,
    /// `d_mfcc` rows of `n_mels` basis values.
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("config", &self.config)
            .finish()
    }
}

impl MfccExtractor {
    pub fn new(config: &MfccConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let frame_len = config.frame_len();
        let n_mels = config.resolved_n_mels();
        let n_bins = config.n_fft / 2 + 1;

        let window = (0..frame_len)
            .map(|i| {
                if frame_len == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * i as f64 / (frame_len - 1) as f64).cos()
                }
            })
            .collect();

        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(SAMPLE_RATE) / config.n_fft as f64;
        let filterbank = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();

        let dct = (0..config.d_mfcc)
            .map(|k| {
                let scale = if k == 0 {
                    (1.0 / n_mels as f64).sqrt()
                } else {
                    (2.0 / n_mels as f64).sqrt()
                };
                (0..n_mels)
                    .map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / n_mels as f64).cos())
                    .collect()
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(MfccExtractor {
            config: config.clone(),
            frame_len,
            hop: config.hop_len(),
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn frame_count(&self, len: usize) -> usize {
        frame_count(len, self.frame_len, self.hop)
    }

    /// `frames × d_mfcc` coefficients for a waveform.
    pub fn compute(&self, wave: &Waveform) -> Tensor {
        let x: Vec<f64> = wave
            .samples()
            .iter()
            .map(|&s| f64::from(s) / 32768.0)
            .collect();
        let mut emphasized = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let prev = if i == 0 { 0.0 } else { x[i - 1] };
            emphasized.push(if i == 0 {
                v
            } else {
                v - self.config.pre_emphasis * prev
            });
        }
        let frames = self.frame_count(x.len());
        let d = self.config.d_mfcc;
        let mut out = Vec::with_capacity(frames * d);
        let mut frame = vec![0.0; self.frame_len];
        for f in 0..frames {
            let start = f * self.hop;
            frame.fill(0.0);
            let end = (start + self.frame_len).min(emphasized.len());
            frame[..end - start].copy_from_slice(&emphasized[start..end]);
            out.extend(
                self.frame_coefficients(&frame)
                    .into_iter()
                    .map(|c| c as f32),
            );
        }
        Tensor::new(vec![frames, d], out).expect("frame buffer sized from frame count")
    }

    /// Coefficients of one analysis frame (already pre-emphasized, unwindowed).
    pub fn frame_coefficients(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.config.n_fft];
        for (i, (&s, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex::new(s * w, 0.0);
        }
        self.fft.process(&mut buf);
        let magnitude: Vec<f64> = buf[..self.config.n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm())
            .collect();
        let log_mel: Vec<f64> = self
            .filterbank
            .iter()
            .map(|weights| {
                let e: f64 = weights.iter().zip(&magnitude).map(|(w, m)| w * m).sum();
                e.max(self.config.log_floor).ln()
            })
            .collect();
        self.dct
            .iter()
            .map(|basis| basis.iter().zip(&log_mel).map(|(b, v)| b * v).sum())
            .collect()
    }

    /// Coefficients of acoustic silence (an all-zero frame).
    pub fn silence_vector(&self) -> Vec<f32> {
        self.frame_coefficients(&vec![0.0; self.frame_len])
            .into_iter()
            .map(|c| c as f32)
            .collect()
    }
}

pub fn mfcc(wave: &Waveform, config: &MfccConfig) -> Result<Tensor> {
    Ok(MfccExtractor::new(config)?.compute(wave))
}

/// A word's MFCC frames padded (or truncated) to exactly `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticSegment {
    frames: Tensor,
    valid_frame_count: usize,
    truncated_from: Option<usize>,
}

impl AcousticSegment {
    /// An all-silence segment of `n` rows.
    pub fn silence(n: usize, silence: &[f32]) -> Self {
        let data = silence
            .iter()
            .copied()
            .cycle()
            .take(n * silence.len())
            .collect();
        AcousticSegment {
            frames: Tensor::new(vec![n, silence.len()], data).expect("sized from n"),
            valid_frame_count: 0,
            truncated_from: None,
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn n(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn valid_frame_count(&self) -> usize {
        self.valid_frame_count
    }

    /// Original frame count when the input was longer than `n`.
    pub fn truncated_from(&self) -> Option<usize> {
        self.truncated_from
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.frames.row(i)
    }
}

/// Pads `frames` with copies of `silence` up to `n` rows; longer inputs keep
/// their first `n` frames and log a warning.
pub fn pad_to_n(frames: &Tensor, n: usize, silence: &[f32]) -> Result<AcousticSegment> {
    if frames.rank() != 2 || frames.cols() != silence.len() {
        return Err(Error::Dimension(format!(
            "frames {:?} do not match silence vector of {}",
            frames.shape(),
            silence.len()
        )));
    }
    let d = silence.len();
    let rows = frames.rows();
    let keep = rows.min(n);
    let truncated_from = if rows > n {
        log::warn!("segment of {rows} frames truncated to n={n}");
        Some(rows)
    } else {
        None
    };
    let mut data = Vec::with_capacity(n * d);
    data.extend_from_slice(&frames.data()[..keep * d]);
    for _ in keep..n {
        data.extend_from_slice(silence);
    }
    Ok(AcousticSegment {
        frames: Tensor::new(vec![n, d], data)?,
        valid_frame_count: keep,
        truncated_from,
    })
}
