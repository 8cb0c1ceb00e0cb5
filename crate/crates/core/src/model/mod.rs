//! The speech-text entanglement network.
//!
//! Three Bi-LSTMs read the context speech frames, the target word frames and
//! the text vectors of the whole window. The final states of the context and
//! text Bi-LSTMs act as context vectors `f^C` and `f^W`; every target hidden
//! state `h_i^T` is rescaled by its raw dot product with each context vector.
//! The two rescaled sequences and `h^T` are concatenated per step and read by
//! a forward encoder LSTM whose final hidden state `z` is fused with the
//! speaker one-hot (`z_new = z·W1 + z_aux·W2 + B`). A decoder LSTM started at
//! `h_0 = z_new` predicts the 50-slot phoneme target.
//!
//! All computation is batched: row `b` of every per-step matrix belongs to
//! example `b`, and no operation mixes rows, so examples never interact.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingExample, TARGET_LEN};
use crate::error::{Error, Result};
use crate::rng::{substream, Substream};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_mfcc: usize,
    pub d_w: usize,
    /// Hidden size `H` shared by the three Bi-LSTMs.
    pub hidden: usize,
    /// Encoder LSTM hidden size (dimension of `z`).
    pub d: usize,
    /// Latent size; also the decoder hidden and token-embedding size.
    pub d_e: usize,
    pub vocab: usize,
    pub d_a: usize,
    /// Frames per acoustic segment.
    pub n: usize,
    /// Context words on each side.
    pub m: usize,
    pub normalize_attention: bool,
}

impl ModelConfig {
    pub fn k(&self) -> usize {
        TARGET_LEN
    }

    pub fn sops(&self) -> usize {
        self.vocab - 4
    }

    pub fn pad(&self) -> usize {
        self.vocab - 2
    }

    pub fn eops(&self) -> usize {
        self.vocab - 1
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("d_mfcc", self.d_mfcc),
            ("d_w", self.d_w),
            ("hidden", self.hidden),
            ("d", self.d),
            ("d_e", self.d_e),
            ("n", self.n),
            ("m", self.m),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.vocab < 5 {
            out.push(format!("vocabulary of {} leaves no phones", self.vocab));
        }
        out
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut lstm = |prefix: &str, input: usize, hidden: usize| {
            out.push((format!("{prefix}.w_x"), vec![input, 4 * hidden]));
            out.push((format!("{prefix}.w_h"), vec![hidden, 4 * hidden]));
            out.push((format!("{prefix}.b"), vec![4 * hidden]));
        };
        for (name, input) in [
            ("bilstm_c", self.d_mfcc),
            ("bilstm_t", self.d_mfcc),
            ("bilstm_w", self.d_w),
        ] {
            lstm(&format!("{name}.fwd"), input, self.hidden);
            lstm(&format!("{name}.bwd"), input, self.hidden);
        }
        lstm("encoder", 6 * self.hidden, self.d);
        lstm("decoder", self.d_e, self.d_e);
        out.push(("token_embedding".into(), vec![self.vocab, self.d_e]));
        out.push(("proj.w".into(), vec![self.d_e, self.vocab]));
        out.push(("proj.b".into(), vec![self.vocab]));
        out.push(("fusion.w1".into(), vec![self.d, self.d_e]));
        out.push(("fusion.w2".into(), vec![self.d_a, self.d_e]));
        out.push(("fusion.b".into(), vec![self.d_e]));
        out
    }
}

/// Weights of one unidirectional LSTM; gate blocks are `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(&[input, 4 * hidden]),
            w_h: Tensor::zeros(&[hidden, 4 * hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn input(&self) -> usize {
        self.w_x.rows()
    }

    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = LstmParams {
            w_x: uniform(&[input, 4 * hidden], rng),
            w_h: uniform(&[hidden, 4 * hidden], rng),
            b: Tensor::zeros(&[4 * hidden]),
        };
        p.b.data_mut()[hidden..2 * hidden].fill(1.0);
        p
    }

    fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        BiLstmParams {
            fwd: LstmParams::zeros(input, hidden),
            bwd: LstmParams::zeros(input, hidden),
        }
    }

    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BiLstmParams {
            fwd: LstmParams::init(input, hidden, rng),
            bwd: LstmParams::init(input, hidden, rng),
        }
    }
}

/// Uniform in `±1/sqrt(rows)`, rows being the input (fan-in) dimension.
fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if shape[0] > 0 {
        let bound = 1.0 / (shape[0] as f32).sqrt();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..bound));
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub bilstm_c: BiLstmParams,
    pub bilstm_t: BiLstmParams,
    pub bilstm_w: BiLstmParams,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    pub token_embedding: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub fusion_b: Tensor,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        ModelParams {
            config: c.clone(),
            bilstm_c: BiLstmParams::zeros(c.d_mfcc, c.hidden),
            bilstm_t: BiLstmParams::zeros(c.d_mfcc, c.hidden),
            bilstm_w: BiLstmParams::zeros(c.d_w, c.hidden),
            encoder: LstmParams::zeros(6 * c.hidden, c.d),
            decoder: LstmParams::zeros(c.d_e, c.d_e),
            token_embedding: Tensor::zeros(&[c.vocab, c.d_e]),
            proj_w: Tensor::zeros(&[c.d_e, c.vocab]),
            proj_b: Tensor::zeros(&[c.vocab]),
            w1: Tensor::zeros(&[c.d, c.d_e]),
            w2: Tensor::zeros(&[c.d_a, c.d_e]),
            fusion_b: Tensor::zeros(&[c.d_e]),
        }
    }

    /// Seeded initialization. `W2` draws from its own substream so that
    /// runs differing only in the auxiliary mode share all other weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let c = config;
        let mut rng = substream(seed, Substream::Init);
        let mut aux_rng = substream(seed, Substream::AuxInit);
        Ok(ModelParams {
            config: c.clone(),
            bilstm_c: BiLstmParams::init(c.d_mfcc, c.hidden, &mut rng),
            bilstm_t: BiLstmParams::init(c.d_mfcc, c.hidden, &mut rng),
            bilstm_w: BiLstmParams::init(c.d_w, c.hidden, &mut rng),
            encoder: LstmParams::init(6 * c.hidden, c.d, &mut rng),
            decoder: LstmParams::init(c.d_e, c.d_e, &mut rng),
            token_embedding: uniform(&[c.vocab, c.d_e], &mut rng),
            proj_w: uniform(&[c.d_e, c.vocab], &mut rng),
            proj_b: Tensor::zeros(&[c.vocab]),
            w1: uniform(&[c.d, c.d_e], &mut rng),
            w2: uniform(&[c.d_a, c.d_e], &mut aux_rng),
            fusion_b: Tensor::zeros(&[c.d_e]),
        })
    }

    /// Tensors in the order of [`ModelConfig::param_shapes`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for bi in [&self.bilstm_c, &self.bilstm_t, &self.bilstm_w] {
            out.extend(bi.fwd.tensors());
            out.extend(bi.bwd.tensors());
        }
        out.extend(self.encoder.tensors());
        out.extend(self.decoder.tensors());
        out.extend([
            &self.token_embedding,
            &self.proj_w,
            &self.proj_b,
            &self.w1,
            &self.w2,
            &self.fusion_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for bi in [&mut self.bilstm_c, &mut self.bilstm_t, &mut self.bilstm_w] {
            out.extend(bi.fwd.tensors_mut());
            out.extend(bi.bwd.tensors_mut());
        }
        out.extend(self.encoder.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out.extend([
            &mut self.token_embedding,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.w1,
            &mut self.w2,
            &mut self.fusion_b,
        ]);
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Rebuilds parameters from named tensors, reporting every shape mismatch.
    pub fn from_named(config: &ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ModelParams::zeros(config);
        let mut problems = Vec::new();
        let expected = config.param_shapes();
        for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
            match tensors.iter().position(|(n, _)| n == name) {
                Some(i) => {
                    let (_, t) = tensors.swap_remove(i);
                    if t.shape() != shape.as_slice() {
                        problems.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()));
                    } else {
                        *slot = t;
                    }
                }
                None => problems.push(format!("{name}: expected {shape:?}, found nothing")),
            }
        }
        for (name, t) in &tensors {
            problems.push(format!(
                "{name}: unexpected tensor of shape {:?}",
                t.shape()
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter shapes do not match the configuration:\n  {}",
                problems.join("\n  ")
            )));
        }
        Ok(params)
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor on `tape`; `track` enables gradients.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.grad = None;
                t.requires_grad = track;
                tape.leaf(t)
            })
            .collect();
        BoundParams::from_vars(vars)
    }

    /// Adds the tape gradients of `bound` into each tensor's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (t, v) in self.tensors_mut().into_iter().zip(&bound.all) {
            tape.accumulate_grad(*v, t);
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }
}

/// Whether a parameter carries the L2 penalty (LSTM weight matrices only).
pub fn is_regularized(name: &str) -> bool {
    name.ends_with(".w_x") || name.ends_with(".w_h")
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
}

/// Parameter handles on one tape, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub all: Vec<Var>,
    pub bilstm_c: BiLstmVars,
    pub bilstm_t: BiLstmVars,
    pub bilstm_w: BiLstmVars,
    pub encoder: LstmVars,
    pub decoder: LstmVars,
    pub token_embedding: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub w1: Var,
    pub w2: Var,
    pub fusion_b: Var,
}

impl BoundParams {
    fn from_vars(all: Vec<Var>) -> Self {
        let l = |i: usize| LstmVars {
            w_x: all[i],
            w_h: all[i + 1],
            b: all[i + 2],
        };
        let bi = |i: usize| BiLstmVars {
            fwd: l(i),
            bwd: l(i + 3),
        };
        BoundParams {
            bilstm_c: bi(0),
            bilstm_t: bi(6),
            bilstm_w: bi(12),
            encoder: l(18),
            decoder: l(21),
            token_embedding: all[24],
            proj_w: all[25],
            proj_b: all[26],
            w1: all[27],
            w2: all[28],
            fusion_b: all[29],
            all,
        }
    }
}

/// Runs one LSTM over `steps` time steps of a time-major `steps·B × D` input.
/// Returns the hidden state of every step in time order.
pub fn lstm_sequence(
    tape: &mut Tape,
    p: &LstmVars,
    inputs: Var,
    steps: usize,
    batch: usize,
    h0: Option<Var>,
    reverse: bool,
) -> Result<Vec<Var>> {
    let in_shape = tape.shape(inputs).to_vec();
    let expected_in = tape.shape(p.w_x)[0];
    if in_shape.len() != 2 || in_shape[0] != steps * batch || in_shape[1] != expected_in {
        return Err(Error::Dimension(format!(
            "lstm input {in_shape:?} does not match {steps} steps x {batch} rows x {expected_in} features"
        )));
    }
    if steps == 0 {
        return Err(Error::Contract("lstm needs at least one time step".into()));
    }
    let hidden = tape.shape(p.w_h)[0];
    let proj = tape.matmul(inputs, p.w_x)?;
    let proj = tape.add(proj, p.b)?;
    let mut h = h0;
    let mut c = tape.constant(Tensor::zeros(&[batch, hidden]));
    let mut outs = vec![None; steps];
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let x_t = tape.slice_rows(proj, t * batch, batch)?;
        let gates = match h {
            Some(prev) => {
                let rec = tape.matmul(prev, p.w_h)?;
                tape.add(x_t, rec)?
            }
            None => x_t,
        };
        c = tape.lstm_cell_state(gates, c)?;
        let h_t = tape.lstm_cell_output(gates, c)?;
        outs[t] = Some(h_t);
        h = Some(h_t);
    }
    Ok(outs
        .into_iter()
        .map(|v| v.expect("every step visited"))
        .collect())
}

/// Per-step hidden states of both directions of a Bi-LSTM.
#[derive(Debug, Clone)]
pub struct BiOutput {
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
}

impl BiOutput {
    /// `h_i = h⃗_i ⊕ h⃖_i`.
    pub fn step(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        tape.concat_cols(&[self.fwd[i], self.bwd[i]])
    }

    /// Final forward output `h⃗_T` and final backward output `h⃖_1`.
    pub fn finals(&self) -> (Var, Var) {
        (*self.fwd.last().unwrap(), self.bwd[0])
    }

    /// Context vector `o⃗ ⊕ o⃖`.
    pub fn context_vector(&self, tape: &mut Tape) -> Result<Var> {
        let (f, b) = self.finals();
        tape.concat_cols(&[f, b])
    }
}

pub fn bilstm_sequence(
    tape: &mut Tape,
    p: &BiLstmVars,
    inputs: Var,
    steps: usize,
    batch: usize,
) -> Result<BiOutput> {
    Ok(BiOutput {
        fwd: lstm_sequence(tape, &p.fwd, inputs, steps, batch, None, false)?,
        bwd: lstm_sequence(tape, &p.bwd, inputs, steps, batch, None, true)?,
    })
}

/// Result of running a Bi-LSTM block on one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmOutput {
    /// `T × 2H`.
    pub h: Tensor,
    pub fwd_final: Vec<f32>,
    pub bwd_final: Vec<f32>,
}

/// Runs a Bi-LSTM block over a single `T × D` sequence.
pub fn bilstm_forward(block: &BiLstmParams, sequence: &Tensor) -> Result<BiLstmOutput> {
    if sequence.rank() != 2 || sequence.cols() != block.fwd.input() {
        return Err(Error::Dimension(format!(
            "sequence {:?} does not match block input size {}",
            sequence.shape(),
            block.fwd.input()
        )));
    }
    let mut tape = Tape::new();
    let bind = |tape: &mut Tape, l: &LstmParams| LstmVars {
        w_x: tape.constant(l.w_x.clone()),
        w_h: tape.constant(l.w_h.clone()),
        b: tape.constant(l.b.clone()),
    };
    let vars = BiLstmVars {
        fwd: bind(&mut tape, &block.fwd),
        bwd: bind(&mut tape, &block.bwd),
    };
    let x = tape.constant(sequence.clone());
    let out = bilstm_sequence(&mut tape, &vars, x, sequence.rows(), 1)?;
    let steps: Vec<Var> = (0..sequence.rows())
        .map(|i| out.step(&mut tape, i))
        .collect::<Result<_>>()?;
    let h = tape.concat_rows(&steps)?;
    let (f, b) = out.finals();
    Ok(BiLstmOutput {
        h: tape.value(h).clone(),
        fwd_final: tape.value(f).data().to_vec(),
        bwd_final: tape.value(b).data().to_vec(),
    })
}

/// `α_i = h_i • f` and `h_i ⊙ α_i` for an `n × 2H` sequence and a `2H` vector.
pub fn entangle(h: &Tensor, f: &[f32]) -> Result<(Tensor, Vec<f32>)> {
    if h.rank() != 2 || h.cols() != f.len() {
        return Err(Error::Dimension(format!(
            "cannot entangle {:?} with a vector of {}",
            h.shape(),
            f.len()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let fv = tape.constant(Tensor::new(vec![f.len(), 1], f.to_vec())?);
    let alpha = tape.matmul(hv, fv)?;
    let out = tape.mul(alpha, hv)?;
    Ok((tape.value(out).clone(), tape.value(alpha).data().to_vec()))
}

/// Constant inputs of a batch laid out time-major.
struct BatchInputs {
    target: Var,
    context: Var,
    words: Var,
    aux: Option<Var>,
}

fn check_example(cfg: &ModelConfig, ex: &TrainingExample) -> Result<()> {
    let bad = |what: String| Err(Error::Dimension(format!("example {:?}: {what}", ex.word)));
    if ex.target.n() != cfg.n || ex.target.dim() != cfg.d_mfcc {
        return bad(format!(
            "target segment {}x{} but model expects {}x{}",
            ex.target.n(),
            ex.target.dim(),
            cfg.n,
            cfg.d_mfcc
        ));
    }
    if ex.left.len() != cfg.m || ex.right.len() != cfg.m {
        return bad(format!(
            "context {}+{} words but model expects m={}",
            ex.left.len(),
            ex.right.len(),
            cfg.m
        ));
    }
    if ex
        .left
        .iter()
        .chain(&ex.right)
        .any(|s| s.n() != cfg.n || s.dim() != cfg.d_mfcc)
    {
        return bad("context segment shape mismatch".into());
    }
    if ex.word_vectors.len() != 2 * cfg.m + 1 || ex.word_vectors.iter().any(|v| v.len() != cfg.d_w)
    {
        return bad(format!(
            "expected {} text vectors of {}",
            2 * cfg.m + 1,
            cfg.d_w
        ));
    }
    if ex.aux.len() != cfg.d_a {
        return bad(format!(
            "aux vector has {} entries, model expects d_a={}",
            ex.aux.len(),
            cfg.d_a
        ));
    }
    if ex.targets.len() != cfg.k() {
        return bad(format!(
            "target has {} tokens, expected {}",
            ex.targets.len(),
            cfg.k()
        ));
    }
    if let Some(&t) = ex.targets.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Contract(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab
        )));
    }
    Ok(())
}

fn batch_inputs(
    tape: &mut Tape,
    cfg: &ModelConfig,
    batch: &[&TrainingExample],
) -> Result<BatchInputs> {
    for ex in batch {
        check_example(cfg, ex)?;
    }
    let b = batch.len();
    let (n, d) = (cfg.n, cfg.d_mfcc);
    let mut target = Vec::with_capacity(n * b * d);
    for t in 0..n {
        for ex in batch {
            target.extend_from_slice(ex.target.row(t));
        }
    }
    let ctx_steps = 2 * cfg.m * n;
    let mut context = Vec::with_capacity(ctx_steps * b * d);
    for w in 0..2 * cfg.m {
        for t in 0..n {
            for ex in batch {
                let seg = if w < cfg.m {
                    &ex.left[w]
                } else {
                    &ex.right[w - cfg.m]
                };
                context.extend_from_slice(seg.row(t));
            }
        }
    }
    let mut words = Vec::with_capacity((2 * cfg.m + 1) * b * cfg.d_w);
    for w in 0..2 * cfg.m + 1 {
        for ex in batch {
            words.extend_from_slice(&ex.word_vectors[w]);
        }
    }
    let aux = if cfg.d_a > 0 {
        let data = batch.iter().flat_map(|ex| ex.aux.iter().copied()).collect();
        Some(tape.constant(Tensor::new(vec![b, cfg.d_a], data)?))
    } else {
        None
    };
    Ok(BatchInputs {
        target: tape.constant(Tensor::new(vec![n * b, d], target)?),
        context: tape.constant(Tensor::new(vec![ctx_steps * b, d], context)?),
        words: tape.constant(Tensor::new(vec![(2 * cfg.m + 1) * b, cfg.d_w], words)?),
        aux,
    })
}

/// Handles to the encoder-side intermediates of a batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub batch: usize,
    pub context: BiOutput,
    pub target: BiOutput,
    pub words: BiOutput,
    pub f_c: Var,
    pub f_w: Var,
    /// `h_i^T`, one `B × 2H` matrix per target frame.
    pub h_t: Vec<Var>,
    pub alpha_c: Vec<Var>,
    pub alpha_w: Vec<Var>,
    pub h_tc: Vec<Var>,
    pub h_tw: Vec<Var>,
    pub z: Var,
    pub z_new: Var,
}

/// Scores `α_i = h_i • f` for every step, optionally softmax-normalized over steps.
fn attention_scores(tape: &mut Tape, h_t: &[Var], f: Var, normalize: bool) -> Result<Vec<Var>> {
    let raw: Vec<Var> = h_t
        .iter()
        .map(|&h| tape.row_dot(h, f))
        .collect::<Result<_>>()?;
    if !normalize {
        return Ok(raw);
    }
    let all = tape.concat_cols(&raw)?;
    let soft = tape.softmax(all)?;
    (0..raw.len())
        .map(|i| tape.slice_cols(soft, i, 1))
        .collect()
}

/// Everything up to and including `z_new` for a batch.
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    batch: &[&TrainingExample],
) -> Result<EncodedBatch> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let b = batch.len();
    let inputs = batch_inputs(tape, cfg, batch)?;
    let n = cfg.n;

    let context = bilstm_sequence(tape, &p.bilstm_c, inputs.context, 2 * cfg.m * n, b)?;
    let target = bilstm_sequence(tape, &p.bilstm_t, inputs.target, n, b)?;
    let words = bilstm_sequence(tape, &p.bilstm_w, inputs.words, 2 * cfg.m + 1, b)?;
    let f_c = context.context_vector(tape)?;
    let f_w = words.context_vector(tape)?;

    let h_t: Vec<Var> = (0..n)
        .map(|i| target.step(tape, i))
        .collect::<Result<_>>()?;
    let alpha_c = attention_scores(tape, &h_t, f_c, cfg.normalize_attention)?;
    let alpha_w = attention_scores(tape, &h_t, f_w, cfg.normalize_attention)?;
    let mut h_tc = Vec::with_capacity(n);
    let mut h_tw = Vec::with_capacity(n);
    let mut stacked = Vec::with_capacity(n);
    for i in 0..n {
        let tc = tape.mul(alpha_c[i], h_t[i])?;
        let tw = tape.mul(alpha_w[i], h_t[i])?;
        stacked.push(tape.concat_cols(&[tc, tw, h_t[i]])?);
        h_tc.push(tc);
        h_tw.push(tw);
    }
    let enc_in = tape.concat_rows(&stacked)?;
    let enc = lstm_sequence(tape, &p.encoder, enc_in, n, b, None, false)?;
    let z = *enc.last().unwrap();
    let z_new = fuse_latent(tape, p, z, inputs.aux)?;
    Ok(EncodedBatch {
        batch: b,
        context,
        target,
        words,
        f_c,
        f_w,
        h_t,
        alpha_c,
        alpha_w,
        h_tc,
        h_tw,
        z,
        z_new,
    })
}

/// `z_new = z·W1 + z_aux·W2 + B`; the `W2` term is absent without an aux vector.
pub fn fuse_latent(tape: &mut Tape, p: &BoundParams, z: Var, aux: Option<Var>) -> Result<Var> {
    let mut out = tape.matmul(z, p.w1)?;
    if let Some(a) = aux {
        let expected = tape.shape(p.w2)[0];
        if tape.shape(a)[1] != expected {
            return Err(Error::Dimension(format!(
                "aux vector has {} entries, W2 expects {expected}",
                tape.shape(a)[1]
            )));
        }
        let extra = tape.matmul(a, p.w2)?;
        out = tape.add(out, extra)?;
    }
    tape.add(out, p.fusion_b)
}

/// Teacher-forced decoder logits, `k·B × V` time-major (row `i·B + b`).
/// Step 0 reads `[SOPS]`; step `i` reads gold token `i - 1`.
pub fn decode_teacher_forced(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    z_new: Var,
    batch: &[&TrainingExample],
) -> Result<Var> {
    let b = batch.len();
    let k = cfg.k();
    let mut ids = Vec::with_capacity(k * b);
    for i in 0..k {
        for ex in batch {
            ids.push(if i == 0 {
                cfg.sops()
            } else {
                ex.targets[i - 1]
            });
        }
    }
    let emb = tape.gather_rows(p.token_embedding, &ids)?;
    let hs = lstm_sequence(tape, &p.decoder, emb, k, b, Some(z_new), false)?;
    let all = tape.concat_rows(&hs)?;
    let logits = tape.matmul(all, p.proj_w)?;
    tape.add(logits, p.proj_b)
}

/// Gold targets in the time-major order of [`decode_teacher_forced`].
pub fn time_major_targets(cfg: &ModelConfig, batch: &[&TrainingExample]) -> Vec<usize> {
    (0..cfg.k())
        .flat_map(|i| batch.iter().map(move |ex| ex.targets[i]))
        .collect()
}

/// Greedy decoding: each step feeds back its own argmax. After an example
/// emits `[EOPS]` its remaining slots are `[PAD]`. Returns the token ids
/// and the per-step `B × V` logits.
pub fn decode_greedy(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    z_new: Var,
) -> Result<(Vec<Vec<usize>>, Vec<Var>)> {
    let b = tape.shape(z_new)[0];
    let hidden = cfg.d_e;
    let mut h = z_new;
    let mut c = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut feed = vec![cfg.sops(); b];
    let mut done = vec![false; b];
    let mut tokens = vec![Vec::with_capacity(cfg.k()); b];
    let mut step_logits = Vec::with_capacity(cfg.k());
    for _ in 0..cfg.k() {
        let x = tape.gather_rows(p.token_embedding, &feed)?;
        let xp = tape.matmul(x, p.decoder.w_x)?;
        let xp = tape.add(xp, p.decoder.b)?;
        let rec = tape.matmul(h, p.decoder.w_h)?;
        let gates = tape.add(xp, rec)?;
        c = tape.lstm_cell_state(gates, c)?;
        h = tape.lstm_cell_output(gates, c)?;
        let logits = tape.matmul(h, p.proj_w)?;
        let logits = tape.add(logits, p.proj_b)?;
        let lv = tape.value(logits);
        for r in 0..b {
            let tok = if done[r] {
                cfg.pad()
            } else {
                argmax(lv.row(r))
            };
            if tok == cfg.eops() {
                done[r] = true;
            }
            tokens[r].push(tok);
            feed[r] = tok;
        }
        step_logits.push(logits);
    }
    Ok((tokens, step_logits))
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    TeacherForced,
    Greedy,
}

/// Every intermediate of one example's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h_c: Tensor,
    pub h_t: Tensor,
    pub h_w: Tensor,
    pub f_c: Vec<f32>,
    pub f_w: Vec<f32>,
    pub alpha_c: Vec<f32>,
    pub alpha_w: Vec<f32>,
    pub h_tc: Tensor,
    pub h_tw: Tensor,
    pub z: Vec<f32>,
    pub z_new: Vec<f32>,
    /// `k × V`.
    pub logits: Tensor,
    pub tokens: Option<Vec<usize>>,
}

fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Tensor> {
    let v = tape.concat_rows(rows)?;
    Ok(tape.value(v).clone())
}

fn bi_rows(tape: &mut Tape, out: &BiOutput) -> Result<Tensor> {
    let steps: Vec<Var> = (0..out.fwd.len())
        .map(|i| out.step(tape, i))
        .collect::<Result<_>>()?;
    stack_rows(tape, &steps)
}

pub fn forward(
    params: &ModelParams,
    example: &TrainingExample,
    mode: DecodeMode,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let batch = [example];
    let enc = encode(&mut tape, cfg, &p, &batch)?;
    let (logits, tokens) = match mode {
        DecodeMode::TeacherForced => {
            let l = decode_teacher_forced(&mut tape, cfg, &p, enc.z_new, &batch)?;
            (tape.value(l).clone(), None)
        }
        DecodeMode::Greedy => {
            let (tokens, steps) = decode_greedy(&mut tape, cfg, &p, enc.z_new)?;
            (stack_rows(&mut tape, &steps)?, tokens.into_iter().next())
        }
    };
    let scalars = |tape: &Tape, vs: &[Var]| vs.iter().map(|&v| tape.value(v).item()).collect();
    Ok(ForwardTrace {
        h_c: bi_rows(&mut tape, &enc.context)?,
        h_t: stack_rows(&mut tape, &enc.h_t)?,
        h_w: bi_rows(&mut tape, &enc.words)?,
        f_c: tape.value(enc.f_c).data().to_vec(),
        f_w: tape.value(enc.f_w).data().to_vec(),
        alpha_c: scalars(&tape, &enc.alpha_c),
        alpha_w: scalars(&tape, &enc.alpha_w),
        h_tc: stack_rows(&mut tape, &enc.h_tc)?,
        h_tw: stack_rows(&mut tape, &enc.h_tw)?,
        z: tape.value(enc.z).data().to_vec(),
        z_new: tape.value(enc.z_new).data().to_vec(),
        logits,
        tokens,
    })
}

/// `z_new` for each example, computed in batches.
pub fn latent_vectors(
    params: &ModelParams,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let enc = encode(&mut tape, &params.config, &p, &refs)?;
        let z = tape.value(enc.z_new);
        out.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
