//! Recurrent and attention building blocks recorded on a [`Tape`].
//!
//! Gate blocks inside every stacked LSTM matrix are ordered input, forget,
//! output, candidate: rows `0..H` drive the input gate, `H..2H` the forget
//! gate, `2H..3H` the output gate and `3H..4H` the candidate memory.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamKind, ParamStore, ParamVars, Tape, Tensor, Var};

pub const DEFAULT_EMBED_DIM: usize = 301;
pub const DEFAULT_ENCODER_DIM: usize = 717;
pub const DEFAULT_DECODER_DIM: usize = 484;
pub const DEFAULT_ALIGN_DIM: usize = 512;

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

// ---------------------------------------------------------------------------
// initialisation

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

fn orthogonal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(q[(i, j)]);
        }
    }
    out
}

/// Glorot-uniform matrix built gate block by gate block.
fn gate_stacked_glorot(rng: &mut impl Rng, hidden: usize, input: usize) -> Tensor {
    let mut data = Vec::with_capacity(4 * hidden * input);
    for _ in 0..4 {
        data.extend(glorot(rng, hidden, input));
    }
    Tensor::matrix(4 * hidden, input, data).expect("shape")
}

fn gate_stacked_orthogonal(rng: &mut impl Rng, hidden: usize) -> Tensor {
    let mut data = Vec::with_capacity(4 * hidden * hidden);
    for _ in 0..4 {
        data.extend(orthogonal(rng, hidden));
    }
    Tensor::matrix(4 * hidden, hidden, data).expect("shape")
}

fn gate_bias(hidden: usize) -> Tensor {
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden]
        .iter_mut()
        .for_each(|v| *v = FORGET_BIAS);
    Tensor::vector(b)
}

fn dense(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, glorot(rng, rows, cols)).expect("shape")
}

fn check_len(tape: &Tape, v: Var, expected: usize, what: &str) -> Result<()> {
    let shape = tape.shape(v);
    if shape.len() != 1 || shape[0] != expected {
        return Err(invalid(format!(
            "{what}: expected a vector of length {expected}, got shape {shape:?}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// embedding

/// Word embedding table, one row per vocabulary entry. A single table is
/// shared by the decoder and the previous-caption encoder.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingMatrix {
    pub table: Var,
}

impl EmbeddingMatrix {
    pub fn init(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) {
        store.insert(name, dense(rng, vocab, dim), ParamKind::Weight);
    }

    pub fn bind(vars: &ParamVars, name: &str) -> Result<Self> {
        Ok(Self {
            table: vars.get(name)?,
        })
    }
}

pub fn embed(tape: &mut Tape, e: &EmbeddingMatrix, token: usize) -> Result<Var> {
    let (vocab, _) = tape.value(e.table).dims2();
    if token >= vocab {
        return Err(Error::Index {
            index: token,
            len: vocab,
        });
    }
    Ok(tape.gather(e.table, token))
}

// ---------------------------------------------------------------------------
// encoder LSTM

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[4H, input]`
    pub w: Var,
    /// `[4H, H]`
    pub u: Var,
    /// `[4H]`
    pub b: Var,
}

impl LstmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) {
        store.insert(
            format!("{prefix}.W"),
            gate_stacked_glorot(rng, hidden, input),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.U"),
            gate_stacked_orthogonal(rng, hidden),
            ParamKind::Recurrent,
        );
        store.insert(format!("{prefix}.b"), gate_bias(hidden), ParamKind::Bias);
    }

    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: vars.get(&format!("{prefix}.W"))?,
            u: vars.get(&format!("{prefix}.U"))?,
            b: vars.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.value(self.u).dims2().1
    }

    pub fn input_dim(&self, tape: &Tape) -> usize {
        tape.value(self.w).dims2().1
    }
}

/// Apply gate nonlinearities to stacked pre-activations and update the cell.
fn gated_update(
    tape: &mut Tape,
    pre: Var,
    prev_c: Var,
    hidden: usize,
    tanh_on_cell_output: bool,
) -> (Var, Var) {
    let i_pre = tape.slice(pre, 0, hidden);
    let f_pre = tape.slice(pre, hidden, hidden);
    let o_pre = tape.slice(pre, 2 * hidden, hidden);
    let c_pre = tape.slice(pre, 3 * hidden, hidden);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let candidate = tape.tanh(c_pre);
    let kept = tape.mul(f, prev_c);
    let written = tape.mul(i, candidate);
    let c = tape.add(kept, written);
    let h = if tanh_on_cell_output {
        let squashed = tape.tanh(c);
        tape.mul(o, squashed)
    } else {
        tape.mul(o, c)
    };
    (h, c)
}

/// One LSTM step. With `tanh_on_cell_output == false` the hidden state is
/// `o * c`; otherwise the conventional `o * tanh(c)`.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    prev_h: Var,
    prev_c: Var,
    p: &LstmParams,
    tanh_on_cell_output: bool,
) -> Result<(Var, Var)> {
    let hidden = p.hidden(tape);
    check_len(tape, x, p.input_dim(tape), "lstm_step input")?;
    check_len(tape, prev_h, hidden, "lstm_step hidden state")?;
    check_len(tape, prev_c, hidden, "lstm_step memory state")?;
    let wx = tape.matvec(p.w, x);
    Ok(lstm_step_projected(
        tape,
        wx,
        prev_h,
        prev_c,
        p,
        tanh_on_cell_output,
    ))
}

fn lstm_step_projected(
    tape: &mut Tape,
    wx: Var,
    prev_h: Var,
    prev_c: Var,
    p: &LstmParams,
    tanh_on_cell_output: bool,
) -> (Var, Var) {
    let hidden = p.hidden(tape);
    let uh = tape.matvec(p.u, prev_h);
    let pre = tape.sum(&[wx, uh, p.b]);
    gated_update(tape, pre, prev_c, hidden, tanh_on_cell_output)
}

/// Run an LSTM over the rows of `seq` (`[J, input]`) from zero state and
/// return the hidden states in position order. `reverse` processes the rows
/// last to first.
pub fn lstm_run(
    tape: &mut Tape,
    seq: Var,
    p: &LstmParams,
    reverse: bool,
    tanh_on_cell_output: bool,
) -> Result<Vec<Var>> {
    let (len, input) = match tape.shape(seq) {
        [j, n] => (*j, *n),
        other => return Err(invalid(format!("sequence must be a matrix, got {other:?}"))),
    };
    if len == 0 {
        return Err(invalid("empty input sequence"));
    }
    if input != p.input_dim(tape) {
        return Err(invalid(format!(
            "sequence width {input} does not match LSTM input {}",
            p.input_dim(tape)
        )));
    }
    let hidden = p.hidden(tape);
    let projected = tape.matmul_t(seq, p.w);
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    let mut states = vec![h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for j in order {
        let wx = tape.row(projected, j);
        let (nh, nc) = lstm_step_projected(tape, wx, h, c, p, tanh_on_cell_output);
        h = nh;
        c = nc;
        states[j] = h;
    }
    Ok(states)
}

/// Bidirectional encoding: row `j` of the result is
/// `[forward_h_j, backward_h_j]`, shape `[J, 2H]`.
pub fn blstm_encode(
    tape: &mut Tape,
    seq: Var,
    fwd: &LstmParams,
    bwd: &LstmParams,
    tanh_on_cell_output: bool,
) -> Result<Var> {
    let forward = lstm_run(tape, seq, fwd, false, tanh_on_cell_output)?;
    let backward = lstm_run(tape, seq, bwd, true, tanh_on_cell_output)?;
    let f = tape.stack_rows(&forward);
    let b = tape.stack_rows(&backward);
    Ok(tape.concat_cols(&[f, b]))
}

// ---------------------------------------------------------------------------
// attention

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// Score vector `w`, `[align]`.
    pub score: Var,
    /// Decoder-state projection `W_a`, `[align, decoder]`.
    pub query: Var,
    /// Annotation projection `U_a`, `[align, annotation]`.
    pub key: Var,
    /// `[align]`
    pub bias: Var,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        annotation: usize,
        decoder: usize,
        align: usize,
        rng: &mut impl Rng,
    ) {
        let score = glorot(rng, align, 1);
        store.insert(
            format!("{prefix}.score"),
            Tensor::vector(score),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.query"),
            dense(rng, align, decoder),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.key"),
            dense(rng, align, annotation),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.bias"),
            Tensor::zeros(&[align]),
            ParamKind::Bias,
        );
    }

    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            score: vars.get(&format!("{prefix}.score"))?,
            query: vars.get(&format!("{prefix}.query"))?,
            key: vars.get(&format!("{prefix}.key"))?,
            bias: vars.get(&format!("{prefix}.bias"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    /// Context vector, `[annotation]`.
    pub z: Var,
    /// Weights over annotations, `[J]`.
    pub alpha: Var,
}

/// Annotations with their step-independent projection `U_a v_j + bias`
/// precomputed, shape `[J, align]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionKeys {
    pub annotations: Var,
    pub keys: Var,
}

pub fn attention_keys(
    tape: &mut Tape,
    annotations: Var,
    p: &AttentionParams,
) -> Result<AttentionKeys> {
    let (j, width) = match tape.shape(annotations) {
        [j, n] => (*j, *n),
        other => {
            return Err(invalid(format!(
                "annotations must be a matrix, got {other:?}"
            )))
        }
    };
    if j == 0 {
        return Err(invalid("attention over an empty annotation list"));
    }
    let (_, key_width) = tape.value(p.key).dims2();
    if width != key_width {
        return Err(invalid(format!(
            "annotation width {width} does not match attention input {key_width}"
        )));
    }
    let projected = tape.matmul_t(annotations, p.key);
    let keys = tape.add_rows(projected, p.bias);
    Ok(AttentionKeys { annotations, keys })
}

/// `e_j = w^T tanh(W_a h + U_a v_j + b)`, `alpha = softmax(e)`,
/// `z = sum_j alpha_j v_j`.
pub fn attend_with_keys(
    tape: &mut Tape,
    keys: &AttentionKeys,
    prev_h: Var,
    p: &AttentionParams,
) -> Result<AttentionResult> {
    let (_, decoder) = tape.value(p.query).dims2();
    check_len(tape, prev_h, decoder, "attention decoder state")?;
    let q = tape.matvec(p.query, prev_h);
    let pre = tape.add_rows(keys.keys, q);
    let act = tape.tanh(pre);
    let scores = tape.matvec(act, p.score);
    let alpha = tape.softmax(scores);
    let z = tape.mat_t_vec(keys.annotations, alpha);
    Ok(AttentionResult { z, alpha })
}

pub fn attend(
    tape: &mut Tape,
    annotations: Var,
    prev_h: Var,
    p: &AttentionParams,
) -> Result<AttentionResult> {
    let keys = attention_keys(tape, annotations, p)?;
    attend_with_keys(tape, &keys, prev_h, p)
}

// ---------------------------------------------------------------------------
// decoder

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct MultiInputLstmParams {
    /// Previous-word weights, `[4H, embed]`.
    pub word: Var,
    /// `[4H, H]`
    pub recurrent: Var,
    /// One matrix per context stream, `[4H, annotation_k]`, in stream order.
    pub contexts: Vec<Var>,
    /// `[4H]`
    pub bias: Var,
}

impl MultiInputLstmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        embed: usize,
        hidden: usize,
        contexts: &[(&str, usize)],
        rng: &mut impl Rng,
    ) {
        store.insert(
            format!("{prefix}.W"),
            gate_stacked_glorot(rng, hidden, embed),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.U"),
            gate_stacked_orthogonal(rng, hidden),
            ParamKind::Recurrent,
        );
        for (name, width) in contexts {
            store.insert(
                format!("{prefix}.ctx.{name}"),
                gate_stacked_glorot(rng, hidden, *width),
                ParamKind::Weight,
            );
        }
        store.insert(format!("{prefix}.b"), gate_bias(hidden), ParamKind::Bias);
    }

    pub fn bind(vars: &ParamVars, prefix: &str, contexts: &[&str]) -> Result<Self> {
        Ok(Self {
            word: vars.get(&format!("{prefix}.W"))?,
            recurrent: vars.get(&format!("{prefix}.U"))?,
            contexts: contexts
                .iter()
                .map(|c| vars.get(&format!("{prefix}.ctx.{c}")))
                .collect::<Result<_>>()?,
            bias: vars.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.value(self.recurrent).dims2().1
    }
}

/// Decoder cell whose gates and candidate read the previous word embedding,
/// the previous hidden state and one attended context per input stream.
pub fn multi_input_lstm_step(
    tape: &mut Tape,
    prev_word_emb: Var,
    state: DecoderState,
    contexts: &[Var],
    p: &MultiInputLstmParams,
    tanh_on_cell_output: bool,
) -> Result<DecoderState> {
    if contexts.len() != p.contexts.len() {
        return Err(invalid(format!(
            "decoder configured for {} context streams, got {}",
            p.contexts.len(),
            contexts.len()
        )));
    }
    let hidden = p.hidden(tape);
    check_len(
        tape,
        prev_word_emb,
        tape.value(p.word).dims2().1,
        "decoder word input",
    )?;
    check_len(tape, state.h, hidden, "decoder hidden state")?;
    check_len(tape, state.c, hidden, "decoder memory state")?;
    let mut terms = Vec::with_capacity(contexts.len() + 3);
    terms.push(tape.matvec(p.word, prev_word_emb));
    terms.push(tape.matvec(p.recurrent, state.h));
    for (&z, &m) in contexts.iter().zip(&p.contexts) {
        check_len(tape, z, tape.value(m).dims2().1, "decoder context")?;
        terms.push(tape.matvec(m, z));
    }
    terms.push(p.bias);
    let pre = tape.sum(&terms);
    let (h, c) = gated_update(tape, pre, state.c, hidden, tanh_on_cell_output);
    Ok(DecoderState { h, c })
}

#[derive(Clone, Copy, Debug)]
pub struct InitStateParams {
    pub h_w: Var,
    pub h_b: Var,
    pub c_w: Var,
    pub c_b: Var,
}

impl InitStateParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        annotation: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) {
        store.insert(
            format!("{prefix}.h.W"),
            dense(rng, hidden, annotation),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.h.b"),
            Tensor::zeros(&[hidden]),
            ParamKind::Bias,
        );
        store.insert(
            format!("{prefix}.c.W"),
            dense(rng, hidden, annotation),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.c.b"),
            Tensor::zeros(&[hidden]),
            ParamKind::Bias,
        );
    }

    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            h_w: vars.get(&format!("{prefix}.h.W"))?,
            h_b: vars.get(&format!("{prefix}.h.b"))?,
            c_w: vars.get(&format!("{prefix}.c.W"))?,
            c_b: vars.get(&format!("{prefix}.c.b"))?,
        })
    }
}

/// `h0 = tanh(W_h m + b_h)`, `c0 = tanh(W_c m + b_c)` with `m` the mean
/// annotation of the current event.
pub fn init_decoder_state(
    tape: &mut Tape,
    annotations: Var,
    p: &InitStateParams,
) -> Result<DecoderState> {
    match tape.shape(annotations) {
        [0, _] => return Err(invalid("decoder initialisation from no annotations")),
        [_, n] if *n == tape.value(p.h_w).dims2().1 => {}
        other => {
            return Err(invalid(format!(
                "annotations of shape {other:?} do not fit the initialiser"
            )))
        }
    }
    let mean = tape.mean_rows(annotations);
    let hw = tape.matvec(p.h_w, mean);
    let hp = tape.add(hw, p.h_b);
    let h = tape.tanh(hp);
    let cw = tape.matvec(p.c_w, mean);
    let cp = tape.add(cw, p.c_b);
    let c = tape.tanh(cp);
    Ok(DecoderState { h, c })
}

#[derive(Clone, Debug)]
pub struct OutputLayerParams {
    /// `M_h`, `[out, decoder]`
    pub from_hidden: Var,
    /// One skip matrix per context stream, `[out, annotation_k]`.
    pub from_contexts: Vec<Var>,
    /// `M_e`, `[out, embed]`
    pub from_word: Var,
    /// `[out]`
    pub bias: Var,
    /// `U_p`, `[vocab, out]`
    pub readout: Var,
    /// `[vocab]`
    pub readout_bias: Var,
}

impl OutputLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        decoder: usize,
        embed: usize,
        contexts: &[(&str, usize)],
        out: usize,
        vocab: usize,
        rng: &mut impl Rng,
    ) {
        store.insert(
            format!("{prefix}.h"),
            dense(rng, out, decoder),
            ParamKind::Weight,
        );
        for (name, width) in contexts {
            store.insert(
                format!("{prefix}.ctx.{name}"),
                dense(rng, out, *width),
                ParamKind::Weight,
            );
        }
        store.insert(
            format!("{prefix}.e"),
            dense(rng, out, embed),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.b"),
            Tensor::zeros(&[out]),
            ParamKind::Bias,
        );
        store.insert(
            format!("{prefix}.readout"),
            dense(rng, vocab, out),
            ParamKind::Weight,
        );
        store.insert(
            format!("{prefix}.readout_b"),
            Tensor::zeros(&[vocab]),
            ParamKind::Bias,
        );
    }

    pub fn bind(vars: &ParamVars, prefix: &str, contexts: &[&str]) -> Result<Self> {
        Ok(Self {
            from_hidden: vars.get(&format!("{prefix}.h"))?,
            from_contexts: contexts
                .iter()
                .map(|c| vars.get(&format!("{prefix}.ctx.{c}")))
                .collect::<Result<_>>()?,
            from_word: vars.get(&format!("{prefix}.e"))?,
            bias: vars.get(&format!("{prefix}.b"))?,
            readout: vars.get(&format!("{prefix}.readout"))?,
            readout_bias: vars.get(&format!("{prefix}.readout_b"))?,
        })
    }
}

/// `softmax(U_p tanh(M_h h + sum_k M_k z_k + M_e emb + b) + b_p)`.
///
/// `dropout` is an optional multiplicative mask applied to the tanh
/// features before the readout.
pub fn output_distribution(
    tape: &mut Tape,
    h: Var,
    contexts: &[Var],
    prev_word_emb: Var,
    p: &OutputLayerParams,
    dropout: Option<Vec<f64>>,
) -> Result<Var> {
    if contexts.len() != p.from_contexts.len() {
        return Err(invalid(format!(
            "output layer configured for {} context streams, got {}",
            p.from_contexts.len(),
            contexts.len()
        )));
    }
    check_len(
        tape,
        h,
        tape.value(p.from_hidden).dims2().1,
        "output hidden input",
    )?;
    check_len(
        tape,
        prev_word_emb,
        tape.value(p.from_word).dims2().1,
        "output word input",
    )?;
    let mut terms = Vec::with_capacity(contexts.len() + 3);
    terms.push(tape.matvec(p.from_hidden, h));
    for (&z, &m) in contexts.iter().zip(&p.from_contexts) {
        check_len(tape, z, tape.value(m).dims2().1, "output context input")?;
        terms.push(tape.matvec(m, z));
    }
    terms.push(tape.matvec(p.from_word, prev_word_emb));
    terms.push(p.bias);
    let pre = tape.sum(&terms);
    let mut features = tape.tanh(pre);
    if let Some(mask) = dropout {
        features = tape.mul_const(features, mask);
    }
    let logits = tape.matvec(p.readout, features);
    let shifted = tape.add(logits, p.readout_bias);
    Ok(tape.softmax(shifted))
}

// ---------------------------------------------------------------------------
// per-layer gradient checks

/// Finite-difference check of every layer in isolation. Inputs are treated
/// as parameters so their gradients are verified too; each layer's output is
/// reduced with a fixed random linear functional.
pub fn check_layer_gradients(seed: u64, epsilon: f64) -> Result<Vec<(String, f64)>> {
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, hidden, decoder, align, embed_dim, vocab, out, len) = (5, 4, 4, 3, 4, 6, 5, 3);
    let mut random = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };

    let mut results = Vec::new();
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r_h = random(hidden);
    let r_2h = random(len * 2 * hidden);

    // embedding
    {
        let mut s = ParamStore::new();
        EmbeddingMatrix::init(&mut s, "E", vocab, embed_dim, &mut init_rng);
        let r = random(embed_dim);
        let rep = finite_diff_check(&s, epsilon, |tape, vars| {
            let e = EmbeddingMatrix::bind(vars, "E")?;
            let a = embed(tape, &e, 2)?;
            let b = embed(tape, &e, 4)?;
            let both = tape.add(a, b);
            let w = tape.mul_const(both, r.clone());
            Ok(tape.sum_all(w))
        })?;
        results.push(("embedding".to_string(), rep.max_relative_error));
    }

    // lstm step
    {
        let mut s = ParamStore::new();
        LstmParams::init(&mut s, "lstm", input, hidden, &mut init_rng);
        s.insert("x", Tensor::vector(random(input)), ParamKind::Weight);
        s.insert("h", Tensor::vector(random(hidden)), ParamKind::Weight);
        s.insert("c", Tensor::vector(random(hidden)), ParamKind::Weight);
        let rep = finite_diff_check(&s, epsilon, |tape, vars| {
            let p = LstmParams::bind(vars, "lstm")?;
            let (h, c) = lstm_step(
                tape,
                vars.get("x")?,
                vars.get("h")?,
                vars.get("c")?,
                &p,
                false,
            )?;
            let hc = tape.add(h, c);
            let w = tape.mul_const(hc, r_h.clone());
            Ok(tape.sum_all(w))
        })?;
        results.push(("lstm_step".to_string(), rep.max_relative_error));
    }

    // bidirectional encoder
    {
        let mut s = ParamStore::new();
        LstmParams::init(&mut s, "fwd", input, hidden, &mut init_rng);
        LstmParams::init(&mut s, "bwd", input, hidden, &mut init_rng);
        s.insert(
            "seq",
            Tensor::matrix(len, input, random(len * input))?,
            ParamKind::Weight,
        );
        let rep = finite_diff_check(&s, epsilon, |tape, vars| {
            let f = LstmParams::bind(vars, "fwd")?;
            let b = LstmParams::bind(vars, "bwd")?;
            let enc = blstm_encode(tape, vars.get("seq")?, &f, &b, false)?;
            let w = tape.mul_const(enc, r_2h.clone());
            Ok(tape.sum_all(w))
        })?;
        results.push(("blstm_encode".to_string(), rep.max_relative_error));
    }

    // attention
    {
        let mut s = ParamStore::new();
        AttentionParams::init(&mut s, "att", input, decoder, align, &mut init_rng);
        s.insert(
            "ann",
            Tensor::matrix(len, input, random(len * input))?,
            ParamKind::Weight,
        );
        s.insert("h", Tensor::vector(random(decoder)), ParamKind::Weight);
        let r = random(input);
        let rep = finite_diff_check(&s, epsilon, |tape, vars| {
            let p = AttentionParams::bind(vars, "att")?;
            let res = attend(tape, vars.get("ann")?, vars.get("h")?, &p)?;
            let w = tape.mul_const(res.z, r.clone());
            Ok(tape.sum_all(w))
        })?;
        results.push(("attend".to_string(), rep.max_relative_error));
    }

    // multi-input decoder cell with two contexts
    {
        let mut s = ParamStore::new();
        MultiInputLstmParams::init(
            &mut s,
            "dec",
            embed_dim,
            decoder,
            &[("a", input), ("b", 2 * hidden)],
            &mut init_rng,
        );
        s.insert("emb", Tensor::vector(random(embed_dim)), ParamKind::Weight);
        s.insert("h", Tensor::vector(random(decoder)), ParamKind::Weight);
        s.insert("c", Tensor::vector(random(decoder)), ParamKind::Weight);
        s.insert("za", Tensor::vector(random(input)), ParamKind::Weight);
        s.insert("zb", Tensor::vector(random(2 * hidden)), ParamKind::Weight);
        let r = random(decoder);
        let rep = finite_diff_check(&s, epsilon, |tape, vars| {
            let p = MultiInputLstmParams::bind(vars, "dec", &["a", "b"])?;
            let state = DecoderState {
                h: vars.get("h")?,
                c: vars.get("c")?,
            };
            let ctx = [vars.get("za")?, vars.get("zb")?];
            let next = multi_input_lstm_step(tape, vars.get("emb")?, state, &ctx, &p, false)?;
            let hc = tape.add(next.h, next.c);
            let w = tape.mul_const(hc, r.clone());
            Ok(tape.sum_all(w))
        })?;
        results.push(("multi_input_lstm_step".to_string(), rep.max_relative_error));
    }

    // decoder state initialiser
    {
        let mut s = ParamStore::new();
        InitStateParams::init(&mut s, "init", input, decoder, &mut init_rng);
        s.insert(
            "ann",
            Tensor::matrix(len, input, random(len * input))?,
            ParamKind::Weight,
        );
        let r = random(decoder);
        let rep = finite_diff_check(&s, epsilon, |tape, vars| {
            let p = InitStateParams::bind(vars, "init")?;
            let st = init_decoder_state(tape, vars.get("ann")?, &p)?;
            let hc = tape.add(st.h, st.c);
            let w = tape.mul_const(hc, r.clone());
            Ok(tape.sum_all(w))
        })?;
        results.push(("init_decoder_state".to_string(), rep.max_relative_error));
    }

    // output distribution
    {
        OutputLayerParams::init(
            &mut store,
            "out",
            decoder,
            embed_dim,
            &[("a", input)],
            out,
            vocab,
            &mut init_rng,
        );
        store.insert("h", Tensor::vector(random(decoder)), ParamKind::Weight);
        store.insert("za", Tensor::vector(random(input)), ParamKind::Weight);
        store.insert("emb", Tensor::vector(random(embed_dim)), ParamKind::Weight);
        let rep = finite_diff_check(&store, epsilon, |tape, vars| {
            let p = OutputLayerParams::bind(vars, "out", &["a"])?;
            let probs = output_distribution(
                tape,
                vars.get("h")?,
                &[vars.get("za")?],
                vars.get("emb")?,
                &p,
                None,
            )?;
            let lp = tape.log_at(probs, 3);
            Ok(tape.scale(lp, -1.0))
        })?;
        results.push(("output_distribution".to_string(), rep.max_relative_error));
    }

    Ok(results)
}
