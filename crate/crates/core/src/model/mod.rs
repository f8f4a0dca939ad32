//! The four captioner variants built from the layers module.

mod weights;

pub use weights::{
    assign_weights, decode_weights, encode_weights, load_model, read_sidecar, read_weights,
    save_model, sidecar_path, write_sidecar, write_weights, ModelSidecar, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, Vocabulary, EOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::layers::{
    attend_with_keys, attention_keys, blstm_encode, embed, init_decoder_state,
    multi_input_lstm_step, output_distribution, AttentionKeys, AttentionParams, DecoderState,
    EmbeddingMatrix, InitStateParams, LstmParams, MultiInputLstmParams, OutputLayerParams,
    DEFAULT_ALIGN_DIM, DEFAULT_DECODER_DIM, DEFAULT_EMBED_DIM, DEFAULT_ENCODER_DIM,
};
use crate::numerics::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::rng::{stream, Stream};
use crate::training::regularization::{perturb_weights, Dropout};

/// Words kept from a caption before EOS is appended.
pub const MAX_CAPTION_WORDS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Baseline,
    PrevCaption,
    PrevVideo,
    PrevVideoCaption,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Current,
    PrevVideo,
    PrevCaption,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Current => "current",
            StreamKind::PrevVideo => "prev_video",
            StreamKind::PrevCaption => "prev_caption",
        }
    }
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Baseline,
        ModelVariant::PrevCaption,
        ModelVariant::PrevVideo,
        ModelVariant::PrevVideoCaption,
    ];

    /// Attended streams in wiring order.
    pub fn streams(self) -> &'static [StreamKind] {
        use StreamKind::*;
        match self {
            ModelVariant::Baseline => &[Current],
            ModelVariant::PrevCaption => &[Current, PrevCaption],
            ModelVariant::PrevVideo => &[Current, PrevVideo],
            ModelVariant::PrevVideoCaption => &[Current, PrevVideo, PrevCaption],
        }
    }

    pub fn uses_prev_video(self) -> bool {
        self.streams().contains(&StreamKind::PrevVideo)
    }

    pub fn uses_prev_caption(self) -> bool {
        self.streams().contains(&StreamKind::PrevCaption)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::PrevCaption => "prev-caption",
            ModelVariant::PrevVideo => "prev-video",
            ModelVariant::PrevVideoCaption => "prev-video-caption",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown variant `{s}` (expected baseline, prev-caption, prev-video or prev-video-caption)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub embed: usize,
    /// Hidden units per encoder direction.
    pub encoder: usize,
    pub decoder: usize,
    pub align: usize,
    /// Shared width of the skip projections before the readout.
    pub output: usize,
}

impl ModelDims {
    pub fn full_size(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed: DEFAULT_EMBED_DIM,
            encoder: DEFAULT_ENCODER_DIM,
            decoder: DEFAULT_DECODER_DIM,
            align: DEFAULT_ALIGN_DIM,
            output: DEFAULT_EMBED_DIM,
        }
    }

    /// Every dimension set to `d` except the feature width.
    pub fn uniform(feature_dim: usize, d: usize) -> Self {
        Self {
            feature_dim,
            embed: d,
            encoder: d,
            decoder: d,
            align: d,
            output: d,
        }
    }

    pub fn annotation_width(&self, s: StreamKind) -> usize {
        match s {
            StreamKind::Current | StreamKind::PrevVideo => self.feature_dim + 2 * self.encoder,
            StreamKind::PrevCaption => 2 * self.encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.feature_dim,
            self.embed,
            self.encoder,
            self.decoder,
            self.align,
            self.output,
        ];
        if all.contains(&0) {
            return Err(invalid(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub vocab_size: usize,
    #[serde(default)]
    pub tanh_on_cell_output: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn encoder_prefix(s: StreamKind) -> String {
    format!("enc.{}", s.name())
}

fn attention_prefix(s: StreamKind) -> String {
    format!("att.{}", s.name())
}

pub const EMBEDDING: &str = "embedding";
pub const DECODER: &str = "dec";
pub const INIT: &str = "init";
pub const OUTPUT: &str = "out";

pub fn build_model(
    variant: ModelVariant,
    dims: ModelDims,
    vocab_size: usize,
    seed: u64,
) -> Result<Model> {
    Model::new(
        ModelConfig {
            variant,
            dims,
            vocab_size,
            tanh_on_cell_output: false,
        },
        seed,
    )
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size <= EOS {
            return Err(invalid(format!(
                "vocabulary of size {} has no room for BOS and EOS",
                config.vocab_size
            )));
        }
        config.dims.validate()?;
        let d = config.dims;
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        EmbeddingMatrix::init(&mut store, EMBEDDING, config.vocab_size, d.embed, &mut rng);
        let streams = config.variant.streams();
        for &s in streams {
            let input = match s {
                StreamKind::Current | StreamKind::PrevVideo => d.feature_dim,
                StreamKind::PrevCaption => d.embed,
            };
            let prefix = encoder_prefix(s);
            LstmParams::init(
                &mut store,
                &format!("{prefix}.fwd"),
                input,
                d.encoder,
                &mut rng,
            );
            LstmParams::init(
                &mut store,
                &format!("{prefix}.bwd"),
                input,
                d.encoder,
                &mut rng,
            );
        }
        for &s in streams {
            AttentionParams::init(
                &mut store,
                &attention_prefix(s),
                d.annotation_width(s),
                d.decoder,
                d.align,
                &mut rng,
            );
        }
        let contexts: Vec<(&str, usize)> = streams
            .iter()
            .map(|&s| (s.name(), d.annotation_width(s)))
            .collect();
        MultiInputLstmParams::init(&mut store, DECODER, d.embed, d.decoder, &contexts, &mut rng);
        InitStateParams::init(
            &mut store,
            INIT,
            d.annotation_width(StreamKind::Current),
            d.decoder,
            &mut rng,
        );
        OutputLayerParams::init(
            &mut store,
            OUTPUT,
            d.decoder,
            d.embed,
            &contexts,
            d.output,
            config.vocab_size,
            &mut rng,
        );
        Ok(Self {
            config,
            params: store,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Names of the parameters tied to one previous-event stream in the
    /// decoder cell and the output layer.
    pub fn stream_context_params(s: StreamKind) -> [String; 2] {
        [
            format!("{DECODER}.ctx.{}", s.name()),
            format!("{OUTPUT}.ctx.{}", s.name()),
        ]
    }
}

/// Previous-event inputs for the streams a variant attends to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreviousEventInput {
    pub video: Option<FeatureSequence>,
    pub caption: Option<Vec<usize>>,
}

/// Stand-in for the event before a day's first event: one all-zero frame
/// and/or the single padding token.
pub fn make_empty_event(variant: ModelVariant, feature_dim: usize) -> PreviousEventInput {
    PreviousEventInput {
        video: variant
            .uses_prev_video()
            .then(|| FeatureSequence::zeros(1, feature_dim)),
        caption: variant.uses_prev_caption().then(|| vec![PAD]),
    }
}

/// Token ids of a previous caption as encoder input. Empty captions become
/// `[PAD]`.
pub fn previous_caption_ids(vocab: &Vocabulary, tokens: &[String]) -> Vec<usize> {
    let ids: Vec<usize> = vocab
        .encode(&tokens[..tokens.len().min(MAX_CAPTION_WORDS)])
        .into_iter()
        .collect();
    if ids.is_empty() {
        vec![PAD]
    } else {
        ids
    }
}

/// Decoder target: at most [`MAX_CAPTION_WORDS`] ids followed by EOS.
pub fn target_ids(vocab: &Vocabulary, tokens: &[String]) -> Vec<usize> {
    let mut ids = vocab.encode(&tokens[..tokens.len().min(MAX_CAPTION_WORDS)]);
    ids.push(EOS);
    ids
}

/// Encoder output for one stream, `[N, width]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedEvent {
    pub annotations: Var,
    pub source: StreamKind,
}

/// Encoded inputs ready for step-by-step decoding.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    pub keys: Vec<AttentionKeys>,
    pub initial: DecoderState,
}

/// Model parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub vars: ParamVars,
    pub embedding: EmbeddingMatrix,
    pub encoders: Vec<(StreamKind, LstmParams, LstmParams)>,
    pub attention: Vec<AttentionParams>,
    pub decoder: MultiInputLstmParams,
    pub init: InitStateParams,
    pub output: OutputLayerParams,
}

impl BoundModel {
    /// Load `store` onto `tape` as trainable leaves.
    pub fn load(tape: &mut Tape, config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let vars = tape.load(store);
        Self::bind(config, vars)
    }

    /// Load `store` onto `tape` as constants.
    pub fn load_frozen(tape: &mut Tape, config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let vars = tape.load_frozen(store);
        Self::bind(config, vars)
    }

    pub fn bind(config: &ModelConfig, vars: ParamVars) -> Result<Self> {
        let streams = config.variant.streams();
        let names: Vec<&str> = streams.iter().map(|s| s.name()).collect();
        let encoders = streams
            .iter()
            .map(|&s| {
                let p = encoder_prefix(s);
                Ok((
                    s,
                    LstmParams::bind(&vars, &format!("{p}.fwd"))?,
                    LstmParams::bind(&vars, &format!("{p}.bwd"))?,
                ))
            })
            .collect::<Result<_>>()?;
        let attention = streams
            .iter()
            .map(|&s| AttentionParams::bind(&vars, &attention_prefix(s)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            embedding: EmbeddingMatrix::bind(&vars, EMBEDDING)?,
            encoders,
            attention,
            decoder: MultiInputLstmParams::bind(&vars, DECODER, &names)?,
            init: InitStateParams::bind(&vars, INIT)?,
            output: OutputLayerParams::bind(&vars, OUTPUT, &names)?,
            vars,
        })
    }

    fn encoder(&self, s: StreamKind) -> Result<(&LstmParams, &LstmParams)> {
        self.encoders
            .iter()
            .find(|(k, _, _)| *k == s)
            .map(|(_, f, b)| (f, b))
            .ok_or_else(|| {
                Error::Config(format!(
                    "variant {} has no {} stream",
                    self.config.variant,
                    s.name()
                ))
            })
    }

    fn video_annotations(
        &self,
        tape: &mut Tape,
        frames: &FeatureSequence,
        s: StreamKind,
    ) -> Result<Var> {
        if frames.frames() == 0 {
            return Err(invalid("event has no frames"));
        }
        if frames.dim() != self.config.dims.feature_dim {
            return Err(invalid(format!(
                "feature width {} does not match the model's {}",
                frames.dim(),
                self.config.dims.feature_dim
            )));
        }
        let (fwd, bwd) = self.encoder(s)?;
        let x = tape.constant(frames.to_tensor());
        let hidden = blstm_encode(tape, x, fwd, bwd, self.config.tanh_on_cell_output)?;
        Ok(tape.concat_cols(&[x, hidden]))
    }

    /// Row `j` is `[x_j, forward_j, backward_j]`.
    pub fn encode_current(
        &self,
        tape: &mut Tape,
        frames: &FeatureSequence,
    ) -> Result<EncodedEvent> {
        Ok(EncodedEvent {
            annotations: self.video_annotations(tape, frames, StreamKind::Current)?,
            source: StreamKind::Current,
        })
    }

    /// Encoded previous-event streams in wiring order.
    pub fn encode_previous(
        &self,
        tape: &mut Tape,
        prev: &PreviousEventInput,
    ) -> Result<Vec<EncodedEvent>> {
        let variant = self.config.variant;
        if variant.uses_prev_video() != prev.video.is_some()
            || variant.uses_prev_caption() != prev.caption.is_some()
        {
            return Err(Error::Config(format!(
                "previous-event input does not match the streams of variant {variant}"
            )));
        }
        let mut out = Vec::new();
        if let Some(frames) = &prev.video {
            out.push(EncodedEvent {
                annotations: self.video_annotations(tape, frames, StreamKind::PrevVideo)?,
                source: StreamKind::PrevVideo,
            });
        }
        if let Some(tokens) = &prev.caption {
            if tokens.is_empty() {
                return Err(invalid("previous caption input is empty"));
            }
            let rows = tokens
                .iter()
                .map(|&t| embed(tape, &self.embedding, t))
                .collect::<Result<Vec<_>>>()?;
            let seq = tape.stack_rows(&rows);
            let (fwd, bwd) = self.encoder(StreamKind::PrevCaption)?;
            out.push(EncodedEvent {
                annotations: blstm_encode(tape, seq, fwd, bwd, self.config.tanh_on_cell_output)?,
                source: StreamKind::PrevCaption,
            });
        }
        Ok(out)
    }

    /// Encode every stream, precompute attention keys and the initial
    /// decoder state. `dropout` masks the annotations seen by attention.
    pub fn prepare(
        &self,
        tape: &mut Tape,
        current: &FeatureSequence,
        prev: &PreviousEventInput,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EncodedInput> {
        let cur = self.encode_current(tape, current)?;
        let initial = init_decoder_state(tape, cur.annotations, &self.init)?;
        let mut encoded = vec![cur];
        encoded.extend(self.encode_previous(tape, prev)?);
        let mut keys = Vec::with_capacity(encoded.len());
        for (e, att) in encoded.iter().zip(&self.attention) {
            let mut ann = e.annotations;
            if let Some(mask) = dropout
                .as_mut()
                .and_then(|d| d.mask(tape.value(ann).numel()))
            {
                ann = tape.mul_const(ann, mask);
            }
            keys.push(attention_keys(tape, ann, att)?);
        }
        Ok(EncodedInput { keys, initial })
    }

    /// One decoding step: attend with `h_{t-1}`, update the cell with the
    /// previous word, then emit the word distribution.
    pub fn step(
        &self,
        tape: &mut Tape,
        enc: &EncodedInput,
        state: DecoderState,
        prev_token: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<(DecoderState, Var)> {
        let emb = embed(tape, &self.embedding, prev_token)?;
        let mut contexts = Vec::with_capacity(enc.keys.len());
        for (k, att) in enc.keys.iter().zip(&self.attention) {
            contexts.push(attend_with_keys(tape, k, state.h, att)?.z);
        }
        let next = multi_input_lstm_step(
            tape,
            emb,
            state,
            &contexts,
            &self.decoder,
            self.config.tanh_on_cell_output,
        )?;
        let mask = dropout.and_then(|d| d.mask(self.config.dims.output));
        let probs = output_distribution(tape, next.h, &contexts, emb, &self.output, mask)?;
        Ok((next, probs))
    }

    /// Teacher-forced `-sum_t log p_t[target_t]` as a tape scalar, plus the
    /// per-step distributions.
    pub fn nll(
        &self,
        tape: &mut Tape,
        current: &FeatureSequence,
        prev: &PreviousEventInput,
        target: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Var, Vec<Var>)> {
        check_target(target, self.config.vocab_size)?;
        let enc = self.prepare(tape, current, prev, dropout.as_deref_mut())?;
        let mut state = enc.initial;
        let mut prev_token = crate::data::BOS;
        let mut logs = Vec::with_capacity(target.len());
        let mut dists = Vec::with_capacity(target.len());
        for &y in target {
            let (next, probs) = self.step(tape, &enc, state, prev_token, dropout.as_deref_mut())?;
            logs.push(tape.log_at(probs, y));
            dists.push(probs);
            state = next;
            prev_token = y;
        }
        let total = tape.sum(&logs);
        Ok((tape.scale(total, -1.0), dists))
    }
}

fn check_target(target: &[usize], vocab: usize) -> Result<()> {
    if target.is_empty() {
        return Err(invalid("empty target caption"));
    }
    if let Some(&t) = target.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            index: t,
            len: vocab,
        });
    }
    if target.last() != Some(&EOS) {
        return Err(invalid("target caption must end with EOS"));
    }
    Ok(())
}

/// Regularisation applied by [`forward_logprob`] in training mode.
#[derive(Debug)]
pub enum ForwardMode<'a> {
    Eval,
    Train {
        dropout_p: f64,
        noise_sigma: f64,
        rng: &'a mut rand_chacha::ChaCha8Rng,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub total_logprob: f64,
    pub per_step: Vec<Vec<f64>>,
}

/// Teacher-forced log-likelihood of `target` (which must end with EOS).
pub fn forward_logprob(
    model: &Model,
    current: &FeatureSequence,
    prev: &PreviousEventInput,
    target: &[usize],
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let (total, dists) = match mode {
        ForwardMode::Eval => {
            let bound = BoundModel::load_frozen(&mut tape, &model.config, &model.params)?;
            bound.nll(&mut tape, current, prev, target, None)?
        }
        ForwardMode::Train {
            dropout_p,
            noise_sigma,
            rng,
        } => {
            let noisy = perturb_weights(&model.params, noise_sigma, rng);
            let bound = BoundModel::load_frozen(&mut tape, &model.config, &noisy)?;
            let mut dropout = Dropout::new(dropout_p, rng);
            bound.nll(&mut tape, current, prev, target, Some(&mut dropout))?
        }
    };
    Ok(ForwardOutput {
        total_logprob: -tape.scalar_value(total),
        per_step: dists.iter().map(|&d| tape.data(d).to_vec()).collect(),
    })
}

/// Zero the decoder and output-layer matrices that read one stream.
pub fn zero_stream(model: &mut Model, s: StreamKind) -> Result<()> {
    for name in Model::stream_context_params(s) {
        model.params.tensor_mut(&name)?.fill(0.0);
    }
    Ok(())
}

/// Copy every parameter whose name also exists in `target` from `source`.
pub fn copy_shared_params(source: &Model, target: &mut Model) -> Result<()> {
    let names: Vec<String> = target.params.names().map(str::to_string).collect();
    for name in names {
        if let Some(p) = source.params.get(&name) {
            let t = target.params.tensor_mut(&name)?;
            if t.shape() != p.value.shape() {
                return Err(invalid(format!(
                    "shape mismatch for shared parameter `{name}`"
                )));
            }
            *t = p.value.clone();
        }
    }
    Ok(())
}

/// Finite-difference check of the full model loss at small dimensions.
pub fn gradcheck_model(
    variant: ModelVariant,
    seed: u64,
    epsilon: f64,
) -> Result<crate::numerics::GradCheckReport> {
    use rand::Rng;

    let dims = ModelDims {
        feature_dim: 5,
        embed: 8,
        encoder: 8,
        decoder: 8,
        align: 8,
        output: 8,
    };
    let vocab = 12;
    let model = build_model(variant, dims, vocab, seed)?;
    let mut rng = stream(seed, Stream::Datagen);
    let mut frames = |j: usize| {
        let data = (0..j * dims.feature_dim)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        FeatureSequence::new(j, dims.feature_dim, data)
    };
    let current = frames(4)?;
    let prev_video = frames(3)?;
    let prev = PreviousEventInput {
        video: variant.uses_prev_video().then_some(prev_video),
        caption: variant.uses_prev_caption().then(|| vec![5, 7, 4]),
    };
    let target = [6, 9, 4, EOS];
    crate::numerics::finite_diff_check(&model.params, epsilon, |tape, vars| {
        let bound = BoundModel::bind(&model.config, vars.clone())?;
        Ok(bound.nll(tape, &current, &prev, &target, None)?.0)
    })
}

/// Uniform random tensor helper for tests and tools.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("shape matches data")
}
