//! The two-stream classifier: a main encoder over the cited sentence and a
//! peripheral encoder over its neighbours, coupled in every block by
//! bidirectional cross-text attention, fused at the deepest scale, mean-pooled
//! and classified into six intents.

mod checkpoint;
mod config;
mod optim;
mod train;
mod verify;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bidirectional_attention, positional_encoding, self_attention, AttentionProjection, CrossTextAttention,
    FeedForward, Stream, StreamState,
};
use crate::corpus::{preprocess, CitationInstance, Intent, TokenId, Vocabulary, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::{fuse_on_graph, FeatureMap, SpatialAttentionBlock};
use crate::numeric::{Graph, Matrix, ParamId, ParamStore, Var};

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Ablation, ModelConfig};
pub use optim::Adam;
pub use verify::{verify_gradients, LayerCheck, LAYER_TOLERANCE, MODEL_TOLERANCE};
pub use train::{fit, train, EpochRecord, History, StepRecord, TeaEvent, TrainedModel};

/// Token ids of both streams padded to the configured length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub main: Vec<usize>,
    pub peripheral: Vec<usize>,
    pub main_valid: Vec<bool>,
    pub peripheral_valid: Vec<bool>,
}

fn pad_to(mut ids: Vec<TokenId>, len: usize) -> (Vec<usize>, Vec<bool>) {
    ids.truncate(len);
    ids.resize(len, Vocabulary::PAD);
    let valid = ids.iter().map(|&i| i != Vocabulary::PAD).collect();
    (ids.into_iter().map(|i| i as usize).collect(), valid)
}

/// Cited sentence as the main stream; `first SEP second` as the peripheral.
pub fn encode_instance(inst: &CitationInstance, vocab: &Vocabulary, seq_len: usize) -> EncodedInput {
    let real = |text: &str| {
        let seq = preprocess(text, vocab);
        if seq.original_len == 0 {
            Vec::new()
        } else {
            seq.ids
        }
    };
    let main = preprocess(&inst.cited_sentence, vocab).ids;
    let mut peripheral = real(&inst.first_sentence);
    peripheral.push(Vocabulary::SEP);
    peripheral.extend(real(&inst.second_sentence));
    let (main, main_valid) = pad_to(main, seq_len);
    let (peripheral, peripheral_valid) = pad_to(peripheral, seq_len);
    EncodedInput {
        main,
        peripheral,
        main_valid,
        peripheral_valid,
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{prefix}.gain"), Matrix::filled(1, d, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, d)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        let scaled = g.mul_row(n, gain)?;
        g.add_row(scaled, bias)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct EncoderBlock {
    attention: AttentionProjection,
    ffn: FeedForward,
    norm1: Norm,
    norm2: Norm,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, prefix: &str, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderBlock {
            attention: AttentionProjection::new(store, &format!("{prefix}.attn"), c.d_model, c.heads, c.d_k, c.d_v, rng)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), c.d_model, c.ffn_dim, rng),
            norm1: Norm::new(store, &format!("{prefix}.norm1"), c.d_model),
            norm2: Norm::new(store, &format!("{prefix}.norm2"), c.d_model),
        })
    }

    /// `h = LN(x + a)`, `y = LN(h + FFN(h))`.
    fn finish(&self, g: &mut Graph, x: Var, attended: Var, drop: &mut Dropout) -> Result<Var> {
        let a = drop.apply(g, attended);
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let f = drop.apply(g, f);
        let y = g.add(h, f)?;
        self.norm2.forward(g, y)
    }
}

/// Inverted dropout driven by a seeded generator; inactive at rate 0 or
/// without a generator.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = g.constant(Matrix::from_vec(r, c, mask).expect("mask is finite"));
        g.mul(x, mask).expect("mask matches input shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    embedding: ParamId,
    main: Vec<EncoderBlock>,
    peripheral: Vec<EncoderBlock>,
    cta: Vec<CrossTextAttention>,
    enhance_main: Vec<SpatialAttentionBlock>,
    enhance_peripheral: Vec<SpatialAttentionBlock>,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

/// Parameters, vocabulary and configuration of one classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriCite {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    layout: Layout,
    positions: Matrix,
}

impl PeriCite {
    /// Fresh parameters drawn from a generator seeded with `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let embedding = store.add_glorot("embedding", vocab.len(), c.d_model, &mut rng);
        let mut main = Vec::new();
        let mut peripheral = Vec::new();
        let mut cta = Vec::new();
        for b in 0..c.blocks {
            main.push(EncoderBlock::new(&mut store, &format!("main.block{b}"), c, &mut rng)?);
            peripheral.push(EncoderBlock::new(&mut store, &format!("peripheral.block{b}"), c, &mut rng)?);
            cta.push(CrossTextAttention::new(
                &mut store,
                &format!("cta.block{b}"),
                c.d_model,
                c.heads,
                c.d_k,
                c.d_v,
                &mut rng,
            )?);
        }
        let mut enhance_main = Vec::new();
        let mut enhance_peripheral = Vec::new();
        for s in 0..c.scales {
            enhance_main.push(SpatialAttentionBlock::new(&mut store, &format!("fusion.scale{}.main", s + 1), c.d_model, &mut rng)?);
            enhance_peripheral.push(SpatialAttentionBlock::new(
                &mut store,
                &format!("fusion.scale{}.peripheral", s + 1),
                c.d_model,
                &mut rng,
            )?);
        }
        let classifier_w = store.add_glorot("classifier.w", c.d_model, NUM_CLASSES, &mut rng);
        let classifier_b = store.add("classifier.b", Matrix::zeros(1, NUM_CLASSES));
        let positions = if c.positional_encoding {
            positional_encoding(c.seq_len, c.d_model)
        } else {
            Matrix::zeros(c.seq_len, c.d_model)
        };
        Ok(PeriCite {
            layout: Layout {
                embedding,
                main,
                peripheral,
                cta,
                enhance_main,
                enhance_peripheral,
                classifier_w,
                classifier_b,
            },
            config,
            vocab,
            store,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Value projections of every cross-text attention block.
    pub fn cta_value_params(&self) -> Vec<ParamId> {
        self.layout.cta.iter().flat_map(|c| c.value_params()).collect()
    }

    pub fn encode(&self, inst: &CitationInstance) -> EncodedInput {
        encode_instance(inst, &self.vocab, self.config.seq_len)
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], drop: &mut Dropout) -> Result<Var> {
        let table = g.param(self.layout.embedding);
        let x = g.gather(table, ids)?;
        // keeps token signal comparable to the unit-amplitude position code
        let x = g.scale(x, (self.config.d_model as f64).sqrt());
        let x = if self.config.positional_encoding {
            let pe = g.constant(self.positions.clone());
            g.add(x, pe)?
        } else {
            x
        };
        Ok(drop.apply(g, x))
    }

    fn check_input(&self, input: &EncodedInput) -> Result<()> {
        let l = self.config.seq_len;
        if input.main.len() != l || input.peripheral.len() != l {
            return Err(Error::shape(
                "encode_streams",
                format!("{} / {} tokens", input.main.len(), input.peripheral.len()),
                format!("{l} tokens per stream"),
            ));
        }
        Ok(())
    }

    /// Per-block outputs of both encoders on the tape.
    pub fn encode_on_graph(&self, g: &mut Graph, input: &EncodedInput, drop: &mut Dropout) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_input(input)?;
        let mut xm = self.embed(g, &input.main, drop)?;
        let mut xp = self.embed(g, &input.peripheral, drop)?;
        let (mut main_maps, mut peripheral_maps) = (Vec::new(), Vec::new());
        for b in 0..self.config.blocks {
            let sm = StreamState::with_mask(xm, Stream::Main, input.main_valid.clone());
            let sp = StreamState::with_mask(xp, Stream::Peripheral, input.peripheral_valid.clone());
            let mut am = self_attention(g, &sm, &self.layout.main[b].attention)?.value;
            let mut ap = self_attention(g, &sp, &self.layout.peripheral[b].attention)?.value;
            if self.config.cta {
                let bidir = bidirectional_attention(g, &sm, &sp, &self.layout.cta[b])?.combined;
                am = g.add(am, bidir)?;
                ap = g.add(ap, bidir)?;
            }
            xm = self.layout.main[b].finish(g, xm, am, drop)?;
            xp = self.layout.peripheral[b].finish(g, xp, ap, drop)?;
            main_maps.push(xm);
            peripheral_maps.push(xp);
        }
        Ok((main_maps, peripheral_maps))
    }

    fn mean_pool(g: &mut Graph, x: Var, valid: &[bool]) -> Result<Var> {
        let count = valid.iter().filter(|&&v| v).count();
        let weights = if count == 0 {
            Matrix::filled(1, valid.len(), 1.0 / valid.len() as f64)
        } else {
            let w = 1.0 / count as f64;
            Matrix::from_vec(1, valid.len(), valid.iter().map(|&v| if v { w } else { 0.0 }).collect())?
        };
        let weights = g.constant(weights);
        g.matmul(weights, x)
    }

    fn fuse_scale(&self, g: &mut Graph, scale: usize, pm: Var, pp: Var, input: &EncodedInput) -> Result<Var> {
        let e1 = self.layout.enhance_main[scale].forward(g, pm, &input.main_valid)?;
        let e2 = self.layout.enhance_peripheral[scale].forward(g, pp, &input.peripheral_valid)?;
        Ok(fuse_on_graph(g, e1, e2)?.fused)
    }

    /// 1×6 logit row on the tape.
    pub fn logits_on_graph(&self, g: &mut Graph, input: &EncodedInput, drop: &mut Dropout) -> Result<Var> {
        let (mm, pm) = self.encode_on_graph(g, input, drop)?;
        let deepest = self.config.blocks - 1;
        let (features, valid) = if self.config.fusion {
            let fused = self.fuse_scale(g, deepest, mm[deepest], pm[deepest], input)?;
            let either: Vec<bool> = input
                .main_valid
                .iter()
                .zip(&input.peripheral_valid)
                .map(|(&a, &b)| a || b)
                .collect();
            (fused, either)
        } else {
            (mm[deepest], input.main_valid.clone())
        };
        let pooled = Self::mean_pool(g, features, &valid)?;
        let (w, b) = (g.param(self.layout.classifier_w), g.param(self.layout.classifier_b));
        g.linear(pooled, w, b)
    }

    /// Cross-entropy of one instance on the tape.
    pub fn loss_on_graph(&self, g: &mut Graph, input: &EncodedInput, label: Intent, drop: &mut Dropout) -> Result<Var> {
        let logits = self.logits_on_graph(g, input, drop)?;
        g.cross_entropy(logits, label.index())
    }

    pub fn logits(&self, inst: &CitationInstance) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let input = self.encode(inst);
        let out = self.logits_on_graph(&mut g, &input, &mut Dropout::off())?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn predict_one(&self, inst: &CitationInstance) -> Result<Intent> {
        let logits = self.logits(inst)?;
        Ok(Intent::ALL[argmax(&logits)])
    }

    /// Predicted intents for evaluation data. Synthetic instances are refused.
    pub fn predict(&self, instances: &[CitationInstance]) -> Result<Vec<Intent>> {
        if let Some(s) = instances.iter().find(|i| i.synthetic) {
            return Err(Error::Domain(format!(
                "synthetic instance from {} cannot be evaluated",
                s.core_id
            )));
        }
        instances.iter().map(|i| self.predict_one(i)).collect()
    }

    /// Block outputs of both encoders, one feature map per scale.
    pub fn encode_streams(&self, input: &EncodedInput) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>)> {
        let mut g = Graph::new(&self.store);
        let (mm, pm) = self.encode_on_graph(&mut g, input, &mut Dropout::off())?;
        let maps = |g: &Graph, vars: &[Var]| -> Result<Vec<FeatureMap>> {
            vars.iter()
                .enumerate()
                .map(|(i, &v)| FeatureMap::new(i + 1, g.value(v).clone()))
                .collect()
        };
        Ok((maps(&g, &mm)?, maps(&g, &pm)?))
    }

    /// Fused map at every scale. Only the deepest feeds the classifier.
    pub fn fused_maps(&self, input: &EncodedInput) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::new(&self.store);
        let (mm, pm) = self.encode_on_graph(&mut g, input, &mut Dropout::off())?;
        (0..self.config.scales)
            .map(|s| {
                let fused = self.fuse_scale(&mut g, s, mm[s], pm[s], input)?;
                FeatureMap::new(s + 1, g.value(fused).clone())
            })
            .collect()
    }
}
