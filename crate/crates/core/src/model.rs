//! The network: a causal encoder over token features, a region head, and
//! travel-time / duration heads that cross-attend from the (teacher-forced)
//! target region, and for duration also its arrival time, onto the visit
//! embeddings.
//!
//! Alignment: output row `p` predicts token `p + 1`. The temporal heads for
//! that prediction may only attend to visit embeddings `0..=p`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{positional_encoding, space2vec, time_feature, EncoderConfig, Time2VecParams};
use crate::error::{Error, Result};
use crate::gmm::{self, GaussianMixture};
use crate::ingest::{duration_target, travel_target, RegionVocabulary};
use crate::nn::{encoder_stack, CrossHead, EncoderLayer, Forward, Linear};
use crate::tape::{Mat, ParamId, ParamStore, Var};
use crate::types::{travel_time, RegionId, Seconds, Token, Visit};

/// Raw bias of the mixture scales at initialization; softplus gives ~0.05.
const SCALE_INIT_RAW: f64 = -2.97;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Region, then travel time given region, then duration given region and arrival.
    #[default]
    Full,
    /// Temporal heads query with a learned constant instead of region/arrival.
    Independence,
    /// Temporal heads emit point estimates trained with squared error.
    Regression,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Independence, Variant::Regression];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Independence => "independence",
            Variant::Regression => "regression",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "independence" => Ok(Variant::Independence),
            "regression" => Ok(Variant::Regression),
            other => Err(Error::Argument(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub gmm_components: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::geolife()
    }
}

impl ModelConfig {
    pub fn geolife() -> Self {
        Self {
            n_layers: 2,
            n_heads: 8,
            ff_dim: 32,
            gmm_components: 3,
            dropout: 0.1,
            ln_eps: 1e-5,
            learning_rate: 1e-4,
            batch_size: 64,
            max_seq_len: 512,
            encoder: EncoderConfig { region_emb_dim: 32, ..EncoderConfig::default() },
        }
    }

    pub fn mobilitysim() -> Self {
        Self {
            n_layers: 4,
            n_heads: 2,
            ff_dim: 256,
            gmm_components: 5,
            batch_size: 128,
            encoder: EncoderConfig { region_emb_dim: 64, ..EncoderConfig::default() },
            ..Self::geolife()
        }
    }

    pub fn model_dim(&self) -> usize {
        self.encoder.model_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let positive = [self.n_layers, self.n_heads, self.ff_dim, self.gmm_components, self.batch_size, self.max_seq_len];
        if positive.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.model_dim() % self.n_heads != 0 {
            return Err(Error::Config(format!("model dim {} not divisible by {} heads", self.model_dim(), self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.ln_eps > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("dropout must be in [0, 1), ln_eps and learning_rate positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    omega: ParamId,
    phi: ParamId,
    embedding: ParamId,
    backbone: Vec<EncoderLayer>,
    region_stack: Vec<EncoderLayer>,
    region_out: Linear,
    travel: CrossHead,
    duration: CrossHead,
    travel_query: Option<ParamId>,
    duration_query: Option<ParamId>,
}

/// Teacher-forced temporal target of one predicted visit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalTarget {
    /// Output row that predicts this visit.
    pub position: usize,
    pub region: RegionId,
    pub arrival: Seconds,
    /// Hours; `None` when the preceding visit is unknown (right after a BLANK).
    pub travel_hours: Option<f64>,
    pub duration_days: f64,
    /// The predicted visit lies after SEP.
    pub in_answer: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherTargets {
    /// Vocabulary id each output row should predict; `None` for the last row and PAD targets.
    pub ids: Vec<Option<usize>>,
    pub temporal: Vec<TemporalTarget>,
}

impl TeacherTargets {
    pub fn n_predicted(&self) -> usize {
        self.ids.iter().flatten().count()
    }
}

/// Derives the shifted targets of a token sequence. The first answer visit
/// of a span measures travel from the visit before its BLANK.
pub fn teacher_targets(tokens: &[Token], vocab: &RegionVocabulary) -> Result<TeacherTargets> {
    let sep = tokens.iter().position(|t| *t == Token::Sep);
    let anchors: Vec<Option<Visit>> = tokens
        .iter()
        .enumerate()
        .take(sep.unwrap_or(tokens.len()))
        .filter(|(_, t)| **t == Token::Blank)
        .map(|(i, _)| if i > 0 { tokens[i - 1].visit().copied() } else { None })
        .collect();
    let mut ids = vec![None; tokens.len()];
    let mut temporal = Vec::new();
    let mut span = 0;
    for i in 1..tokens.len() {
        let tok = &tokens[i];
        if *tok != Token::Pad {
            ids[i - 1] = Some(vocab.token_id(tok) as usize);
        }
        match tok {
            Token::Ans => span += 1,
            Token::Visit(v) => {
                let in_answer = sep.is_some_and(|s| i > s);
                let prev = match (&tokens[i - 1], in_answer) {
                    (Token::Visit(p), _) => Some(*p),
                    (Token::Sep | Token::Ans, true) => anchors.get(span).copied().flatten(),
                    _ => None,
                };
                let travel_hours = prev.map(|p| travel_time(&p, v).map(travel_target)).transpose()?;
                temporal.push(TemporalTarget {
                    position: i - 1,
                    region: v.region,
                    arrival: v.arrival,
                    travel_hours,
                    duration_days: duration_target(v.departure - v.arrival),
                    in_answer,
                });
            }
            _ => {}
        }
    }
    Ok(TeacherTargets { ids, temporal })
}

/// Teacher-forced forward pass results, as plain values.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub region_probs: Mat,
    /// One row per temporal target: raw mixture blocks, or a single scalar
    /// for the regression variant.
    pub travel: Mat,
    pub duration: Mat,
    pub targets: TeacherTargets,
}

#[derive(Debug, Clone)]
pub struct TrajGpt {
    pub config: ModelConfig,
    pub variant: Variant,
    pub vocab: RegionVocabulary,
    pub store: ParamStore,
    layout: Layout,
}

impl TrajGpt {
    pub fn new(config: ModelConfig, variant: Variant, vocab: RegionVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let (d, t, e, v) = (config.model_dim(), enc.t2v_dim, enc.region_emb_dim, vocab.size());

        // Linear slot starts near zero: raw times in days can be large. The
        // periodic slots start on a ladder from weekly to sub-daily periods.
        let mut omega = Mat::zeros((1, t));
        let mut phi = Mat::zeros((1, t));
        omega[[0, 0]] = rng.random_range(-0.01..0.01);
        for i in 1..t {
            let cycles_per_day = if t > 2 { (1.0f64 / 7.0) * 28f64.powf((i - 1) as f64 / (t - 2) as f64) } else { 1.0 };
            omega[[0, i]] = 2.0 * std::f64::consts::PI * cycles_per_day;
            phi[[0, i]] = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        }
        let omega = store.add("time2vec.omega", omega);
        let phi = store.add("time2vec.phi", phi);
        let normal = rand_distr::StandardNormal;
        let embedding = store.add("embedding", Mat::from_shape_simple_fn((v, e), || rng.sample::<f64, _>(normal)));

        let backbone = encoder_stack(&mut store, "backbone", config.n_layers, d, config.n_heads, config.ff_dim, &mut rng);
        let region_stack = encoder_stack(&mut store, "region", config.n_layers, d, config.n_heads, config.ff_dim, &mut rng);
        let region_out = Linear::new(&mut store, "region.out", d, v, &mut rng);
        let out = if variant == Variant::Regression { 1 } else { 3 * config.gmm_components };
        let travel = CrossHead::new(&mut store, "travel", e, d, config.n_heads, config.ff_dim, out, &mut rng);
        let duration = CrossHead::new(&mut store, "duration", e + t, d, config.n_heads, config.ff_dim, out, &mut rng);
        if variant != Variant::Regression {
            // narrow initial components: the targets' spreads are a small
            // fraction of the unit (minutes in hours and days)
            let k = config.gmm_components;
            for head in [&travel, &duration] {
                store.get_mut(head.ff2.bias).slice_mut(ndarray::s![0, 2 * k..]).fill(SCALE_INIT_RAW);
            }
        }
        let (travel_query, duration_query) = if variant == Variant::Independence {
            (
                Some(store.add("travel.query", Mat::from_shape_simple_fn((1, e), || rng.sample::<f64, _>(normal)))),
                Some(store.add("duration.query", Mat::from_shape_simple_fn((1, e + t), || rng.sample::<f64, _>(normal)))),
            )
        } else {
            (None, None)
        };
        let layout = Layout { omega, phi, embedding, backbone, region_stack, region_out, travel, duration, travel_query, duration_query };
        Ok(Self { config, variant, vocab, store, layout })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.ids().find(|id| self.store.name(*id) == name)
    }

    pub fn eval_forward(&self) -> Forward<'_> {
        Forward::eval(&self.store, self.config.ln_eps)
    }

    pub fn train_forward(&self, seed: u64) -> Forward<'_> {
        Forward::train(&self.store, self.config.ln_eps, self.config.dropout, seed)
    }

    pub fn time2vec_params(&self) -> Time2VecParams {
        Time2VecParams {
            omega: self.store.get(self.layout.omega).row(0).to_vec(),
            phi: self.store.get(self.layout.phi).row(0).to_vec(),
        }
    }

    pub fn embedding_table(&self) -> &Mat {
        self.store.get(self.layout.embedding)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length { len: tokens.len(), max: self.config.max_seq_len });
        }
        for t in tokens {
            if let Token::Visit(v) = t {
                if v.region > self.vocab.unk_id() {
                    return Err(Error::Vocabulary(v.region));
                }
            }
        }
        Ok(())
    }

    /// `n x T` time encodings of the given rebased timestamps.
    fn time2vec(&self, f: &mut Forward, times: &[Seconds]) -> Var {
        let col = Mat::from_shape_fn((times.len(), 1), |(i, _)| time_feature(times[i]));
        let col = f.tape.constant(col);
        let omega = f.param(self.layout.omega);
        let phi = f.param(self.layout.phi);
        let z = f.tape.matmul(col, omega);
        let z = f.tape.add_row(z, phi);
        let t = self.config.encoder.t2v_dim;
        if t == 1 {
            return z;
        }
        let linear = f.tape.slice_cols(z, 0, 1);
        let periodic = f.tape.slice_cols(z, 1, t - 1);
        let periodic = f.tape.sin(periodic);
        f.tape.concat(&[linear, periodic])
    }

    /// Input features with positional encoding, `L x D`.
    pub fn embed(&self, f: &mut Forward, tokens: &[Token]) -> Var {
        let enc = &self.config.encoder;
        let n = tokens.len();
        let mut space = Mat::zeros((n, enc.space_dim()));
        let mut visit_mask = Mat::zeros((n, enc.t2v_dim));
        let (mut arrivals, mut departures) = (vec![0; n], vec![0; n]);
        for (i, tok) in tokens.iter().enumerate() {
            if let Token::Visit(v) = tok {
                for (dst, src) in space.row_mut(i).iter_mut().zip(space2vec(&v.location, enc)) {
                    *dst = src;
                }
                visit_mask.row_mut(i).fill(1.0);
                arrivals[i] = v.arrival;
                departures[i] = v.departure;
            }
        }
        let space = f.tape.constant(space);
        let mask = f.tape.constant(visit_mask);
        let arr = self.time2vec(f, &arrivals);
        let arr = f.tape.mul(arr, mask);
        let dep = self.time2vec(f, &departures);
        let dep = f.tape.mul(dep, mask);
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.token_id(t) as usize).collect();
        let table = f.param(self.layout.embedding);
        let emb = f.tape.gather(table, &ids);
        let x = f.tape.concat(&[space, arr, dep, emb]);
        let pe = f.tape.constant(positional_encoding(n, self.model_dim()));
        let x = f.tape.add(x, pe);
        f.dropout(x)
    }

    /// Causal self-attention mask with PAD keys removed.
    pub fn self_mask(tokens: &[Token]) -> Array2<bool> {
        Array2::from_shape_fn((tokens.len(), tokens.len()), |(i, j)| j <= i && tokens[j] != Token::Pad)
    }

    fn cross_mask(tokens: &[Token], positions: &[usize]) -> Array2<bool> {
        Array2::from_shape_fn((positions.len(), tokens.len()), |(r, j)| j <= positions[r] && tokens[j] != Token::Pad)
    }

    /// Visit embeddings `H`, one row per token.
    pub fn encode_sequence(&self, f: &mut Forward, tokens: &[Token]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mask = Self::self_mask(tokens);
        let mut x = self.embed(f, tokens);
        for layer in &self.layout.backbone {
            x = layer.forward(f, x, &mask);
        }
        Ok(x)
    }

    /// Unnormalized next-token scores, `L x V`.
    pub fn region_logits(&self, f: &mut Forward, tokens: &[Token], hidden: Var) -> Var {
        let mask = Self::self_mask(tokens);
        let mut x = hidden;
        for layer in &self.layout.region_stack {
            x = layer.forward(f, x, &mask);
        }
        self.layout.region_out.forward(f, x)
    }

    /// Raw travel-time outputs for `(position, target region)` queries.
    pub fn travel_head(&self, f: &mut Forward, tokens: &[Token], hidden: Var, queries: &[(usize, RegionId)]) -> Var {
        let positions: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let query = match self.layout.travel_query {
            Some(id) => {
                let q = f.param(id);
                f.tape.gather(q, &vec![0; queries.len()])
            }
            None => {
                let table = f.param(self.layout.embedding);
                let rows: Vec<usize> = queries.iter().map(|q| q.1 as usize).collect();
                f.tape.gather(table, &rows)
            }
        };
        self.layout.travel.forward(f, query, hidden, &Self::cross_mask(tokens, &positions))
    }

    /// Raw duration outputs for `(position, target region, target arrival)` queries.
    pub fn duration_head(&self, f: &mut Forward, tokens: &[Token], hidden: Var, queries: &[(usize, RegionId, Seconds)]) -> Var {
        let positions: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let query = match self.layout.duration_query {
            Some(id) => {
                let q = f.param(id);
                f.tape.gather(q, &vec![0; queries.len()])
            }
            None => {
                let table = f.param(self.layout.embedding);
                let rows: Vec<usize> = queries.iter().map(|q| q.1 as usize).collect();
                let e = f.tape.gather(table, &rows);
                let arrivals: Vec<Seconds> = queries.iter().map(|q| q.2).collect();
                let t = self.time2vec(f, &arrivals);
                f.tape.concat(&[e, t])
            }
        };
        self.layout.duration.forward(f, query, hidden, &Self::cross_mask(tokens, &positions))
    }

    /// Teacher-forced pass; returns `(logits, travel, duration, targets)`.
    pub fn forward_teacher(&self, f: &mut Forward, tokens: &[Token]) -> Result<(Var, Option<(Var, Var)>, TeacherTargets)> {
        let targets = teacher_targets(tokens, &self.vocab)?;
        let hidden = self.encode_sequence(f, tokens)?;
        let logits = self.region_logits(f, tokens, hidden);
        let temporal = if targets.temporal.is_empty() {
            None
        } else {
            let tq: Vec<_> = targets.temporal.iter().map(|t| (t.position, t.region)).collect();
            let dq: Vec<_> = targets.temporal.iter().map(|t| (t.position, t.region, t.arrival)).collect();
            Some((self.travel_head(f, tokens, hidden, &tq), self.duration_head(f, tokens, hidden, &dq)))
        };
        Ok((logits, temporal, targets))
    }

    /// Summed joint negative log-likelihood of one sequence and the number of
    /// predicted positions it covers. Regression swaps the temporal terms for
    /// squared error.
    pub fn loss(&self, f: &mut Forward, tokens: &[Token]) -> Result<(Var, usize)> {
        let (logits, temporal, targets) = self.forward_teacher(f, tokens)?;
        let mut total = f.tape.cross_entropy(logits, &targets.ids);
        if let Some((travel, duration)) = temporal {
            let travel_t: Vec<Option<f64>> = targets.temporal.iter().map(|t| t.travel_hours).collect();
            let duration_t: Vec<Option<f64>> = targets.temporal.iter().map(|t| Some(t.duration_days)).collect();
            let (a, b) = match self.variant {
                Variant::Regression => (f.tape.squared_error(travel, &travel_t), f.tape.squared_error(duration, &duration_t)),
                _ => (f.tape.gmm_nll(travel, &travel_t), f.tape.gmm_nll(duration, &duration_t)),
            };
            total = f.tape.add(total, a);
            total = f.tape.add(total, b);
        }
        Ok((total, targets.n_predicted()))
    }

    /// Mean joint loss of one sequence, evaluation mode.
    pub fn mean_loss(&self, tokens: &[Token]) -> Result<f64> {
        let mut f = self.eval_forward();
        let (total, n) = self.loss(&mut f, tokens)?;
        Ok(f.tape.scalar(total) / n.max(1) as f64)
    }

    /// Evaluation-mode teacher-forced outputs as plain matrices.
    pub fn teacher_outputs(&self, tokens: &[Token]) -> Result<TeacherOutputs> {
        let mut f = self.eval_forward();
        let (logits, temporal, targets) = self.forward_teacher(&mut f, tokens)?;
        let region_probs = softmax_rows(f.tape.value(logits));
        let width = if self.variant == Variant::Regression { 1 } else { 3 * self.config.gmm_components };
        let (travel, duration) = match temporal {
            Some((a, b)) => (f.tape.value(a).clone(), f.tape.value(b).clone()),
            None => (Mat::zeros((0, width)), Mat::zeros((0, width))),
        };
        Ok(TeacherOutputs { region_probs, travel, duration, targets })
    }

    pub fn hidden_states(&self, tokens: &[Token]) -> Result<Mat> {
        let mut f = self.eval_forward();
        let h = self.encode_sequence(&mut f, tokens)?;
        Ok(f.tape.value(h).clone())
    }

    /// Next-token distribution at every position, `L x V`.
    pub fn region_probs(&self, tokens: &[Token]) -> Result<Mat> {
        let mut f = self.eval_forward();
        let h = self.encode_sequence(&mut f, tokens)?;
        let logits = self.region_logits(&mut f, tokens, h);
        Ok(softmax_rows(f.tape.value(logits)))
    }

    /// Mixture (or point estimate) from one raw head row.
    pub fn temporal_prediction(&self, raw: ndarray::ArrayView1<f64>) -> TemporalPrediction {
        match self.variant {
            Variant::Regression => TemporalPrediction::Point(raw[0]),
            _ => TemporalPrediction::Mixture(gmm::positive_params(&raw.to_vec())),
        }
    }
}

/// A temporal head's prediction in its scaled unit.
#[derive(Debug, Clone, PartialEq)]
pub enum TemporalPrediction {
    Mixture(GaussianMixture),
    Point(f64),
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
