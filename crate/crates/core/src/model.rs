//! The refinement model: a graph-coupled recurrent encoder over backfill
//! sequences, a recurrent encoder over a model's prediction history, and
//! an attention head producing a bounded multiplicative correction.

use crate::error::{Error, Result};
use crate::graph::SignalGraph;
use crate::nn::{
    mult_attention, Act, FfnParams, FfnSpec, GconvParams, GruParams, NodeId, OptState, ParamSet,
    Session,
};
use crate::predictions::PredictionHistory;
use crate::signal::{derive_seed, SignalId, Week};
use crate::store::{RevisionDataset, ScaleStats, Scaler};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Latent dimension m of the backfill-sequence encoder.
    pub hidden: usize,
    /// State size of the prediction-history encoder.
    pub model_hidden: usize,
    /// Hidden sizes of the correction head.
    pub rf_hidden: (usize, usize),
    /// Autoregressive steps at inference.
    pub steps_l: usize,
    pub pretrain_epochs: usize,
    /// Fully teacher-forced epochs; defaults to half of `pretrain_epochs`.
    pub teacher_epochs: Option<usize>,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Probability of feeding a prediction back as the next input once
    /// scheduled sampling starts.
    pub sample_prob: f64,
    pub seed: u64,
    /// Share the hidden layer of the per-signal output heads.
    pub shared_heads: bool,
    /// Feature token of the forecast target.
    pub target_feature: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 50,
            model_hidden: 50,
            rf_hidden: (60, 30),
            steps_l: 5,
            pretrain_epochs: 2000,
            teacher_epochs: None,
            pretrain_lr: 1e-3,
            finetune_epochs: 1000,
            finetune_lr: 5e-4,
            sample_prob: 0.5,
            seed: 0,
            shared_heads: false,
            target_feature: "cases".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("model_hidden", self.model_hidden),
            ("rf_hidden.0", self.rf_hidden.0),
            ("rf_hidden.1", self.rf_hidden.1),
            ("steps_l", self.steps_l),
            ("pretrain_epochs", self.pretrain_epochs),
            ("finetune_epochs", self.finetune_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.pretrain_lr > 0.0 && self.finetune_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sample_prob) {
            return Err(Error::InvalidConfig(format!(
                "sample_prob must be in [0, 1], got {}",
                self.sample_prob
            )));
        }
        if self.target_feature.is_empty() {
            return Err(Error::InvalidConfig("target_feature must be set".into()));
        }
        Ok(())
    }

    pub fn teacher_epochs(&self) -> usize {
        self.teacher_epochs.unwrap_or(self.pretrain_epochs / 2)
    }
}

/// Parameter layout of the backfill-sequence encoder: a per-signal
/// learnable initial state, one shared GRU over scalar revisions, one
/// graph-convolution mixing step, and per-signal two-layer output heads.
#[derive(Debug, Clone)]
pub struct BseqEncoder {
    pub signals: Vec<SignalId>,
    pub hidden: usize,
    pub shared_heads: bool,
}

impl BseqEncoder {
    pub fn init(
        ps: &mut ParamSet,
        signals: &[SignalId],
        hidden: usize,
        shared_heads: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        GruParams::init(ps, "be.gru", 1, hidden, rng);
        GconvParams::init(ps, "be.gc", hidden, rng);
        if shared_heads {
            ps.add_matrix("be.head.shared.w0", hidden, hidden, rng);
            ps.add_zeros("be.head.shared.b0", hidden);
        }
        for sig in signals {
            ps.add_zeros(&format!("be.h0.{sig}"), hidden);
            if !shared_heads {
                ps.add_matrix(&format!("be.head.{sig}.w0"), hidden, hidden, rng);
                ps.add_zeros(&format!("be.head.{sig}.b0"), hidden);
            }
            ps.add_matrix(&format!("be.head.{sig}.w1"), 1, hidden, rng);
            ps.add_zeros(&format!("be.head.{sig}.b1"), 1);
        }
        BseqEncoder {
            signals: signals.to_vec(),
            hidden,
            shared_heads,
        }
    }

    fn gru(&self) -> GruParams {
        GruParams::attach("be.gru", 1, self.hidden)
    }

    fn gconv(&self) -> GconvParams {
        GconvParams::attach("be.gc", self.hidden)
    }

    pub fn initial_states(&self, s: &mut Session) -> Vec<NodeId> {
        self.signals
            .iter()
            .map(|sig| s.param(&format!("be.h0.{sig}")))
            .collect()
    }

    pub(crate) fn head_forward(&self, s: &mut Session, sig_idx: usize, h: NodeId) -> NodeId {
        let sig = &self.signals[sig_idx];
        let hidden = if self.shared_heads {
            let w0 = s.param("be.head.shared.w0");
            let b0 = s.param("be.head.shared.b0");
            let wx = s.tape.matvec(w0, self.hidden, self.hidden, h);
            let pre = s.tape.add(wx, b0);
            s.tape.relu(pre)
        } else {
            let w0 = s.param(&format!("be.head.{sig}.w0"));
            let b0 = s.param(&format!("be.head.{sig}.b0"));
            let wx = s.tape.matvec(w0, self.hidden, self.hidden, h);
            let pre = s.tape.add(wx, b0);
            s.tape.relu(pre)
        };
        let w1 = s.param(&format!("be.head.{sig}.w1"));
        let b1 = s.param(&format!("be.head.{sig}.b1"));
        let wx = s.tape.matvec(w1, 1, self.hidden, hidden);
        s.tape.add(wx, b1)
    }

    /// One encoder step: scalar inputs through the shared GRU, states
    /// mixed over the graph, per-signal value predictions from the heads.
    /// Returns (new states, predictions).
    pub fn step(
        &self,
        s: &mut Session,
        adj: &[Vec<f64>],
        inputs: &[NodeId],
        states: &[NodeId],
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        if inputs.len() != self.signals.len() || states.len() != self.signals.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} inputs and states, got {} and {}",
                self.signals.len(),
                inputs.len(),
                states.len()
            )));
        }
        let gru = self.gru();
        let mixed: Vec<NodeId> = inputs
            .iter()
            .zip(states)
            .map(|(&x, &h)| gru.cell(s, x, h))
            .collect::<Result<_>>()?;
        let new_states = self.gconv().forward(s, adj, &mixed)?;
        let preds = (0..self.signals.len())
            .map(|i| self.head_forward(s, i, new_states[i]))
            .collect();
        Ok((new_states, preds))
    }
}

/// Recurrent encoder over per-week triples
/// (prediction, real-time target, revised target).
#[derive(Debug, Clone)]
pub struct ModelEncoder {
    pub hidden: usize,
}

impl ModelEncoder {
    pub fn init(ps: &mut ParamSet, hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        GruParams::init(ps, "me.gru", 3, hidden, rng);
        ModelEncoder { hidden }
    }

    pub fn attach(hidden: usize) -> Self {
        ModelEncoder { hidden }
    }

    /// States after each triple, starting from the zero state.
    pub fn states(&self, s: &mut Session, triples: &[[f64; 3]]) -> Result<Vec<NodeId>> {
        if triples.is_empty() {
            return Err(Error::InsufficientHistory("no prediction triples".into()));
        }
        let gru = GruParams::attach("me.gru", 3, self.hidden);
        let mut h = s.tape.zeros(self.hidden);
        let mut out = Vec::with_capacity(triples.len());
        for c in triples {
            let x = s.tape.leaf(c.to_vec());
            h = gru.cell(s, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Attention over signal states plus the correction head.
#[derive(Debug, Clone)]
pub struct RefinerHead {
    pub m: usize,
    pub z_dim: usize,
    pub rf_hidden: (usize, usize),
}

impl RefinerHead {
    pub fn init(
        ps: &mut ParamSet,
        m: usize,
        z_dim: usize,
        rf_hidden: (usize, usize),
        rng: &mut ChaCha20Rng,
    ) -> Self {
        ps.add_matrix("rf.w", 1, m, rng);
        let spec = FfnSpec {
            sizes: vec![m + z_dim, rf_hidden.0, rf_hidden.1, 1],
            hidden_act: Act::Relu,
            output_act: Some(Act::Tanh),
        };
        FfnParams::init(ps, "rf.ffn", spec, rng);
        RefinerHead {
            m,
            z_dim,
            rf_hidden,
        }
    }

    pub fn attach(m: usize, z_dim: usize, rf_hidden: (usize, usize)) -> Self {
        RefinerHead { m, z_dim, rf_hidden }
    }

    fn ffn(&self) -> FfnParams {
        FfnParams::attach(
            "rf.ffn",
            FfnSpec {
                sizes: vec![self.m + self.z_dim, self.rf_hidden.0, self.rf_hidden.1, 1],
                hidden_act: Act::Relu,
                output_act: Some(Act::Tanh),
            },
        )
    }

    /// Correction in [-1, 1] from signal states, the prediction-history
    /// state, and the scaled current prediction. Returns (attention
    /// weights, correction node).
    pub fn gamma(
        &self,
        s: &mut Session,
        states: &[NodeId],
        z: NodeId,
        y_scaled: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let w = s.param("rf.w");
        let (alphas, pooled) = mult_attention(s, y_scaled, states, w)?;
        let cat = s.tape.concat(&[pooled, z]);
        let g = self.ffn().forward(s, cat)?;
        Ok((alphas, g))
    }
}

/// Refined prediction for one (model, region, horizon, week).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementOutput {
    /// Correction in [-1, 1].
    pub gamma: f64,
    /// The unrefined prediction.
    pub y_raw: f64,
    /// (gamma + 1) * y_raw.
    pub y_star: f64,
}

/// Apply a trained correction head outside any training loop.
pub fn refine(
    params: &ParamSet,
    head: &RefinerHead,
    states: &[Vec<f64>],
    z: &[f64],
    y_scaled: f64,
    y_raw: f64,
) -> Result<RefinementOutput> {
    let mut s = Session::new(params);
    let state_ids: Vec<NodeId> = states.iter().map(|v| s.tape.leaf(v.clone())).collect();
    let z_id = s.tape.leaf(z.to_vec());
    let yq = s.tape.scalar(y_scaled);
    let (_alphas, g) = head.gamma(&mut s, &state_ids, z_id, yq)?;
    let gamma = s.tape.scalar_value(g);
    Ok(RefinementOutput {
        gamma,
        y_raw,
        y_star: (gamma + 1.0) * y_raw,
    })
}

/// Scaled, issue-aligned revision windows for one observation week:
/// element [i][j] is signal i's value at the j-th shared issue week.
fn aligned_scaled_window(
    ds: &RevisionDataset,
    scaler: &Scaler,
    obs: Week,
    upto: Week,
) -> Result<Option<Vec<Vec<f64>>>> {
    let mut raw = Vec::with_capacity(ds.signals().len());
    let mut start = 0;
    for sig in ds.signals() {
        match ds.backfill_sequence(sig, obs, upto) {
            Ok(b) => {
                start = start.max(b.start_issue);
                raw.push(b);
            }
            Err(Error::NoRecords { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    for b in raw {
        let stats = scaler.stats(&b.signal)?;
        let offset = (start - b.start_issue) as usize;
        out.push(b.values[offset..].iter().map(|&v| stats.scale(v)).collect());
    }
    Ok(Some(out))
}

/// Pretrained encoder parameters with the training trace.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ParamSet,
    pub encoder: BseqEncoder,
    pub loss_history: Vec<f64>,
    pub week: Week,
}

/// Train the backfill-sequence encoder to predict each next revision,
/// teacher-forced for the first half of the epochs and scheduled-sampled
/// afterwards. Gradients flow through fed-back predictions.
pub fn pretrain_bseqenc(
    ds: &RevisionDataset,
    graph: &SignalGraph,
    t: Week,
    cfg: &TrainConfig,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if graph.vertices != ds.signals() {
        return Err(Error::InvalidArgument(
            "graph vertex set does not match the dataset's signals".into(),
        ));
    }
    let rts = ds.real_time_sequence(t)?;
    let scaler = Scaler::fit_realtime(&rts);
    let adj = graph.normalized_adjacency();

    let mut samples = Vec::new();
    for obs in 1..=t {
        if let Some(window) = aligned_scaled_window(ds, &scaler, obs, t)? {
            if window[0].len() >= 2 {
                samples.push(window);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no backfill sequences with at least two revisions by week {t}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let enc = BseqEncoder::init(&mut params, ds.signals(), cfg.hidden, cfg.shared_heads, &mut rng);
    let mut opt = OptState::new(cfg.pretrain_lr);
    let teacher_epochs = cfg.teacher_epochs();

    let mut loss_history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let sampling = epoch >= teacher_epochs;
        let mut s = Session::new(&params);
        let mut total: Option<NodeId> = None;
        let mut count = 0usize;
        for window in &samples {
            let steps = window[0].len();
            let mut states = enc.initial_states(&mut s);
            let mut inputs: Vec<NodeId> = window
                .iter()
                .map(|w| s.tape.scalar(w[0]))
                .collect();
            for j in 0..steps - 1 {
                let (new_states, preds) = enc.step(&mut s, &adj, &inputs, &states)?;
                states = new_states;
                let feed_back = sampling && rng.gen::<f64>() < cfg.sample_prob;
                let mut next_inputs = Vec::with_capacity(window.len());
                for (i, w) in window.iter().enumerate() {
                    let target = s.tape.scalar(w[j + 1]);
                    let diff = s.tape.sub(preds[i], target);
                    let sq = s.tape.mul(diff, diff);
                    total = Some(match total {
                        Some(acc) => s.tape.add(acc, sq),
                        None => sq,
                    });
                    count += 1;
                    next_inputs.push(if feed_back { preds[i] } else { target });
                }
                inputs = next_inputs;
            }
        }
        let sum = total.expect("samples are non-empty");
        let loss = s.tape.scale_const(sum, 1.0 / count as f64);
        loss_history.push(s.tape.scalar_value(loss));
        let grads = s.grads(loss);
        opt.opt_step(&mut params, &grads)?;
    }

    Ok(PretrainOutput {
        params,
        encoder: enc,
        loss_history,
        week: t,
    })
}

pub(crate) fn rollout_autoregressive(
    s: &mut Session,
    enc: &BseqEncoder,
    adj: &[Vec<f64>],
    inputs_scaled: &[f64],
    l: usize,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if l == 0 {
        return Err(Error::InvalidArgument("need at least one rollout step".into()));
    }
    let mut states = enc.initial_states(s);
    let mut inputs: Vec<NodeId> = inputs_scaled.iter().map(|&v| s.tape.scalar(v)).collect();
    let mut preds = Vec::new();
    for _ in 0..l {
        let (new_states, new_preds) = enc.step(s, adj, &inputs, &states)?;
        states = new_states;
        preds = new_preds;
        inputs = preds.clone();
    }
    Ok((states, preds))
}

pub(crate) fn rollout_teacher(
    s: &mut Session,
    enc: &BseqEncoder,
    adj: &[Vec<f64>],
    window: &[Vec<f64>],
) -> Result<Vec<NodeId>> {
    let mut states = enc.initial_states(s);
    let steps = window[0].len();
    for j in 0..steps {
        let inputs: Vec<NodeId> = window.iter().map(|w| s.tape.scalar(w[j])).collect();
        let (new_states, _) = enc.step(s, adj, &inputs, &states)?;
        states = new_states;
    }
    Ok(states)
}

/// Encode the current week's real-time values (already scaled) by rolling
/// the encoder forward `l` steps, feeding predictions back after the
/// first step. Returns per-signal final states and value predictions.
pub fn encode_realtime(
    params: &ParamSet,
    enc: &BseqEncoder,
    adj: &[Vec<f64>],
    realtime_scaled: &[f64],
    l: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if realtime_scaled.len() != enc.signals.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} real-time values, got {}",
            enc.signals.len(),
            realtime_scaled.len()
        )));
    }
    let mut s = Session::new(params);
    let (states, preds) = rollout_autoregressive(&mut s, enc, adj, realtime_scaled, l)?;
    let state_vals = states.iter().map(|&h| s.tape.value(h).to_vec()).collect();
    let pred_vals = preds.iter().map(|&p| s.tape.scalar_value(p)).collect();
    Ok((state_vals, pred_vals))
}

/// Everything the fine-tune loss needs besides the parameters, frozen
/// before the epoch loop so every epoch sees identical data.
pub(crate) struct FinetuneContext {
    pub enc: BseqEncoder,
    pub me: ModelEncoder,
    pub rf: RefinerHead,
    pub adj: Vec<Vec<f64>>,
    /// triples[j] belongs to forecast-made week j+1
    pub triples: Vec<[f64; 3]>,
    pub weeks: Vec<TrainWeek>,
    pub sigma: f64,
}

pub(crate) struct TrainWeek {
    /// 1-based forecast-made week index into `triples`.
    pub idx: usize,
    pub window: Vec<Vec<f64>>,
    pub y_raw: f64,
    pub y_scaled: f64,
    pub target_raw: f64,
}

impl FinetuneContext {
    /// Build the loss graph: sum over training weeks of the squared
    /// sigma-normalized gap between the corrected prediction and the
    /// week-t revision of the target.
    pub fn loss(&self, params: &ParamSet) -> Result<(Session, NodeId)> {
        let mut s = Session::new(params);
        let zs = self.me.states(&mut s, &self.triples)?;
        let mut total: Option<NodeId> = None;
        for w in &self.weeks {
            let states = rollout_teacher(&mut s, &self.enc, &self.adj, &w.window)?;
            let yq = s.tape.scalar(w.y_scaled);
            let (_alphas, g) = self.rf.gamma(&mut s, &states, zs[w.idx - 1], yq)?;
            let corrected = s.tape.add_const(g, 1.0);
            let pred = s.tape.scale_const(corrected, w.y_raw);
            let diff = s.tape.add_const(pred, -w.target_raw);
            let norm = s.tape.scale_const(diff, 1.0 / self.sigma);
            let sq = s.tape.mul(norm, norm);
            total = Some(match total {
                Some(acc) => s.tape.add(acc, sq),
                None => sq,
            });
        }
        let out = total.ok_or_else(|| Error::InsufficientHistory("no training weeks".into()))?;
        Ok((s, out))
    }
}

/// A fine-tuned refinement model for one (model, region, horizon, week).
pub struct RefinementModel {
    pub params: ParamSet,
    pub loss_history: Vec<f64>,
    pub week: Week,
    pub horizon: Week,
    pub model: String,
    pub region: String,
    pub steps_l: usize,
    pub(crate) ctx: FinetuneContext,
    scaler: Scaler,
    target_stats: ScaleStats,
}

/// Most revised value of the target at `obs` as of week `asof`, with the
/// real-time substitution rules applied when nothing is issued yet.
fn target_value_asof(ds: &RevisionDataset, target: &SignalId, obs: Week, asof: Week) -> Result<f64> {
    let rts = ds.real_time_sequence(asof)?;
    rts.value(target, obs)
        .ok_or_else(|| Error::UnknownSignal(target.to_string()))
}

pub(crate) fn build_finetune_context(
    ds: &RevisionDataset,
    graph: &SignalGraph,
    history: &PredictionHistory,
    t: Week,
    k: Week,
    cfg: &TrainConfig,
    enc: BseqEncoder,
) -> Result<(FinetuneContext, Scaler, ScaleStats)> {
    let target = SignalId::new(history.region.clone(), cfg.target_feature.clone());
    if ds.signal_index(&target).is_none() {
        return Err(Error::UnknownSignal(target.to_string()));
    }
    if t <= k + 2 {
        return Err(Error::InsufficientHistory(format!(
            "need at least 2 training weeks: week {t} allows {}",
            (t as i64) - (k as i64) - 1
        )));
    }
    let n_train = t - k - 1;
    history.require_contiguous(1, n_train)?;

    let rts_t = ds.real_time_sequence(t)?;
    let scaler = Scaler::fit_realtime(&rts_t);
    let target_stats = scaler.stats(&target)?;
    let adj = graph.normalized_adjacency();

    let mut triples = Vec::with_capacity(n_train as usize);
    for j in 1..=n_train {
        let y = history.value_at(j).expect("checked contiguous");
        let rt_target = target_value_asof(ds, &target, j + k, j + k)?;
        let revised = rts_t
            .value(&target, j + k)
            .ok_or_else(|| Error::UnknownSignal(target.to_string()))?;
        triples.push([
            target_stats.scale(y),
            target_stats.scale(rt_target),
            target_stats.scale(revised),
        ]);
    }

    let mut weeks = Vec::new();
    for tp in 1..=n_train {
        let window = match aligned_scaled_window(ds, &scaler, tp, t)? {
            Some(w) => w,
            None => continue,
        };
        let y_raw = history.value_at(tp).expect("checked contiguous");
        let target_raw = rts_t
            .value(&target, tp + k)
            .ok_or_else(|| Error::UnknownSignal(target.to_string()))?;
        weeks.push(TrainWeek {
            idx: tp as usize,
            window,
            y_raw,
            y_scaled: target_stats.scale(y_raw),
            target_raw,
        });
    }
    if weeks.len() < 2 {
        return Err(Error::InsufficientHistory(format!(
            "only {} usable training weeks before week {t}",
            weeks.len()
        )));
    }

    let ctx = FinetuneContext {
        enc,
        me: ModelEncoder::attach(cfg.model_hidden),
        rf: RefinerHead::attach(cfg.hidden, cfg.model_hidden, cfg.rf_hidden),
        adj,
        triples,
        weeks,
        sigma: target_stats.denom(),
    };
    Ok((ctx, scaler, target_stats))
}

/// Fine-tune the full model for one prediction history, starting from
/// pretrained encoder parameters (left untouched). The final loss must
/// improve on the initial loss.
pub fn finetune(
    ds: &RevisionDataset,
    graph: &SignalGraph,
    pretrained: &ParamSet,
    history: &PredictionHistory,
    t: Week,
    k: Week,
    cfg: &TrainConfig,
) -> Result<RefinementModel> {
    cfg.validate()?;
    if graph.vertices != ds.signals() {
        return Err(Error::InvalidArgument(
            "graph vertex set does not match the dataset's signals".into(),
        ));
    }

    let mut params = ParamSet::new();
    let mut found_encoder = false;
    for (name, p) in pretrained.iter() {
        if name.starts_with("be.") {
            params.insert(name, p.shape.clone(), p.values.clone());
            found_encoder = true;
        }
    }
    if !found_encoder {
        return Err(Error::BadCheckpoint(
            "no encoder parameters in the pretrained set".into(),
        ));
    }
    let enc = BseqEncoder {
        signals: ds.signals().to_vec(),
        hidden: cfg.hidden,
        shared_heads: cfg.shared_heads,
    };
    for sig in &enc.signals {
        if !params.contains(&format!("be.h0.{sig}")) {
            return Err(Error::BadCheckpoint(format!(
                "pretrained encoder is missing state for signal {sig}"
            )));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "finetune"));
    ModelEncoder::init(&mut params, cfg.model_hidden, &mut rng);
    RefinerHead::init(&mut params, cfg.hidden, cfg.model_hidden, cfg.rf_hidden, &mut rng);

    let (ctx, scaler, target_stats) =
        build_finetune_context(ds, graph, history, t, k, cfg, enc)?;

    let mut opt = OptState::new(cfg.finetune_lr);
    let mut loss_history = Vec::with_capacity(cfg.finetune_epochs);
    for _ in 0..cfg.finetune_epochs {
        let (s, loss) = ctx.loss(&params)?;
        loss_history.push(s.tape.scalar_value(loss));
        let grads = s.grads(loss);
        opt.opt_step(&mut params, &grads)?;
    }
    let initial = loss_history[0];
    let (s, loss) = ctx.loss(&params)?;
    let fin = s.tape.scalar_value(loss);
    loss_history.push(fin);
    if fin >= initial && fin >= 1e-12 {
        return Err(Error::TrainingDiverged {
            initial_loss: initial,
            final_loss: fin,
        });
    }

    Ok(RefinementModel {
        params,
        loss_history,
        week: t,
        horizon: k,
        model: history.model.clone(),
        region: history.region.clone(),
        steps_l: cfg.steps_l,
        ctx,
        scaler,
        target_stats,
    })
}

/// Build the fine-tune loss over `history`'s training weeks with the
/// given parameters, which must carry encoder, history-encoder, and head
/// values under the fine-tune naming scheme. Exists for diagnostics such
/// as gradient checks; training goes through [`finetune`].
pub fn finetune_loss_graph(
    params: &ParamSet,
    ds: &RevisionDataset,
    graph: &SignalGraph,
    history: &PredictionHistory,
    t: Week,
    k: Week,
    cfg: &TrainConfig,
) -> Result<(Session, NodeId)> {
    let enc = BseqEncoder {
        signals: ds.signals().to_vec(),
        hidden: cfg.hidden,
        shared_heads: cfg.shared_heads,
    };
    let (ctx, _, _) = build_finetune_context(ds, graph, history, t, k, cfg, enc)?;
    ctx.loss(params)
}

impl RefinementModel {
    /// Refine the forecast made at the model's training week.
    pub fn predict(&self, ds: &RevisionDataset, history: &PredictionHistory) -> Result<RefinementOutput> {
        let y_raw = history.value_at(self.week).ok_or_else(|| {
            Error::InsufficientHistory(format!(
                "{} {}: no forecast made at week {}",
                history.model, history.region, self.week
            ))
        })?;
        let rts = ds.real_time_sequence(self.week)?;
        let mut inputs = Vec::with_capacity(self.ctx.enc.signals.len());
        for sig in &self.ctx.enc.signals {
            let v = rts
                .latest(sig)
                .ok_or_else(|| Error::UnknownSignal(sig.to_string()))?;
            inputs.push(self.scaler.stats(sig)?.scale(v));
        }

        let mut s = Session::new(&self.params);
        let zs = self.ctx.me.states(&mut s, &self.ctx.triples)?;
        let z = *zs.last().expect("triples are non-empty");
        let (states, _preds) =
            rollout_autoregressive(&mut s, &self.ctx.enc, &self.ctx.adj, &inputs, self.steps_l)?;
        let yq = s.tape.scalar(self.target_stats.scale(y_raw));
        let (_alphas, g) = self.ctx.rf.gamma(&mut s, &states, z, yq)?;
        let gamma = s.tape.scalar_value(g);
        Ok(RefinementOutput {
            gamma,
            y_raw,
            y_star: (gamma + 1.0) * y_raw,
        })
    }
}

/// One model's forecast for the rectified week, scored against both
/// targets.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModelScore {
    pub model: String,
    pub region: String,
    pub prediction: f64,
    pub error_vs_rectified: f64,
    pub error_vs_realtime: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RectifyReport {
    pub week: Week,
    pub horizon: Week,
    pub region: String,
    pub realtime_target: f64,
    pub rectified_target: f64,
    pub gamma: f64,
    pub scores: Vec<ModelScore>,
}

pub const RECTIFY_EVAL_MODEL: &str = "target-eval";

/// Rectify the real-time target of `region` at week `t`: treat the
/// real-time series itself as a horizon-0 forecaster, refine it, and
/// re-score every supplied model's week t-k forecast for week t against
/// the refined value.
pub fn rectify(
    ds: &RevisionDataset,
    graph: &SignalGraph,
    pretrained: &ParamSet,
    t: Week,
    k: Week,
    region: &str,
    preds: &[PredictionHistory],
    cfg: &TrainConfig,
) -> Result<RectifyReport> {
    let target = SignalId::new(region, cfg.target_feature.clone());
    if ds.signal_index(&target).is_none() {
        return Err(Error::UnknownSignal(target.to_string()));
    }
    let mut eval = PredictionHistory::new(RECTIFY_EVAL_MODEL, region, 0);
    for tp in 1..=t {
        eval.insert(tp, target_value_asof(ds, &target, tp, tp)?)?;
    }

    let mut eval_cfg = cfg.clone();
    eval_cfg.seed = derive_seed(cfg.seed, &format!("{RECTIFY_EVAL_MODEL}|{region}"));
    let model = finetune(ds, graph, pretrained, &eval, t, 0, &eval_cfg)?;
    let out = model.predict(ds, &eval)?;
    let realtime_target = eval.value_at(t).expect("inserted above");

    let mut scores = Vec::new();
    if t > k {
        for hist in preds {
            if hist.region != region || hist.horizon != k {
                continue;
            }
            if let Some(p) = hist.value_at(t - k) {
                scores.push(ModelScore {
                    model: hist.model.clone(),
                    region: hist.region.clone(),
                    prediction: p,
                    error_vs_rectified: (p - out.y_star).abs(),
                    error_vs_realtime: (p - realtime_target).abs(),
                });
            }
        }
    }
    scores.sort_by(|a, b| a.model.cmp(&b.model));

    Ok(RectifyReport {
        week: t,
        horizon: k,
        region: region.to_string(),
        realtime_target,
        rectified_target: out.y_star,
        gamma: out.gamma,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{graph_gen, GraphGenOptions, SignalGraph};
    use crate::nn::{grad_check, load_checkpoint, save_checkpoint};
    use crate::store::{LoadOptions, VintageRecord};
    use crate::synth::{gen_predictions, gen_vintages, Behavior, FeatureSpec, SynthConfig};

    fn constant_world(n_regions: usize, weeks: Week, value: f64) -> RevisionDataset {
        let mut recs = Vec::new();
        for r in 0..n_regions {
            for obs in 1..=weeks {
                recs.push(VintageRecord {
                    signal: SignalId::new(format!("r{r}"), "cases"),
                    obs_week: obs,
                    issue_week: obs,
                    value,
                });
            }
        }
        RevisionDataset::from_records(recs, &LoadOptions::default()).unwrap()
    }

    fn no_edges(ds: &RevisionDataset) -> SignalGraph {
        SignalGraph {
            vertices: ds.signals().to_vec(),
            edges: vec![],
            tau: 0,
        }
    }

    fn ramp_world_with(weeks: Week, seed: u64, stabilization_week: Week) -> RevisionDataset {
        gen_vintages(&SynthConfig {
            regions: vec!["east".into(), "north".into(), "west".into()],
            features: vec![FeatureSpec {
                name: "cases".into(),
                behavior: Behavior::EarlyIncrease,
            }],
            weeks,
            seed,
            stable_multiplier: 0.8,
            stabilization_week,
            noise_scale: 0.0,
        })
        .unwrap()
    }

    fn ramp_world(weeks: Week, seed: u64) -> RevisionDataset {
        ramp_world_with(weeks, seed, 4)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            model_hidden: 8,
            rf_hidden: (10, 6),
            pretrain_epochs: 60,
            pretrain_lr: 5e-3,
            finetune_epochs: 300,
            finetune_lr: 5e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn model_encoder_emits_one_state_per_triple() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let me = ModelEncoder::init(&mut ps, 4, &mut rng);
        let mut s = Session::new(&ps);
        let triples = [[0.1, 0.2, 0.3], [0.0, -0.1, 0.4]];
        let states = me.states(&mut s, &triples).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(s.tape.value(states[0]).len(), 4);
        assert!(matches!(
            me.states(&mut s, &[]),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn refiner_gamma_matches_rigged_output_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let rf = RefinerHead::init(&mut ps, 3, 2, (4, 3), &mut rng);
        // silence the last layer so gamma = tanh(b2)
        ps.get_mut("rf.ffn.w2").values.iter_mut().for_each(|v| *v = 0.0);
        let states = vec![vec![0.3, -0.2, 0.5], vec![1.0, 0.0, -0.4]];
        let z = vec![0.1, 0.9];

        let out = refine(&ps, &rf, &states, &z, 0.7, 100.0).unwrap();
        assert_eq!(out.gamma, 0.0);
        assert_eq!(out.y_star, 100.0);

        let target = 0.05f64;
        ps.get_mut("rf.ffn.b2").values[0] = target.atanh();
        let out = refine(&ps, &rf, &states, &z, 0.7, 100.0).unwrap();
        assert!((out.gamma - 0.05).abs() < 1e-12);
        assert!((out.y_star - 105.0).abs() < 1e-9);
        assert!(out.gamma.abs() <= 1.0);
    }

    #[test]
    fn encode_realtime_single_step_matches_manual_arithmetic() {
        let ds = constant_world(1, 8, 7.0);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let enc = BseqEncoder::init(&mut ps, ds.signals(), 1, false, &mut rng);
        for name in ["be.gru.wz", "be.gru.uz", "be.gru.wr", "be.gru.ur", "be.gru.uc"] {
            ps.get_mut(name).values[0] = 0.0;
        }
        ps.get_mut("be.gru.wc").values[0] = 1.0;
        ps.get_mut("be.gc.w").values[0] = 2.0;
        ps.get_mut("be.head.r0/cases.w0").values[0] = 1.0;
        ps.get_mut("be.head.r0/cases.w1").values[0] = 3.0;
        ps.get_mut("be.head.r0/cases.b1").values[0] = 0.1;

        let adj = no_edges(&ds).normalized_adjacency();
        let x = 0.4f64;
        let (states, preds) = encode_realtime(&ps, &enc, &adj, &[x], 1).unwrap();
        let h = 0.5 * x.tanh();
        let state = (2.0 * h).max(0.0);
        let pred = 3.0 * state.max(0.0) + 0.1;
        assert!((states[0][0] - state).abs() < 1e-15);
        assert!((preds[0] - pred).abs() < 1e-15);
    }

    #[test]
    fn encode_realtime_without_edges_keeps_signals_independent() {
        let ds = constant_world(2, 8, 7.0);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let enc = BseqEncoder::init(&mut ps, ds.signals(), 6, false, &mut rng);
        let adj = no_edges(&ds).normalized_adjacency();

        let (st_a, pr_a) = encode_realtime(&ps, &enc, &adj, &[0.3, -0.8], 4).unwrap();
        let (st_b, pr_b) = encode_realtime(&ps, &enc, &adj, &[-2.0, -0.8], 4).unwrap();
        assert_ne!(st_a[0], st_b[0]);
        assert_eq!(st_a[1], st_b[1]);
        assert_eq!(pr_a[1], pr_b[1]);
        assert_ne!(pr_a[0], pr_b[0]);
    }

    #[test]
    fn pretrain_on_constant_world_sits_at_zero_loss() {
        let ds = constant_world(3, 10, 7.0);
        let graph = no_edges(&ds);
        let cfg = TrainConfig {
            hidden: 6,
            pretrain_epochs: 5,
            ..tiny_cfg()
        };
        let out = pretrain_bseqenc(&ds, &graph, 10, &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 5);
        assert!(out.loss_history[0].abs() < 1e-12);
        assert!(out.loss_history[4].abs() < 1e-12);
        assert_eq!(out.week, 10);
    }

    #[test]
    fn pretrain_is_deterministic_per_seed() {
        let ds = ramp_world(12, 4);
        let graph = graph_gen(&ds, 12, 3, GraphGenOptions::default()).unwrap();
        let cfg = TrainConfig {
            hidden: 5,
            pretrain_epochs: 8,
            ..tiny_cfg()
        };
        let a = pretrain_bseqenc(&ds, &graph, 12, &cfg).unwrap();
        let b = pretrain_bseqenc(&ds, &graph, 12, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        for ((na, pa), (nb, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.values, pb.values);
        }
        let c = pretrain_bseqenc(
            &ds,
            &graph,
            12,
            &TrainConfig { seed: 99, ..cfg.clone() },
        )
        .unwrap();
        assert_ne!(a.loss_history, c.loss_history);
    }

    #[test]
    fn pretrained_rollout_tracks_the_revision_ramp() {
        let t = 20;
        let ds = ramp_world(t, 11);
        let graph = graph_gen(&ds, t, 3, GraphGenOptions::default()).unwrap();
        let cfg = TrainConfig {
            hidden: 12,
            pretrain_epochs: 1500,
            teacher_epochs: Some(300),
            pretrain_lr: 5e-3,
            sample_prob: 0.7,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = pretrain_bseqenc(&ds, &graph, t, &cfg).unwrap();
        let first = out.loss_history[0];
        let last = *out.loss_history.last().unwrap();
        assert!(last < first * 0.05, "loss {first} -> {last}");

        let rts = ds.real_time_sequence(t).unwrap();
        let scaler = Scaler::fit_realtime(&rts);
        let adj = graph.normalized_adjacency();
        let inputs: Vec<f64> = ds
            .signals()
            .iter()
            .map(|sig| scaler.stats(sig).unwrap().scale(rts.latest(sig).unwrap()))
            .collect();
        let (_states, preds) =
            encode_realtime(&out.params, &out.encoder, &adj, &inputs, cfg.steps_l).unwrap();
        for (i, sig) in ds.signals().iter().enumerate() {
            let first_issue = ds.value_at(sig, t, t).unwrap();
            let stable = first_issue / 0.8;
            let predicted = scaler.stats(sig).unwrap().unscale(preds[i]);
            assert!(
                (predicted - stable).abs() / stable < 0.05,
                "{sig}: rolled out to {predicted}, stable {stable}"
            );
        }
    }

    #[test]
    fn finetune_recovers_a_known_multiplicative_bias() {
        let t = 18;
        let beta = 0.25;
        // the target stabilizes after one revision, so every training
        // label is fully revised and the optimal correction is beta
        let ds = ramp_world_with(20, 11, 1);
        let graph = graph_gen(&ds, t, 3, GraphGenOptions::default()).unwrap();
        let cfg = TrainConfig {
            pretrain_epochs: 300,
            finetune_epochs: 600,
            ..tiny_cfg()
        };
        let pre = pretrain_bseqenc(&ds, &graph, t, &cfg).unwrap();

        let hists = gen_predictions(&ds, "cases", "m1", 2, beta, 0.0, 21).unwrap();
        let hist = hists.iter().find(|h| h.region == "east").unwrap();
        let model = finetune(&ds, &graph, &pre.params, hist, t, 2, &cfg).unwrap();
        assert!(model.loss_history.last().unwrap() < &model.loss_history[0]);

        let out = model.predict(&ds, hist).unwrap();
        assert!(
            (out.gamma - beta).abs() < 0.025,
            "gamma {} vs {beta}",
            out.gamma
        );
        let truth = out.y_raw * (1.0 + beta);
        let raw_err = (out.y_raw - truth).abs();
        let refined_err = (out.y_star - truth).abs();
        assert!(
            refined_err < 0.1 * raw_err,
            "raw {raw_err}, refined {refined_err}"
        );
    }

    #[test]
    fn finetune_leaves_unbiased_forecasts_alone() {
        let t = 14;
        let ds = ramp_world_with(16, 3, 1);
        let graph = graph_gen(&ds, t, 3, GraphGenOptions::default()).unwrap();
        let cfg = TrainConfig {
            pretrain_epochs: 120,
            finetune_epochs: 300,
            ..tiny_cfg()
        };
        let pre = pretrain_bseqenc(&ds, &graph, t, &cfg).unwrap();
        let hists = gen_predictions(&ds, "cases", "m0", 1, 0.0, 0.0, 5).unwrap();
        let hist = hists.iter().find(|h| h.region == "north").unwrap();
        let model = finetune(&ds, &graph, &pre.params, hist, t, 1, &cfg).unwrap();
        let out = model.predict(&ds, hist).unwrap();
        assert!(out.gamma.abs() < 0.02, "gamma {}", out.gamma);
    }

    #[test]
    fn finetune_is_deterministic_per_seed() {
        let t = 12;
        let ds = ramp_world(14, 8);
        let graph = graph_gen(&ds, t, 3, GraphGenOptions::default()).unwrap();
        let cfg = TrainConfig {
            pretrain_epochs: 30,
            finetune_epochs: 40,
            ..tiny_cfg()
        };
        let pre = pretrain_bseqenc(&ds, &graph, t, &cfg).unwrap();
        let hists = gen_predictions(&ds, "cases", "m1", 1, 0.1, 0.0, 2).unwrap();
        let hist = &hists[0];
        let a = finetune(&ds, &graph, &pre.params, hist, t, 1, &cfg).unwrap();
        let b = finetune(&ds, &graph, &pre.params, hist, t, 1, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        let pa = a.predict(&ds, hist).unwrap();
        let pb = b.predict(&ds, hist).unwrap();
        assert_eq!(pa.gamma.to_bits(), pb.gamma.to_bits());
        assert_eq!(pa.y_star.to_bits(), pb.y_star.to_bits());
    }

    #[test]
    fn finetune_rejects_thin_history_and_bad_pretrain() {
        let ds = ramp_world(8, 1);
        let graph = no_edges(&ds);
        let cfg = tiny_cfg();
        let hists = gen_predictions(&ds, "cases", "m1", 1, 0.1, 0.0, 2).unwrap();
        let empty = ParamSet::new();
        assert!(matches!(
            finetune(&ds, &graph, &empty, &hists[0], 8, 1, &cfg),
            Err(Error::BadCheckpoint(_))
        ));
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        BseqEncoder::init(&mut ps, ds.signals(), cfg.hidden, false, &mut rng);
        assert!(matches!(
            finetune(&ds, &graph, &ps, &hists[0], 3, 1, &cfg),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn full_finetune_loss_passes_gradient_check() {
        let t = 6;
        let ds = ramp_world(8, 13);
        let graph = graph_gen(&ds, t, 2, GraphGenOptions::default()).unwrap();
        let cfg = TrainConfig {
            hidden: 4,
            model_hidden: 3,
            rf_hidden: (5, 4),
            target_feature: "cases".into(),
            ..TrainConfig::default()
        };
        let hists = gen_predictions(&ds, "cases", "m1", 1, 0.2, 0.0, 9).unwrap();
        let hist = hists.iter().find(|h| h.region == "west").unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut params = ParamSet::new();
        let enc = BseqEncoder::init(&mut params, ds.signals(), cfg.hidden, false, &mut rng);
        ModelEncoder::init(&mut params, cfg.model_hidden, &mut rng);
        RefinerHead::init(&mut params, cfg.hidden, cfg.model_hidden, cfg.rf_hidden, &mut rng);
        let (ctx, _scaler, _stats) =
            build_finetune_context(&ds, &graph, hist, t, 1, &cfg, enc).unwrap();

        let (s, loss) = ctx.loss(&params).unwrap();
        let analytic = s.grads(loss);
        let f = |ps: &ParamSet| {
            let (s, l) = ctx.loss(ps).unwrap();
            s.tape.scalar_value(l)
        };
        let err = grad_check(&params, f, &analytic, 1e-5);
        assert!(err < 1e-3, "max rel grad err {err}");
    }

    #[test]
    fn rectify_leaves_a_revision_free_world_alone() {
        let mut recs = Vec::new();
        for (ri, region) in ["east", "north", "west"].iter().enumerate() {
            for obs in 1..=12u32 {
                recs.push(VintageRecord {
                    signal: SignalId::new(*region, "cases"),
                    obs_week: obs,
                    issue_week: obs,
                    value: 50.0 + 3.0 * obs as f64 + 10.0 * ri as f64,
                });
            }
        }
        let ds = RevisionDataset::from_records(recs, &LoadOptions::default()).unwrap();
        let graph = no_edges(&ds);
        let cfg = TrainConfig {
            pretrain_epochs: 40,
            finetune_epochs: 150,
            finetune_lr: 3e-3,
            ..tiny_cfg()
        };
        let pre = pretrain_bseqenc(&ds, &graph, 12, &cfg).unwrap();

        let mut hist = PredictionHistory::new("m1", "north", 1);
        for made in 1..=11u32 {
            let truth = 50.0 + 3.0 * (made + 1) as f64 + 10.0;
            hist.insert(made, truth + 5.0).unwrap();
        }
        let report = rectify(
            &ds,
            &graph,
            &pre.params,
            12,
            1,
            "north",
            &[hist],
            &cfg,
        )
        .unwrap();
        assert_eq!(report.week, 12);
        assert_eq!(report.region, "north");
        assert!(report.gamma.abs() < 0.02, "gamma {}", report.gamma);
        let rel = (report.rectified_target - report.realtime_target).abs() / report.realtime_target;
        assert!(rel < 0.02, "rectified moved by {rel}");
        assert_eq!(report.scores.len(), 1);
        let sc = &report.scores[0];
        assert_eq!(sc.model, "m1");
        assert!((sc.error_vs_realtime - 5.0).abs() < 1e-9);
        let shift = (report.rectified_target - report.realtime_target).abs();
        assert!((sc.error_vs_rectified - sc.error_vs_realtime).abs() <= shift + 1e-12);
    }

    #[test]
    fn finetune_never_touches_the_checkpoint_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.json");
        let ds = constant_world(3, 10, 7.0);
        let graph = no_edges(&ds);
        let cfg = TrainConfig {
            hidden: 6,
            pretrain_epochs: 5,
            finetune_epochs: 10,
            ..tiny_cfg()
        };
        let pre = pretrain_bseqenc(&ds, &graph, 10, &cfg).unwrap();
        save_checkpoint(&pre.params, Some(10), &path).unwrap();
        let before = std::fs::read(&path).unwrap();

        let (loaded, week) = load_checkpoint(&path).unwrap();
        assert_eq!(week, Some(10));
        let mut hist = PredictionHistory::new("m1", "r1", 1);
        for made in 1..=10u32 {
            hist.insert(made, 7.0).unwrap();
        }
        let model = finetune(&ds, &graph, &loaded, &hist, 10, 1, &cfg).unwrap();
        assert!(model.loss_history.iter().all(|l| l.abs() < 1e-12));
        let out = model.predict(&ds, &hist).unwrap();
        assert!((out.y_star - 7.0).abs() < 1e-12);

        let after = std::fs::read(&path).unwrap();
        assert_eq!(before, after);
    }
}
