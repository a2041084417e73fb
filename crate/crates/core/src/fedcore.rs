//! The federated round engine: the adaptive sparse-quantization client and
//! momentum server, plus five baseline strategies behind one dispatch.
//!
//! A round broadcasts the global model, trains every participating client
//! locally, compresses each client's delta per its strategy, and applies
//! the aggregated update through the server momentum buffer. Aggregation
//! always runs in ascending client-id order so results are bitwise
//! independent of scheduling.

use crate::compress::{
    compress, sparsify_random, sparsify_threshold, sparsify_topk, update_residual,
    update_threshold, Codec, CompressError, CompressReport, EmaThresholdState, ResidualBuffer,
    ResidualPolicy, SparsePayload, Support, ThresholdScope,
};
use crate::data::Dataset;
use crate::halfcodec::{self, RoundingMode};
use crate::model::{local_train, ModelError, ModelSpec, ProxConfig};
use crate::tensor::{axpy, LayerLayout, ParamVector, SeededRng, TensorError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("client {client} diverged at round {round}: non-finite update")]
    Divergence { client: u32, round: u32 },
    #[error("global model became non-finite at round {round}")]
    ServerDivergence { round: u32 },
    #[error("duplicate client id {id} in round")]
    DuplicateClient { id: u32 },
    #[error("server round received no updates")]
    EmptyRound,
    #[error("payload round {got} does not match round {expected}")]
    MixedRounds { expected: u32, got: u32 },
    #[error("update layout does not match the global model")]
    LayoutMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    FedSparq,
    FedAvg,
    QuantOnly,
    StaticTopK,
    RandomK,
    FedPaqLike,
}

/// How client updates are averaged. The dense full-precision baseline
/// weights by shard size per its own definition; everything else uses the
/// plain mean over participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    BySamples,
}

/// A compression strategy plus its knobs. Baselines use no error feedback
/// and no adaptive thresholds.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Keep fraction for the fixed-rate sparsifiers.
    pub fraction: f64,
    /// Value coding for strategies that quantize.
    pub codec: Codec,
    pub residual_policy: ResidualPolicy,
    pub threshold_scope: ThresholdScope,
    pub beta_ema: f64,
    /// Server momentum constant; zero for the baselines.
    pub mu_srv: f64,
    /// Per-strategy override of the configured local epochs.
    pub local_epochs: Option<u32>,
    /// Diagnostic: force every threshold to a fixed value after its update.
    pub tau_override: Option<f64>,
}

impl Strategy {
    pub fn fedsparq() -> Self {
        Strategy {
            kind: StrategyKind::FedSparq,
            fraction: 0.1,
            codec: Codec::Binary16(RoundingMode::NearestEven),
            residual_policy: ResidualPolicy::FullEf,
            threshold_scope: ThresholdScope::PerLayer,
            beta_ema: 0.9,
            mu_srv: 0.01,
            local_epochs: None,
            tau_override: None,
        }
    }

    fn baseline(kind: StrategyKind) -> Self {
        Strategy {
            kind,
            mu_srv: 0.0,
            ..Strategy::fedsparq()
        }
    }

    pub fn fedavg() -> Self {
        Strategy::baseline(StrategyKind::FedAvg)
    }

    pub fn quantonly() -> Self {
        Strategy::baseline(StrategyKind::QuantOnly)
    }

    pub fn static_topk() -> Self {
        Strategy::baseline(StrategyKind::StaticTopK)
    }

    pub fn random_k() -> Self {
        Strategy::baseline(StrategyKind::RandomK)
    }

    /// Periodic-averaging-plus-quantization approximation: two local epochs
    /// and a binary16 full delta.
    pub fn fedpaq_like() -> Self {
        Strategy {
            local_epochs: Some(2),
            ..Strategy::baseline(StrategyKind::FedPaqLike)
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            StrategyKind::FedSparq => "fedsparq",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::QuantOnly => "quantonly",
            StrategyKind::StaticTopK => "statictopk",
            StrategyKind::RandomK => "randomk",
            StrategyKind::FedPaqLike => "fedpaq-like",
        }
    }

    pub fn weighting(&self) -> Weighting {
        match self.kind {
            StrategyKind::FedAvg => Weighting::BySamples,
            _ => Weighting::Uniform,
        }
    }
}

/// Local training knobs shared by every strategy.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub mu_prox: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            batch_size: 64,
            epochs: 1,
            mu_prox: 0.0,
        }
    }
}

/// Rng stream ids: global streams first, then per-client blocks.
pub const INIT_STREAM: u64 = 0;
pub const PARTITION_STREAM: u64 = 1;
pub const PARTICIPATION_STREAM: u64 = 2;

pub fn train_stream(client: u32) -> u64 {
    0x100 + client as u64
}

pub fn codec_stream(client: u32) -> u64 {
    0x1_0000 + client as u64
}

pub fn select_stream(client: u32) -> u64 {
    0x2_0000 + client as u64
}

/// Per-client persistent state. The residual buffer and thresholds carry
/// across rounds and are never reset.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub shard: Vec<u32>,
    pub residual: ResidualBuffer,
    pub thresholds: EmaThresholdState,
    pub train_rng: SeededRng,
    pub codec_rng: SeededRng,
    pub select_rng: SeededRng,
    /// The random-subset baseline transmits a fixed random subset: drawn
    /// once on first use, reused every round.
    random_mask: Option<Support>,
}

impl ClientState {
    pub fn new(
        id: u32,
        layout: &Arc<LayerLayout>,
        beta_ema: f64,
        scope: ThresholdScope,
        shard: Vec<u32>,
        seed: u64,
    ) -> Result<Self, CompressError> {
        Ok(ClientState {
            id,
            shard,
            residual: ResidualBuffer::zeros(layout),
            thresholds: EmaThresholdState::new(layout, beta_ema, scope)?,
            train_rng: SeededRng::new(seed, train_stream(id)),
            codec_rng: SeededRng::new(seed, codec_stream(id)),
            select_rng: SeededRng::new(seed, select_stream(id)),
            random_mask: None,
        })
    }
}

/// Global model plus the server momentum buffer (`v` starts at zero).
#[derive(Debug, Clone)]
pub struct ServerState {
    pub w_g: ParamVector,
    pub v: ParamVector,
    pub mu_srv: f64,
}

impl ServerState {
    pub fn new(w0: ParamVector, mu_srv: f64) -> Self {
        let v = ParamVector::zeros(w0.layout());
        ServerState { w_g: w0, v, mu_srv }
    }
}

/// One client's contribution for a round: the dense update the server
/// applies, the wire payload when the strategy is sparse, and byte/keep
/// accounting.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u32,
    pub dense: ParamVector,
    pub payload: Option<SparsePayload>,
    pub paper_bytes: u64,
    pub wire_bytes: u64,
    pub report: CompressReport,
    pub num_samples: usize,
}

#[derive(Debug, Clone)]
pub struct ClientRoundMeta {
    pub client_id: u32,
    pub paper_bytes: u64,
    pub wire_bytes: u64,
    pub report: CompressReport,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: u32,
    pub aggregated: ParamVector,
    pub clients: Vec<ClientRoundMeta>,
}

/// The compensate/threshold/quantize/carry pipeline applied to one local
/// delta; advances the residual buffer and thresholds in place.
pub struct SparqStep {
    pub payload: SparsePayload,
    pub update: ParamVector,
    pub report: CompressReport,
}

#[allow(clippy::too_many_arguments)]
pub fn sparq_compress_step(
    delta: &ParamVector,
    residual: &mut ResidualBuffer,
    thresholds: &mut EmaThresholdState,
    codec: Codec,
    policy: ResidualPolicy,
    tau_override: Option<f64>,
    rng: Option<&mut SeededRng>,
    round: u32,
    client_id: u32,
) -> Result<SparqStep, CompressError> {
    let c = axpy(1.0, residual.vector(), delta)?;
    *thresholds = update_threshold(thresholds, &c)?;
    if let Some(t) = tau_override {
        thresholds.set_all(t);
    }
    let (support, mut report) = sparsify_threshold(&c, thresholds);
    let out = compress(&c, &support, codec, rng, round, client_id)?;
    report.clamp_count = out.clamp_count;
    *residual = update_residual(&c, &out.reconstruction, &support, policy)?;
    Ok(SparqStep {
        payload: out.payload,
        update: out.reconstruction,
        report,
    })
}

fn train_delta(
    state: &mut ClientState,
    w_g: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    strategy: &Strategy,
    train: &TrainConfig,
    round: u32,
) -> Result<ParamVector, FedError> {
    let epochs = strategy.local_epochs.unwrap_or(train.epochs);
    let prox = (train.mu_prox > 0.0).then(|| ProxConfig {
        mu_prox: train.mu_prox,
        anchor: w_g.clone(),
    });
    let trained = local_train(
        w_g,
        spec,
        data,
        &state.shard,
        epochs,
        train.batch_size,
        train.lr,
        prox.as_ref(),
        &mut state.train_rng,
    )?;
    let delta = axpy(-1.0, w_g, &trained)?;
    delta.check_finite().map_err(|_| FedError::Divergence {
        client: state.id,
        round,
    })?;
    Ok(delta)
}

/// One adaptive-pipeline client round: broadcast in, sparse payload out.
pub fn client_round_fedsparq(
    state: &mut ClientState,
    w_g: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    strategy: &Strategy,
    train: &TrainConfig,
    round: u32,
) -> Result<ClientUpdate, FedError> {
    let delta = train_delta(state, w_g, spec, data, strategy, train, round)?;
    let id = state.id;
    let step = sparq_compress_step(
        &delta,
        &mut state.residual,
        &mut state.thresholds,
        strategy.codec,
        strategy.residual_policy,
        strategy.tau_override,
        Some(&mut state.codec_rng),
        round,
        id,
    )
    .map_err(|e| match e {
        CompressError::NonFinite { .. } => FedError::Divergence { client: id, round },
        other => FedError::Compress(other),
    })?;
    Ok(ClientUpdate {
        client_id: id,
        round,
        paper_bytes: step.payload.body_bytes(),
        wire_bytes: step.payload.wire_bytes(),
        dense: step.update,
        payload: Some(step.payload),
        report: step.report,
        num_samples: state.shard.len(),
    })
}

/// Elementwise binary16 round trip of a full delta (the quantize-everything
/// baselines).
fn quantize_dense(
    delta: &ParamVector,
    codec: Codec,
    mut rng: Option<&mut SeededRng>,
) -> Result<(ParamVector, u64), CompressError> {
    let mut out = ParamVector::zeros(delta.layout());
    let mut clamps = 0u64;
    for (slot, &x) in out.values_mut().iter_mut().zip(delta.values()) {
        *slot = match codec {
            Codec::Binary16(mode) => {
                if halfcodec::would_clamp(x) {
                    clamps += 1;
                }
                halfcodec::encode(x, mode, rng.as_deref_mut())?.to_f32()
            }
            Codec::Passthrough => x,
        };
    }
    Ok((out, clamps))
}

/// One baseline client round. Dense strategies carry no payload; their
/// upload cost follows their fixed byte rule (4 bytes per coordinate at
/// full precision, 2 at binary16, 6 per kept coordinate when sparse).
pub fn client_round_baseline(
    state: &mut ClientState,
    w_g: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    strategy: &Strategy,
    train: &TrainConfig,
    round: u32,
) -> Result<ClientUpdate, FedError> {
    let delta = train_delta(state, w_g, spec, data, strategy, train, round)?;
    let id = state.id;
    let layout = Arc::clone(delta.layout());
    let d = layout.total_dim() as u64;
    let n = state.shard.len();
    let map_div = |e: CompressError| match e {
        CompressError::NonFinite { .. } => FedError::Divergence { client: id, round },
        other => FedError::Compress(other),
    };
    let update = match strategy.kind {
        StrategyKind::FedAvg => ClientUpdate {
            client_id: id,
            round,
            dense: delta,
            payload: None,
            paper_bytes: 4 * d,
            wire_bytes: 4 * d,
            report: CompressReport::dense(&layout, 0),
            num_samples: n,
        },
        StrategyKind::QuantOnly | StrategyKind::FedPaqLike => {
            let (dense, clamps) =
                quantize_dense(&delta, strategy.codec, Some(&mut state.codec_rng))
                    .map_err(map_div)?;
            ClientUpdate {
                client_id: id,
                round,
                dense,
                payload: None,
                paper_bytes: 2 * d,
                wire_bytes: 2 * d,
                report: CompressReport::dense(&layout, clamps),
                num_samples: n,
            }
        }
        StrategyKind::StaticTopK | StrategyKind::RandomK => {
            let support = if strategy.kind == StrategyKind::StaticTopK {
                sparsify_topk(&delta, strategy.fraction)?
            } else {
                if state.random_mask.is_none() {
                    state.random_mask = Some(sparsify_random(
                        &delta,
                        strategy.fraction,
                        &mut state.select_rng,
                    )?);
                }
                state.random_mask.clone().expect("drawn above")
            };
            let out = compress(
                &delta,
                &support,
                strategy.codec,
                Some(&mut state.codec_rng),
                round,
                id,
            )
            .map_err(map_div)?;
            let mut report = CompressReport::from_support(&support, &layout);
            report.clamp_count = out.clamp_count;
            ClientUpdate {
                client_id: id,
                round,
                paper_bytes: out.payload.body_bytes(),
                wire_bytes: out.payload.wire_bytes(),
                dense: out.reconstruction,
                payload: Some(out.payload),
                report,
                num_samples: n,
            }
        }
        StrategyKind::FedSparq => {
            unreachable!("adaptive strategy dispatches through client_round_fedsparq")
        }
    };
    Ok(update)
}

/// Average the updates (ascending client id, f64 accumulation), advance the
/// momentum buffer, and apply it to the global model. Returns the
/// aggregated update.
pub fn server_round(
    server: &mut ServerState,
    updates: &[ClientUpdate],
    weighting: Weighting,
) -> Result<ParamVector, FedError> {
    if updates.is_empty() {
        return Err(FedError::EmptyRound);
    }
    let round = updates[0].round;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    for pair in order.windows(2) {
        if updates[pair[0]].client_id == updates[pair[1]].client_id {
            return Err(FedError::DuplicateClient {
                id: updates[pair[0]].client_id,
            });
        }
    }
    for u in updates {
        if u.round != round {
            return Err(FedError::MixedRounds {
                expected: round,
                got: u.round,
            });
        }
        if !u.dense.same_layout(&server.w_g) {
            return Err(FedError::LayoutMismatch);
        }
    }

    let total_samples: usize = updates.iter().map(|u| u.num_samples).sum();
    let d = server.w_g.len();
    let mut acc = vec![0.0f64; d];
    for &i in &order {
        let u = &updates[i];
        let weight = match weighting {
            Weighting::Uniform => 1.0 / updates.len() as f64,
            Weighting::BySamples => u.num_samples as f64 / total_samples as f64,
        };
        for (slot, &x) in acc.iter_mut().zip(u.dense.values()) {
            *slot += weight * x as f64;
        }
    }
    let mut aggregated = ParamVector::zeros(server.w_g.layout());
    for (slot, &a) in aggregated.values_mut().iter_mut().zip(&acc) {
        *slot = a as f32;
    }

    let mu = server.mu_srv as f32;
    for ((v, &g), w) in server
        .v
        .values_mut()
        .iter_mut()
        .zip(aggregated.values())
        .zip(server.w_g.values_mut())
    {
        *v = mu * *v + g;
        *w += *v;
    }
    server
        .w_g
        .check_finite()
        .map_err(|_| FedError::ServerDivergence { round })?;
    Ok(aggregated)
}

/// One full federated round over the given clients (ascending id order;
/// optionally a sampled subset when `participation < 1`).
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    spec: &ModelSpec,
    data: &Dataset,
    strategy: &Strategy,
    train: &TrainConfig,
    round: u32,
    participation: f64,
    participation_rng: &mut SeededRng,
) -> Result<RoundResult, FedError> {
    let k = clients.len();
    let mut selected: Vec<usize> = if participation >= 1.0 {
        (0..k).collect()
    } else {
        let take = ((participation * k as f64).ceil() as usize).clamp(1, k);
        rand::seq::index::sample(participation_rng, k, take).into_iter().collect()
    };
    selected.sort_by_key(|&i| clients[i].id);

    let broadcast = server.w_g.clone();
    let mut updates = Vec::with_capacity(selected.len());
    for &i in &selected {
        let client = &mut clients[i];
        let update = match strategy.kind {
            StrategyKind::FedSparq => {
                client_round_fedsparq(client, &broadcast, spec, data, strategy, train, round)?
            }
            _ => client_round_baseline(client, &broadcast, spec, data, strategy, train, round)?,
        };
        updates.push(update);
    }
    let aggregated = server_round(server, &updates, strategy.weighting())?;
    let clients_meta = updates
        .iter()
        .map(|u| ClientRoundMeta {
            client_id: u.client_id,
            paper_bytes: u.paper_bytes,
            wire_bytes: u.wire_bytes,
            report: u.report.clone(),
        })
        .collect();
    Ok(RoundResult {
        round,
        aggregated,
        clients: clients_meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, partition_iid};
    use crate::tensor::LayerLayout;

    fn toy_layout() -> Arc<LayerLayout> {
        LayerLayout::new(vec![("w", 3)]).unwrap()
    }

    fn pv(layout: &Arc<LayerLayout>, v: Vec<f32>) -> ParamVector {
        ParamVector::from_values(layout, v).unwrap()
    }

    struct Toy {
        residual: ResidualBuffer,
        thresholds: EmaThresholdState,
    }

    fn toy_state(layout: &Arc<LayerLayout>, r: Vec<f32>) -> Toy {
        Toy {
            residual: ResidualBuffer::from_vector(pv(layout, r)).unwrap(),
            thresholds: EmaThresholdState::new(layout, 0.9, ThresholdScope::PerLayer).unwrap(),
        }
    }

    #[test]
    fn compress_step_follows_the_formula_chain() {
        // w_g = 0, trained = [0.3, -2.0, 0.5], carried residual [0.1, 0, 0]
        let layout = toy_layout();
        let delta = pv(&layout, vec![0.3, -2.0, 0.5]);
        let mut toy = toy_state(&layout, vec![0.1, 0.0, 0.0]);
        let step = sparq_compress_step(
            &delta,
            &mut toy.residual,
            &mut toy.thresholds,
            Codec::Binary16(RoundingMode::NearestEven),
            ResidualPolicy::FullEf,
            None,
            None,
            0,
            0,
        )
        .unwrap();
        // c = [0.4, -2.0, 0.5]; mean |c| = 0.9667; tau from zero start
        let tau = toy.thresholds.tau_at(0);
        assert!((tau - 0.1 * (2.9 / 3.0)).abs() < 1e-7, "tau {tau}");
        assert_eq!(step.report.total_kept(), 3);
        assert_eq!(step.payload.body_bytes(), 18);
    }

    #[test]
    fn compress_step_floor_rule_with_saturated_threshold() {
        let layout = toy_layout();
        let delta = pv(&layout, vec![0.3, -2.0, 0.5]);
        let mut toy = toy_state(&layout, vec![0.1, 0.0, 0.0]);
        toy.thresholds.set_all(10.0);
        let step = sparq_compress_step(
            &delta,
            &mut toy.residual,
            &mut toy.thresholds,
            Codec::Binary16(RoundingMode::NearestEven),
            ResidualPolicy::FullEf,
            None,
            None,
            0,
            0,
        )
        .unwrap();
        let tau = toy.thresholds.tau_at(0);
        assert!((tau - (0.9 * 10.0 + 0.1 * (2.9 / 3.0))).abs() < 1e-7, "tau {tau}");
        assert_eq!(step.report.total_kept(), 1);
        // -2.0 is exact in binary16, so the kept coordinate leaves no error
        assert_eq!(step.update.values(), &[0.0, -2.0, 0.0]);
        assert_eq!(toy.residual.vector().values(), &[0.4, 0.0, 0.5]);
    }

    fn blob_world(
        strategy: &Strategy,
        seed: u64,
        clients: usize,
    ) -> (
        ModelSpec,
        Dataset,
        Vec<ClientState>,
        ServerState,
        TrainConfig,
    ) {
        let spec = ModelSpec::mlp(8, 6, 4);
        let layout = spec.layout().unwrap();
        let mut data_rng = SeededRng::new(seed, 7777);
        let data = make_blobs(120, 8, 4, &mut data_rng);
        let partition = partition_iid(120, clients, &mut SeededRng::new(seed, PARTITION_STREAM))
            .unwrap();
        let states: Vec<ClientState> = (0..clients)
            .map(|k| {
                ClientState::new(
                    k as u32,
                    &layout,
                    strategy.beta_ema,
                    strategy.threshold_scope,
                    partition.shards[k].clone(),
                    seed,
                )
                .unwrap()
            })
            .collect();
        let w0 = spec
            .init_params(&mut SeededRng::new(seed, INIT_STREAM))
            .unwrap();
        let server = ServerState::new(w0, strategy.mu_srv);
        (spec, data, states, server, TrainConfig {
            lr: 0.1,
            batch_size: 16,
            epochs: 1,
            mu_prox: 0.0,
        })
    }

    #[test]
    fn zero_lr_round_keeps_one_zero_coordinate_per_layer() {
        let strategy = Strategy::fedsparq();
        let (spec, data, mut states, mut server, mut train) = blob_world(&strategy, 1, 2);
        train.lr = 0.0;
        let mut prng = SeededRng::new(1, PARTICIPATION_STREAM);
        let result = run_round(
            &mut states, &mut server, &spec, &data, &strategy, &train, 0, 1.0, &mut prng,
        )
        .unwrap();
        let layers = spec.layout().unwrap().num_layers();
        for meta in &result.clients {
            assert_eq!(meta.report.total_kept(), layers);
        }
        assert!(result.aggregated.values().iter().all(|&v| v == 0.0));
        for st in &states {
            assert!(st.residual.vector().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn server_applies_single_update_additively() {
        let layout = toy_layout();
        let mut server = ServerState::new(pv(&layout, vec![1.0, 1.0, 1.0]), 0.0);
        let update = ClientUpdate {
            client_id: 0,
            round: 0,
            dense: pv(&layout, vec![0.5, -0.25, 0.0]),
            payload: None,
            paper_bytes: 0,
            wire_bytes: 0,
            report: CompressReport::dense(&layout, 0),
            num_samples: 1,
        };
        server_round(&mut server, &[update], Weighting::Uniform).unwrap();
        assert_eq!(server.w_g.values(), &[1.5, 0.75, 1.0]);
    }

    #[test]
    fn zeros_count_in_the_mean_across_disjoint_supports() {
        let layout = toy_layout();
        let mut server = ServerState::new(ParamVector::zeros(&layout), 0.0);
        let mk = |id: u32, dense: Vec<f32>| ClientUpdate {
            client_id: id,
            round: 0,
            dense: pv(&layout, dense),
            payload: None,
            paper_bytes: 0,
            wire_bytes: 0,
            report: CompressReport::dense(&layout, 0),
            num_samples: 1,
        };
        let updates = vec![mk(0, vec![1.0, 0.0, 0.0]), mk(1, vec![0.0, 1.0, 0.0])];
        let g = server_round(&mut server, &updates, Weighting::Uniform).unwrap();
        assert_eq!(g.values(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn momentum_approaches_its_fixed_point_geometrically() {
        let layout = toy_layout();
        let mut server = ServerState::new(ParamVector::zeros(&layout), 0.01);
        let g = vec![1.0f32, -2.0, 0.5];
        for round in 0..600 {
            let update = ClientUpdate {
                client_id: 0,
                round,
                dense: pv(&layout, g.clone()),
                payload: None,
                paper_bytes: 0,
                wire_bytes: 0,
                report: CompressReport::dense(&layout, 0),
                num_samples: 1,
            };
            server_round(&mut server, &[update], Weighting::Uniform).unwrap();
        }
        for (v, &gi) in server.v.values().iter().zip(&g) {
            let limit = gi / (1.0 - 0.01f32);
            assert!((v - limit).abs() <= 1e-5 * limit.abs(), "v {v} limit {limit}");
        }
    }

    #[test]
    fn momentum_buffer_stays_bounded_by_update_norm() {
        let layout = toy_layout();
        let mu = 0.3f64;
        let mut server = ServerState::new(ParamVector::zeros(&layout), mu);
        let mut rng = SeededRng::new(3, 0);
        let mut g_max = 0.0f64;
        use rand::Rng;
        for round in 0..200 {
            let dense: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let g_norm = crate::tensor::l2_norm_sq(&pv(&layout, dense.clone())).sqrt();
            g_max = g_max.max(g_norm);
            let update = ClientUpdate {
                client_id: 0,
                round,
                dense: pv(&layout, dense),
                payload: None,
                paper_bytes: 0,
                wire_bytes: 0,
                report: CompressReport::dense(&layout, 0),
                num_samples: 1,
            };
            server_round(&mut server, &[update], Weighting::Uniform).unwrap();
            let v_norm = crate::tensor::l2_norm_sq(&server.v).sqrt();
            assert!(v_norm <= g_max / (1.0 - mu) + 1e-6);
        }
    }

    #[test]
    fn aggregation_is_order_independent() {
        let layout = toy_layout();
        let mk = |id: u32, dense: Vec<f32>| ClientUpdate {
            client_id: id,
            round: 0,
            dense: pv(&layout, dense),
            payload: None,
            paper_bytes: 0,
            wire_bytes: 0,
            report: CompressReport::dense(&layout, 0),
            num_samples: (id + 1) as usize,
        };
        let a = mk(0, vec![0.1, 0.7, -0.3]);
        let b = mk(1, vec![-0.5, 0.2, 0.9]);
        let c = mk(2, vec![0.25, -0.1, 0.4]);
        let run = |updates: Vec<ClientUpdate>| {
            let mut server = ServerState::new(ParamVector::zeros(&layout), 0.01);
            server_round(&mut server, &updates, Weighting::BySamples).unwrap();
            server
                .w_g
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        let w1 = run(vec![a.clone(), b.clone(), c.clone()]);
        let w2 = run(vec![c, a, b]);
        assert_eq!(w1, w2);
    }

    #[test]
    fn server_validates_inputs() {
        let layout = toy_layout();
        let mut server = ServerState::new(ParamVector::zeros(&layout), 0.0);
        assert!(matches!(
            server_round(&mut server, &[], Weighting::Uniform),
            Err(FedError::EmptyRound)
        ));
        let mk = |id: u32, round: u32| ClientUpdate {
            client_id: id,
            round,
            dense: ParamVector::zeros(&layout),
            payload: None,
            paper_bytes: 0,
            wire_bytes: 0,
            report: CompressReport::dense(&layout, 0),
            num_samples: 1,
        };
        assert!(matches!(
            server_round(&mut server, &[mk(1, 0), mk(1, 0)], Weighting::Uniform),
            Err(FedError::DuplicateClient { id: 1 })
        ));
        assert!(matches!(
            server_round(&mut server, &[mk(0, 0), mk(1, 1)], Weighting::Uniform),
            Err(FedError::MixedRounds { .. })
        ));
        let other = LayerLayout::new(vec![("x", 2)]).unwrap();
        let bad = ClientUpdate {
            client_id: 0,
            round: 0,
            dense: ParamVector::zeros(&other),
            payload: None,
            paper_bytes: 0,
            wire_bytes: 0,
            report: CompressReport::dense(&other, 0),
            num_samples: 1,
        };
        assert!(matches!(
            server_round(&mut server, &[bad], Weighting::Uniform),
            Err(FedError::LayoutMismatch)
        ));
    }

    #[test]
    fn byte_rules_per_strategy() {
        for (strategy, bytes_per_coord) in [
            (Strategy::fedavg(), 4u64),
            (Strategy::quantonly(), 2),
            (Strategy::fedpaq_like(), 2),
        ] {
            let (spec, data, mut states, mut server, train) = blob_world(&strategy, 5, 2);
            let mut prng = SeededRng::new(5, PARTICIPATION_STREAM);
            let result = run_round(
                &mut states, &mut server, &spec, &data, &strategy, &train, 0, 1.0, &mut prng,
            )
            .unwrap();
            let d = spec.layout().unwrap().total_dim() as u64;
            for meta in &result.clients {
                assert_eq!(meta.paper_bytes, bytes_per_coord * d, "{}", strategy.label());
            }
        }
    }

    #[test]
    fn topk_baseline_byte_rule_is_exact() {
        // single-layer d = 1000 at fraction 0.1 keeps exactly 100 entries
        let layout = LayerLayout::new(vec![("w", 1000)]).unwrap();
        use rand::Rng;
        let mut rng = SeededRng::new(9, 0);
        let values: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let delta = pv(&layout, values);
        let support = sparsify_topk(&delta, 0.1).unwrap();
        assert_eq!(support.total_kept(), 100);
        let out = compress(
            &delta,
            &support,
            Codec::Binary16(RoundingMode::NearestEven),
            None,
            0,
            0,
        )
        .unwrap();
        assert_eq!(out.payload.body_bytes(), 600);
    }

    #[test]
    fn quantonly_equals_fedavg_through_the_codec() {
        let (spec, data, mut states_a, server_a, train) = blob_world(&Strategy::fedavg(), 6, 2);
        let (_, _, mut states_q, server_q, _) = blob_world(&Strategy::quantonly(), 6, 2);
        let broadcast_a = server_a.w_g.clone();
        let broadcast_q = server_q.w_g.clone();
        let ua = client_round_baseline(
            &mut states_a[0],
            &broadcast_a,
            &spec,
            &data,
            &Strategy::fedavg(),
            &train,
            0,
        )
        .unwrap();
        let uq = client_round_baseline(
            &mut states_q[0],
            &broadcast_q,
            &spec,
            &data,
            &Strategy::quantonly(),
            &train,
            0,
        )
        .unwrap();
        // identical streams produce the identical delta; the quantized
        // update is its per-scalar binary16 round trip
        for (&a, &q) in ua.dense.values().iter().zip(uq.dense.values()) {
            let want =
                halfcodec::decode(halfcodec::encode(a, RoundingMode::NearestEven, None).unwrap());
            assert_eq!(q, want);
        }
    }

    #[test]
    fn random_k_uses_its_own_stream_and_is_reproducible() {
        let strategy = Strategy::random_k();
        let run = || {
            let (spec, data, mut states, mut server, train) = blob_world(&strategy, 8, 3);
            let mut prng = SeededRng::new(8, PARTICIPATION_STREAM);
            let mut bytes = Vec::new();
            for round in 0..3 {
                let r = run_round(
                    &mut states, &mut server, &spec, &data, &strategy, &train, round, 1.0,
                    &mut prng,
                )
                .unwrap();
                bytes.push(r.clients.iter().map(|m| m.paper_bytes).collect::<Vec<_>>());
            }
            (
                bytes,
                server.w_g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        let (b1, w1) = run();
        let (b2, w2) = run();
        assert_eq!(b1, b2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn zero_epochs_leaves_only_momentum_decay() {
        // no local work and empty residuals transmit nothing, so the only
        // movement is the decayed momentum buffer
        let mut strategy = Strategy::fedsparq();
        strategy.mu_srv = 0.25;
        let (spec, data, mut states, mut server, mut train) = blob_world(&strategy, 19, 2);
        train.epochs = 0;
        let mut rng = SeededRng::new(19, 999);
        for v in server.v.values_mut() {
            use rand::Rng;
            *v = rng.random_range(-0.5f32..0.5);
        }
        let v_prev: Vec<f32> = server.v.values().to_vec();
        let w_prev: Vec<f32> = server.w_g.values().to_vec();
        let mut prng = SeededRng::new(19, PARTICIPATION_STREAM);
        run_round(
            &mut states, &mut server, &spec, &data, &strategy, &train, 0, 1.0, &mut prng,
        )
        .unwrap();
        for i in 0..w_prev.len() {
            let v_want = 0.25f32 * v_prev[i];
            assert_eq!(server.v.values()[i], v_want);
            assert_eq!(server.w_g.values()[i], w_prev[i] + v_want);
        }
    }

    #[test]
    fn zero_threshold_round_equals_full_quantization() {
        // thresholds forced to zero with binary16 coding sends every
        // non-zero coordinate, which reconstructs exactly like the dense
        // binary16 baseline
        let mut sparq = Strategy::fedsparq();
        sparq.tau_override = Some(0.0);
        let quant = Strategy::quantonly();
        let (spec, data, mut st_s, sv_s, train) = blob_world(&sparq, 23, 2);
        let (_, _, mut st_q, sv_q, _) = blob_world(&quant, 23, 2);
        let us = client_round_fedsparq(
            &mut st_s[0],
            &sv_s.w_g.clone(),
            &spec,
            &data,
            &sparq,
            &train,
            0,
        )
        .unwrap();
        let uq = client_round_baseline(
            &mut st_q[0],
            &sv_q.w_g.clone(),
            &spec,
            &data,
            &quant,
            &train,
            0,
        )
        .unwrap();
        assert_eq!(us.dense.values(), uq.dense.values());
    }

    #[test]
    fn error_feedback_telescopes_through_real_training() {
        // with full error feedback and no momentum, the transmitted sum per
        // client telescopes to the raw delta sum minus the final residual
        let mut strategy = Strategy::fedsparq();
        strategy.mu_srv = 0.0;
        let (spec, data, mut states, mut server, train) = blob_world(&strategy, 29, 2);
        let d = spec.layout().unwrap().total_dim();
        let mut sum_sent = vec![vec![0.0f64; d]; 2];
        let mut sum_delta = vec![vec![0.0f64; d]; 2];
        for round in 0..10 {
            let broadcast = server.w_g.clone();
            let mut updates = Vec::new();
            for state in states.iter_mut() {
                let k = state.id as usize;
                // shadow training with a cloned stream reproduces the delta
                let mut shadow_rng = state.train_rng.clone();
                let trained = local_train(
                    &broadcast,
                    &spec,
                    &data,
                    &state.shard,
                    train.epochs,
                    train.batch_size,
                    train.lr,
                    None,
                    &mut shadow_rng,
                )
                .unwrap();
                let delta = axpy(-1.0, &broadcast, &trained).unwrap();
                for (acc, &x) in sum_delta[k].iter_mut().zip(delta.values()) {
                    *acc += x as f64;
                }
                let update = client_round_fedsparq(
                    state, &broadcast, &spec, &data, &strategy, &train, round,
                )
                .unwrap();
                for (acc, &x) in sum_sent[k].iter_mut().zip(update.dense.values()) {
                    *acc += x as f64;
                }
                updates.push(update);
            }
            server_round(&mut server, &updates, Weighting::Uniform).unwrap();
        }
        for (k, state) in states.iter().enumerate() {
            let mut err_sq = 0.0f64;
            let mut ref_sq = 0.0f64;
            for i in 0..d {
                let want = sum_delta[k][i] - state.residual.vector().values()[i] as f64;
                err_sq += (sum_sent[k][i] - want) * (sum_sent[k][i] - want);
                ref_sq += sum_delta[k][i] * sum_delta[k][i];
            }
            assert!(
                err_sq.sqrt() <= 1e-4 * ref_sq.sqrt(),
                "client {k}: telescoping error {} vs {}",
                err_sq.sqrt(),
                ref_sq.sqrt()
            );
        }
    }

    #[test]
    fn random_subset_mask_is_fixed_across_rounds() {
        let strategy = Strategy::random_k();
        let (spec, data, mut states, mut server, train) = blob_world(&strategy, 21, 1);
        let broadcast = server.w_g.clone();
        let first = client_round_baseline(
            &mut states[0], &broadcast, &spec, &data, &strategy, &train, 0,
        )
        .unwrap();
        server_round(&mut server, std::slice::from_ref(&first), strategy.weighting()).unwrap();
        let second = client_round_baseline(
            &mut states[0],
            &server.w_g.clone(),
            &spec,
            &data,
            &strategy,
            &train,
            1,
        )
        .unwrap();
        let indices = |u: &ClientUpdate| {
            u.payload
                .as_ref()
                .unwrap()
                .blocks
                .iter()
                .map(|b| b.entries.iter().map(|e| e.index).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(indices(&first), indices(&second));
    }

    #[test]
    fn lossless_reduction_matches_fedavg_trajectory() {
        // tau forced to zero + passthrough codec + no momentum + full error
        // feedback collapses the pipeline onto plain averaging
        let mut sparq = Strategy::fedsparq();
        sparq.tau_override = Some(0.0);
        sparq.codec = Codec::Passthrough;
        sparq.mu_srv = 0.0;
        let fedavg = Strategy::fedavg();

        // equal shard sizes so per-sample weighting equals the plain mean
        let (spec, data, mut st_s, mut sv_s, train) = blob_world(&sparq, 11, 3);
        let (_, _, mut st_a, mut sv_a, _) = blob_world(&fedavg, 11, 3);
        let mut prng_s = SeededRng::new(11, PARTICIPATION_STREAM);
        let mut prng_a = SeededRng::new(11, PARTICIPATION_STREAM);
        for round in 0..5 {
            run_round(
                &mut st_s, &mut sv_s, &spec, &data, &sparq, &train, round, 1.0, &mut prng_s,
            )
            .unwrap();
            run_round(
                &mut st_a, &mut sv_a, &spec, &data, &fedavg, &train, round, 1.0, &mut prng_a,
            )
            .unwrap();
            for (i, (&ws, &wa)) in sv_s
                .w_g
                .values()
                .iter()
                .zip(sv_a.w_g.values())
                .enumerate()
            {
                let tol = 1e-5 * wa.abs().max(1e-3);
                assert!(
                    (ws - wa).abs() <= tol,
                    "round {round} coord {i}: {ws} vs {wa}"
                );
            }
        }
    }

    #[test]
    fn fedsparq_round_is_deterministic() {
        let strategy = Strategy::fedsparq();
        let run = || {
            let (spec, data, mut states, mut server, train) = blob_world(&strategy, 13, 3);
            let mut prng = SeededRng::new(13, PARTICIPATION_STREAM);
            for round in 0..4 {
                run_round(
                    &mut states, &mut server, &spec, &data, &strategy, &train, round, 1.0,
                    &mut prng,
                )
                .unwrap();
            }
            server
                .w_g
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_delta_raises_a_client_divergence() {
        // a pathological broadcast model overflows the forward pass, so the
        // local gradient and therefore the delta go non-finite
        let strategy = Strategy::fedsparq();
        let (spec, data, mut states, server, train) = blob_world(&strategy, 14, 2);
        let mut w_huge = server.w_g.clone();
        for v in w_huge.values_mut() {
            *v = 1e20;
        }
        let err = client_round_fedsparq(
            &mut states[0],
            &w_huge,
            &spec,
            &data,
            &strategy,
            &train,
            3,
        )
        .unwrap_err();
        assert!(
            matches!(err, FedError::Divergence { client: 0, round: 3 }),
            "unexpected error {err}"
        );
    }

    #[test]
    fn participation_fraction_selects_a_subset() {
        let strategy = Strategy::fedavg();
        let (spec, data, mut states, mut server, train) = blob_world(&strategy, 15, 4);
        let mut prng = SeededRng::new(15, PARTICIPATION_STREAM);
        let r = run_round(
            &mut states, &mut server, &spec, &data, &strategy, &train, 0, 0.5, &mut prng,
        )
        .unwrap();
        assert_eq!(r.clients.len(), 2);
        let ids: Vec<u32> = r.clients.iter().map(|m| m.client_id).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
    }
}
