use serde::{Deserialize, Serialize};

use super::SimError;

/// `base + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub base: f64,
    pub slope: f64,
}

impl Affine {
    pub const fn new(base: f64, slope: f64) -> Self {
        Self { base, slope }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.base + self.slope * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnCoeffs {
    /// Fixed cost, µs.
    pub base: f64,
    /// µs per resident request shard.
    pub per_shard: f64,
    /// µs per 1K local KV tokens.
    pub per_ktoken: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteCoeffs {
    /// µs per routed message.
    pub per_message: f64,
    /// µs per KB of payload.
    pub per_kb: f64,
    /// Payload of one routed query, KB.
    pub query_kb: f64,
    /// Payload of one partial result (output plus LSE), KB.
    pub partial_kb: f64,
}

/// Linear per-phase cost model. All latencies are per layer, in µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub attn: AttnCoeffs,
    pub dispatch_send: Affine,
    pub dispatch_recv: Affine,
    pub combine_send: Affine,
    pub combine_recv: Affine,
    pub route: RouteCoeffs,
    /// µs per partial merged.
    pub merge_per_partial: f64,
    pub mlp: Affine,
    pub layers_per_iter: u32,
    /// Constant delay between admission and the first decode step, ms.
    pub migration_delay_ms: f64,
    /// Fixed scheduling/metadata cost added to every iteration, µs.
    #[serde(default)]
    pub iteration_overhead_us: f64,
}

impl LatencyModel {
    /// Coefficients shipped with the simulator: a few hundred µs per layer
    /// at moderate load over 61 layers.
    pub fn calibrated() -> Self {
        Self {
            attn: AttnCoeffs {
                base: 110.0,
                per_shard: 0.15,
                per_ktoken: 0.6,
            },
            dispatch_send: Affine::new(0.5, 1.0),
            dispatch_recv: Affine::new(0.5, 1.0),
            combine_send: Affine::new(0.5, 1.0),
            combine_recv: Affine::new(0.5, 1.0),
            route: RouteCoeffs {
                per_message: 13.0,
                per_kb: 0.01,
                query_kb: 144.0,
                partial_kb: 130.0,
            },
            merge_per_partial: 1.0,
            mlp: Affine::new(20.0, 0.3),
            layers_per_iter: 61,
            migration_delay_ms: 20.0,
            iteration_overhead_us: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let coeffs = [
            self.attn.base,
            self.attn.per_shard,
            self.attn.per_ktoken,
            self.route.per_message,
            self.route.per_kb,
            self.route.query_kb,
            self.route.partial_kb,
            self.merge_per_partial,
            self.migration_delay_ms,
            self.iteration_overhead_us,
        ];
        let affine = [
            self.dispatch_send,
            self.dispatch_recv,
            self.combine_send,
            self.combine_recv,
            self.mlp,
        ];
        let all = coeffs.into_iter().chain(affine.iter().flat_map(|a| [a.base, a.slope]));
        for c in all {
            if !(c.is_finite() && c >= 0.0) {
                return Err(SimError::InvalidConfig(
                    "latency coefficients must be finite and non-negative",
                ));
            }
        }
        if self.layers_per_iter == 0 {
            return Err(SimError::InvalidConfig("layers_per_iter must be at least 1"));
        }
        Ok(())
    }

    fn message(&self, count: u32, kb: f64) -> f64 {
        f64::from(count) * (self.route.per_message + self.route.per_kb * kb)
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::calibrated()
    }
}

/// Per-layer phases in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    QRoute,
    Attn,
    ResRoute,
    Merge,
    DispatchSend,
    DispatchRecv,
    Mlp,
    CombineSend,
    CombineRecv,
}

impl Phase {
    pub const ALL: [Phase; 9] = [
        Phase::QRoute,
        Phase::Attn,
        Phase::ResRoute,
        Phase::Merge,
        Phase::DispatchSend,
        Phase::DispatchRecv,
        Phase::Mlp,
        Phase::CombineSend,
        Phase::CombineRecv,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::QRoute => "qroute",
            Phase::Attn => "attn",
            Phase::ResRoute => "resroute",
            Phase::Merge => "merge",
            Phase::DispatchSend => "ds",
            Phase::DispatchRecv => "dr",
            Phase::Mlp => "mlp",
            Phase::CombineSend => "cs",
            Phase::CombineRecv => "cr",
        }
    }
}

/// What one instance processes in a layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceLoad {
    /// `R_i`: request shards resident here.
    pub shards: u32,
    /// `T_i`: local KV tokens.
    pub tokens: u64,
    /// `B_i`: requests whose MoE binding is here.
    pub batch: u32,
    /// Queries sent to other instances.
    pub query_msgs: u32,
    /// Partial results sent to other instances.
    pub partial_msgs: u32,
    /// Partials merged here, local ones included, for requests split over
    /// more than one instance.
    pub merge_partials: u32,
    /// Instances whose queries must arrive before attention starts.
    pub query_from: Vec<usize>,
    /// Instances whose partials must arrive before merging starts.
    pub partials_from: Vec<usize>,
}

/// µs for one phase on one instance.
pub fn eval_phase_latency(model: &LatencyModel, phase: Phase, load: &InstanceLoad) -> f64 {
    let b = f64::from(load.batch);
    match phase {
        Phase::QRoute => model.message(load.query_msgs, model.route.query_kb),
        Phase::Attn => {
            model.attn.base
                + model.attn.per_shard * f64::from(load.shards)
                + model.attn.per_ktoken * load.tokens as f64 / 1000.0
        }
        Phase::ResRoute => model.message(load.partial_msgs, model.route.partial_kb),
        Phase::Merge => model.merge_per_partial * f64::from(load.merge_partials),
        Phase::DispatchSend => model.dispatch_send.eval(b),
        Phase::DispatchRecv => model.dispatch_recv.eval(b),
        Phase::Mlp => model.mlp.eval(b),
        Phase::CombineSend => model.combine_send.eval(b),
        Phase::CombineRecv => model.combine_recv.eval(b),
    }
}
