//! The gated supernet: mixed operation candidates, softmax architecture
//! parameters, binary-gate path sampling, the architecture gradient with
//! two-path updates and rescaling, the latency-augmented loss, and
//! derivation of the compact normal net.

mod blocks;
mod derive;
mod gates;
mod net;
mod space;

pub use blocks::{BnMode, OperationCandidate};
pub use derive::{alpha_hash, derive_normal_net, DerivedArchitecture, DerivedLayer, NormalNet, Provenance};
pub use gates::{
    arch_gradient, compute_probs, expected_layer_latency, gate_index, latency_alpha_gradient, normalize_alphas,
    rescale_alphas, sample_active_pair, sample_gate, total_loss, ActivePair, LossBreakdown, RescaleOutcome,
    RescaleRule,
};
pub use net::{ForwardTrace, GateMode, GateSample, MixedLayer, SuperNet};
pub use space::{CandidateKind, LayerShape, LayerSpec, SearchSpace};
