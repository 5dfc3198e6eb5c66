//! Encrypted inference for a small MLP where the server holds the model and
//! the client holds every key.
//!
//! * [`paillier`]: keys, encryption and the additive homomorphisms.
//! * [`fixedpoint`]: integer encoding of inputs and parameters.
//! * [`model`]: the network, its training and plaintext reference paths.
//! * [`protocol`]: wire format, transports and the two session state machines.
//! * [`metrics`]: operation and traffic counters and their closed forms.

pub mod fixedpoint;
pub mod metrics;
pub mod model;
pub mod paillier;
pub mod protocol;

pub use fixedpoint::{quantize_model, CodecConfig, CodecError, QuantizedModel};
pub use metrics::{CostCounters, LayerCounters};
pub use model::{Activation, Architecture, Dataset, MlpModel, ModelError, Optimizer, TrainConfig};
pub use paillier::{Ciphertext, EvaluationKey, Keypair, PaillierError, PublicKey};
pub use protocol::{Client, ClientConfig, Diagnosis, Ordering, ProtocolError, Server, ServerConfig};
