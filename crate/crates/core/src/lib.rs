//! Discrete-event simulator for scheduling mixed short and long LLM
//! inference requests on a GPU cluster.

pub mod cluster;
pub mod costmodel;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod sched;
pub mod workload;

pub use cluster::{build_cluster, ClusterSpec, ModelPreset, ModelSpec, ReplicaId};
pub use costmodel::{CostModel, SpPlan, SpStrategy};
pub use engine::{run, EngineConfig, SimInput, SimOutput};
pub use error::{Result, SimError};
pub use metrics::{MetricsReport, RequestRecord};
pub use sched::{Ablation, Action, PolicyConfig, PolicyKind, ScheduleDecision, Scheduler};
pub use workload::{Request, RequestClass, RequestId, TraceTransformConfig};
