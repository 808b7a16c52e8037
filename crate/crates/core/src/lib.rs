//! Offline expert planning, symbolic world-model learning and online
//! abnormality-minimizing decision making for multi-UAV routing.

pub mod expert_ga;
pub mod filters;
pub mod geom;
pub mod inference;
pub mod ingest;
pub mod potential_field;
pub mod runtime;
pub mod scenario;
pub mod symbolic;
pub mod world_model;

pub use geom::Vec2;
pub use scenario::{
    distance_matrix, generate_instance, validate_solution, Area, City, ConstraintId, DistanceMatrix,
    FeasibilityReport, MissionInstance, Obstacle,
};
pub use potential_field::{FieldConfig, Neighborhood, TrajSample, Trajectory};
pub use expert_ga::{evolve, Chromosome, CostBreakdown, ExpertDemonstration, GAConfig};
pub use symbolic::{Dictionaries, FeatureVector, LetterCodebook, MissionWord, MotionWord, QuantizerConfig, RouteWord, SymbolicTriplet};
pub use world_model::{Level, ReferenceDistribution, SwarmSizeTable, TransitionMatrix, WorldModel};
pub use filters::{ContinuousState, EkfState, NoiseConfig, ParticleSet};
pub use inference::{Belief, HierarchicalAction, InferenceConfig, Observation, PlanState};
pub use runtime::{DemoBatch, EvaluatedRun, Event, EventKind, FilterKind, InstanceParams, MetricsReport, RunRecord, SimConfig, SuccessFlags};
pub use ingest::{ClusterSequence, Codebook, FlightLog, GngConfig};
