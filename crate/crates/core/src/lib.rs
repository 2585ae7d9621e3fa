//! Batch ridesharing dispatch engine and traffic-aware fleet simulator.

pub mod assignment;
pub mod darp_routes;
pub mod demand;
pub mod dispatcher;
pub mod event_bus;
pub mod geo;
pub mod ids;
pub mod metrics_report;
pub mod road_network;
pub mod scalar;
pub mod scenario;
pub mod simulator;

pub use scalar::Scalar;

pub use ids::{RequestId, VehicleId};

/// Double-precision instantiations used by the simulator.
pub type RoadGraph = road_network::RoadGraph<f64>;
pub type Router = road_network::Router<f64>;
pub type SpeedOverlay = road_network::SpeedOverlay<f64>;
pub type RoutePlan = darp_routes::RoutePlan<f64>;
pub type AssignmentProblem = assignment::AssignmentProblem<f64>;
pub type AssignmentSolution = assignment::AssignmentSolution<f64>;

/// Single-precision instantiations of the generic core.
pub type RoadGraph32 = road_network::RoadGraph<f32>;
pub type Router32 = road_network::Router<f32>;
pub type SpeedOverlay32 = road_network::SpeedOverlay<f32>;
pub type RoutePlan32 = darp_routes::RoutePlan<f32>;
pub type AssignmentProblem32 = assignment::AssignmentProblem<f32>;
pub type AssignmentSolution32 = assignment::AssignmentSolution<f32>;
