//! Reservoir graph and level dynamics.

mod dynamics;
mod topology;

pub use dynamics::{
    check_constraints, step_dynamics, ActionSet, DynamicsStep, ReservoirState, SimConfig, Simulator, SourceDebit,
    StepReport, ViolationReport, WeatherVector,
};
pub use topology::{
    build_topology, Channel, EdgeSpec, GridSpec, NetworkTopology, NodeSpec, ReleaseTarget, ReservoirNode,
    TopologyDefaults, TopologySpec,
};
