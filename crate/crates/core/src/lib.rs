//! Work-farm process networks for workstation clusters.
//!
//! A small topology language ([`spec_dsl`]) describes an emit → farm → collect
//! application. [`topology`] expands it into channel plans, [`deploy`] runs the
//! two-phase load protocol between a host and its nodes, and [`farm`] runs the
//! application processes over rendezvous channels from [`netchan`]. Workloads
//! plug in through [`workload`]; Mandelbrot is built in. [`model_check`] is an
//! explicit-state checker for the farm's process model.

pub mod deploy;
pub mod farm;
pub mod local;
pub mod manifest;
pub mod model_check;
pub mod netchan;
pub mod spec_dsl;
pub mod topology;
pub mod workload;

pub use deploy::{TimingReport, TimingRow};
pub use netchan::{ChannelAddress, Envelope, Frame, FrameKind, Network};
pub use spec_dsl::{parse_spec, NetworkSpec};
pub use topology::{build_plans, HostPlan, NodePlan};
pub use workload::{Registry, Summary};
