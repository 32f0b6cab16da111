//! # mmdflow
//!
//! Greedy construction of residual flows `(Id + f_N) o ... o (Id + f_1)` whose
//! blocks are 1/2-Lipschitz and which transport a source particle cloud
//! toward a target in maximum mean discrepancy (MMD).
//!
//! With a finite feature map `phi: R^d -> R^{d_phi}` the squared MMD is
//! `||E_q phi - E_p phi||^2`. Each block moves every particle along
//! `eps * J(z)^T psi`, the gradient of the witness `psi . phi` with
//! `psi = E_p phi - E_q phi` frozen for that block, which shrinks the squared
//! MMD by a fraction of itself per block.
//!
//! ## Modules
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`feature_maps`] | `affine`, `bounded_sine`, `sine_residual` maps; constant certification |
//! | [`measures`] | particle clouds, seeded samplers, feature means, MMD |
//! | [`flow`] | residual blocks, schedules, the greedy builder, inversion, JSON I/O |
//! | [`analysis`] | improvement decomposition and numerical bound checks |
//! | [`experiment`] | config-driven `build`, `verify`, `sweep` runs behind the CLI |
//!
//! ## Quick start
//!
//! ```rust
//! use std::sync::Arc;
//! use mmdflow::feature_maps::FeatureMap;
//! use mmdflow::flow::{build_flow, second_order_for};
//! use mmdflow::measures::ParticleCloud;
//!
//! let map = Arc::new(FeatureMap::identity(1).unwrap());
//! let q = ParticleCloud::new(vec![0.0], 1).unwrap();
//! let p = ParticleCloud::new(vec![1.0], 1).unwrap();
//! let schedule = second_order_for(&q, &p, &map, 1e-3).unwrap();
//! let (flow, report, _) = build_flow(&q, &p, map, &schedule, 1e-12).unwrap();
//! assert_eq!(flow.len(), 5);
//! assert!(report.achieved_ratio <= 1e-3);
//! ```
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod feature_maps;
pub mod flow;
pub mod hexfloat;
pub mod measures;
pub mod report;

pub use error::{Error, Result};
pub use feature_maps::{certify_constants, FeatureMap, MapSpec, SmoothnessConstants};
pub use flow::{build_flow, push_forward, EpsilonSchedule, ResidualBlock, ResidualFlow};
pub use measures::{feature_mean, mmd_squared, psi, ParticleCloud};
