//! Grasp planning as maximum-a-posteriori inference in learned models.
//!
//! The pipeline: a point cloud is segmented and voxelized into an
//! object-centric representation ([`perception`]), a voxel classifier scores
//! grasp configurations ([`models`]), mixture priors over configurations are
//! learned from data ([`priors`]), and a bound-constrained quasi-Newton
//! optimizer searches configuration space for the most likely successful
//! grasp ([`inference`]). A procedural scene generator with an analytic
//! success oracle ([`synthdata`]) supplies labeled data, and [`training`]
//! holds the model fitting loops and offline metrics.

pub mod config;
pub mod geom;
pub mod grasp;
pub mod hand;
pub mod heuristic;
pub mod inference;
pub mod models;
pub mod perception;
pub mod priors;
pub mod rng;
pub mod synthdata;
pub mod training;
