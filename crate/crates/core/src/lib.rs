//! Safe action projection for reinforcement learning.

pub mod constraints;
pub mod dump;
pub mod env;
pub mod experiment;
pub mod linalg;
pub mod policy;
pub mod qp;
pub mod robot;
pub mod safe_rl;
pub mod trpo;
