pub mod env;
pub mod exec;
pub mod policy;
pub mod rollout;
pub mod token;
pub mod traj;
pub mod coldstart;
pub mod grpo;
pub mod metrics;
pub mod experiment;
pub mod verify;
