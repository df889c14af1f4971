pub mod curriculum;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod world;
