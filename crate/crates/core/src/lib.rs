pub mod codec;
pub mod crypto;
pub mod ids;
pub mod skipgraph;
pub mod ttp;
pub mod auth;
pub mod fixture;
