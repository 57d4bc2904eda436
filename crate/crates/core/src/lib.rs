pub mod data;
pub mod error;
pub mod toy;
pub mod policy;
pub mod inference;
pub mod analysis;
pub mod env;
