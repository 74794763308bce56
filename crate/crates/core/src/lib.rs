pub mod appfiber;
pub mod expr;
pub mod harness;
pub mod measure;
pub mod model;
pub mod noise;
pub mod par;
pub mod quad;
pub mod scheme;
pub mod stats;
