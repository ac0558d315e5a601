//! Desk-scale multilingual neural machine translation with a variable-length
//! interlingua bridge.
//!
//! The crate trains small transformer translation models over a synthetic
//! multilingual corpus and compares four architectures: a plain shared
//! encoder–decoder, two fixed-length interlingua variants, and the
//! variable-length interlingua in which every translation equivalent of a
//! sentence is encoded to the same number of bridge vectors.
//!
//! Everything runs on a single CPU core in `f64`, deterministically: same
//! seed, same bytes out.

pub mod bleu;
pub mod bridge;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod training;
