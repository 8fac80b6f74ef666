pub mod argmin;
pub mod error;
pub mod field;
pub mod jets;
pub mod linalg;
pub mod optim;
pub mod prox;
pub mod subequations;
pub mod supconv;
pub mod harness;
