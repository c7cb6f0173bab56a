//! A recurrent memory cell in which a fixed set of memory slots interact via
//! multi-head dot-product attention, together with the toy tasks, an LSTM
//! baseline, and the training harness used to study it at desk scale.

pub mod attention;
pub mod baseline;
pub mod rmc;
pub mod tasks;
pub mod trainer;
pub mod nn;
pub mod tensor;
