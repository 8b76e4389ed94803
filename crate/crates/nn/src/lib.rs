//! Minimal tensor engine for sequence models: a reverse-mode autodiff tape over dense matrices,
//! LSTM/BiLSTM and dense layers, inverted dropout, Adam, and a finite-difference gradient checker.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod real;
pub mod tensor;

pub use adam::AdamState;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GroupReport};
pub use graph::{log_sum_exp, softmax_nll, softmax_vec, Gradients, Graph, Var};
pub use layers::{
    dropout, init_uniform, lstm_cell, run_bilstm, run_lstm, Dense, LstmParams, LstmState, Mode,
};
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
