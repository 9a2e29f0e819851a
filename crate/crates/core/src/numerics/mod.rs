//! Dense tensors, reverse-mode differentiation and recurrent building blocks.

pub mod container;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_params};
pub use nn::{
    bilstm_forward, bilstm_sequence, cosine_matrix, cosine_rows, l2_normalize_rows, lstm_cell, lstm_unroll, BiLstmOutput,
    Linear, LstmCellParams, Mlp,
};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{ElementwiseOp, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
