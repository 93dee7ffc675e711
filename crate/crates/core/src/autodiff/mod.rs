//! Reverse-mode automatic differentiation over dense real tensors, plus the
//! optimizer and gradient checking. Everything upstream (both models, both
//! losses) is composed from these primitives, so every gradient in the
//! project is machine-checked by one finite-difference harness.

pub mod check;
pub mod lstm;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use check::{check_gradients, GradCheckReport, FD_STEP};
pub use lstm::{bilstm, lstm_cell, BiLstm, BiLstmVars, LstmDirection, LstmVars};
pub use optim::RmsProp;
pub use tape::{Tape, Var};
pub use tensor::{Param, Tensor};
