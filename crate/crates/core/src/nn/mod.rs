//! Reusable layers: parameters, linear maps, embeddings, LSTM cells.

mod layers;
mod lstm;
mod params;

pub use layers::{
    dropout, embed_lookup, init_fan_in, linear_forward, weight_drop, weight_drop_tensor, Embedding, Linear,
};
pub use lstm::{lstm_step, lstm_unroll, CellVars, LstmCell, LstmState, Unrolled};
pub use params::{Bound, Param, ParamId, ParamStore};
