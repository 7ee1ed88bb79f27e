pub mod attention;
pub mod conv;
pub mod encoder;
pub mod linear;
pub mod lstm;
pub mod norm;
pub mod params;
pub mod positional;

pub use attention::MultiHeadSelfAttention;
pub use conv::{Conv1d, ConvBn};
pub use encoder::{EncoderConfig, EncoderLayer, TemporalPool, TransformerEncoder};
pub use linear::{FeedForward, Linear};
pub use lstm::{BiLstm2, Lstm};
pub use norm::{BatchNorm, LayerNorm};
pub use params::{BnUpdate, Init, Mode, Module, ParamDecl, ParamStore, Session};
pub use positional::{positional_encoding, PositionalTable};
