//! Acoustic neural network: tape autodiff, the CNN-TDNN-LSTM architecture
//! with cross-layer connections, and the SGD trainer.

pub mod darts;
pub mod tensor;
pub mod train;

pub use darts::{
    build_darts, default_layer_table, format_layer_table, parse_layer_table, receptive_field,
    DartsConfig, ForwardPass, LayerKind, LayerSpec, Network, NnetError, OffsetRef,
};
pub use tensor::{NodeId, Tape, TapeError};
pub use train::{dev_loss, train_am, warm_start, TrainConfig, TrainError, TrainReport, TrainUtterance};
