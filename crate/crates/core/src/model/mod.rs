//! The activity-recognition network, its optimizer, training loop and
//! checkpoint format.

pub mod adam;
pub mod arch;
pub mod checkpoint;
pub mod network;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use arch::{ArchConfig, DecaySchedule, TrainHyper};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use network::{argmax, softmax, ForwardCache, Gradients, NormMode, Prediction, TrainedModel};
pub use train::{accuracy, fine_tune, train, train_personal, TrainReport};
