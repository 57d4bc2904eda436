//! Policy network, its losses, training loop, checkpoints and the
//! inverse-dynamics variant.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod idm;
pub mod layout;
pub mod loss;
pub mod model;
pub mod nets;
pub mod train;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
pub use config::{BackboneConfig, DecoderConfig, ModelConfig, TrainConfig};
pub use dataset::{fit_binning, PolicyDataset, WindowRef};
pub use idm::{idm_keyboard_accuracy, majority_keyboard_accuracy, pseudo_label, IdmModel, PseudoLabeled};
pub use layout::{attends, build_idm_mask, build_mask, build_mask_windowed, AttentionMask, IdmLayout, Pos, Role, TokenLayout};
pub use loss::{bc_loss, LossComponents, LossOutput};
pub use model::{timestep_specs, Batch, DecodeMode, DecodedAction, PolicyModel, TokenKind, TokenSpec};
pub use nets::{frames_to_mat, LayerKv};
pub use train::{evaluate_windows, split_indices, train, Checkpoint, CheckpointMeta, TrainReport, Trainable};
