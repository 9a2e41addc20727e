//! Desk-scale ridge segmentation: dilated convolutions, the combined
//! Dice+Focal loss with analytic gradients, Adam training with best-IoU
//! selection, binary checkpoints, and the low-coverage prediction fallback.

mod checkpoint;
mod loss;
mod net;
mod predict;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use loss::{closs, closs_grad, dice_loss, focal_loss, iou, LossParams, PROB_EPS};
pub use net::{
    backward, dilated_conv_stage, dilated_decoder_block, forward, BlockComposition,
    DecoderBlockParams, ForwardCache, Param, ToyNet, ToyNetConfig, DILATIONS, DOWNSAMPLE_FACTOR,
};
pub use predict::{
    predict_mask, predict_with_fallback, FallbackOutcome, FileMaskSource, GaborMaskSource,
    MaskPredictor, ModelMaskSource, FALLBACK_WHITE_RATIO,
};
pub use tensor::{concat_channels, conv2d_dilated, relu, softmax2, upsample_nearest2, ConvSpec, Tensor4};
pub use train::{toy_train, EpochLog, TrainConfig, TrainReport};
