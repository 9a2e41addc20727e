//! Latent fingerprint enhancement pipeline.
//!
//! The library is organized around the processing stages:
//!
//! 1. **imagecore** – grayscale/mask containers, raster I/O, pixel statistics.
//! 2. **preenhance** – CLAHE, fast non-local means, adaptive thresholding;
//!    the pre-enhancement and low-coverage fallback stacks.
//! 3. **gabor** – ridge orientation/frequency estimation and oriented Gabor
//!    enhancement; produces ground-truth ridge masks from raw latents.
//! 4. **guided** – guided filtering of a latent against its ridge mask and
//!    the final weighted blend.
//! 5. **segnet** – a small encoder/decoder segmentation network with dilated
//!    decoder blocks, the combined Dice+Focal loss, Adam training, and the
//!    low-coverage prediction fallback controller.
//! 6. **augment** – deterministic training-time augmentation of
//!    (image, mask) pairs.
//! 7. **synth** – synthetic fixture generators used by tests and the
//!    toy training harness.

pub mod augment;
mod error;
pub mod gabor;
pub mod guided;
pub mod imagecore;
pub mod preenhance;
pub mod segnet;
pub mod synth;

pub use error::{Error, Result};
