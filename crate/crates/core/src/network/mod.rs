//! Dual-encoder residual UNet noise predictor.
//!
//! The raw image and the current noisy mask are encoded by two independent
//! residual encoders. At the configured fusion stages the image features are
//! gated by an affinity map computed against the (optionally spectrally
//! filtered) mask features. The two final embeddings are summed, passed
//! through a bottleneck stage and decoded with skip connections back to a
//! noise estimate of the mask's shape.
//!
//! Parameter names are stable and are what checkpoints store:
//!
//! | prefix | contents |
//! |---|---|
//! | `time_embed.*` | shared step embedding (`table` when learned) and its projection |
//! | `encoder_image.stem.*`, `encoder_image.stage{k}.down.*`, `encoder_image.stage{k}.block{j}.*` | image encoder |
//! | `encoder_mask.*` | mask encoder, same layout as the image encoder |
//! | `ffparser.stage{k}.re`, `ffparser.stage{k}.im` | spectral filter at fusion stage `k` |
//! | `bottleneck.*` | shared last encoding stage |
//! | `decoder.level{k}.*`, `decoder.out.*` | decoder and output head |

mod config;
mod layers;
mod model;

pub use config::{ModelConfig, TimeEmbeddingKind};
pub use layers::{dynamic_condition, sinusoidal_embedding};
pub use model::SegDiffNet;
