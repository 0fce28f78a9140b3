//! Maximal-coupling green/red-list watermarking for token generators.
//!
//! The crate covers the full loop: keyed pseudorandomness ([`keying`]),
//! watermarked samplers ([`decoders`]), score extraction and hypothesis tests
//! ([`detection`]), sparse-mixture power experiments ([`simulation`]), text
//! modification models ([`attacks`]) and synthetic next-token sources ([`lm`]).

pub mod attacks;
pub mod decoders;
pub mod detection;
pub mod keying;
pub mod lm;
pub mod rng;
pub mod simulation;
pub mod stats;
pub mod types;

pub use decoders::{DecoderConfig, Scheme};
pub use detection::{DetectionReport, Side, Statistic};
pub use keying::{GreenList, GreenMode, KeyError, MaskLedger, SeedTag, WatermarkKey};
pub use lm::{MarkovSource, NtpSource};
pub use rng::{RngStream, UniformDraw, UniformSource};
pub use types::{GeneratedText, NtpDistribution, NtpError, TokenId};
