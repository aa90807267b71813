//! Image reference game with a clustered listener population.
//!
//! A speaker describes a target image to a listener by naming one attribute.
//! Listeners differ in which attributes they understand; the speaker keeps a
//! recurrent embedding of the listener's responses during a sequence and uses
//! a per-attribute value function to pick attributes the listener will
//! understand.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix it to `f64`, which is what the experiment harness
//! and the gradient checks use.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > y)` is deliberately true for NaN

pub mod attrspace;
pub mod diffkit;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod listenerpop;
pub mod rng;
pub mod scalar;
pub mod speaker;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use attrspace::{AttributeSpace, ImagePair, Role};
pub use listenerpop::{ClusterMode, ClusterSpec, Levels};
pub use speaker::PolicyKind;
pub use trainer::{SequenceConfig, TrainSettings};

pub type FeatureStore = attrspace::FeatureStore<f64>;
pub type UnderstandingLevel = listenerpop::UnderstandingLevel<f64>;
pub type ListenerSpec = listenerpop::ListenerSpec<f64>;
pub type ParamBlock = diffkit::ParamBlock<f64>;
pub type Mlp = diffkit::Mlp;
pub type LstmCell = diffkit::LstmCell;



pub type SpeakerBundle = speaker::SpeakerBundle<f64>;
pub type SequenceRecord = trainer::SequenceRecord<f64>;
pub type EmbeddingDataset = evalkit::EmbeddingDataset<f64>;
