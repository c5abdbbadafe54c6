//! Invariant point attention (IPA) in two interchangeable forms.
//!
//! * [`reference`]: the quadratic formulation that materializes the
//!   `H x L x L` logits.
//! * [`flash`]: the lifted formulation whose logits are a single inner
//!   product, evaluated by the tiled online-softmax kernel in [`kernel`]
//!   with memory linear in `L`. It needs the pair representation in the
//!   factorized form of [`pair`].
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below name the concrete instantiations.
//! [`ledger`] tracks tensor buffer bytes for the scaling harness in
//! [`bench`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod error;
pub mod flash;
pub mod geometry;
pub mod io;
pub mod ipa;
pub mod kernel;
pub mod ledger;
pub mod pair;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use flash::{flash_ipa_forward, flash_ipa_forward_with, FlashOptions, LiftedQKV};
pub use geometry::{FrameSet, RigidTransform};
pub use ipa::{IpaConfig, IpaWeights};
pub use kernel::{flash_attention, naive_attention, TileSpec};
pub use ledger::AllocationLedger;
pub use pair::{DistogramSpec, FactorWeights, FactorizedPair};
pub use reference::{reference_forward, PairRep};
pub use rng::Rng;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type RigidTransform64 = RigidTransform<f64>;
pub type RigidTransform32 = RigidTransform<f32>;
pub type FrameSet64 = FrameSet<f64>;
pub type FrameSet32 = FrameSet<f32>;
pub type FactorizedPair64 = FactorizedPair<f64>;
pub type FactorizedPair32 = FactorizedPair<f32>;
pub type IpaWeights64 = IpaWeights<f64>;
pub type IpaWeights32 = IpaWeights<f32>;
