//! Desk-scale model architectures for both tracks.
//!
//! [`seg`] holds the attention-gated encoder-decoder that turns patches
//! into per-pixel mitosis logits; [`vit`] holds the small vision
//! transformer whose linear layers carry the low-rank adapter sites.

pub mod seg;
pub mod vit;
