//! Superpixel fragmentation of ROI crops and rendering of each segment as a
//! network-sized input.

mod patch;
mod slic;

pub use patch::{
    extract_patches, patch_id, render_segment, resize_bilinear, segment_masks, SuperpixelPatch,
};
pub use slic::{connected_components, enforce_connectivity, slic, SlicParams};
pub(crate) use patch::crop_mean;
