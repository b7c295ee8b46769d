//! Angle-sensitive pixel sensing and CNN experiments.

pub mod codec;
pub mod data;
pub mod flops;
pub mod nn;
pub mod optics;
pub mod par;
pub mod sensor;
