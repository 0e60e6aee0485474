//! Deterministic seed derivation.
//!
//! One master seed drives a whole run. Sub-seeds for independent random
//! streams (parameter init, per-epoch shuffles, per-step dropout masks) are
//! derived with splitmix64 over `master ^ stream ^ index`, so streams are
//! decorrelated while the run stays reproducible end to end.

/// Random stream tags. Kept explicit so derived seeds never collide by accident.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    /// Encoder parameter initialization.
    InitEncoder,
    /// Classifier head initialization.
    InitHead,
    /// Per-epoch training-set shuffle; index = epoch number.
    EpochShuffle,
    /// Per-step dropout masks; index = global step number.
    Dropout,
    /// Per-class shuffles of the stratified split; index = class label.
    Split,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::InitEncoder => 0x01,
            Stream::InitHead => 0x02,
            Stream::EpochShuffle => 0x03,
            Stream::Dropout => 0x04,
            Stream::Split => 0x05,
        }
    }
}

/// Derive a sub-seed for `(stream, index)` from the master seed.
pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(master ^ stream.tag().rotate_left(48) ^ index.rotate_left(16))
}

/// splitmix64 finalizer (Steele, Lea & Flood). Bijective over u64.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
