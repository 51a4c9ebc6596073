//! Fixtures shared by the benchmarks.

use mofo_core::evalsynth::{detection_suite, gen_clip, pretrain_suite, GeneratedClip};

/// A 64x64x8 detection scene.
pub fn detection_clip() -> GeneratedClip {
    let spec = detection_suite(1, 0).expect("suite").remove(0);
    gen_clip(&spec, 0).expect("render")
}

/// A 32x32x8 scene matching the micro network.
pub fn micro_clip() -> GeneratedClip {
    let spec = pretrain_suite(1, 0).expect("suite").remove(0);
    gen_clip(&spec, 0).expect("render")
}
