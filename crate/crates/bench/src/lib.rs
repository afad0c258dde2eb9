//! Seeded inputs shared by the benchmarks.

use eegtok_core::encoder::{DshaEncoder, EncoderConfig};
use eegtok_core::signal::{patch, PatchedSignal, Recording};
use eegtok_core::topology::{Hierarchy, Montage};
use eegtok_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// 19-channel montage recording of `seconds` at 200 Hz: a 10 Hz rhythm
/// plus uniform noise.
pub fn recording(seconds: f64, seed: u64) -> Recording {
    let mut r = rng(seed);
    let fs = 200.0;
    let n = (seconds * fs) as usize;
    let labels = Montage::standard_19().labels.clone();
    let data = (0..labels.len())
        .map(|c| {
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    (2.0 * std::f64::consts::PI * 10.0 * t + c as f64).sin() + r.random_range(-0.5..0.5)
                })
                .collect()
        })
        .collect();
    Recording::new(labels, fs, data).expect("consistent shapes")
}

/// Default-sized encoder over the 19-channel montage, with a patched input.
pub struct EncoderFixture {
    pub store: ParamStore,
    pub encoder: DshaEncoder,
    pub hier: Hierarchy,
    pub input: PatchedSignal,
}

pub fn encoder_fixture(seconds: f64) -> EncoderFixture {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let config = EncoderConfig::default();
    let encoder = DshaEncoder::new(&mut store, "enc", config.clone(), &mut r).expect("valid config");
    let hier = Hierarchy::build(&Montage::standard_19()).expect("built-in montage");
    let input = patch(&recording(seconds, 1), config.patch_len).expect("long enough");
    EncoderFixture {
        store,
        encoder,
        hier,
        input,
    }
}
