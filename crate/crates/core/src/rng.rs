//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, purpose, index)`: the seed and purpose
//! tag select a ChaCha key, the index selects the stream. Two samples of the
//! same batch never share a stream, so evaluation order cannot change results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::{lit, Point, Scalar};

/// Purpose tags keep unrelated consumers of the same seed independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    NetInit,
    DataSample,
    TeacherBatch,
    DistillBatch,
    Adversarial,
    SamplerInit,
    SamplerStep,
    Projection,
    Evaluation,
    Discriminator,
    Custom(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::NetInit => 1,
            Purpose::DataSample => 2,
            Purpose::TeacherBatch => 3,
            Purpose::DistillBatch => 4,
            Purpose::Adversarial => 5,
            Purpose::SamplerInit => 6,
            Purpose::SamplerStep => 7,
            Purpose::Projection => 8,
            Purpose::Evaluation => 9,
            Purpose::Discriminator => 10,
            Purpose::Custom(v) => 0x1000 + v,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for `(seed, purpose, step)` selecting stream `index`.
pub fn stream(seed: u64, purpose: Purpose, step: u64, index: u64) -> Stream {
    let key = splitmix(splitmix(seed ^ splitmix(purpose.tag())) ^ splitmix(step.wrapping_add(0x5851_F42D)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    Stream { rng }
}

/// A single random stream with the draws the crate needs.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn normal<S: Scalar>(&mut self) -> S {
        let v: f64 = self.rng.sample(StandardNormal);
        lit(v)
    }

    pub fn normal_point<S: Scalar>(&mut self) -> Point<S> {
        [self.normal(), self.normal()]
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform<S: Scalar>(&mut self) -> S {
        let v: f64 = self.rng.gen();
        lit(v)
    }

    pub fn uniform_in<S: Scalar>(&mut self, lo: S, hi: S) -> S {
        lo + (hi - lo) * self.uniform::<S>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn raw(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
