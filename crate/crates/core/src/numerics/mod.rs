//! Dense `f64` tensors, reverse-mode autodiff, Adam and seeded
//! initialisation.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{lr_schedule, AdamConfig, AdamState};
pub use params::{uniform_init, Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine_similarity, Tensor};

pub(crate) use tape::softmax_row;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator every seeded component uses.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
