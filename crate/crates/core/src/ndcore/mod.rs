//! Dense matrices, activations, seeded sampling and the finite-difference
//! oracle.

mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use rng::{derive_seed, sample_standard_normal, SeededRng};
pub use tensor::{
    add_broadcast_col, matmul, matmul_nt, matmul_tn, relu, relu_prime, sigmoid, sigmoid_prime,
    sigmoid_scalar, Tensor2,
};
