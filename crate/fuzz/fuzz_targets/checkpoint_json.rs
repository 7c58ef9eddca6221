#![no_main]

use libfuzzer_sys::fuzz_target;
use subuda::linalg::Matrix;
use subuda::nn::{forward, Checkpoint};
use subuda::rng::Rng;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(params) = Checkpoint::parse(text) else { return };
    // A validated checkpoint must encode a small batch without panicking.
    if params.num_params() > 1 << 16 {
        return;
    }
    let x = Matrix::zeros(2, params.input_dim());
    let _ = forward(&params, &x, false, &mut Rng::new(0));
});
