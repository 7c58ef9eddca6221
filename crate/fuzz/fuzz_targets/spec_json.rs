#![no_main]

use libfuzzer_sys::fuzz_target;
use subuda::synth::{generate_domain_pair, DomainShiftSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = DomainShiftSpec::from_json(text) else { return };
    if spec.validate().is_err() {
        return;
    }
    // Keep generation cheap; validity is what is under test.
    let work = (spec.source.samples + spec.target.samples).saturating_mul(spec.input_dim);
    if work <= 1 << 16 {
        let _ = generate_domain_pair(&spec, 0);
    }
});
