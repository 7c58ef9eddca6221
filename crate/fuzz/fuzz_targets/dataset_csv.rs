#![no_main]

use libfuzzer_sys::fuzz_target;
use subuda::io::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    let Ok(samples) = read_dataset(data) else { return };
    // Anything accepted must survive a write/read round trip.
    let mut buf = Vec::new();
    write_dataset(&mut buf, &samples).expect("writing parsed samples");
    let again = read_dataset(buf.as_slice()).expect("re-reading written samples");
    assert_eq!(samples, again);
});
