#![no_main]

use libfuzzer_sys::fuzz_target;
use subuda::io::{feature_matrix, read_features, write_features};

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = read_features(data) else { return };
    let _ = feature_matrix(&rows);
    let mut buf = Vec::new();
    write_features(&mut buf, &rows).expect("writing parsed rows");
    assert_eq!(read_features(buf.as_slice()).expect("re-reading written rows"), rows);
});
