#![no_main]

use libfuzzer_sys::fuzz_target;
use subuda::io::{read_metrics, write_metrics};

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = read_metrics(data) else { return };
    let mut buf = Vec::new();
    write_metrics(&mut buf, &rows).expect("writing parsed rows");
    let again = read_metrics(buf.as_slice()).expect("re-reading written rows");
    assert_eq!(again.len(), rows.len());
});
