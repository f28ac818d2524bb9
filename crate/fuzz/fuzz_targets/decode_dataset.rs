#![no_main]

use adam_core::fingerprint::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that decodes must survive a re-encode round trip
    if let Ok(ds) = decode_dataset(data) {
        let bytes = encode_dataset(&ds).expect("decoded datasets re-encode");
        assert_eq!(decode_dataset(&bytes).expect("re-decode"), ds);
    }
});
