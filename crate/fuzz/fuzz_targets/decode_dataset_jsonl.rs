#![no_main]

use adam_core::fingerprint::{decode_dataset_jsonl, encode_dataset_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = decode_dataset_jsonl(text) {
        let again = encode_dataset_jsonl(&ds).expect("decoded datasets re-encode");
        assert_eq!(decode_dataset_jsonl(&again).expect("re-decode"), ds);
    }
});
