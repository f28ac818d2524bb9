#![no_main]

use adam_core::nn::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck).expect("decoded checkpoints re-encode");
        // compare encodings, NaN weights are legal and never equal themselves
        let again = decode_checkpoint(&bytes).expect("re-decode");
        assert_eq!(encode_checkpoint(&again).expect("re-encode"), bytes);
    }
});
