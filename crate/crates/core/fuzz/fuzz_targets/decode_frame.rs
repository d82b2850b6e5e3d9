#![no_main]

use dpe_core::protocol::{decode, encode, peek_header, AuthKey};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let key = AuthKey::derive("fuzz");
    let _ = peek_header(data);
    if let Ok(frame) = decode(data, &key) {
        // Anything that authenticates must be exactly what the encoder emits.
        let again = encode(&frame.body, frame.seq, &frame.sender_id, &key).expect("decoded frame re-encodes");
        assert_eq!(again, data);
    }
});
