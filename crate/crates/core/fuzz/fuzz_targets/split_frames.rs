#![no_main]

use dpe_core::protocol::split_frames;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = split_frames(data) {
        assert_eq!(frames.iter().map(|f| f.len()).sum::<usize>(), data.len());
        assert_eq!(frames.concat(), data);
    }
});
