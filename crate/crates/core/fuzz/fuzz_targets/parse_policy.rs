#![no_main]

use dpe_core::policy::compile_policy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(policy) = compile_policy(text) {
        policy.validate().expect("compiled policies are valid");
    }
});
