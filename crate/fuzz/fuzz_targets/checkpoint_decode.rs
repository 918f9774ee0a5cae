#![no_main]

use libfuzzer_sys::fuzz_target;
use semail::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        // bytes, not values: payloads may hold NaN
        assert_eq!(Checkpoint::decode(&bytes).expect("re-decode").encode(), bytes);
    }
});
