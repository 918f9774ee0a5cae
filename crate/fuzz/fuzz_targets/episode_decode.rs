#![no_main]

use libfuzzer_sys::fuzz_target;
use semail::episode::EpisodeRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(ep) = EpisodeRecord::decode(data) {
        let bytes = ep.encode();
        // bytes, not values: payloads may hold NaN
        assert_eq!(EpisodeRecord::decode(&bytes).expect("re-decode").encode(), bytes);
    }
});
