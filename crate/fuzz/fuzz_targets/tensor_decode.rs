#![no_main]
use libfuzzer_sys::fuzz_target;
use scaleq::io;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = io::decode(data) {
        // anything accepted re-encodes to the same bytes
        assert_eq!(io::encode(&t), data);
        assert!(t.data().iter().all(|v| v.is_finite()));
    }
});
