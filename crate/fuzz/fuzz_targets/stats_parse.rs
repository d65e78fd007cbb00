#![no_main]
use libfuzzer_sys::fuzz_target;
use scaleq::equalizer::GlobalStats;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(stats) = GlobalStats::from_record(text) {
        assert!(stats.branches().iter().all(|b| b.sigma > 0.0 && b.sigma.is_finite() && b.mu.is_finite()));
        let again = GlobalStats::from_record(&stats.to_record().unwrap()).unwrap();
        assert_eq!(again, stats);
    }
});
