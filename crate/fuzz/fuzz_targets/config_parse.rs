#![no_main]
use libfuzzer_sys::fuzz_target;
use scaleq::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let echoed = cfg.to_toml().expect("valid config serializes");
        let back = ExperimentConfig::parse(&echoed).expect("echo parses");
        assert_eq!(back.hash(), cfg.hash());
    }
});
