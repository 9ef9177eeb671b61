#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(resolved) = afctl::cli::resolve_str(text) {
        // anything accepted must survive its own echo
        let echo = resolved.config.to_toml().expect("accepted config serialises");
        let again = afctl::cli::parse_str(&echo).expect("echo parses");
        assert_eq!(again, resolved.config);
    }
});
