#![no_main]

use afctl::sim::Path;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(path) = Path::from_csv(text) {
        path.check_consistent().expect("parsed path is consistent");
        let again = Path::from_csv(&path.to_csv()).expect("round trip parses");
        assert_eq!(again.states.len(), path.states.len());
    }
});
