#![no_main]

use libfuzzer_sys::fuzz_target;
use safelayer::policy::PolicyParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = PolicyParams::from_checkpoint(text) {
        let again = PolicyParams::from_checkpoint(&params.to_checkpoint()).expect("written checkpoint parses");
        assert_eq!(again, params);
    }
});
