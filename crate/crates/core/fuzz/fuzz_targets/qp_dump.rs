#![no_main]

use libfuzzer_sys::fuzz_target;
use safelayer::dump::QpDump;
use safelayer::qp::solve;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(dump) = QpDump::parse(text) else { return };
    assert_eq!(QpDump::parse(&dump.write()).as_ref(), Ok(&dump));
    let (nx, nin, neq) = dump.problem.shape();
    if nx * (nx + nin + neq) <= 400 {
        let _ = solve(&dump.problem, 10);
    }
});
