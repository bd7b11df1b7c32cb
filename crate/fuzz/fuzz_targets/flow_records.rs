#![no_main]

use libfuzzer_sys::fuzz_target;

// Parsing untrusted flow record files must never panic, and anything that
// parses must survive a format/reparse round trip unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(flows) = fedflow_core::ingest::parse_flow_records(std::io::Cursor::new(data)) else {
        return;
    };
    let mut text = String::new();
    for flow in &flows {
        text.push_str(&fedflow_core::ingest::format_flow_record(flow));
        text.push('\n');
    }
    let back = fedflow_core::ingest::parse_flow_records(std::io::Cursor::new(text.as_bytes()))
        .expect("formatted records must reparse");
    assert_eq!(flows, back);
});
