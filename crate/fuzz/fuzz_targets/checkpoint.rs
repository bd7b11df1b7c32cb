#![no_main]

use libfuzzer_sys::fuzz_target;

// The checkpoint format is canonical: any bytes that decode must re-encode
// to exactly the same bytes.
fuzz_target!(|data: &[u8]| {
    let Ok(params) = fedflow_core::models::decode_checkpoint(data) else {
        return;
    };
    let encoded = fedflow_core::models::encode_checkpoint(&params);
    assert_eq!(encoded, data);
});
