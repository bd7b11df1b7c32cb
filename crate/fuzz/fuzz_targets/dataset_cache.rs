#![no_main]

use libfuzzer_sys::fuzz_target;

// Both cache kinds must reject malformed bytes gracefully; decoded caches
// re-encode to the identical bytes (the format is canonical).
fuzz_target!(|data: &[u8]| {
    if let Ok(clients) = fedflow_core::cache::decode_client_datasets(data) {
        if let Some(len) = clients.iter().flatten().next().map(|(s, _)| s.len()) {
            let encoded = fedflow_core::cache::encode_client_datasets(&clients, len);
            assert_eq!(encoded, data);
        }
    }
    if let Ok(items) = fedflow_core::cache::decode_labeled_set(data) {
        if let Some(len) = items.first().map(|(s, _)| s.len()) {
            let encoded = fedflow_core::cache::encode_labeled_set(&items, len);
            assert_eq!(encoded, data);
        }
    }
});
