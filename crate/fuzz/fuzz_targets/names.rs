#![no_main]

use libfuzzer_sys::fuzz_target;
use tunekit::systems::trajectory::TrajectoryKind;
use tunekit::systems::SystemKind;
use tunekit::Strategy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = text.parse::<Strategy>() {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    if let Ok(k) = text.parse::<SystemKind>() {
        assert_eq!(k.to_string().parse::<SystemKind>().unwrap(), k);
    }
    if let Ok(t) = text.parse::<TrajectoryKind>() {
        assert_eq!(t.to_string().parse::<TrajectoryKind>().unwrap(), t);
    }
});
