//! Sub-seed derivation. Every random stream in a run is seeded by
//! `derive(master, label, index)`: the first eight bytes (little endian) of
//! `SHA-256(master_le ‖ label ‖ index_le)`. Labels in use:
//!
//! | label | index | stream |
//! |---|---|---|
//! | `collect` | 0 | training-run reference |
//! | `member` | j | initialization of ensemble member j |
//! | `prediction` | r | prediction test trajectory r |
//! | `closed-loop` | r | closed-loop run r (reference and initial state) |
//! | `certify` | 0 | certification samples |
//! | `regulation` | r | regulation initial state r |

use sha2::{Digest, Sha256};

pub fn derive(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
