use ndarray::ArrayD;
use sha2::{Digest, Sha256};

/// SHA-256 over shape and little-endian element bytes. Bit-identical arrays
/// produce identical strings; any bit flip changes the digest.
pub fn checksum_array(a: &ArrayD<f32>) -> String {
    let mut hasher = Sha256::new();
    for &d in a.shape() {
        hasher.update((d as u64).to_le_bytes());
    }
    match a.as_slice() {
        Some(s) => {
            for v in s {
                hasher.update(v.to_le_bytes());
            }
        }
        None => {
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
