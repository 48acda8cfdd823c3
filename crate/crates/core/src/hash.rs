use sha2::{Digest, Sha256};

/// Content hash of a domain's build inputs.
///
/// The recipe length is mixed in ahead of the bytes so that moving bytes
/// between recipe and manifest always changes the digest.
pub fn domain_content_hash(recipe: &[u8], manifest: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(b"gridforge-domain-v1\0");
    h.update((recipe.len() as u64).to_le_bytes());
    h.update(recipe);
    h.update((manifest.len() as u64).to_le_bytes());
    h.update(manifest);
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
