//! Role adapter container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `RGADAPT1`                          |
//! | 8      | 4    | format version, u32 (currently 1)         |
//! | 12     | 4    | manifest length `M`, u32                  |
//! | 16     | M    | manifest, UTF-8 JSON ([`AdapterManifest`]) |
//! | 16+M   | ...  | embedding blobs                           |
//!
//! The blob section holds one `n_tokens x dim` row-major `f32` matrix per
//! role, in manifest role order. `sha256` in the manifest is the hex digest
//! of the whole blob section. The engine only needs the token literals; the
//! embeddings are for the serving side.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ActivationMode, RoleId, RoleTokenConfig};

pub const ADAPTER_MAGIC: &[u8; 8] = b"RGADAPT1";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("cannot read adapter: {0}")]
    Io(String),
    #[error("malformed adapter: {0}")]
    MalformedAdapter(String),
    #[error("role {role}: expected {expected} tokens, found {found}")]
    RoleCountMismatch {
        role: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRole {
    pub role: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub roles: Vec<AdapterRole>,
    pub n_tokens: usize,
    pub dim: usize,
    /// Identifies the frozen base model the embeddings were trained against.
    pub fingerprint: String,
    pub sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes an adapter; `embeddings[i]` belongs to `roles[i]` and must hold
/// `n_tokens * dim` values. The manifest digest is filled in here.
pub fn write_role_adapter(
    path: &Path,
    roles: &[AdapterRole],
    n_tokens: usize,
    dim: usize,
    fingerprint: &str,
    embeddings: &[Vec<f32>],
) -> Result<(), AdapterError> {
    if embeddings.len() != roles.len() {
        return Err(AdapterError::MalformedAdapter(format!(
            "{} roles but {} embedding matrices",
            roles.len(),
            embeddings.len()
        )));
    }
    let mut blob = Vec::with_capacity(roles.len() * n_tokens * dim * 4);
    for (role, matrix) in roles.iter().zip(embeddings) {
        if matrix.len() != n_tokens * dim {
            return Err(AdapterError::MalformedAdapter(format!(
                "role {}: matrix has {} values, expected {}",
                role.role,
                matrix.len(),
                n_tokens * dim
            )));
        }
        for v in matrix {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = AdapterManifest {
        roles: roles.to_vec(),
        n_tokens,
        dim,
        fingerprint: fingerprint.to_string(),
        sha256: hex_digest(&blob),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| AdapterError::MalformedAdapter(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| AdapterError::Io(e.to_string()))
}

fn read_manifest(bytes: &[u8]) -> Result<(AdapterManifest, &[u8]), AdapterError> {
    let malformed = |msg: &str| AdapterError::MalformedAdapter(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != ADAPTER_MAGIC {
        return Err(malformed("missing adapter magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice"));
    if version != ADAPTER_VERSION {
        return Err(AdapterError::MalformedAdapter(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4-byte slice")) as usize;
    let manifest_bytes = bytes
        .get(16..16 + len)
        .ok_or_else(|| malformed("manifest runs past end of file"))?;
    let manifest: AdapterManifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| AdapterError::MalformedAdapter(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[16 + len..]))
}

/// Loads the token literals of an adapter into a role-token configuration.
pub fn load_role_adapter(path: &Path) -> Result<RoleTokenConfig, AdapterError> {
    let bytes = fs::read(path).map_err(|e| AdapterError::Io(format!("{}: {e}", path.display())))?;
    let (manifest, blob) = read_manifest(&bytes)?;
    if manifest.n_tokens == 0 {
        return Err(AdapterError::MalformedAdapter("n_tokens must be at least 1".into()));
    }
    let expected_blob = manifest.roles.len() * manifest.n_tokens * manifest.dim * 4;
    if blob.len() != expected_blob {
        return Err(AdapterError::MalformedAdapter(format!(
            "blob section is {} bytes, expected {expected_blob}",
            blob.len()
        )));
    }
    if hex_digest(blob) != manifest.sha256 {
        return Err(AdapterError::MalformedAdapter("embedding checksum mismatch".into()));
    }

    let mut token_strings = BTreeMap::new();
    for entry in &manifest.roles {
        let role: RoleId = entry.role.parse().map_err(AdapterError::MalformedAdapter)?;
        if entry.tokens.len() != manifest.n_tokens {
            return Err(AdapterError::RoleCountMismatch {
                role: entry.role.clone(),
                expected: manifest.n_tokens,
                found: entry.tokens.len(),
            });
        }
        if token_strings.insert(role, entry.tokens.clone()).is_some() {
            return Err(AdapterError::MalformedAdapter(format!("role {role} listed twice")));
        }
    }
    let config = RoleTokenConfig {
        mode: ActivationMode::RoleTokens,
        tokens_per_role: manifest.n_tokens,
        token_strings,
    };
    config.validate()?;
    Ok(config)
}
