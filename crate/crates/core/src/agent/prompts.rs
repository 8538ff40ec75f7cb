use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub const EXPLAIN: &str = include_str!("../../prompts/explain.v1.txt");
pub const DECOMPOSE: &str = include_str!("../../prompts/decompose.v1.txt");
pub const REASON: &str = include_str!("../../prompts/reason.v1.txt");

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Template file names mapped to the SHA-256 of their contents.
pub fn template_hashes() -> BTreeMap<String, String> {
    [("explain.v1", EXPLAIN), ("decompose.v1", DECOMPOSE), ("reason.v1", REASON)]
        .into_iter()
        .map(|(name, text)| (name.to_string(), sha256_hex(text)))
        .collect()
}

/// Substitutes `{{key}}` placeholders.
pub fn render(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}
