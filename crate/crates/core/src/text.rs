//! String normalization and whitespace tokenization shared by the name
//! index, the tokenizer and the metrics.

use alloc::string::String;
use alloc::vec::Vec;
use unicode_normalization::UnicodeNormalization;

/// Canonical form used for name matching: NFC, lowercased, internal
/// whitespace collapsed to one space, trimmed.
pub fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.nfc() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    // Lowercasing can produce decomposed sequences (e.g. U+0130).
    if out.chars().any(|c| !c.is_ascii()) {
        out = out.nfc().collect();
    }
    out
}

const PEELED: &[char] = &[':', '?', '!', ',', '.'];

/// Splits on whitespace and peels trailing sentence punctuation
/// (`: ? ! , .`) into separate tokens, so `"Mercury: element"` yields
/// `["Mercury", ":", "element"]`.
pub fn split_tokens(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for piece in s.split_whitespace() {
        let mut end = piece.len();
        let mut tail = Vec::new();
        while end > 0 {
            let c = piece[..end].chars().next_back().unwrap();
            if !PEELED.contains(&c) {
                break;
            }
            let start = end - c.len_utf8();
            if start == 0 {
                break;
            }
            tail.push(&piece[start..end]);
            end = start;
        }
        out.push(&piece[..end]);
        out.extend(tail.into_iter().rev());
    }
    out
}
