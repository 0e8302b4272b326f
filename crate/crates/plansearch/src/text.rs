//! Small text utilities shared by prompt builders and trace excerpts.

/// Truncates to at most `limit` bytes keeping the tail, where failures
/// usually are. Cuts on a char boundary.
pub fn truncate_tail(text: &str, limit: usize) -> String {
    const MARKER: &str = "[...truncated...]\n";
    if text.len() <= limit {
        return text.to_owned();
    }
    let keep = limit.saturating_sub(MARKER.len());
    let mut start = text.len() - keep;
    while start < text.len() && !text.is_char_boundary(start) {
        start += 1;
    }
    format!("{MARKER}{}", &text[start..])
}

/// Replaces every occurrence of a secret in text before it is persisted.
pub fn redact_secret(text: &str, secret: &str) -> String {
    if secret.is_empty() {
        return text.to_owned();
    }
    text.replace(secret, "[redacted]")
}
