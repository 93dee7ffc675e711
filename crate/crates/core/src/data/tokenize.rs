//! Whitespace-and-punctuation tokenizer shared by ingestion, reward matching
//! and metric scoring.

/// Lowercase, split on whitespace, and split punctuation characters into
/// their own tokens. Alphanumeric runs stay together.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Join tokens back into a display string.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
