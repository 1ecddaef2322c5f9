//! Small string helpers shared across modules.

/// Lowercase, trim and collapse internal whitespace runs to a single space.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Lowercased alphanumeric words of `s`.
pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Case-insensitive whole-word phrase containment: every word of `needle`
/// appears contiguously, in order, among the words of `haystack`.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let needle = words(needle);
    if needle.is_empty() {
        return false;
    }
    let hay = words(haystack);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Keep the first occurrence of every entry, comparing normalized forms.
pub fn dedup_normalized(items: &mut Vec<String>) {
    let mut seen = std::collections::HashSet::new();
    items.retain(|item| seen.insert(normalize(item)));
}
