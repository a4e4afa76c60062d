//! Canonical path segments for namespaces.

/// Lowercases, maps every run of non-alphanumeric characters to a single
/// `-`, and trims leading/trailing dashes. Empty results fall back to
/// `fallback`.
pub fn slugify(input: &str, fallback: &str) -> String {
    let mut out = String::with_capacity(input.len());
    let mut pending_dash = false;
    for ch in input.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.push(ch.to_ascii_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if out.is_empty() {
        fallback.to_string()
    } else {
        out
    }
}

/// Returns `base` if unused, otherwise the first of `base-2`, `base-3`, ...
/// for which `taken` is false.
pub fn unique_slug(base: &str, mut taken: impl FnMut(&str) -> bool) -> String {
    if !taken(base) {
        return base.to_string();
    }
    (2u64..)
        .map(|n| format!("{base}-{n}"))
        .find(|candidate| !taken(candidate))
        .expect("unbounded suffix search")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn slug_examples() {
        assert_eq!(slugify("WINGS Lab", "lab"), "wings-lab");
        assert_eq!(slugify("NeXT", "tb"), "next");
        assert_eq!(slugify("node-01", "node"), "node-01");
        assert_eq!(slugify("  Node  01!! ", "node"), "node-01");
        assert_eq!(slugify("NeXT Communication Testbed", "tb"), "next-communication-testbed");
        assert_eq!(slugify("***", "node"), "node");
        assert_eq!(slugify("Über Lab", "lab"), "ber-lab");
    }

    #[test]
    fn collision_suffixes() {
        let mut taken: HashSet<String> = HashSet::new();
        for expected in ["node-01", "node-01-2", "node-01-3"] {
            let s = unique_slug("node-01", |c| taken.contains(c));
            assert_eq!(s, expected);
            taken.insert(s);
        }
    }

    proptest::proptest! {
        #[test]
        fn slug_charset(input in ".{0,40}") {
            let s = slugify(&input, "x");
            proptest::prop_assert!(!s.is_empty());
            proptest::prop_assert!(s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-'));
            proptest::prop_assert!(!s.starts_with('-') && !s.ends_with('-'));
            proptest::prop_assert!(!s.contains("--"));
        }
    }
}
