//! Run-header snippets handed to users, one per supported language.

pub const PYTHON: &str = include_str!("../snippets/header.py");
pub const SHELL: &str = include_str!("../snippets/header.sh");
pub const R: &str = include_str!("../snippets/header.R");
pub const JAVA: &str = include_str!("../snippets/Header.java");
pub const C: &str = include_str!("../snippets/header.h");

pub fn for_language(lang: &str) -> Option<&'static str> {
    match lang.to_ascii_lowercase().as_str() {
        "python" | "py" => Some(PYTHON),
        "shell" | "sh" | "bash" => Some(SHELL),
        "r" => Some(R),
        "java" => Some(JAVA),
        "c" | "cpp" | "c++" => Some(C),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::header::HEADER_KEYS;

    #[test]
    fn every_snippet_knows_every_flag() {
        for s in [PYTHON, SHELL, R, JAVA, C] {
            for key in HEADER_KEYS {
                let needle = if s == R { key.to_string() } else { format!("--{key}") };
                assert!(s.contains(&needle), "missing {key}");
            }
        }
    }
}
