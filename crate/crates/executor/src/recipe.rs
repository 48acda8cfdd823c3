use crate::ExecError;

/// The parts of a Dockerfile-style recipe the sandbox understands: the base
/// image selector and `ENV` lines. Other instructions only matter to the
/// container backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub base: String,
    pub env: Vec<(String, String)>,
    pub ignored: Vec<String>,
}

pub fn parse_recipe(text: &str) -> Result<Recipe, ExecError> {
    let mut base = None;
    let mut env = Vec::new();
    let mut ignored = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (instr, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match instr.to_ascii_uppercase().as_str() {
            "FROM" if base.is_none() && !rest.is_empty() => {
                base = Some(rest.split_whitespace().next().unwrap_or(rest).to_string())
            }
            "ENV" => {
                if let Some((k, v)) = rest.split_once('=') {
                    env.push((k.trim().to_string(), unquote(v.trim())));
                } else if let Some((k, v)) = rest.split_once(char::is_whitespace) {
                    env.push((k.to_string(), unquote(v.trim())));
                } else {
                    return Err(ExecError::BuildFailed {
                        log: format!("malformed ENV line: {line}"),
                    });
                }
            }
            _ => ignored.push(line.to_string()),
        }
    }
    let base = base.ok_or_else(|| ExecError::BuildFailed {
        log: "recipe has no FROM line".into(),
    })?;
    Ok(Recipe { base, env, ignored })
}

fn unquote(v: &str) -> String {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
        .to_string()
}
