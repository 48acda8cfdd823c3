use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub const URL_ENV: &str = "GRIDFORGE_URL";
pub const TOKEN_ENV: &str = "GRIDFORGE_TOKEN";
pub const CONFIG_ENV: &str = "GRIDFORGE_CONFIG";

/// Settings read from `cli.toml`, overridden by environment and flags.
#[derive(Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub url: Option<String>,
    pub token: Option<String>,
    /// Room used by `submit` when no `--room` is given.
    pub room: Option<String>,
    pub output_dir: Option<PathBuf>,
}

// Hand-written so the token can never end up in a log line.
impl fmt::Debug for CliConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CliConfig")
            .field("url", &self.url)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("room", &self.room)
            .field("output_dir", &self.output_dir)
            .finish()
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<CliConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads `path`; a missing file is only an error when it was asked for.
    pub fn load(path: &Path, required: bool) -> Result<CliConfig, String> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => Ok(CliConfig::default()),
            Err(e) => Err(format!("{}: {e}", path.display())),
        }
    }

    pub fn default_path() -> Option<PathBuf> {
        let base = std::env::var_os("XDG_CONFIG_HOME")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".config")))?;
        Some(base.join("gridforge").join("cli.toml"))
    }

    /// Layers `url`/`token` from the environment (or flags) over the file.
    pub fn overlay(mut self, url: Option<String>, token: Option<String>) -> CliConfig {
        if url.is_some() {
            self.url = url;
        }
        if token.is_some() {
            self.token = token;
        }
        self
    }

    pub fn validate(&self) -> Result<(&str, &str), String> {
        let url = self.url.as_deref().filter(|u| !u.is_empty());
        let url = url.ok_or_else(|| format!("no manager URL: set {URL_ENV}, --url or `url` in cli.toml"))?;
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(format!("manager URL {url:?} must start with http:// or https://"));
        }
        let token = self.token.as_deref().filter(|t| !t.is_empty());
        let token = token.ok_or_else(|| format!("no token: set {TOKEN_ENV}, --token or `token` in cli.toml"))?;
        Ok((url, token))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn environment_wins_over_file() {
        let file = CliConfig::from_toml("url = \"http://a:1\"\ntoken = \"t1\"\nroom = \"Lab\"\n").unwrap();
        let cfg = file.overlay(Some("http://b:2".into()), None);
        assert_eq!(cfg.validate().unwrap(), ("http://b:2", "t1"));
        assert_eq!(cfg.room.as_deref(), Some("Lab"));
    }

    #[test]
    fn debug_never_shows_the_token() {
        let cfg = CliConfig { token: Some("s3cret".into()), ..CliConfig::default() };
        assert!(!format!("{cfg:?}").contains("s3cret"));
    }

    #[test]
    fn missing_pieces_are_reported() {
        assert!(CliConfig::default().validate().unwrap_err().contains(URL_ENV));
        let cfg = CliConfig { url: Some("a:1".into()), token: Some("t".into()), ..CliConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(CliConfig::from_toml("colour = 1").is_err());
    }

    #[test]
    fn optional_file_may_be_absent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.toml");
        assert_eq!(CliConfig::load(&p, false).unwrap(), CliConfig::default());
        assert!(CliConfig::load(&p, true).is_err());
    }
}
