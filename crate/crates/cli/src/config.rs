//! Client settings from flags, environment and `~/.trinity-lite.toml`.

use std::path::{Path, PathBuf};

use reqwest::Url;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8470";
pub const CONFIG_FILE: &str = ".trinity-lite.toml";
pub const ENV_SERVER: &str = "TRINITY_SERVER";
pub const ENV_TOKEN: &str = "TRINITY_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub server_url: Url,
    pub token: Option<String>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    server_url: Option<String>,
    token: Option<String>,
    output_dir: Option<PathBuf>,
}

pub fn default_path() -> Option<PathBuf> {
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(CONFIG_FILE))
}

/// Parses an http(s) base URL.
pub fn parse_server(s: &str) -> CliResult<Url> {
    let url = Url::parse(s).map_err(|e| CliError::validation(format!("server url '{s}': {e}")))?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
        return Err(CliError::validation(format!("server url '{s}' must be http(s)://host[:port]")));
    }
    Ok(url)
}

/// Precedence: flag, then environment, then file, then defaults.
/// `env` looks up environment variables.
pub fn resolve(
    file: Option<&Path>,
    server_flag: Option<&str>,
    token_flag: Option<&str>,
    env: impl Fn(&str) -> Option<String>,
) -> CliResult<CliConfig> {
    let fc: FileConfig = match file {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(text) => toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => FileConfig::default(),
            Err(e) => return Err(CliError::validation(format!("{}: {e}", p.display()))),
        },
        None => FileConfig::default(),
    };
    let server = server_flag
        .map(str::to_string)
        .or_else(|| env(ENV_SERVER))
        .or(fc.server_url)
        .unwrap_or_else(|| DEFAULT_SERVER.to_string());
    let token = token_flag.map(str::to_string).or_else(|| env(ENV_TOKEN)).or(fc.token).filter(|t| !t.is_empty());
    Ok(CliConfig {
        server_url: parse_server(&server)?,
        token,
        output_dir: fc.output_dir.unwrap_or_else(|| PathBuf::from(".")),
    })
}
