//! The run header: eight command-line parameters appended to every
//! invocation of user code.
//!
//! Code that ignores the flags keeps working, and code run outside the grid
//! falls back to the defaults in [`RunHeader::default`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub app_dir: String,
    pub checkpoint_dir: String,
    pub output_dir: String,
    pub rank: u32,
    pub repetitions: u32,
    pub master_addr: String,
    pub master_port: u16,
    pub parameters: Vec<String>,
}

impl Default for RunHeader {
    fn default() -> Self {
        RunHeader {
            app_dir: ".".into(),
            checkpoint_dir: "./checkpoint".into(),
            output_dir: "./output".into(),
            rank: 0,
            repetitions: 1,
            master_addr: "127.0.0.1".into(),
            master_port: 0,
            parameters: Vec::new(),
        }
    }
}

impl RunHeader {
    pub fn validate(&self) -> Result<(), String> {
        if self.rank >= self.repetitions {
            return Err(format!(
                "rank {} out of range for {} repetitions",
                self.rank, self.repetitions
            ));
        }
        let dirs = [&self.app_dir, &self.checkpoint_dir, &self.output_dir];
        if dirs[0] == dirs[1] || dirs[0] == dirs[2] || dirs[1] == dirs[2] {
            return Err("app_dir, checkpoint_dir and output_dir must be distinct".into());
        }
        if self.parameters.iter().any(|p| p.contains(',')) {
            return Err("parameters may not contain commas".into());
        }
        Ok(())
    }
}

pub const HEADER_KEYS: [&str; 8] = [
    "app_dir",
    "checkpoint_dir",
    "output_dir",
    "rank",
    "repetitions",
    "master_addr",
    "master_port",
    "parameters",
];

/// Renders the header as `--key value` pairs in the fixed key order.
/// Parameters travel as one comma-joined token.
pub fn render_header_args(header: &RunHeader) -> Vec<String> {
    let values = [
        header.app_dir.clone(),
        header.checkpoint_dir.clone(),
        header.output_dir.clone(),
        header.rank.to_string(),
        header.repetitions.to_string(),
        header.master_addr.clone(),
        header.master_port.to_string(),
        header.parameters.join(","),
    ];
    HEADER_KEYS
        .iter()
        .zip(values)
        .flat_map(|(k, v)| [format!("--{k}"), v])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeaderParseError {
    #[error("flag --{0} is missing its value")]
    MissingValue(String),
    #[error("flag --{key} has invalid value {value:?}")]
    InvalidValue { key: String, value: String },
}

/// Parses header flags out of an argument list, ignoring anything that is
/// not a header flag. Missing flags keep their defaults.
pub fn parse_header_args<S: AsRef<str>>(args: &[S]) -> Result<RunHeader, HeaderParseError> {
    let mut header = RunHeader::default();
    let mut i = 0;
    while i < args.len() {
        let arg = args[i].as_ref();
        let Some(key) = arg.strip_prefix("--").filter(|k| HEADER_KEYS.contains(k)) else {
            i += 1;
            continue;
        };
        let value = args
            .get(i + 1)
            .map(|v| v.as_ref().to_string())
            .ok_or_else(|| HeaderParseError::MissingValue(key.to_string()))?;
        let invalid = || HeaderParseError::InvalidValue {
            key: key.to_string(),
            value: value.clone(),
        };
        match key {
            "app_dir" => header.app_dir = value.clone(),
            "checkpoint_dir" => header.checkpoint_dir = value.clone(),
            "output_dir" => header.output_dir = value.clone(),
            "rank" => header.rank = value.parse().map_err(|_| invalid())?,
            "repetitions" => header.repetitions = value.parse().map_err(|_| invalid())?,
            "master_addr" => header.master_addr = value.clone(),
            "master_port" => header.master_port = value.parse().map_err(|_| invalid())?,
            "parameters" => {
                header.parameters = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(str::to_string).collect()
                }
            }
            _ => unreachable!("filtered by HEADER_KEYS"),
        }
        i += 2;
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> RunHeader {
        RunHeader {
            app_dir: "/w/app".into(),
            checkpoint_dir: "/w/ckpt".into(),
            output_dir: "/w/out".into(),
            ..RunHeader::default()
        }
    }

    fn pair<'a>(args: &'a [String], key: &str) -> &'a str {
        let i = args.iter().position(|a| a == key).expect(key);
        &args[i + 1]
    }

    #[test]
    fn single_run_identity() {
        let args = render_header_args(&sample());
        assert_eq!(pair(&args, "--rank"), "0");
        assert_eq!(pair(&args, "--repetitions"), "1");
        assert_eq!(args.len(), 16);
    }

    #[test]
    fn fixed_key_order() {
        let args = render_header_args(&sample());
        let keys: Vec<&str> = args.iter().step_by(2).map(String::as_str).collect();
        assert_eq!(
            keys,
            [
                "--app_dir",
                "--checkpoint_dir",
                "--output_dir",
                "--rank",
                "--repetitions",
                "--master_addr",
                "--master_port",
                "--parameters"
            ]
        );
    }

    #[test]
    fn rank_and_single_parameter() {
        let h = RunHeader {
            rank: 3,
            repetitions: 10,
            parameters: vec!["3".into()],
            ..sample()
        };
        let args = render_header_args(&h);
        assert_eq!(pair(&args, "--rank"), "3");
        assert_eq!(pair(&args, "--parameters"), "3");
    }

    #[test]
    fn parameters_comma_joined() {
        let h = RunHeader {
            parameters: vec!["a".into(), "b".into()],
            ..sample()
        };
        assert_eq!(pair(&render_header_args(&h), "--parameters"), "a,b");
    }

    #[test]
    fn parse_ignores_foreign_flags_and_defaults() {
        let args = ["--ms", "200", "--rank", "2", "--repetitions", "4"];
        let h = parse_header_args(&args).unwrap();
        assert_eq!(h.rank, 2);
        assert_eq!(h.repetitions, 4);
        assert_eq!(h.app_dir, ".");
        assert!(parse_header_args(&["--rank"]).is_err());
        assert!(parse_header_args(&["--rank", "x"]).is_err());
    }

    #[test]
    fn validate_catches_bad_headers() {
        let mut h = sample();
        h.rank = 1;
        assert!(h.validate().is_err());
        let mut h = sample();
        h.output_dir = h.app_dir.clone();
        assert!(h.validate().is_err());
        sample().validate().unwrap();
    }

    fn header_strategy() -> impl Strategy<Value = RunHeader> {
        (
            "[a-z/]{1,12}",
            0u32..50,
            1u32..50,
            "[0-9.]{1,15}",
            any::<u16>(),
            proptest::collection::vec("[a-zA-Z0-9_.-]{1,6}", 0..5),
        )
            .prop_map(|(dir, rank, extra, addr, port, parameters)| RunHeader {
                app_dir: format!("{dir}/app"),
                checkpoint_dir: format!("{dir}/ckpt"),
                output_dir: format!("{dir}/out"),
                rank,
                repetitions: rank + extra,
                master_addr: addr,
                master_port: port,
                parameters,
            })
    }

    proptest! {
        #[test]
        fn render_is_deterministic_and_parses_back(h in header_strategy()) {
            let a = render_header_args(&h);
            let b = render_header_args(&h.clone());
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(parse_header_args(&a).unwrap(), h);
        }
    }
}
