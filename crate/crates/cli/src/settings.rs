//! Layered `key=value` settings: built-in defaults, then a config file, then
//! command-line flags, then `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Parses config text: one `key=value` per line, `#` starts a comment.
pub fn parse_config(text: &str, allowed: &[&str], origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::BadInput(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
        let k = k.trim();
        if !allowed.contains(&k) {
            return Err(CliError::BadInput(format!("{origin}:{}: unknown key {k:?}", i + 1)));
        }
        out.push((k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(
        allowed: &[&str],
        config: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
        sets: &[String],
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Missing(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_config(&text, allowed, &path.display().to_string())?);
        }
        for (k, v) in flags {
            debug_assert!(allowed.contains(&k), "flag {k} not in key list");
            if let Some(v) = v {
                values.insert(k.to_owned(), v);
            }
        }
        values.extend(parse_config(&sets.join("\n"), allowed, "--set")?);
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn parse<V: FromStr>(&self, key: &str, default: V) -> Result<V, CliError>
    where
        V::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::BadInput(format!("bad value {v:?} for {key}: {e}"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }
}

/// A required input file: exit code 2 when absent.
pub fn existing(s: &Settings, key: &str) -> Result<PathBuf, CliError> {
    let p = s.path(key).ok_or_else(|| CliError::BadInput(format!("missing required setting {key}")))?;
    if !p.is_file() {
        return Err(CliError::Missing(format!("{key}: no such file {}", p.display())));
    }
    Ok(p)
}

/// An output path whose directory must exist.
pub fn writable(p: &Path) -> Result<(), CliError> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) if !dir.is_dir() => {
            Err(CliError::BadInput(format!("output directory {} does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

/// Prints the effective configuration, one `key=value` per line, so a run
/// can be repeated by saving this block as its config file.
pub fn print_header(command: &str, entries: &[(String, String)]) {
    println!("# cappa {command}: effective config");
    for (k, v) in entries {
        println!("{k}={v}");
    }
    println!("# end config");
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: [&str; 3] = ["a", "b", "c"];

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let kv = parse_config("# header\n\na = 1 # trailing\n b=x y \n", &KEYS, "f").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x y".into())]);
    }

    #[test]
    fn unknown_keys_and_bare_words_are_rejected() {
        let e = parse_config("a=1\nz=2\n", &KEYS, "f").unwrap_err();
        assert!(matches!(&e, CliError::BadInput(m) if m.contains("f:2") && m.contains("\"z\"")), "{e:?}");
        assert!(matches!(parse_config("a\n", &KEYS, "f"), Err(CliError::BadInput(_))));
    }

    #[test]
    fn flags_override_config_and_set_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "a=file\nb=file\nc=file\n").unwrap();
        let s = Settings::load(
            &KEYS,
            Some(&cfg),
            vec![("b", Some("flag".into())), ("c", Some("flag".into())), ("a", None)],
            &["c=set".into()],
        )
        .unwrap();
        assert_eq!((s.get("a"), s.get("b"), s.get("c")), (Some("file"), Some("flag"), Some("set")));
        assert!(s.parse("a", 0u32).is_err());
        assert_eq!(s.parse("missing", 7u32).unwrap(), 7);
    }

    #[test]
    fn missing_config_file_is_a_missing_artifact() {
        let r = Settings::load(&KEYS, Some(Path::new("/nonexistent/run.cfg")), vec![], &[]);
        assert!(matches!(r, Err(CliError::Missing(_))));
    }

    #[test]
    fn output_directory_must_exist() {
        assert!(writable(Path::new("out.bin")).is_ok());
        assert!(matches!(writable(Path::new("/nonexistent/dir/out.bin")), Err(CliError::BadInput(_))));
    }
}
