//! Flat sectioned key-value configuration:
//!
//! ```text
//! # comment
//! [model]
//! preset = low_integrability
//! rho = -0.75
//! [plan]
//! n_grid = 2048, 4096, 8192
//! ```
//!
//! Values from command-line flags override values from the file. Every key is
//! consumed by a typed getter during resolution; whatever is left over is
//! reported as unknown.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag(String),
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag(name) => write!(f, "flag --{name}"),
            Origin::Default => write!(f, "default"),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

const SECTIONS: [&str; 3] = ["run", "model", "plan"];

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {line_no}: unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    bail!("line {line_no}: unknown section [{name}]; expected one of {SECTIONS:?}");
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected 'key = value', got '{line}'"))?;
            let key = key.trim();
            if key.is_empty() {
                bail!("line {line_no}: empty key");
            }
            let sec = section
                .clone()
                .ok_or_else(|| anyhow!("line {line_no}: key '{key}' appears before any section"))?;
            let map = cfg.sections.entry(sec.clone()).or_default();
            if let Some(prev) = map.get(key) {
                bail!("line {line_no}: duplicate key '{key}' in [{sec}], first set at {}", prev.origin);
            }
            map.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    origin: Origin::Line(line_no),
                },
            );
        }
        Ok(cfg)
    }

    pub fn set_flag(&mut self, section: &str, key: &str, flag: &str, value: impl ToString) {
        self.sections.entry(section.to_string()).or_default().insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                origin: Origin::Flag(flag.to_string()),
            },
        );
    }

    pub fn from_resolved(resolved: &BTreeMap<String, BTreeMap<String, String>>) -> Self {
        let mut cfg = RawConfig::default();
        for (sec, keys) in resolved {
            for (k, v) in keys {
                cfg.sections.entry(sec.clone()).or_default().insert(
                    k.clone(),
                    Entry {
                        value: v.clone(),
                        origin: Origin::Default,
                    },
                );
            }
        }
        cfg
    }
}

/// Typed access to a [`RawConfig`] that records consumed keys and the values
/// finally used, defaults included.
pub struct Resolver {
    raw: RawConfig,
    used: RefCell<BTreeSet<(String, String)>>,
    resolved: RefCell<BTreeMap<String, BTreeMap<String, String>>>,
}

impl Resolver {
    pub fn new(raw: RawConfig) -> Self {
        Resolver {
            raw,
            used: RefCell::default(),
            resolved: RefCell::default(),
        }
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.used
            .borrow_mut()
            .insert((section.to_string(), key.to_string()));
        self.raw.sections.get(section).and_then(|m| m.get(key))
    }

    fn record(&self, section: &str, key: &str, value: String) {
        self.resolved
            .borrow_mut()
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value);
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.raw.sections.get(section).is_some_and(|m| m.contains_key(key))
    }

    pub fn origin(&self, section: &str, key: &str) -> Origin {
        self.raw
            .sections
            .get(section)
            .and_then(|m| m.get(key))
            .map_or(Origin::Default, |e| e.origin.clone())
    }

    fn parse_one<T: FromStr>(&self, section: &str, key: &str, e: &Entry) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        e.value.parse::<T>().map_err(|err| {
            anyhow!(
                "{}: [{section}] {key} = '{}': {err}",
                e.origin,
                e.value
            )
        })
    }

    pub fn opt<T: FromStr + fmt::Display>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entry(section, key) {
            Some(e) => {
                let v: T = self.parse_one(section, key, e)?;
                self.record(section, key, v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr + fmt::Display>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = match self.entry(section, key) {
            Some(e) => self.parse_one(section, key, e)?,
            None => default,
        };
        self.record(section, key, v.to_string());
        Ok(v)
    }

    pub fn list<T: FromStr + fmt::Display + Clone>(
        &self,
        section: &str,
        key: &str,
        default: &[T],
    ) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let v = match self.entry(section, key) {
            Some(e) => {
                let items: Vec<T> = e
                    .value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>().map_err(|err| {
                            anyhow!("{}: [{section}] {key}: bad item '{s}': {err}", e.origin)
                        })
                    })
                    .collect::<Result<_>>()?;
                if items.is_empty() {
                    bail!("{}: [{section}] {key} is an empty list", e.origin);
                }
                items
            }
            None => default.to_vec(),
        };
        let joined = v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        self.record(section, key, joined);
        Ok(v)
    }

    /// Fails on any key that no getter asked for.
    pub fn finish(self) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
        let used = self.used.borrow();
        let mut unknown = Vec::new();
        for (sec, keys) in &self.raw.sections {
            for (k, e) in keys {
                if !used.contains(&(sec.clone(), k.clone())) {
                    unknown.push(format!("{}: unknown key '{k}' in [{sec}]", e.origin));
                }
            }
        }
        if !unknown.is_empty() {
            bail!("{}", unknown.join("\n"));
        }
        drop(used);
        Ok(self.resolved.into_inner())
    }
}

/// Renders resolved values back into the config text format.
pub fn render(resolved: &BTreeMap<String, BTreeMap<String, String>>) -> String {
    let mut out = String::new();
    for sec in SECTIONS {
        if let Some(keys) = resolved.get(sec) {
            out.push_str(&format!("[{sec}]\n"));
            for (k, v) in keys {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = RawConfig::parse("# hi\n[model]\npreset = weak_arctan\n\n[plan]\nn_grid = 1, 2,4\n").unwrap();
        let r = Resolver::new(cfg);
        assert_eq!(r.get::<String>("model", "preset", "x".into()).unwrap(), "weak_arctan");
        assert_eq!(r.list::<usize>("plan", "n_grid", &[]).unwrap(), vec![1, 2, 4]);
        r.finish().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RawConfig::parse("[model]\npreset weak\n").unwrap_err();
        assert!(e.to_string().starts_with("line 2:"), "{e}");
        let e = RawConfig::parse("[bogus]\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
        let e = RawConfig::parse("a = 1\n").unwrap_err();
        assert!(e.to_string().contains("before any section"), "{e}");
        let cfg = RawConfig::parse("[plan]\n\nn_max = lots\n").unwrap();
        let e = Resolver::new(cfg).get::<usize>("plan", "n_max", 1).unwrap_err();
        assert!(e.to_string().starts_with("line 3:"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let cfg = RawConfig::parse("[plan]\nn_max = 4\nfoo = 1\n").unwrap();
        let r = Resolver::new(cfg);
        r.get::<usize>("plan", "n_max", 1).unwrap();
        let e = r.finish().unwrap_err().to_string();
        assert!(e.contains("line 3: unknown key 'foo' in [plan]"), "{e}");
    }

    #[test]
    fn flags_override_and_render_round_trips() {
        let mut cfg = RawConfig::parse("[run]\nseed = 1\n").unwrap();
        cfg.set_flag("run", "seed", "seed", 9);
        let r = Resolver::new(cfg);
        assert_eq!(r.get::<u64>("run", "seed", 0).unwrap(), 9);
        assert_eq!(r.origin("run", "seed"), Origin::Flag("seed".into()));
        r.get::<f64>("plan", "eps", 0.5).unwrap();
        let resolved = r.finish().unwrap();
        let text = render(&resolved);
        assert_eq!(text, "[run]\nseed = 9\n[plan]\neps = 0.5\n");
        let again = Resolver::new(RawConfig::parse(&text).unwrap());
        assert_eq!(again.get::<u64>("run", "seed", 0).unwrap(), 9);
    }
}
