//! Line-based `key = value` files with optional `[section]` headers.
//!
//! `#` starts a comment anywhere on a line. Keys before the first header
//! belong to the unnamed section `""`. Duplicate keys within a section and
//! duplicate section headers are errors. Every error message names the file
//! and line.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigFile {
    pub path: PathBuf,
    pub sections: Vec<Section>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut sections = vec![Section::default()];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty() && !n.contains(['[', ']']))
                    .ok_or_else(|| at(&path, line, format!("malformed section header {raw:?}")))?;
                if sections.iter().any(|s| s.name == name) {
                    return Err(at(&path, line, format!("duplicate section [{name}]")));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, _)| !k.is_empty() && !k.contains(char::is_whitespace))
                .ok_or_else(|| at(&path, line, format!("expected `key = value`, got {raw:?}")))?;
            let section = sections.last_mut().expect("unnamed section exists");
            if section.entries.iter().any(|e| e.key == key) {
                return Err(at(&path, line, format!("duplicate key {key:?}")));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(Self { path, sections })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Rejects sections outside `allowed` and any stray top-level keys.
    pub fn expect_sections(&self, allowed: &[&str]) -> Result<()> {
        for s in &self.sections {
            if s.name.is_empty() {
                if let Some(e) = s.entries.first() {
                    return Err(at(&self.path, e.line, format!("key {:?} outside any section", e.key)));
                }
            } else if !allowed.contains(&s.name.as_str()) {
                return Err(at(&self.path, s.line, format!("unknown section [{}]", s.name)));
            }
        }
        Ok(())
    }

    /// Reader over one section; a missing section reads as empty.
    pub fn reader(&self, name: &str) -> Reader<'_> {
        static EMPTY: Section = Section {
            name: String::new(),
            line: 0,
            entries: Vec::new(),
        };
        Reader {
            path: &self.path,
            section: self.section(name).unwrap_or(&EMPTY),
            used: BTreeSet::new(),
        }
    }
}

/// Typed access to a section that remembers which keys were consumed.
pub struct Reader<'a> {
    path: &'a Path,
    section: &'a Section,
    used: BTreeSet<&'a str>,
}

impl<'a> Reader<'a> {
    pub fn raw(&mut self, key: &str) -> Option<&'a Entry> {
        let e = self.section.entries.iter().find(|e| e.key == key)?;
        self.used.insert(&e.key);
        Some(e)
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let path = self.path;
        self.raw(key)
            .map(|e| {
                e.value
                    .parse::<T>()
                    .map_err(|err| at(path, e.line, format!("{key}: {err}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| {
            Error::Config(format!(
                "{}: missing key {key:?} in [{}]",
                self.path.display(),
                self.section.name
            ))
        })
    }

    /// Parses with a custom function; its error text is prefixed with the line.
    pub fn get_with<T>(&mut self, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
        let path = self.path;
        self.raw(key)
            .map(|e| {
                f(&e.value).map_err(|err| at(path, e.line, format!("{key}: {}", strip_kind(&err))))
            })
            .transpose()
    }

    /// Keys in the section that were never read.
    pub fn finish(self) -> Result<()> {
        match self
            .section
            .entries
            .iter()
            .find(|e| !self.used.contains(e.key.as_str()))
        {
            Some(e) => Err(at(
                self.path,
                e.line,
                format!("unknown key {:?} in [{}]", e.key, self.section.name),
            )),
            None => Ok(()),
        }
    }

    pub fn error(&self, msg: impl Display) -> Error {
        Error::Config(format!("{}: [{}] {msg}", self.path.display(), self.section.name))
    }
}

fn at(path: &Path, line: usize, msg: String) -> Error {
    Error::Config(format!("{}:{line}: {msg}", path.display()))
}

fn strip_kind(err: &Error) -> String {
    match err {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Comma-separated list, whitespace-tolerant.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| Error::Config(format!("{p:?}: {e}"))))
        .collect()
}

/// `a,b,c` as three extents.
pub fn parse_triple(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = parse_list(s)?;
    <[usize; 3]>::try_from(v).map_err(|_| Error::Config(format!("expected three integers, got {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "top = 1\n\n[data]\n# c\nframes = 16 # trailing\nname=a b\n[train]\nlr = 1e-3\n";
        let cfg = ConfigFile::parse(text, "x.cfg").unwrap();
        assert_eq!(cfg.sections.len(), 3);
        let mut r = cfg.reader("data");
        assert_eq!(r.get::<usize>("frames").unwrap(), Some(16));
        assert_eq!(r.get::<String>("name").unwrap().as_deref(), Some("a b"));
        r.finish().unwrap();
        let mut r = cfg.reader("train");
        assert_eq!(r.require::<f64>("lr").unwrap(), 1e-3);
        assert!(cfg.expect_sections(&["data", "train"]).is_err());
    }

    #[test]
    fn errors_name_the_line() {
        let err = ConfigFile::parse("[a]\nx = 1\nnot a pair\n", "r.cfg").unwrap_err();
        assert!(err.to_string().contains("r.cfg:3"), "{err}");
        let err = ConfigFile::parse("[a]\nx = 1\nx = 2\n", "r.cfg").unwrap_err();
        assert!(err.to_string().contains(":3"));
        let cfg = ConfigFile::parse("[a]\nx = 1\ny = oops\n", "r.cfg").unwrap();
        let mut r = cfg.reader("a");
        r.get::<u32>("x").unwrap();
        assert!(r.get::<u32>("y").unwrap_err().to_string().contains(":3"));
        let mut r = cfg.reader("a");
        r.get::<u32>("x").unwrap();
        assert!(r.finish().unwrap_err().to_string().contains("unknown key \"y\""));
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<u32>("8, 16,32").unwrap(), vec![8, 16, 32]);
        assert_eq!(parse_triple("4,2,2").unwrap(), [4, 2, 2]);
        assert!(parse_triple("4,2").is_err());
    }
}
