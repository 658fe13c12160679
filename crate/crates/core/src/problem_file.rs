//! Sectioned plain-text problem files.
//!
//! ```text
//! # comment
//! [meta]
//! m = 1
//! [controls]
//! -1
//! 1
//! ```
//!
//! Sections hold either `key = value` entries or bare lines (vector lists).
//! Both are kept with their 1-based line numbers for diagnostics.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FileError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing section [{0}]")]
    MissingSection(String),
    #[error("[{section}]: missing key `{key}`")]
    MissingKey { section: String, key: String },
    #[error("[{section}] line {line}: {message}")]
    Value {
        section: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub number: usize,
    pub key: Option<String>,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub lines: Vec<Line>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Line> {
        self.lines.iter().find(|l| l.key.as_deref() == Some(key))
    }

    pub fn require(&self, key: &str) -> Result<&Line, FileError> {
        self.get(key).ok_or_else(|| FileError::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn real(&self, key: &str) -> Result<f64, FileError> {
        let line = self.require(key)?;
        self.parse_real(line)
    }

    pub fn real_or(&self, key: &str, default: f64) -> Result<f64, FileError> {
        match self.get(key) {
            Some(line) => self.parse_real(line),
            None => Ok(default),
        }
    }

    pub fn count(&self, key: &str) -> Result<usize, FileError> {
        let line = self.require(key)?;
        self.parse_count(line)
    }

    pub fn count_or(&self, key: &str, default: usize) -> Result<usize, FileError> {
        match self.get(key) {
            Some(line) => self.parse_count(line),
            None => Ok(default),
        }
    }

    fn parse_real(&self, line: &Line) -> Result<f64, FileError> {
        line.value
            .trim()
            .parse::<f64>()
            .map_err(|_| self.error(line, "expected a real number"))
    }

    fn parse_count(&self, line: &Line) -> Result<usize, FileError> {
        line.value
            .trim()
            .parse::<usize>()
            .map_err(|_| self.error(line, "expected a non-negative integer"))
    }

    pub fn error(&self, line: &Line, message: impl Into<String>) -> FileError {
        FileError::Value {
            section: self.name.clone(),
            line: line.number,
            message: message.into(),
        }
    }

    /// Bare lines parsed as real vectors (whitespace or comma separated).
    pub fn vectors(&self) -> Result<Vec<Vec<f64>>, FileError> {
        self.lines
            .iter()
            .map(|line| {
                if line.key.is_some() {
                    return Err(self.error(line, "expected a vector, found `key = value`"));
                }
                parse_reals(&line.value).ok_or_else(|| self.error(line, "malformed vector"))
            })
            .collect()
    }
}

pub fn parse_reals(text: &str) -> Option<Vec<f64>> {
    let out: Option<Vec<f64>> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().ok())
        .collect();
    out.filter(|v| !v.is_empty())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemFile {
    sections: BTreeMap<String, Section>,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, FileError> {
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let number = idx + 1;
            let content = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| FileError::Syntax {
                    line: number,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim().to_string();
                if name.is_empty() {
                    return Err(FileError::Syntax {
                        line: number,
                        message: "empty section name".into(),
                    });
                }
                if sections.contains_key(&name) {
                    return Err(FileError::Syntax {
                        line: number,
                        message: format!("duplicate section [{name}]"),
                    });
                }
                sections.insert(
                    name.clone(),
                    Section {
                        name: name.clone(),
                        lines: Vec::new(),
                    },
                );
                current = Some(name);
                continue;
            }
            let section = current
                .as_ref()
                .and_then(|n| sections.get_mut(n))
                .ok_or_else(|| FileError::Syntax {
                    line: number,
                    message: "content before the first section header".into(),
                })?;
            let line = match content.split_once('=') {
                Some((k, v)) => {
                    let key = k.trim().to_string();
                    if key.is_empty() {
                        return Err(FileError::Syntax {
                            line: number,
                            message: "empty key".into(),
                        });
                    }
                    if section.get(&key).is_some() {
                        return Err(FileError::Syntax {
                            line: number,
                            message: format!("duplicate key `{key}`"),
                        });
                    }
                    Line {
                        number,
                        key: Some(key),
                        value: v.trim().to_string(),
                    }
                }
                None => Line {
                    number,
                    key: None,
                    value: content.to_string(),
                },
            };
            section.lines.push(line);
        }
        Ok(ProblemFile { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Section, FileError> {
        self.section(name)
            .ok_or_else(|| FileError::MissingSection(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_keys_and_lists() {
        let f =
            ProblemFile::parse("# header\n[meta]\nm = 1 # dim\nT=2.5\n\n[controls]\n-1\n1, 2\n")
                .unwrap();
        let meta = f.require("meta").unwrap();
        assert_eq!(meta.count("m").unwrap(), 1);
        assert_eq!(meta.real("T").unwrap(), 2.5);
        assert_eq!(meta.real_or("t0", 0.0).unwrap(), 0.0);
        let v = f.require("controls").unwrap().vectors().unwrap();
        assert_eq!(v, vec![vec![-1.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            ProblemFile::parse("m = 1"),
            Err(FileError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ProblemFile::parse("[meta\n"),
            Err(FileError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ProblemFile::parse("[a]\n[a]\n"),
            Err(FileError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            ProblemFile::parse("[a]\nk=1\nk=2\n"),
            Err(FileError::Syntax { line: 3, .. })
        ));
        let f = ProblemFile::parse("[meta]\nm = one\n").unwrap();
        assert!(matches!(
            f.require("meta").unwrap().count("m"),
            Err(FileError::Value { line: 2, .. })
        ));
        assert!(matches!(
            f.require("grid"),
            Err(FileError::MissingSection(_))
        ));
    }
}
