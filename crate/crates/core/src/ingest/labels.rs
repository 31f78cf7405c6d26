//! Tag → attack-class and class → role mapping tables.
//!
//! Both tables load from the same plain-text format: one `key=value` entry per
//! line, `#` starts a comment. Whether a line is a label or a role entry is
//! decided by its right-hand side.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::schema::SchemaName;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttackClass {
    Probe,
    DoS,
    U2R,
    R2L,
    Benign,
}

impl AttackClass {
    pub const ALL: [AttackClass; 5] = [
        AttackClass::Probe,
        AttackClass::DoS,
        AttackClass::U2R,
        AttackClass::R2L,
        AttackClass::Benign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackClass::Probe => "Probe",
            AttackClass::DoS => "DoS",
            AttackClass::U2R => "U2R",
            AttackClass::R2L => "R2L",
            AttackClass::Benign => "Benign",
        }
    }

    pub fn index(self) -> usize {
        AttackClass::ALL.iter().position(|&c| c == self).unwrap()
    }
}

impl fmt::Display for AttackClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown attack class {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    NormalUser,
    MaliciousUser,
    Intruder,
    PotentialIntruder,
    Excluded,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::NormalUser,
        Role::MaliciousUser,
        Role::Intruder,
        Role::PotentialIntruder,
        Role::Excluded,
    ];

    /// Roles a detector is trained to output.
    pub const DETECTED: [Role; 4] = [Role::NormalUser, Role::MaliciousUser, Role::Intruder, Role::PotentialIntruder];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::NormalUser => "NormalUser",
            Role::MaliciousUser => "MaliciousUser",
            Role::Intruder => "Intruder",
            Role::PotentialIntruder => "PotentialIntruder",
            Role::Excluded => "Excluded",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown role {s:?}")))
    }
}

/// Session label emitted by the behavior generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InsiderLabel {
    Normal,
    InsiderMalicious,
}

impl InsiderLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            InsiderLabel::Normal => "normal",
            InsiderLabel::InsiderMalicious => "insider-malicious",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagNormalization {
    /// Lowercase, strip one trailing '.'.
    KddFamily,
    /// Trim, unify dash variants, collapse inner whitespace.
    Exact,
}

impl TagNormalization {
    pub fn for_schema(schema: SchemaName) -> Self {
        if schema.is_kdd_family() {
            TagNormalization::KddFamily
        } else {
            TagNormalization::Exact
        }
    }

    pub fn apply(self, tag: &str) -> String {
        let t = tag.trim();
        match self {
            TagNormalization::KddFamily => {
                let t = t.strip_suffix('.').unwrap_or(t);
                t.to_lowercase()
            }
            TagNormalization::Exact => t
                .replace(['\u{2013}', '\u{2014}', '\u{FFFD}'], "-")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

/// Entries parsed from a mapping file, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapFile {
    pub labels: Vec<(String, AttackClass)>,
    pub roles: Vec<(String, Role)>,
}

impl MapFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = MapFile::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((lhs, rhs)) = line.rsplit_once('=') else {
                return Err(Error::Config(format!("mapping line {}: expected key=value", n + 1)));
            };
            let (key, value) = (lhs.trim(), rhs.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("mapping line {}: empty key", n + 1)));
            }
            if let Ok(role) = value.parse::<Role>() {
                out.roles.push((key.to_string(), role));
            } else if let Ok(class) = value.parse::<AttackClass>() {
                out.labels.push((key.to_string(), class));
            } else {
                return Err(Error::Config(format!(
                    "mapping line {}: {value:?} is neither an attack class nor a role",
                    n + 1
                )));
            }
        }
        Ok(out)
    }
}

const KDD99_MAP: &str = include_str!("../../maps/kdd99.map");
const NSLKDD_MAP: &str = include_str!("../../maps/nslkdd.map");
const CICIDS2017_MAP: &str = include_str!("../../maps/cicids2017.map");
const ROLES_MAP: &str = include_str!("../../maps/roles.map");

/// Shipped mapping text for a schema.
pub fn default_map_text(schema: SchemaName) -> &'static str {
    match schema {
        SchemaName::Kdd99 => KDD99_MAP,
        SchemaName::NslKdd => NSLKDD_MAP,
        SchemaName::Cicids2017 => CICIDS2017_MAP,
    }
}

pub fn default_role_map_text() -> &'static str {
    ROLES_MAP
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    entries: BTreeMap<String, AttackClass>,
    normalization: TagNormalization,
}

impl LabelMap {
    pub fn new(normalization: TagNormalization) -> Self {
        LabelMap {
            entries: BTreeMap::new(),
            normalization,
        }
    }

    pub fn default_for(schema: SchemaName) -> Self {
        let mut map = LabelMap::new(TagNormalization::for_schema(schema));
        let parsed = MapFile::parse(default_map_text(schema)).expect("shipped map parses");
        map.extend(&parsed.labels).expect("shipped map is consistent");
        map
    }

    /// Adds entries; a tag already mapped to a different class is an error
    /// unless `override_existing` is used.
    pub fn extend(&mut self, entries: &[(String, AttackClass)]) -> Result<()> {
        for (tag, class) in entries {
            let key = self.normalization.apply(tag);
            match self.entries.get(&key) {
                Some(existing) if existing != class => {
                    return Err(Error::Config(format!(
                        "tag {tag:?} maps to both {existing} and {class}"
                    )));
                }
                _ => {
                    self.entries.insert(key, *class);
                }
            }
        }
        Ok(())
    }

    /// Applies operator overrides on top of the current entries.
    pub fn override_with(&mut self, entries: &[(String, AttackClass)]) -> Result<()> {
        let mut seen: BTreeMap<String, AttackClass> = BTreeMap::new();
        for (tag, class) in entries {
            let key = self.normalization.apply(tag);
            if let Some(prev) = seen.insert(key.clone(), *class) {
                if prev != *class {
                    return Err(Error::Config(format!("override maps {tag:?} to both {prev} and {class}")));
                }
            }
            self.entries.insert(key, *class);
        }
        Ok(())
    }

    pub fn normalization(&self) -> TagNormalization {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tag: &str) -> Option<AttackClass> {
        self.entries.get(&self.normalization.apply(tag)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, AttackClass)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn to_map_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Maps a raw dataset tag to its attack class; unknown tags are an error.
pub fn map_label(tag: &str, map: &LabelMap) -> Result<AttackClass> {
    map.get(tag).ok_or_else(|| Error::UnknownTag(tag.to_string()))
}

/// Class (or insider session label) → role.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleMap {
    entries: BTreeMap<String, Role>,
}

impl Default for RoleMap {
    fn default() -> Self {
        let parsed = MapFile::parse(ROLES_MAP).expect("shipped role map parses");
        let mut map = RoleMap {
            entries: BTreeMap::new(),
        };
        map.override_with(&parsed.roles);
        map
    }
}

impl RoleMap {
    fn key(input: &str) -> String {
        input.trim().to_ascii_lowercase()
    }

    pub fn override_with(&mut self, entries: &[(String, Role)]) {
        for (k, r) in entries {
            self.entries.insert(Self::key(k), *r);
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Role)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn to_map_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn role_of_class(&self, class: AttackClass) -> Result<Role> {
        map_role(class.as_str(), self)
    }

    /// Role for a flow class seen together with a behavior session.
    ///
    /// An insider-malicious session turns a benign flow into a malicious user;
    /// attack flows keep the role of their class.
    pub fn role_of_pair(&self, class: AttackClass, insider: InsiderLabel) -> Result<Role> {
        if class == AttackClass::Benign && insider == InsiderLabel::InsiderMalicious {
            map_role(InsiderLabel::InsiderMalicious.as_str(), self)
        } else {
            self.role_of_class(class)
        }
    }
}

pub fn map_role(input: &str, map: &RoleMap) -> Result<Role> {
    map.entries
        .get(&RoleMap::key(input))
        .copied()
        .ok_or_else(|| Error::UnmappedRole(input.to_string()))
}
