// SPDX-License-Identifier: Apache-2.0

//! Class schema: disjoint base and novel classes with a contiguous id space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    /// Raw id written to label files for this class.
    pub raw_id: u16,
}

/// Contiguous ids are `0..base.len()` for base classes followed by the novel classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSchema {
    pub base: Vec<ClassDef>,
    pub novel: Vec<ClassDef>,
    /// Additional raw ids folded onto a contiguous id (e.g. several raw car ids).
    #[serde(default)]
    pub aliases: BTreeMap<u16, u32>,
    /// Contiguous id assigned to raw ids that map to nothing.
    pub background: u32,
}

impl ClassSchema {
    pub fn new(base: Vec<ClassDef>, novel: Vec<ClassDef>, background: u32) -> Result<Self> {
        let schema = ClassSchema {
            base,
            novel,
            aliases: BTreeMap::new(),
            background,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Ground, vehicle and structure as base classes, weather noise as the only novel
    /// class. Unknown raw ids collapse onto ground.
    pub fn default_weather() -> Self {
        let def = |name: &str, raw_id| ClassDef {
            name: name.to_string(),
            raw_id,
        };
        ClassSchema::new(
            vec![def("ground", 40), def("vehicle", 10), def("structure", 50)],
            vec![def("weather-noise", 110)],
            0,
        )
        .expect("default schema is valid")
    }

    /// Schema whose raw ids equal the contiguous ids; convenient for tests.
    pub fn identity(n_base: usize, n_novel: usize) -> Self {
        let def = |i: usize, prefix: &str| ClassDef {
            name: format!("{prefix}{i}"),
            raw_id: i as u16,
        };
        ClassSchema::new(
            (0..n_base).map(|i| def(i, "base")).collect(),
            (n_base..n_base + n_novel).map(|i| def(i, "novel")).collect(),
            0,
        )
        .expect("identity schema is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::arg("schema needs at least one base class"));
        }
        let mut seen_raw = BTreeMap::new();
        let mut seen_name = BTreeMap::new();
        for (id, c) in self.classes().enumerate() {
            if seen_raw.insert(c.raw_id, id).is_some() {
                return Err(Error::arg(format!("raw id {} used twice", c.raw_id)));
            }
            if seen_name.insert(c.name.as_str(), id).is_some() {
                return Err(Error::arg(format!(
                    "class {:?} is both base and novel (or repeated)",
                    c.name
                )));
            }
        }
        for (&raw, &id) in &self.aliases {
            if id as usize >= self.num_classes() {
                return Err(Error::arg(format!("alias {raw} -> {id} out of range")));
            }
            if seen_raw.contains_key(&raw) {
                return Err(Error::arg(format!("alias {raw} shadows a class raw id")));
            }
        }
        if self.background as usize >= self.num_classes() {
            return Err(Error::arg("background id out of range"));
        }
        Ok(())
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassDef> {
        self.base.iter().chain(self.novel.iter())
    }

    pub fn num_classes(&self) -> usize {
        self.base.len() + self.novel.len()
    }

    pub fn num_base(&self) -> usize {
        self.base.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel.len()
    }

    pub fn base_ids(&self) -> Vec<usize> {
        (0..self.base.len()).collect()
    }

    pub fn novel_ids(&self) -> Vec<usize> {
        (self.base.len()..self.num_classes()).collect()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.num_classes()).collect()
    }

    pub fn is_novel(&self, id: u32) -> bool {
        (id as usize) >= self.base.len() && (id as usize) < self.num_classes()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.classes().nth(id as usize).map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.classes().position(|c| c.name == name).map(|i| i as u32)
    }

    /// Map a raw semantic id onto the contiguous id space. Total.
    pub fn map_raw(&self, raw: u16) -> u32 {
        if let Some(pos) = self.classes().position(|c| c.raw_id == raw) {
            return pos as u32;
        }
        self.aliases.get(&raw).copied().unwrap_or(self.background)
    }

    /// Raw id written to label files for a contiguous id.
    pub fn raw_of(&self, id: u32) -> Option<u16> {
        self.classes().nth(id as usize).map(|c| c.raw_id)
    }
}
