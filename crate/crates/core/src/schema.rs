use std::fmt;
use std::str::FromStr;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub cardinality: usize,
}

/// Ordered attribute categories and the number of values each can take.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        for (i, a) in attributes.iter().enumerate() {
            if a.cardinality < 2 {
                return Err(CoreError::contract(format!("attribute {} needs at least 2 values", a.name)));
            }
            if a.name.is_empty() || a.name.contains([',', ':', ' ', '\t', '\n']) {
                return Err(CoreError::contract(format!("invalid attribute name {:?}", a.name)));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(CoreError::contract(format!("duplicate attribute name {}", a.name)));
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn from_pairs(pairs: &[(&str, usize)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(n, c)| Attribute { name: n.to_string(), cardinality: c }).collect())
    }

    /// Four attributes: colour (4), pattern (3), shape (3), collar (2).
    pub fn desk_default() -> Self {
        Self::from_pairs(&[("color", 4), ("pattern", 3), ("shape", 3), ("collar", 2)]).expect("valid default schema")
    }

    pub fn n_attr(&self) -> usize {
        self.attributes.len()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.attributes[i].cardinality
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.cardinality).collect()
    }

    pub fn total_values(&self) -> usize {
        self.attributes.iter().map(|a| a.cardinality).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }
}

/// `name:card,name:card,...`
impl fmt::Display for AttributeSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.attributes.iter().map(|a| format!("{}:{}", a.name, a.cardinality)).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for AttributeSchema {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let mut attrs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, card) = part
                .split_once(':')
                .ok_or_else(|| CoreError::format("schema", format!("expected name:cardinality, got {part:?}")))?;
            let cardinality = card
                .trim()
                .parse()
                .map_err(|_| CoreError::format("schema", format!("bad cardinality in {part:?}")))?;
            attrs.push(Attribute { name: name.trim().to_string(), cardinality });
        }
        Self::new(attrs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parse_round_trip() {
        let s = AttributeSchema::desk_default();
        assert_eq!(s.to_string(), "color:4,pattern:3,shape:3,collar:2");
        assert_eq!(s.to_string().parse::<AttributeSchema>().unwrap(), s);
    }

    #[test]
    fn rejects_duplicates_and_unary() {
        assert!(AttributeSchema::from_pairs(&[("a", 2), ("a", 3)]).is_err());
        assert!(AttributeSchema::from_pairs(&[("a", 1)]).is_err());
    }
}
