//! Name tables for the pluggable components.

use crate::config::{DatasetName, MethodName, ModelName};
use crate::error::{Error, Result};
use crate::evaluation::{MetricClass, METRICS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    Datasets,
    Methods,
    Models,
    Metrics,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Datasets, Category::Methods, Category::Models, Category::Metrics];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Datasets => "datasets",
            Category::Methods => "methods",
            Category::Models => "models",
            Category::Metrics => "metrics",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| Error::UnknownName {
            category: "category".into(),
            name: s.into(),
            available: Self::ALL.iter().map(|c| c.as_str().to_string()).collect(),
        })
    }
}

/// What a registered name resolves to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factory {
    Dataset(DatasetName),
    Method(MethodName),
    Model(ModelName),
    Metric(&'static MetricClass),
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: Vec<(Category, &'static str, Factory)>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::standard()
    }
}

impl Registry {
    /// Every built-in component.
    pub fn standard() -> Self {
        let mut entries = Vec::new();
        entries.extend(DatasetName::ALL.iter().map(|&d| (Category::Datasets, d.as_str(), Factory::Dataset(d))));
        entries.extend(MethodName::ALL.iter().map(|&m| (Category::Methods, m.as_str(), Factory::Method(m))));
        entries.extend(ModelName::ALL.iter().map(|&m| (Category::Models, m.as_str(), Factory::Model(m))));
        entries.extend(METRICS.iter().map(|m| (Category::Metrics, m.name, Factory::Metric(m))));
        Self { entries }
    }

    /// Adds an entry; names must be unique within a category.
    pub fn register(&mut self, category: Category, name: &'static str, factory: Factory) -> Result<()> {
        if self.entries.iter().any(|(c, n, _)| *c == category && *n == name) {
            return Err(Error::config(category.as_str(), format!("`{name}` is already registered")));
        }
        self.entries.push((category, name, factory));
        Ok(())
    }

    pub fn names(&self, category: Category) -> Vec<&'static str> {
        self.entries.iter().filter(|(c, _, _)| *c == category).map(|&(_, n, _)| n).collect()
    }

    pub fn resolve(&self, category: Category, name: &str) -> Result<Factory> {
        self.entries
            .iter()
            .find(|(c, n, _)| *c == category && *n == name)
            .map(|&(_, _, f)| f)
            .ok_or_else(|| Error::UnknownName {
                category: category.as_str().into(),
                name: name.into(),
                available: self.names(category).into_iter().map(String::from).collect(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_per_category() {
        let r = Registry::standard();
        for c in Category::ALL {
            let mut names = r.names(c);
            let n = names.len();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), n, "{}", c.as_str());
        }
        let mut r = r;
        assert!(r.register(Category::Methods, "erm", Factory::Method(MethodName::Erm)).is_err());
    }
}
