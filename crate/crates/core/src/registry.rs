//! Name-keyed registries of interchangeable strategies.

use std::collections::BTreeMap;

pub trait Named {
    fn name(&self) -> &'static str;
}

/// Strategies of one family, looked up by their registered name.
pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Box<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, strategy: Box<T>) {
        let name = strategy.name();
        let prev = self.entries.insert(name, strategy);
        assert!(prev.is_none(), "duplicate {} strategy {name}", self.kind);
    }

    pub fn get(&self, name: &str) -> crate::Result<&T> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            crate::MagmaError::Config(format!(
                "unknown {} '{name}' (available: {})",
                self.kind,
                self.names().join(", ")
            ))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
