//! Name-keyed factories for interchangeable strategies.
//!
//! Each strategy family (schedulers, optimizers, augmentations, stage
//! objectives) exposes a `registry()` pre-populated with the built-in
//! variants. Configs select a variant by name; callers may register more.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<C, S> = Box<dyn Fn(&C) -> Result<Box<S>> + Send + Sync>;

pub struct Registry<C: ?Sized, S: ?Sized> {
    family: &'static str,
    entries: BTreeMap<String, Factory<C, S>>,
}

impl<C: ?Sized, S: ?Sized> Registry<C, S> {
    pub fn new(family: &'static str) -> Self {
        Registry {
            family,
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces the factory registered under `name`.
    pub fn register<F>(&mut self, name: impl Into<String>, factory: F) -> &mut Self
    where
        F: Fn(&C) -> Result<Box<S>> + Send + Sync + 'static,
    {
        self.entries.insert(name.into(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, config: &C) -> Result<Box<S>> {
        match self.entries.get(name) {
            Some(f) => f(config),
            None => Err(Error::UnknownStrategy {
                family: self.family,
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            }),
        }
    }
}

impl<C: ?Sized, S: ?Sized> std::fmt::Debug for Registry<C, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("entries", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}
