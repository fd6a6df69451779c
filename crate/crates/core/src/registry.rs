//! Name-keyed registry of interchangeable strategy objects.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, entries: BTreeMap::new() }
    }

    /// Adds an entry; a second registration under the same name is a usage error.
    pub fn register(&mut self, name: &'static str, item: Arc<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::usage(format!("{} `{name}` registered twice", self.kind)));
        }
        self.entries.insert(name, item);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::config(format!("unknown {} `{name}` (available: {})", self.kind, self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Speak {
        fn word(&self) -> &'static str;
    }

    struct Dog;

    impl Speak for Dog {
        fn word(&self) -> &'static str {
            "woof"
        }
    }

    #[test]
    fn lookup_and_errors() {
        let mut r: Registry<dyn Speak> = Registry::new("animal");
        r.register("dog", Arc::new(Dog)).unwrap();
        assert_eq!(r.get("dog").unwrap().word(), "woof");
        assert!(matches!(r.get("cat"), Err(Error::Config(m)) if m.contains("dog")));
        assert!(matches!(r.register("dog", Arc::new(Dog)), Err(Error::Usage(_))));
        assert_eq!(r.names(), vec!["dog"]);
    }
}
