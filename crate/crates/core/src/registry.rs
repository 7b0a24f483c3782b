//! Tissue-class catalogue and the one-hot class encoding fed to the controller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel pitch of a native 40x scan.
pub const NATIVE_MICRONS_PER_PIXEL: f64 = 0.25;

/// Default class order. Ids are assigned 1..=6 in this order, which is also the
/// column order of the evaluation tables.
pub const DEFAULT_CLASS_NAMES: [&str; 6] = ["DT", "PT", "CAP", "TUFT", "VES", "PTC"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueClass {
    pub id: usize,
    pub name: String,
    pub downsample_factor: usize,
    pub microns_per_pixel: f64,
}

/// One entry of the `classes` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub id: usize,
    #[serde(default = "default_downsample")]
    pub downsample_factor: usize,
}

fn default_downsample() -> usize {
    1
}

/// One-hot encoding of a class id. Index `class_id - 1` holds the 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVector {
    pub values: Vec<f64>,
    pub class_id: usize,
}

impl ClassVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn encode_class(class_id: usize, num_classes: usize) -> Result<ClassVector> {
    if class_id == 0 || class_id > num_classes {
        return Err(Error::InvalidClass {
            class_id,
            num_classes,
        });
    }
    let mut values = vec![0.0; num_classes];
    values[class_id - 1] = 1.0;
    Ok(ClassVector { values, class_id })
}

/// Immutable, ordered set of tissue classes with ids `1..=m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    classes: Vec<TissueClass>,
}

impl Registry {
    pub fn new(entries: &[ClassEntry]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("registry needs at least one class".into()));
        }
        let mut sorted: Vec<&ClassEntry> = entries.iter().collect();
        sorted.sort_by_key(|e| e.id);
        let mut classes = Vec::with_capacity(sorted.len());
        for (idx, entry) in sorted.iter().enumerate() {
            if entry.id != idx + 1 {
                return Err(Error::Config(format!(
                    "class ids must be unique and contiguous from 1; found id {} at position {}",
                    entry.id,
                    idx + 1
                )));
            }
            if entry.downsample_factor == 0 {
                return Err(Error::Config(format!(
                    "class {} has downsample_factor 0",
                    entry.name
                )));
            }
            let name = normalize(&entry.name);
            if name.is_empty() {
                return Err(Error::Config(format!("class {} has an empty name", entry.id)));
            }
            if classes.iter().any(|c: &TissueClass| c.name == name) {
                return Err(Error::Config(format!("duplicate class name {name}")));
            }
            classes.push(TissueClass {
                id: entry.id,
                name,
                downsample_factor: entry.downsample_factor,
                microns_per_pixel: NATIVE_MICRONS_PER_PIXEL * entry.downsample_factor as f64,
            });
        }
        Ok(Registry { classes })
    }

    pub fn default_entries() -> Vec<ClassEntry> {
        DEFAULT_CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| ClassEntry {
                name: (*name).to_string(),
                id: i + 1,
                downsample_factor: 1,
            })
            .collect()
    }

    /// The six renal classes at native magnification.
    pub fn renal_default() -> Self {
        Self::new(&Self::default_entries()).expect("default registry is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[TissueClass] {
        &self.classes
    }

    pub fn get(&self, class_id: usize) -> Result<&TissueClass> {
        class_id
            .checked_sub(1)
            .and_then(|i| self.classes.get(i))
            .ok_or(Error::InvalidClass {
                class_id,
                num_classes: self.classes.len(),
            })
    }

    /// Case-insensitive lookup after trimming whitespace.
    pub fn lookup(&self, name: &str) -> Result<&TissueClass> {
        let key = normalize(name);
        self.classes
            .iter()
            .find(|c| c.name == key)
            .ok_or_else(|| Error::UnknownTissue(name.to_string()))
    }

    pub fn encode(&self, class_id: usize) -> Result<ClassVector> {
        encode_class(class_id, self.num_classes())
    }

    pub fn entries(&self) -> Vec<ClassEntry> {
        self.classes
            .iter()
            .map(|c| ClassEntry {
                name: c.name.clone(),
                id: c.id,
                downsample_factor: c.downsample_factor,
            })
            .collect()
    }
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_uppercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_first_and_last() {
        assert_eq!(encode_class(1, 6).unwrap().values, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode_class(6, 6).unwrap().values, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_out_of_range() {
        assert!(matches!(
            encode_class(7, 6),
            Err(Error::InvalidClass { class_id: 7, num_classes: 6 })
        ));
        assert!(encode_class(0, 6).is_err());
    }

    #[test]
    fn lookup_by_name() {
        let reg = Registry::renal_default();
        assert_eq!(reg.lookup("PTC").unwrap().id, 6);
        assert_eq!(reg.lookup(" tuft ").unwrap().name, "TUFT");
        assert!(matches!(reg.lookup("XYZ"), Err(Error::UnknownTissue(_))));
    }

    #[test]
    fn default_order_and_pitch() {
        let reg = Registry::renal_default();
        let names: Vec<_> = reg.classes().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, DEFAULT_CLASS_NAMES);
        assert!(reg.classes().iter().all(|c| c.microns_per_pixel == 0.25));
    }

    #[test]
    fn downsample_scales_pitch() {
        let reg = Registry::new(&[
            ClassEntry { name: "a".into(), id: 1, downsample_factor: 4 },
            ClassEntry { name: "b".into(), id: 2, downsample_factor: 1 },
        ])
        .unwrap();
        assert_eq!(reg.get(1).unwrap().microns_per_pixel, 1.0);
    }

    #[test]
    fn rejects_gaps_and_duplicates() {
        let gap = [
            ClassEntry { name: "a".into(), id: 1, downsample_factor: 1 },
            ClassEntry { name: "b".into(), id: 3, downsample_factor: 1 },
        ];
        assert!(Registry::new(&gap).is_err());
        let dup = [
            ClassEntry { name: "a".into(), id: 1, downsample_factor: 1 },
            ClassEntry { name: "A".into(), id: 2, downsample_factor: 1 },
        ];
        assert!(Registry::new(&dup).is_err());
        assert!(Registry::new(&[]).is_err());
    }

    #[test]
    fn lookup_round_trip() {
        let reg = Registry::renal_default();
        for c in reg.classes() {
            assert_eq!(reg.lookup(&c.name).unwrap().id, c.id);
        }
    }

    proptest! {
        #[test]
        fn one_hot_sums_to_one(m in 1usize..32, seed in 0usize..1000) {
            let i = seed % m + 1;
            let v = encode_class(i, m).unwrap();
            prop_assert_eq!(v.values.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(v.values[i - 1], 1.0);
        }

        #[test]
        fn one_hot_injective(m in 2usize..32, a in 0usize..1000, b in 0usize..1000) {
            let (i, j) = (a % m + 1, b % m + 1);
            prop_assume!(i != j);
            prop_assert_ne!(encode_class(i, m).unwrap(), encode_class(j, m).unwrap());
        }
    }
}
