use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-level label tree: every fine class has exactly one coarse parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHierarchy {
    pub coarse_names: Vec<String>,
    pub fine_names: Vec<String>,
    /// `parent[fine] = coarse`
    pub parent: Vec<usize>,
}

impl Default for ClassHierarchy {
    /// Gut region over diagnosis: Duodenum {Celiac, EE, Normal},
    /// Esophagus {EoE, Normal}, Ileum {Crohn's, Normal}.
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        ClassHierarchy {
            coarse_names: names(&["Duodenum", "Esophagus", "Ileum"]),
            fine_names: names(&[
                "Celiac",
                "EE",
                "Normal-Duodenum",
                "EoE",
                "Normal-Esophagus",
                "Crohn's",
                "Normal-Ileum",
            ]),
            parent: vec![0, 0, 0, 1, 1, 2, 2],
        }
    }
}

impl ClassHierarchy {
    pub fn new(coarse_names: Vec<String>, fine_names: Vec<String>, parent: Vec<usize>) -> Result<Self> {
        let h = ClassHierarchy {
            coarse_names,
            fine_names,
            parent,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parent.len() != self.fine_names.len() {
            return Err(Error::InvalidSpec(format!(
                "hierarchy has {} fine classes but {} parent entries",
                self.fine_names.len(),
                self.parent.len()
            )));
        }
        if self.coarse_names.is_empty() {
            return Err(Error::InvalidSpec("hierarchy has no coarse categories".into()));
        }
        if let Some((f, &p)) = self
            .parent
            .iter()
            .enumerate()
            .find(|(_, &p)| p >= self.coarse_names.len())
        {
            return Err(Error::InvalidSpec(format!(
                "fine class {} points at missing coarse category {p}",
                self.fine_names[f]
            )));
        }
        for (c, name) in self.coarse_names.iter().enumerate() {
            if !self.parent.contains(&c) {
                return Err(Error::InvalidSpec(format!(
                    "coarse category {name} has no fine classes"
                )));
            }
        }
        Ok(())
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn parent_of(&self, fine: usize) -> usize {
        self.parent[fine]
    }

    pub fn children(&self, coarse: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == coarse)
            .map(|(f, _)| f)
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_names.iter().position(|n| n == name)
    }

    pub fn coarse_index(&self, name: &str) -> Option<usize> {
        self.coarse_names.iter().position(|n| n == name)
    }

    /// Parent of a predicted fine class.
    pub fn lift_index(&self, fine: usize) -> Result<usize> {
        self.parent.get(fine).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "fine index {fine} out of range for {} classes",
                self.num_fine()
            ))
        })
    }

    /// Coarse distribution obtained by summing the probabilities of each
    /// category's children.
    pub fn lift_probs(&self, fine: &[f64]) -> Result<Vec<f64>> {
        if fine.len() != self.num_fine() {
            return Err(Error::shape(
                "lift_to_coarse",
                format!(
                    "probability vector has {} entries, hierarchy has {} fine classes",
                    fine.len(),
                    self.num_fine()
                ),
            ));
        }
        let mut coarse = vec![0.0; self.num_coarse()];
        for (f, &p) in fine.iter().enumerate() {
            coarse[self.parent[f]] += p;
        }
        Ok(coarse)
    }
}
