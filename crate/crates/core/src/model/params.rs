use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensors::{Array, Float, Tape, Var};

/// Optimiser parameter group, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Text,
    Rest,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("backbone.") {
            ParamGroup::Backbone
        } else if name.starts_with("text.") {
            ParamGroup::Text
        } else {
            ParamGroup::Rest
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    entries: Vec<(String, Array<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Float> Default for Params<F> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Float> Params<F> {
    pub fn from_entries(entries: Vec<(String, Array<F>)>) -> Result<Self> {
        let mut p = Self::default();
        for (n, a) in entries {
            p.insert(n, a)?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, name: String, value: Array<F>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Array<F>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<F>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn get(&self, name: &str) -> Option<&Array<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), a.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other`, which must have identical names and
    /// shapes. Offenders are listed in the error.
    pub fn load_from(&mut self, other: &Params<F>) -> Result<()> {
        let mut bad = Vec::new();
        for (n, a) in &self.entries {
            match other.get(n) {
                None => bad.push(format!("{n} (missing)")),
                Some(b) if b.shape() != a.shape() => {
                    bad.push(format!("{n} {:?} vs {:?}", a.shape(), b.shape()))
                }
                _ => {}
            }
        }
        for (n, _) in &other.entries {
            if !self.index.contains_key(n) {
                bad.push(format!("{n} (unexpected)"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::ParamMismatch(bad));
        }
        for (n, a) in self.entries.iter_mut() {
            *a = other.get(n).expect("checked").clone();
        }
        Ok(())
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<F>, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, a)| tape.leaf(a.clone(), requires_grad))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameter leaves of one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn from_parts(vars: Vec<Var>, names: &[String]) -> Self {
        Self {
            vars,
            index: names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        }
    }
}

pub(crate) fn init_array<R: Rng>(shape: &[usize], init: Init, rng: &mut R) -> Array<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a) as f32).collect()
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        }
    };
    Array::new(shape, data).expect("init shape")
}
