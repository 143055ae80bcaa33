//! Admitted variable names: chart coordinates `x1..xn, z, p1..pn`, jet
//! coordinates `pI` for nondecreasing digit multi-indices `I`, and free
//! parameters `t1..tm` for Cauchy data.

use std::collections::HashMap;
use std::fmt;

/// Nondecreasing multi-index over `1..=n`, stored canonically.
///
/// `p12` and `p21` denote the same jet coordinate; the canonical key sorts
/// the digits ascending so no symmetry table is needed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(Vec<u8>);

impl MultiIndex {
    pub fn new(mut indices: Vec<u8>) -> Self {
        indices.sort_unstable();
        MultiIndex(indices)
    }

    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn single(i: u8) -> Self {
        MultiIndex(vec![i])
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> &[u8] {
        &self.0
    }

    /// Canonical extension `I,i` (reordered to nondecreasing form).
    pub fn extended(&self, i: u8) -> Self {
        let mut v = self.0.clone();
        let pos = v.partition_point(|&d| d <= i);
        v.insert(pos, i);
        MultiIndex(v)
    }

    /// Number of occurrences of index `i`.
    pub fn count(&self, i: u8) -> usize {
        self.0.iter().filter(|&&d| d == i).count()
    }

    /// Jet-variable name `p` + digits, e.g. `p112`.
    pub fn var_name(&self) -> String {
        let mut s = String::with_capacity(1 + self.0.len());
        s.push('p');
        for d in &self.0 {
            s.push((b'0' + d) as char);
        }
        s
    }

    /// Parse the digit part of a `p...` name; digits must lie in `1..=n`.
    /// Accepts any order and canonicalizes.
    pub fn from_digits(digits: &str, n: usize) -> Option<Self> {
        if digits.is_empty() {
            return None;
        }
        let mut v = Vec::with_capacity(digits.len());
        for ch in digits.chars() {
            let d = ch.to_digit(10)? as u8;
            if d == 0 || d as usize > n {
                return None;
            }
            v.push(d);
        }
        Some(MultiIndex::new(v))
    }

    /// All nondecreasing multi-indices of the given order over `1..=n`,
    /// in lexicographic order.
    pub fn all_of_order(n: usize, order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut cur = vec![1u8; order];
        if order == 0 {
            return vec![MultiIndex::empty()];
        }
        loop {
            out.push(MultiIndex(cur.clone()));
            // next nondecreasing tuple
            let mut k = order;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if (cur[k] as usize) < n {
                    cur[k] += 1;
                    let v = cur[k];
                    for d in cur.iter_mut().skip(k + 1) {
                        *d = v;
                    }
                    break;
                }
            }
        }
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Classification of an admitted variable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VarKind {
    X(usize),
    Z,
    /// Jet coordinate `p_I`; order-1 singletons are the chart momenta `p_i`.
    P(MultiIndex),
    T(usize),
}

/// Ordered list of admitted variable names with slot indices.
#[derive(Clone, Debug)]
pub struct VarTable {
    n: usize,
    max_order: usize,
    n_params: usize,
    names: Vec<String>,
    kinds: Vec<VarKind>,
    index: HashMap<String, usize>,
}

impl VarTable {
    /// Chart + jet variables to order `max_order` (at least 1), no parameters.
    ///
    /// Slot order: `x1..xn, z, p1..pn, p11, p12, ..` (orders ascending, each
    /// order lexicographic), then `t1..tm` if parameters are added.
    pub fn new(n: usize, max_order: usize) -> Self {
        assert!((1..=8).contains(&n), "independent-variable count must be 1..=8");
        let max_order = max_order.max(1);
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for i in 1..=n {
            names.push(format!("x{i}"));
            kinds.push(VarKind::X(i));
        }
        names.push("z".to_string());
        kinds.push(VarKind::Z);
        for order in 1..=max_order {
            for mi in MultiIndex::all_of_order(n, order) {
                names.push(mi.var_name());
                kinds.push(VarKind::P(mi));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        VarTable {
            n,
            max_order,
            n_params: 0,
            names,
            kinds,
            index,
        }
    }

    /// Darboux chart only: `x1..xn, z, p1..pn`.
    pub fn chart(n: usize) -> Self {
        VarTable::new(n, 1)
    }

    /// Admit free parameters `t1..tm` in addition.
    pub fn with_params(mut self, m: usize) -> Self {
        for j in 1..=m {
            let name = format!("t{j}");
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.kinds.push(VarKind::T(j));
        }
        self.n_params = m;
        self
    }

    /// Parameters only: `t1..tm` (for Cauchy-datum component expressions).
    pub fn params(m: usize) -> Self {
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for j in 1..=m {
            names.push(format!("t{j}"));
            kinds.push(VarKind::T(j));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        VarTable {
            n: 0,
            max_order: 0,
            n_params: m,
            names,
            kinds,
            index,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn kind(&self, name: &str) -> Option<&VarKind> {
        self.slot(name).map(|i| &self.kinds[i])
    }

    /// Canonicalize an identifier: `p` names get their digits sorted
    /// (`p21` ≡ `p12`). Returns the admitted canonical name, or `None` if the
    /// identifier is not admitted by this table.
    pub fn canonicalize(&self, ident: &str) -> Option<String> {
        if self.index.contains_key(ident) {
            return Some(ident.to_string());
        }
        if let Some(digits) = ident.strip_prefix('p') {
            if self.n > 0 {
                if let Some(mi) = MultiIndex::from_digits(digits, self.n) {
                    if mi.order() <= self.max_order {
                        let canon = mi.var_name();
                        if self.index.contains_key(&canon) {
                            return Some(canon);
                        }
                    }
                }
            }
        }
        None
    }
}

/// Values bound to a table's slots.
#[derive(Clone, Debug)]
pub struct Env<'a> {
    table: &'a VarTable,
    values: Vec<f64>,
    bound: Vec<bool>,
}

impl<'a> Env<'a> {
    pub fn new(table: &'a VarTable) -> Self {
        Env {
            table,
            values: vec![0.0; table.len()],
            bound: vec![false; table.len()],
        }
    }

    pub fn table(&self) -> &VarTable {
        self.table
    }

    pub fn set(&mut self, name: &str, value: f64) -> &mut Self {
        let slot = self
            .table
            .slot(name)
            .unwrap_or_else(|| panic!("variable `{name}` not admitted by the table"));
        self.values[slot] = value;
        self.bound[slot] = true;
        self
    }

    pub fn set_slot(&mut self, slot: usize, value: f64) {
        self.values[slot] = value;
        self.bound[slot] = true;
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        let slot = self.table.slot(name)?;
        if self.bound[slot] {
            Some(self.values[slot])
        } else {
            None
        }
    }

    /// Raw slot values (unbound slots read as 0); the tape evaluator uses
    /// this directly.
    pub fn slots(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_variable_count_matches_binomial() {
        // order-k jet variables: C(n+k-1, k)
        fn binom(n: usize, k: usize) -> usize {
            let mut r = 1usize;
            for i in 0..k {
                r = r * (n + i) / (i + 1);
            }
            r
        }
        for n in 2..=5 {
            for k in 1..=4 {
                let count = MultiIndex::all_of_order(n, k).len();
                assert_eq!(count, binom(n, k), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn canonicalization_sorts_digits() {
        let vt = VarTable::new(3, 3);
        assert_eq!(vt.canonicalize("p21").as_deref(), Some("p12"));
        assert_eq!(vt.canonicalize("p312").as_deref(), Some("p123"));
        assert_eq!(vt.canonicalize("p12").as_deref(), Some("p12"));
        assert_eq!(vt.canonicalize("p14"), None); // digit out of range
        assert_eq!(vt.canonicalize("p1234"), None); // order above cap
        assert_eq!(vt.canonicalize("q1"), None);
    }

    #[test]
    fn extended_keeps_canonical_order() {
        let mi = MultiIndex::new(vec![1, 3]);
        assert_eq!(mi.extended(2), MultiIndex::new(vec![1, 2, 3]));
        assert_eq!(mi.extended(2).var_name(), "p123");
    }

    #[test]
    fn slots_are_stable_and_named() {
        let vt = VarTable::new(2, 2).with_params(1);
        let expected = ["x1", "x2", "z", "p1", "p2", "p11", "p12", "p22", "t1"];
        assert_eq!(vt.names(), &expected);
        for (i, name) in expected.iter().enumerate() {
            assert_eq!(vt.slot(name), Some(i));
        }
    }
}
