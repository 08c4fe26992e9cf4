//! Orderings of in-context examples, encoded as permutations of similarity
//! ranks. Rank 1 is the example closest to the query.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{PoemError, Result};

/// Default upper bound on `m` for full enumeration (8! = 40320 actions).
pub const DEFAULT_MAX_M: usize = 8;

/// `ranks[i]` is the similarity rank of the example placed at slot `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action {
    ranks: Vec<usize>,
}

impl Action {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let m = ranks.len();
        if m == 0 {
            return Err(PoemError::invalid("action must have at least one slot"));
        }
        let mut seen = vec![false; m];
        for &r in &ranks {
            if r == 0 || r > m || seen[r - 1] {
                return Err(PoemError::invalid(format!(
                    "{ranks:?} is not a permutation of 1..={m}"
                )));
            }
            seen[r - 1] = true;
        }
        Ok(Action { ranks })
    }

    /// `(1, 2, ..., m)`: examples in descending-similarity order.
    pub fn identity(m: usize) -> Self {
        Action {
            ranks: (1..=m).collect(),
        }
    }

    /// `(m, ..., 2, 1)`: examples in ascending-similarity order.
    pub fn reversed(m: usize) -> Self {
        Action {
            ranks: (1..=m).rev().collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.ranks.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Canonical memory sub-key, e.g. `"4-3-1-2"`.
    pub fn key(&self) -> String {
        action_key(self)
    }

    /// Position of this action in the lexicographic enumeration of all
    /// `m!` actions (Lehmer code).
    pub fn lex_index(&self) -> usize {
        let m = self.m();
        let mut index = 0;
        for i in 0..m {
            let smaller_later = self.ranks[i + 1..]
                .iter()
                .filter(|&&r| r < self.ranks[i])
                .count();
            index += smaller_later * factorial(m - 1 - i);
        }
        index
    }

    /// Inverse of [`Action::lex_index`].
    pub fn from_lex_index(m: usize, mut index: usize) -> Result<Self> {
        if m == 0 || index >= factorial(m) {
            return Err(PoemError::invalid(format!(
                "lexicographic index {index} out of range for m={m}"
            )));
        }
        let mut pool: Vec<usize> = (1..=m).collect();
        let mut ranks = Vec::with_capacity(m);
        for i in (0..m).rev() {
            let f = factorial(i);
            ranks.push(pool.remove(index / f));
            index %= f;
        }
        Ok(Action { ranks })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&action_key(self))
    }
}

impl FromStr for Action {
    type Err = PoemError;

    fn from_str(s: &str) -> Result<Self> {
        let ranks = s
            .split('-')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| PoemError::invalid(format!("bad action key {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Action::new(ranks)
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn factorial(n: usize) -> usize {
    (1..=n).product()
}

pub fn action_key(a: &Action) -> String {
    a.ranks
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn parse_action_key(key: &str) -> Result<Action> {
    key.parse()
}

/// All `m!` actions in lexicographic order, with the default ceiling.
pub fn enumerate_actions(m: usize) -> Result<Vec<Action>> {
    enumerate_actions_with_ceiling(m, DEFAULT_MAX_M)
}

pub fn enumerate_actions_with_ceiling(m: usize, ceiling: usize) -> Result<Vec<Action>> {
    if m == 0 {
        return Err(PoemError::invalid("m must be at least 1"));
    }
    if m > ceiling {
        return Err(PoemError::invalid(format!(
            "m={m} exceeds the enumeration ceiling of {ceiling}"
        )));
    }
    let mut current: Vec<usize> = (1..=m).collect();
    let mut out = Vec::with_capacity(factorial(m));
    loop {
        out.push(Action {
            ranks: current.clone(),
        });
        if !next_permutation(&mut current) {
            break;
        }
    }
    Ok(out)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v
        .iter()
        .rposition(|&x| x > v[i])
        .expect("pivot has a successor");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// Arranges `canonical` (rank 1 first) so that slot `i` holds the example
/// whose rank is `action.ranks()[i]`.
pub fn reorder<T: Clone>(canonical: &[T], action: &Action) -> Result<Vec<T>> {
    if canonical.len() != action.m() {
        return Err(PoemError::invalid(format!(
            "cannot apply action of size {} to {} examples",
            action.m(),
            canonical.len()
        )));
    }
    Ok(action
        .ranks
        .iter()
        .map(|&r| canonical[r - 1].clone())
        .collect())
}
