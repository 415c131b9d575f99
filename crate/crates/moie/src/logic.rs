//! Boolean formulas over concept literals: disjunctions of conjunctions.
//!
//! Used both as planted ground-truth labelers in the synthetic generator
//! and as the output language of expert explanation extraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One concept literal: concept index plus polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Literal {
    pub concept: usize,
    pub negated: bool,
}

impl Literal {
    pub fn pos(concept: usize) -> Self {
        Literal {
            concept,
            negated: false,
        }
    }

    pub fn neg(concept: usize) -> Self {
        Literal {
            concept,
            negated: true,
        }
    }

    pub fn eval(&self, concepts: &[bool]) -> bool {
        concepts[self.concept] != self.negated
    }
}

/// Conjunction of literals. Empty conjunction is `true`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Minterm(pub Vec<Literal>);

impl Minterm {
    pub fn eval(&self, concepts: &[bool]) -> bool {
        self.0.iter().all(|l| l.eval(concepts))
    }

    /// Does this conjunction include every literal of `other`?
    pub fn subsumes(&self, other: &Minterm) -> bool {
        other.0.iter().all(|l| self.0.contains(l))
    }
}

/// Disjunction of minterms. Zero terms evaluate to `false`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnfFormula {
    pub terms: Vec<Minterm>,
}

impl DnfFormula {
    pub fn new(terms: Vec<Minterm>) -> Self {
        DnfFormula { terms }
    }

    /// Convenience constructor from (concept, negated) pairs per term.
    pub fn from_terms(terms: &[&[(usize, bool)]]) -> Self {
        DnfFormula {
            terms: terms
                .iter()
                .map(|t| {
                    Minterm(
                        t.iter()
                            .map(|&(concept, negated)| Literal { concept, negated })
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn eval(&self, concepts: &[bool]) -> bool {
        self.terms.iter().any(|t| t.eval(concepts))
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Every concept index referenced anywhere in the formula.
    pub fn concepts(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .terms
            .iter()
            .flat_map(|t| t.0.iter().map(|l| l.concept))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Structural validation against a concept count.
    pub fn validate(&self, n_concepts: usize) -> Result<()> {
        for term in &self.terms {
            if term.0.is_empty() {
                return Err(Error::Config("minterm with no literals".into()));
            }
            for lit in &term.0 {
                if lit.concept >= n_concepts {
                    return Err(Error::Config(format!(
                        "literal references concept {} but only {} exist",
                        lit.concept, n_concepts
                    )));
                }
            }
        }
        Ok(())
    }

    /// Render with the supplied concept names using logical connectives.
    pub fn render(&self, names: &[String]) -> String {
        if self.terms.is_empty() {
            return "false".to_string();
        }
        self.terms
            .iter()
            .map(|t| {
                let body = t
                    .0
                    .iter()
                    .map(|l| {
                        let name = &names[l.concept];
                        if l.negated {
                            format!("\u{ac}{name}")
                        } else {
                            name.clone()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" \u{2227} ");
                if t.0.len() > 1 && self.terms.len() > 1 {
                    format!("({body})")
                } else {
                    body
                }
            })
            .collect::<Vec<_>>()
            .join(" \u{2228} ")
    }
}

impl fmt::Display for DnfFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let max = self
            .concepts()
            .into_iter()
            .max()
            .map(|m| m + 1)
            .unwrap_or(0);
        let names: Vec<String> = (0..max).map(|i| format!("c_{i}")).collect();
        write!(f, "{}", self.render(&names))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conjunction_evaluates() {
        let f = DnfFormula::from_terms(&[&[(0, false), (1, false)]]);
        assert!(f.eval(&[true, true, false]));
        assert!(!f.eval(&[true, false, true]));
    }

    #[test]
    fn disjunction_with_negation() {
        // (c0 ^ c1) v (c2 ^ !c3)
        let f = DnfFormula::from_terms(&[&[(0, false), (1, false)], &[(2, false), (3, true)]]);
        assert!(f.eval(&[false, false, true, false]));
        assert!(!f.eval(&[false, false, true, true]));
        assert_eq!(f.concepts(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_formula_is_false_and_renders() {
        let f = DnfFormula::new(vec![]);
        assert!(!f.eval(&[true]));
        assert_eq!(f.to_string(), "false");
    }

    #[test]
    fn render_uses_names_and_connectives() {
        let f = DnfFormula::from_terms(&[&[(0, false), (1, true)]]);
        let names = vec!["edema_like".to_string(), "clear_field".to_string()];
        assert_eq!(f.render(&names), "edema_like \u{2227} \u{ac}clear_field");
    }

    #[test]
    fn validate_catches_out_of_range_literal() {
        let f = DnfFormula::from_terms(&[&[(5, false)]]);
        assert!(f.validate(3).is_err());
        assert!(f.validate(6).is_ok());
    }
}
