// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path patterns and hypothesis expressions.
//!
//! # Pattern grammar
//!
//! ```text
//! pattern  := ["not"] element (arrow element)*
//! arrow    := "→" | "->" | whitespace
//! element  := gap | glob [ "[" position "]" ]
//! gap      := "…" | "..."
//! position := "*" | expr | expr ".." expr        (inclusive range)
//! expr     := term (("+" | "-") term)*
//! term     := integer | identifier
//! ```
//!
//! A pattern matches a path when the whole node-name sequence, from input
//! leaf to output, matches the element sequence. A glob matches one node
//! name, with `*` standing for any run of characters. A gap matches zero or
//! more nodes. A position bracket matches leaves produced by position
//! slicing (`tok[3]`): the base name must match the glob and the position
//! must fall in the range. Identifiers in positions (`i`, `j`, `K`) are
//! resolved per example before matching.
//!
//! | selection                               | pattern                                              |
//! |-----------------------------------------|------------------------------------------------------|
//! | every path                              | `… `                                                 |
//! | one explicit path                       | `x → f0 → A → f1 → Y`                                |
//! | paths through an induction head         | `… → a1.h5.o → …`                                    |
//! | direct path into the head's query       | `tok* → embed → resid1 → ln1 → a1.qk_in → a1.h5.q → …` |
//! | token `j-1` through a layer-0 head to K | `tok[j-1] → … → a0.h* → … → a1.h5.k → …`             |
//! | keys from a window before `j`           | `tok[j-K..j-1] → … → a1.h5.k → …`                    |
//! | everything except the above             | `not tok[j-1] → … → a1.h5.k → …`                     |
//!
//! # Hypothesis expressions
//!
//! An expression is a base (`all` or `none`) followed by ordered terms
//! `+ pattern` (add matching paths) and `- pattern` (remove them). Terms are
//! separated by newlines or `;`. Later terms override earlier ones, so a
//! path's membership is decided by the last term matching it, or by the
//! base when none does.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Values for position identifiers, e.g. `i`, `j` and `K`.
pub type PositionVars = BTreeMap<String, i64>;

/// Most elements a pattern may have; NFA states are bits of a `u64`.
pub const MAX_PATTERN_ELEMENTS: usize = 63;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PosExpr {
    terms: Vec<(i64, PosTerm)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum PosTerm {
    Const(i64),
    Var(String),
}

impl PosExpr {
    fn eval(&self, vars: &PositionVars) -> Result<i64> {
        let mut total = 0i64;
        for (sign, term) in &self.terms {
            let v = match term {
                PosTerm::Const(c) => *c,
                PosTerm::Var(name) => *vars.get(name).ok_or_else(|| {
                    Error::Argument(format!("position variable `{name}` is not defined"))
                })?,
            };
            total += sign * v;
        }
        Ok(total)
    }
}

impl fmt::Display for PosExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (sign, term)) in self.terms.iter().enumerate() {
            if k > 0 || *sign < 0 {
                f.write_str(if *sign < 0 { "-" } else { "+" })?;
            }
            match term {
                PosTerm::Const(c) => write!(f, "{c}")?,
                PosTerm::Var(v) => f.write_str(v)?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Position {
    Any,
    Range(PosExpr, PosExpr),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PatternElement {
    Gap,
    Name { glob: String, position: Option<Position> },
}

/// A parsed, unresolved pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    negated: bool,
    elements: Vec<PatternElement>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum ResolvedElement {
    Gap,
    Name {
        glob: String,
        /// `None`: match the whole name. `Some(None)`: any position.
        /// `Some(Some((lo, hi)))`: positions in `lo..=hi`.
        position: Option<Option<(i64, i64)>>,
    },
}

impl ResolvedElement {
    fn matches(&self, name: &str) -> bool {
        match self {
            ResolvedElement::Gap => true,
            ResolvedElement::Name { glob, position: None } => glob_match(glob, name),
            ResolvedElement::Name {
                glob,
                position: Some(range),
            } => match crate::graph::split_position_name(name) {
                Some((base, pos)) => {
                    glob_match(glob, base)
                        && range.is_none_or(|(lo, hi)| (lo..=hi).contains(&(pos as i64)))
                }
                None => false,
            },
        }
    }
}

/// A pattern with all position identifiers substituted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedPattern {
    negated: bool,
    elements: Vec<ResolvedElement>,
}

/// `*` matches any run of characters; everything else is literal.
fn glob_match(glob: &str, name: &str) -> bool {
    let g: Vec<char> = glob.chars().collect();
    let n: Vec<char> = name.chars().collect();
    let (mut gi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if gi < g.len() && g[gi] == '*' {
            star = Some((gi, ni));
            gi += 1;
        } else if gi < g.len() && g[gi] == n[ni] {
            gi += 1;
            ni += 1;
        } else if let Some((sg, sn)) = star {
            gi = sg + 1;
            ni = sn + 1;
            star = Some((sg, sn + 1));
        } else {
            return false;
        }
    }
    g[gi..].iter().all(|&c| c == '*')
}

struct Cursor<'a> {
    input: &'a str,
    /// Byte offset into `input`.
    at: usize,
    /// Character column of `input[0]` within the full source line.
    base_column: usize,
    source: &'a str,
}

impl<'a> Cursor<'a> {
    fn column(&self) -> usize {
        self.base_column + self.input[..self.at].chars().count()
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            input: self.source.to_owned(),
            column: self.column(),
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.input[self.at..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.at = self.input.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.at += token.len();
            true
        } else {
            false
        }
    }

    fn done(&self) -> bool {
        self.at == self.input.len()
    }
}

impl Pattern {
    pub fn parse(text: &str) -> Result<Pattern> {
        Self::parse_at(text, 0, text)
    }

    /// Parse `text`, reporting columns relative to `source`, where `text`
    /// begins at character column `base_column`.
    fn parse_at(text: &str, base_column: usize, source: &str) -> Result<Pattern> {
        let mut cur = Cursor {
            input: text,
            at: 0,
            base_column,
            source,
        };
        cur.skip_ws();
        if cur.done() {
            return Err(cur.error("empty pattern"));
        }
        let negated = if cur.rest().starts_with("not ") || cur.rest() == "not" {
            cur.at += 3;
            cur.skip_ws();
            true
        } else {
            false
        };
        let mut elements = Vec::new();
        loop {
            cur.skip_ws();
            elements.push(parse_element(&mut cur)?);
            cur.skip_ws();
            if cur.done() {
                break;
            }
            if cur.eat("→") || cur.eat("->") {
                cur.skip_ws();
                if cur.done() {
                    return Err(cur.error("pattern ends with an arrow"));
                }
            }
        }
        if elements.len() > MAX_PATTERN_ELEMENTS {
            return Err(Error::Syntax {
                input: source.to_owned(),
                column: base_column,
                message: format!("patterns are limited to {MAX_PATTERN_ELEMENTS} elements"),
            });
        }
        Ok(Pattern {
            source: text.trim().to_owned(),
            negated,
            elements,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_negated(&self) -> bool {
        self.negated
    }

    pub fn elements(&self) -> &[PatternElement] {
        &self.elements
    }

    /// The pattern matching every path.
    pub fn universal() -> Pattern {
        Pattern {
            source: "…".into(),
            negated: false,
            elements: vec![PatternElement::Gap],
        }
    }

    /// The same element sequence with the opposite polarity.
    pub fn complement(&self) -> Pattern {
        let mut p = self.clone();
        p.negated = !p.negated;
        p.source = if self.negated {
            self.source.trim_start_matches("not").trim().to_owned()
        } else {
            format!("not {}", self.source)
        };
        p
    }

    pub fn resolve(&self, vars: &PositionVars) -> Result<ResolvedPattern> {
        let elements = self
            .elements
            .iter()
            .map(|e| {
                Ok(match e {
                    PatternElement::Gap => ResolvedElement::Gap,
                    PatternElement::Name { glob, position } => ResolvedElement::Name {
                        glob: glob.clone(),
                        position: match position {
                            None => None,
                            Some(Position::Any) => Some(None),
                            Some(Position::Range(lo, hi)) => {
                                Some(Some((lo.eval(vars)?, hi.eval(vars)?)))
                            }
                        },
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(ResolvedPattern {
            negated: self.negated,
            elements,
        })
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn parse_element(cur: &mut Cursor<'_>) -> Result<PatternElement> {
    if cur.eat("…") || cur.eat("...") {
        return Ok(PatternElement::Gap);
    }
    let start = cur.at;
    while let Some(c) = cur.rest().chars().next() {
        if c.is_whitespace() || matches!(c, '[' | ']' | '→' | '…') || cur.rest().starts_with("->") {
            break;
        }
        cur.at += c.len_utf8();
    }
    let glob = &cur.input[start..cur.at];
    if glob.is_empty() {
        return Err(cur.error("expected a node name, `*` or `…`"));
    }
    if glob.contains("..") {
        cur.at = start + glob.find("..").unwrap_or(0);
        return Err(cur.error("`..` is only valid inside a position bracket"));
    }
    let position = if cur.eat("[") {
        let pos = parse_position(cur)?;
        if !cur.eat("]") {
            return Err(cur.error("expected `]`"));
        }
        Some(pos)
    } else {
        None
    };
    Ok(PatternElement::Name {
        glob: glob.to_owned(),
        position,
    })
}

fn parse_position(cur: &mut Cursor<'_>) -> Result<Position> {
    cur.skip_ws();
    if cur.eat("*") {
        cur.skip_ws();
        return Ok(Position::Any);
    }
    let lo = parse_pos_expr(cur)?;
    cur.skip_ws();
    if cur.eat("..") {
        cur.skip_ws();
        let hi = parse_pos_expr(cur)?;
        cur.skip_ws();
        Ok(Position::Range(lo, hi))
    } else {
        Ok(Position::Range(lo.clone(), lo))
    }
}

fn parse_pos_expr(cur: &mut Cursor<'_>) -> Result<PosExpr> {
    let mut terms = Vec::new();
    let mut sign = 1i64;
    loop {
        cur.skip_ws();
        if terms.is_empty() && cur.eat("-") {
            sign = -1;
            cur.skip_ws();
        }
        let start = cur.at;
        let rest = cur.rest();
        let len: usize = rest
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(cur.error("expected an integer or a position variable"));
        }
        let word = &rest[..len];
        let term = if word.chars().all(|c| c.is_ascii_digit()) {
            PosTerm::Const(word.parse().map_err(|_| cur.error("integer out of range"))?)
        } else if word.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
            PosTerm::Var(word.to_owned())
        } else {
            return Err(cur.error(format!("bad position term `{word}`")));
        };
        cur.at = start + len;
        terms.push((sign, term));
        cur.skip_ws();
        if cur.rest().starts_with("..") {
            break;
        }
        if cur.eat("+") {
            sign = 1;
        } else if cur.eat("-") {
            sign = -1;
        } else {
            break;
        }
    }
    Ok(PosExpr { terms })
}

/// Nondeterministic automaton over node names for one resolved pattern.
/// States are element indices `0..=m`; state `m` accepts.
#[derive(Clone, Debug)]
pub(crate) struct Nfa {
    elements: Vec<ResolvedElement>,
}

impl Nfa {
    fn new(elements: Vec<ResolvedElement>) -> Nfa {
        Nfa { elements }
    }

    fn closure(&self, mut states: u64) -> u64 {
        for p in 0..self.elements.len() {
            if states & (1 << p) != 0 && self.elements[p] == ResolvedElement::Gap {
                states |= 1 << (p + 1);
            }
        }
        states
    }

    pub(crate) fn start(&self) -> u64 {
        self.closure(1)
    }

    pub(crate) fn step(&self, states: u64, name: &str) -> u64 {
        let mut next = 0u64;
        for (p, e) in self.elements.iter().enumerate() {
            if states & (1 << p) == 0 {
                continue;
            }
            match e {
                ResolvedElement::Gap => next |= 1 << p,
                named => {
                    if named.matches(name) {
                        next |= 1 << (p + 1);
                    }
                }
            }
        }
        self.closure(next)
    }

    pub(crate) fn accepts(&self, states: u64) -> bool {
        states & (1 << self.elements.len()) != 0
    }
}

impl ResolvedPattern {
    /// Automaton reading names from the input leaf toward the output.
    pub(crate) fn forward_nfa(&self) -> Nfa {
        Nfa::new(self.elements.clone())
    }

    /// Automaton reading names from the output toward the input leaf.
    pub(crate) fn reverse_nfa(&self) -> Nfa {
        Nfa::new(self.elements.iter().rev().cloned().collect())
    }

    pub fn is_negated(&self) -> bool {
        self.negated
    }

    /// Whether the name sequence (leaf first) matches.
    pub fn matches(&self, names: &[&str]) -> bool {
        let nfa = self.forward_nfa();
        let states = names.iter().fold(nfa.start(), |s, n| nfa.step(s, n));
        nfa.accepts(states) != self.negated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetOp {
    Include,
    Exclude,
}

/// A hypothesis expression: a base set refined by ordered terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathExpr {
    pub base_all: bool,
    pub terms: Vec<(SetOp, Pattern)>,
}

impl PathExpr {
    pub fn all() -> PathExpr {
        PathExpr {
            base_all: true,
            terms: Vec::new(),
        }
    }

    pub fn none() -> PathExpr {
        PathExpr {
            base_all: false,
            terms: Vec::new(),
        }
    }

    pub fn include(mut self, pattern: Pattern) -> PathExpr {
        self.terms.push((SetOp::Include, pattern));
        self
    }

    pub fn exclude(mut self, pattern: Pattern) -> PathExpr {
        self.terms.push((SetOp::Exclude, pattern));
        self
    }

    /// Parse terms separated by newlines or `;`. A missing base means `none`.
    pub fn parse(text: &str) -> Result<PathExpr> {
        let mut expr = PathExpr::none();
        let mut offset = 0usize;
        let mut first = true;
        for piece in text.split(['\n', ';']) {
            let column = offset;
            offset += piece.chars().count() + 1;
            let lead = piece.len() - piece.trim_start().len();
            let body = piece.trim();
            if body.is_empty() || body.starts_with("//") {
                continue;
            }
            let body_column = column + piece[..lead].chars().count();
            if first && (body == "all" || body == "none") {
                expr.base_all = body == "all";
                first = false;
                continue;
            }
            first = false;
            let op = match body.chars().next() {
                Some('+') => SetOp::Include,
                Some('-') => SetOp::Exclude,
                _ => {
                    return Err(Error::Syntax {
                        input: text.to_owned(),
                        column: body_column,
                        message: "expected `all`, `none`, `+ pattern` or `- pattern`".into(),
                    })
                }
            };
            let pattern = Pattern::parse_at(&body[1..], body_column + 1, text)?;
            expr.terms.push((op, pattern));
        }
        Ok(expr)
    }

    /// Parse one term per list entry, as written in config files.
    pub fn parse_lines<S: AsRef<str>>(lines: &[S]) -> Result<PathExpr> {
        let joined: Vec<&str> = lines.iter().map(|s| s.as_ref()).collect();
        PathExpr::parse(&joined.join("\n"))
    }

    pub fn resolve(&self, vars: &PositionVars) -> Result<ResolvedExpr> {
        Ok(ResolvedExpr {
            base_all: self.base_all,
            terms: self
                .terms
                .iter()
                .map(|(op, p)| Ok((*op, p.resolve(vars)?)))
                .collect::<Result<_>>()?,
        })
    }

    /// Identifiers used in position brackets.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (_, p) in &self.terms {
            for e in &p.elements {
                if let PatternElement::Name {
                    position: Some(Position::Range(lo, hi)),
                    ..
                } = e
                {
                    for t in lo.terms.iter().chain(&hi.terms) {
                        if let (_, PosTerm::Var(v)) = t {
                            if !out.contains(v) {
                                out.push(v.clone());
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.base_all { "all" } else { "none" })?;
        for (op, p) in &self.terms {
            let sign = if *op == SetOp::Include { '+' } else { '-' };
            write!(f, "; {sign} {p}")?;
        }
        Ok(())
    }
}

/// A hypothesis expression with positions substituted.
#[derive(Clone, Debug)]
pub struct ResolvedExpr {
    base_all: bool,
    terms: Vec<(SetOp, ResolvedPattern)>,
}

impl ResolvedExpr {
    /// Membership given whether each term's pattern matched.
    pub(crate) fn decide(&self, matched: impl Fn(usize) -> bool) -> bool {
        (0..self.terms.len())
            .rev()
            .find(|&k| matched(k))
            .map(|k| self.terms[k].0 == SetOp::Include)
            .unwrap_or(self.base_all)
    }

    pub fn contains(&self, names: &[&str]) -> bool {
        self.decide(|k| self.terms[k].1.matches(names))
    }

    pub(crate) fn terms(&self) -> &[(SetOp, ResolvedPattern)] {
        &self.terms
    }

    pub fn base_all(&self) -> bool {
        self.base_all
    }
}

/// Check that every concrete name in a pattern exists in `graph`, to catch
/// typos that would otherwise silently match nothing.
pub fn unknown_names(graph: &Graph, pattern: &Pattern) -> Vec<String> {
    pattern
        .elements
        .iter()
        .filter_map(|e| match e {
            PatternElement::Name { glob, position } if !glob.contains('*') => {
                let known = match position {
                    None => graph.id(glob).is_some(),
                    Some(_) => graph.nodes().iter().any(|n| {
                        crate::graph::split_position_name(&n.name).is_some_and(|(b, _)| b == glob)
                            || n.name == *glob
                    }),
                };
                (!known).then(|| glob.clone())
            }
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, i64)]) -> PositionVars {
        pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    #[test]
    fn glob_basics() {
        assert!(glob_match("a*", "a1.h5"));
        assert!(glob_match("*.h5.*", "a1.h5.q"));
        assert!(!glob_match("a0*", "a1.h5"));
        assert!(glob_match("*", ""));
        assert!(glob_match("x", "x"));
        assert!(!glob_match("x", "xy"));
    }

    #[test]
    fn arrows_and_gaps() {
        let p = Pattern::parse("x -> … → Y").unwrap().resolve(&vars(&[])).unwrap();
        assert!(p.matches(&["x", "Y"]));
        assert!(p.matches(&["x", "f0", "A", "Y"]));
        assert!(!p.matches(&["x", "A"]));
        let q = Pattern::parse("x ... A ... Y").unwrap().resolve(&vars(&[])).unwrap();
        let bare = Pattern::parse("x … Y").unwrap().resolve(&vars(&[])).unwrap();
        assert_eq!(bare, p);
        assert!(q.matches(&["x", "A", "Y"]));
        assert!(!q.matches(&["x", "f0", "Y"]));
    }

    #[test]
    fn positions_resolve_per_example() {
        let p = Pattern::parse("tok[j-1] → …").unwrap();
        let r = p.resolve(&vars(&[("j", 4)])).unwrap();
        assert!(r.matches(&["tok[3]", "tok", "embed"]));
        assert!(!r.matches(&["tok[4]", "tok", "embed"]));
        let w = Pattern::parse("tok[j-K..j-1] → …").unwrap();
        let r = w.resolve(&vars(&[("j", 6), ("K", 3)])).unwrap();
        for (p, hit) in [(2, false), (3, true), (4, true), (5, true), (6, false)] {
            assert_eq!(r.matches(&[&format!("tok[{p}]"), "Y"]), hit, "position {p}");
        }
        assert!(Pattern::parse("tok[q] → …").unwrap().resolve(&vars(&[])).is_err());
    }

    #[test]
    fn negation_complements() {
        let p = Pattern::parse("x → f0 → …").unwrap();
        let n = p.complement();
        assert_eq!(n.source(), "not x → f0 → …");
        let (pr, nr) = (p.resolve(&vars(&[])).unwrap(), n.resolve(&vars(&[])).unwrap());
        for names in [&["x", "f0", "Y"][..], &["x", "Y"][..]] {
            assert_ne!(pr.matches(names), nr.matches(names));
        }
    }

    #[test]
    fn syntax_errors_carry_columns() {
        match Pattern::parse("x → → Y") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 4),
            other => panic!("{other:?}"),
        }
        match Pattern::parse("x → tok[j-1 → Y") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 12),
            other => panic!("{other:?}"),
        }
        match Pattern::parse("x → ]") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 4),
            other => panic!("{other:?}"),
        }
        assert!(Pattern::parse("   ").is_err());
        assert!(Pattern::parse("x →").is_err());
        let long = vec!["a"; 64].join(" → ");
        assert!(Pattern::parse(&long).is_err());
    }

    #[test]
    fn expression_terms_apply_in_order() {
        let e = PathExpr::parse("all\n- … → f1 → …\n+ x → A → f1 → Y").unwrap();
        let r = e.resolve(&vars(&[])).unwrap();
        assert!(r.contains(&["x", "A", "Y"]));
        assert!(!r.contains(&["x", "f0", "A", "f1", "Y"]));
        assert!(r.contains(&["x", "A", "f1", "Y"]));
        assert_eq!(e.to_string(), "all; - … → f1 → …; + x → A → f1 → Y");
        let n = PathExpr::parse("+ x → …").unwrap();
        assert!(!n.base_all);
    }

    #[test]
    fn expression_errors_point_into_the_full_text() {
        match PathExpr::parse("all; * x → Y") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 5),
            other => panic!("{other:?}"),
        }
        match PathExpr::parse("all; + x → → Y") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 11),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variables_are_listed() {
        let e = PathExpr::parse("none; + tok[j-K..j-1] → …; + tok[i] → …").unwrap();
        assert_eq!(e.variables(), vec!["j", "K", "i"]);
    }
}
