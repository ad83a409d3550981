//! The model-formula mini-language.
//!
//! ```text
//! formula  := ident "~" rhs
//! rhs      := term { "+" term }
//! term     := "1" | "0" | ident | smooth | random
//! random   := "(" rexpr "|" ident ")"
//! rexpr    := [ ("0"|"1") "+" ] ident { "+" ident } | "1"
//! smooth   := "s(" ident [ "," "bs" "=" quoted ] [ "," "k" "=" integer ] [ "," "g" "=" integer ] ")"
//! ```
//!
//! Whitespace is insignificant. Interactions (`:`, `*`) and nested grouping
//! (`/`) are rejected.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name used for the intercept component of a random-effect term.
pub const INTERCEPT: &str = "(Intercept)";

pub const DEFAULT_SMOOTH_DEGREE: usize = 3;
pub const DEFAULT_SMOOTH_KNOTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomTerm {
    pub group: String,
    pub has_intercept: bool,
    pub slopes: Vec<String>,
    /// One jointly correlated block per level. Always true when the term has
    /// more than one component.
    pub correlated: bool,
}

impl RandomTerm {
    pub fn intercept(group: &str) -> Self {
        RandomTerm {
            group: group.to_string(),
            has_intercept: true,
            slopes: Vec::new(),
            correlated: false,
        }
    }

    pub fn slope(group: &str, var: &str) -> Self {
        RandomTerm {
            group: group.to_string(),
            has_intercept: false,
            slopes: vec![var.to_string()],
            correlated: false,
        }
    }

    /// Component names, `"(Intercept)"` first.
    pub fn component_names(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.dim());
        if self.has_intercept {
            v.push(INTERCEPT.to_string());
        }
        v.extend(self.slopes.iter().cloned());
        v
    }

    pub fn dim(&self) -> usize {
        usize::from(self.has_intercept) + self.slopes.len()
    }

    fn normalized(mut self) -> Self {
        self.correlated = self.dim() > 1;
        self
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<&str> = Vec::new();
        if self.has_intercept {
            parts.push("1");
        } else {
            parts.push("0");
        }
        parts.extend(self.slopes.iter().map(String::as_str));
        write!(f, "({} | {})", parts.join(" + "), self.group)
    }
}

/// Spline basis requested for a smooth. Only the truncated polynomial basis
/// is implemented; other labels are kept for display and mapped onto it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasisType {
    Trunc,
    /// A basis label that is not implemented; fitted with the truncated
    /// polynomial basis.
    Substituted(String),
}

impl BasisType {
    pub fn from_label(label: &str) -> Self {
        if label == "trunc" {
            BasisType::Trunc
        } else {
            BasisType::Substituted(label.to_string())
        }
    }

    pub fn label(&self) -> &str {
        match self {
            BasisType::Trunc => "trunc",
            BasisType::Substituted(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub variable: String,
    pub basis: BasisType,
    pub degree: usize,
    pub knots: usize,
}

impl SmoothTerm {
    pub fn new(variable: &str, basis: BasisType) -> Self {
        SmoothTerm {
            variable: variable.to_string(),
            basis,
            degree: DEFAULT_SMOOTH_DEGREE,
            knots: DEFAULT_SMOOTH_KNOTS,
        }
    }
}

impl fmt::Display for SmoothTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s({}, bs = \"{}\"", self.variable, self.basis.label())?;
        if self.knots != DEFAULT_SMOOTH_KNOTS {
            write!(f, ", k = {}", self.knots)?;
        }
        if self.degree != DEFAULT_SMOOTH_DEGREE {
            write!(f, ", g = {}", self.degree)?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelFormula {
    pub response: String,
    pub intercept: bool,
    pub fixed: Vec<String>,
    pub smooths: Vec<SmoothTerm>,
    pub randoms: Vec<RandomTerm>,
}

impl ModelFormula {
    pub fn intercept_only(response: &str) -> Self {
        ModelFormula {
            response: response.to_string(),
            intercept: true,
            fixed: Vec::new(),
            smooths: Vec::new(),
            randoms: Vec::new(),
        }
    }

    /// Canonical right-hand side including the leading `~`, as shown in
    /// stepwise traces.
    pub fn rhs(&self) -> String {
        let mut terms: Vec<String> = Vec::new();
        if !self.intercept {
            terms.push("0".into());
        }
        terms.extend(self.fixed.iter().cloned());
        terms.extend(self.smooths.iter().map(|s| s.to_string()));
        terms.extend(self.randoms.iter().map(|r| r.to_string()));
        if terms.is_empty() {
            terms.push("1".into());
        }
        format!("~ {}", terms.join(" + "))
    }

    /// Every variable name the formula refers to, response first.
    pub fn variables(&self) -> Vec<&str> {
        let mut v: Vec<&str> = vec![self.response.as_str()];
        v.extend(self.fixed.iter().map(String::as_str));
        v.extend(self.smooths.iter().map(|s| s.variable.as_str()));
        for r in &self.randoms {
            v.push(r.group.as_str());
            v.extend(r.slopes.iter().map(String::as_str));
        }
        v
    }

    pub fn has_random_effects(&self) -> bool {
        !self.randoms.is_empty() || !self.smooths.is_empty()
    }

    /// Total number of random-effect components across random terms.
    pub fn component_count(&self) -> usize {
        self.randoms.iter().map(RandomTerm::dim).sum::<usize>() + self.smooths.len()
    }

    fn validate(&self) -> Result<()> {
        for (i, a) in self.randoms.iter().enumerate() {
            if a.dim() == 0 {
                return Err(Error::Formula(format!("empty random-effect term for group {}", a.group)));
            }
            if self.randoms[..i].iter().any(|b| b == a) {
                return Err(Error::Formula(format!("duplicate random-effect term {a}")));
            }
        }
        for s in &self.smooths {
            if s.degree < 1 {
                return Err(Error::Formula(format!("smooth on {} needs degree g >= 1", s.variable)));
            }
            if s.knots < 2 {
                return Err(Error::Formula(format!("smooth on {} needs at least 2 knots", s.variable)));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.response, self.rhs())
    }
}

impl std::str::FromStr for ModelFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

pub fn parse_formula(text: &str) -> Result<ModelFormula> {
    let mut p = Parser { src: text, pos: 0 };
    let f = p.formula()?;
    f.validate()?;
    Ok(f)
}

/// Parses a bare right-hand side such as `"~ x1 + (1 | g)"` or
/// `"x1 + (1|g)"`, e.g. the fragments passed as `keep` arguments.
pub fn parse_rhs(text: &str) -> Result<ModelFormula> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    if p.peek() == Some(b'~') {
        p.pos += 1;
    }
    let mut f = ModelFormula::intercept_only("");
    p.rhs(&mut f)?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    f.validate()?;
    Ok(f)
}

pub fn render_formula(f: &ModelFormula) -> String {
    f.to_string()
}

/// Keeps, for every random term, only the named components. Terms whose
/// kept list is empty are dropped.
pub fn reduce_by_component_names(f: &ModelFormula, kept: &[Vec<String>]) -> Result<ModelFormula> {
    if kept.len() != f.randoms.len() {
        return Err(Error::Formula(format!(
            "expected {} component lists, got {}",
            f.randoms.len(),
            kept.len()
        )));
    }
    let mut out = f.clone();
    out.randoms.clear();
    for (term, names) in f.randoms.iter().zip(kept) {
        let available = term.component_names();
        if let Some(bad) = names.iter().find(|n| !available.contains(n)) {
            return Err(Error::Formula(format!(
                "component `{bad}` is not part of term {term}"
            )));
        }
        if names.is_empty() {
            continue;
        }
        let reduced = RandomTerm {
            group: term.group.clone(),
            has_intercept: term.has_intercept && names.iter().any(|n| n == INTERCEPT),
            slopes: term.slopes.iter().filter(|s| names.contains(s)).cloned().collect(),
            correlated: false,
        }
        .normalized();
        out.randoms.push(reduced);
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: msg.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected `{}`", c as char)))
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        let bytes = self.src.as_bytes();
        match bytes.get(self.pos) {
            Some(c) if c.is_ascii_alphabetic() || *c == b'_' || *c == b'.' => {}
            _ => return Err(self.error("expected a variable name")),
        }
        while let Some(c) = bytes.get(self.pos) {
            if c.is_ascii_alphanumeric() || *c == b'_' || *c == b'.' {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected an integer"));
        }
        self.src[start..self.pos]
            .parse()
            .map_err(|_| Error::Parse { offset: start, message: "integer out of range".into() })
    }

    fn quoted(&mut self) -> Result<String> {
        self.skip_ws();
        let q = match self.peek() {
            Some(q @ (b'"' | b'\'')) => q,
            _ => return Err(self.error("expected a quoted string")),
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == q {
                let s = self.src[start..self.pos].to_string();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        Err(Error::Parse { offset: start - 1, message: "unterminated string".into() })
    }

    fn reject_operators(&mut self) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some(b':') | Some(b'*') => Err(self.error("interaction terms are not supported")),
            Some(b'/') => Err(self.error("nested grouping shorthand is not supported")),
            _ => Ok(()),
        }
    }

    fn formula(&mut self) -> Result<ModelFormula> {
        let response = self.ident()?;
        self.expect(b'~')?;
        let mut f = ModelFormula::intercept_only(&response);
        self.rhs(&mut f)?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err(self.error("unexpected trailing input"));
        }
        Ok(f)
    }

    fn rhs(&mut self, f: &mut ModelFormula) -> Result<()> {
        loop {
            self.term(f)?;
            self.reject_operators()?;
            if !self.eat(b'+') {
                return Ok(());
            }
        }
    }

    fn term(&mut self, f: &mut ModelFormula) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some(b'1') => {
                self.integer_literal(b'1')?;
                f.intercept = true;
            }
            Some(b'0') => {
                self.integer_literal(b'0')?;
                f.intercept = false;
            }
            Some(b'(') => {
                let r = self.random()?;
                f.randoms.push(r);
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' || c == b'.' => {
                let start = self.pos;
                let name = self.ident()?;
                self.skip_ws();
                if name == "s" && self.peek() == Some(b'(') {
                    f.smooths.push(self.smooth_args()?);
                } else if self.peek() == Some(b'(') {
                    return Err(Error::Parse {
                        offset: start,
                        message: format!("unknown function `{name}`"),
                    });
                } else if !f.fixed.contains(&name) {
                    f.fixed.push(name);
                }
            }
            None => return Err(self.error("expected a term")),
            Some(_) => return Err(self.error("unexpected character")),
        }
        Ok(())
    }

    fn integer_literal(&mut self, digit: u8) -> Result<()> {
        let start = self.pos;
        self.pos += 1;
        if matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric()) {
            return Err(Error::Parse {
                offset: start,
                message: format!("only `{}` is allowed here", digit as char),
            });
        }
        Ok(())
    }

    fn random(&mut self) -> Result<RandomTerm> {
        let open = self.pos;
        self.expect(b'(')?;
        self.skip_ws();
        let mut has_intercept = true;
        let mut slopes: Vec<String> = Vec::new();
        let mut first = true;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'0') if first => {
                    self.integer_literal(b'0')?;
                    has_intercept = false;
                }
                Some(b'1') if first => {
                    self.integer_literal(b'1')?;
                    has_intercept = true;
                }
                Some(b'|') if first => {
                    return Err(self.error("empty random-effect expression"));
                }
                _ => {
                    let name = self.ident()?;
                    if slopes.contains(&name) {
                        return Err(self.error(format!("slope `{name}` listed twice")));
                    }
                    slopes.push(name);
                }
            }
            first = false;
            self.reject_operators()?;
            if !self.eat(b'+') {
                break;
            }
        }
        self.skip_ws();
        if self.peek() == Some(b'|') && self.src[self.pos..].starts_with("||") {
            return Err(self.error("the `||` shorthand is not supported; write separate terms"));
        }
        self.expect(b'|')?;
        let group = self.ident()?;
        self.reject_operators()?;
        self.expect(b')')?;
        if !has_intercept && slopes.is_empty() {
            return Err(Error::Parse { offset: open, message: "empty random-effect expression".into() });
        }
        Ok(RandomTerm { group, has_intercept, slopes, correlated: false }.normalized())
    }

    fn smooth_args(&mut self) -> Result<SmoothTerm> {
        self.expect(b'(')?;
        let var = self.ident()?;
        let mut term = SmoothTerm::new(&var, BasisType::Trunc);
        while self.eat(b',') {
            let key_at = {
                self.skip_ws();
                self.pos
            };
            let key = self.ident()?;
            self.expect(b'=')?;
            match key.as_str() {
                "bs" => term.basis = BasisType::from_label(&self.quoted()?),
                "k" => term.knots = self.integer()?,
                "g" => term.degree = self.integer()?,
                other => {
                    return Err(Error::Parse {
                        offset: key_at,
                        message: format!("unknown smooth argument `{other}`"),
                    })
                }
            }
        }
        self.expect(b')')?;
        Ok(term)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_random_slope_model() {
        let f = parse_formula("Reaction ~ 1 + Days + (1 + Days|Subject)").unwrap();
        assert_eq!(f.response, "Reaction");
        assert!(f.intercept);
        assert_eq!(f.fixed, vec!["Days"]);
        assert_eq!(f.randoms.len(), 1);
        let r = &f.randoms[0];
        assert_eq!(r.group, "Subject");
        assert!(r.has_intercept && r.correlated);
        assert_eq!(r.slopes, vec!["Days"]);
    }

    #[test]
    fn intercept_only() {
        let f = parse_formula("y ~ 1").unwrap();
        assert!(f.intercept && f.fixed.is_empty() && f.randoms.is_empty());
        assert_eq!(f.to_string(), "y ~ 1");
    }

    #[test]
    fn smooth_with_foreign_basis_label() {
        let f = parse_formula("y ~ x1 + s(x3, bs = \"ps\")").unwrap();
        assert_eq!(f.fixed, vec!["x1"]);
        assert_eq!(f.smooths.len(), 1);
        assert_eq!(f.smooths[0].variable, "x3");
        assert_eq!(f.smooths[0].basis, BasisType::Substituted("ps".into()));
        assert_eq!(f.smooths[0].degree, 3);
        assert_eq!(f.smooths[0].knots, 10);
    }

    #[test]
    fn no_intercept_slope() {
        let f = parse_formula("y ~ (0 + b | g)").unwrap();
        assert!(!f.randoms[0].has_intercept);
        assert!(!f.randoms[0].correlated);
        let f = parse_formula("y ~ (b | g)").unwrap();
        assert!(f.randoms[0].has_intercept && f.randoms[0].correlated);
    }

    #[test]
    fn renders_in_canonical_form() {
        let mut f = ModelFormula::intercept_only("y");
        f.randoms.push(RandomTerm::intercept("g2"));
        f.randoms.push(parse_formula("y ~ (1 + v1 | g1)").unwrap().randoms.remove(0));
        assert_eq!(render_formula(&f), "y ~ (1 | g2) + (1 + v1 | g1)");
    }

    #[test]
    fn smooth_arguments_render() {
        let f = parse_formula("y ~ s(x, k=5, g=2)").unwrap();
        assert_eq!(f.to_string(), "y ~ s(x, bs = \"trunc\", k = 5, g = 2)");
        assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
    }

    #[test]
    fn reduces_components() {
        let f = parse_formula("y ~ (x | g2) + (v1 + v2 + v3 | g1)").unwrap();
        let kept = vec![vec![INTERCEPT.to_string()], vec![INTERCEPT.to_string(), "v1".to_string()]];
        let r = reduce_by_component_names(&f, &kept).unwrap();
        assert_eq!(r.to_string(), "y ~ (1 | g2) + (1 + v1 | g1)");
        assert!(r.randoms[1].correlated);

        let all: Vec<Vec<String>> = f.randoms.iter().map(|t| t.component_names()).collect();
        assert_eq!(reduce_by_component_names(&f, &all).unwrap(), f);

        let none = reduce_by_component_names(&f, &[vec![], vec![]]).unwrap();
        assert!(none.randoms.is_empty());
        assert_eq!(none.to_string(), "y ~ 1");

        let bad = reduce_by_component_names(&f, &[vec!["zz".into()], vec![]]);
        assert!(matches!(bad, Err(Error::Formula(_))));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_formula("y ~ x + ") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match parse_formula("y ~ a:b") {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 5);
                assert!(message.contains("interaction"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_formula("y ~ a*b"), Err(Error::Parse { .. })));
        assert!(matches!(parse_formula("y ~ (1 | g1/g2)"), Err(Error::Parse { .. })));
        assert!(matches!(parse_formula("y ~ (0 | g)"), Err(Error::Parse { .. })));
        assert!(matches!(parse_formula("y ~ ( | g)"), Err(Error::Parse { .. })));
        assert!(matches!(parse_formula("y ~ s(x, foo = 1)"), Err(Error::Parse { .. })));
        assert!(matches!(parse_formula("y ~ (1|g) + (1|g)"), Err(Error::Formula(_))));
        assert!(matches!(parse_formula("y ~ s(x, k = 1)"), Err(Error::Formula(_))));
    }

    #[test]
    fn parses_rhs_fragments() {
        let f = parse_rhs("~ s(x0, bs = \"ps\") + x2").unwrap();
        assert_eq!(f.fixed, vec!["x2"]);
        assert_eq!(f.smooths[0].variable, "x0");
        let r = parse_rhs("~ (1|fac)").unwrap();
        assert_eq!(r.randoms, vec![RandomTerm::intercept("fac")]);
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,5}".prop_filter("not the smooth keyword", |s| s != "s")
    }

    fn arb_formula() -> impl Strategy<Value = ModelFormula> {
        let random = (ident(), any::<bool>(), prop::collection::vec(ident(), 0..3)).prop_map(
            |(g, icpt, mut slopes)| {
                slopes.sort();
                slopes.dedup();
                let has_intercept = icpt || slopes.is_empty();
                RandomTerm { group: g, has_intercept, slopes, correlated: false }.normalized()
            },
        );
        let smooth = (ident(), 1usize..4, 2usize..12, prop::sample::select(vec!["trunc", "ps", "tp"]))
            .prop_map(|(v, g, k, bs)| SmoothTerm {
                variable: v,
                basis: BasisType::from_label(bs),
                degree: g,
                knots: k,
            });
        (
            ident(),
            any::<bool>(),
            prop::collection::vec(ident(), 0..3),
            prop::collection::vec(smooth, 0..2),
            prop::collection::vec(random, 0..3),
        )
            .prop_map(|(resp, intercept, mut fixed, smooths, mut randoms)| {
                fixed.dedup();
                let mut uniq: Vec<String> = Vec::new();
                for v in fixed {
                    if !uniq.contains(&v) {
                        uniq.push(v);
                    }
                }
                let mut seen: Vec<RandomTerm> = Vec::new();
                randoms.retain(|r| {
                    if seen.contains(r) {
                        false
                    } else {
                        seen.push(r.clone());
                        true
                    }
                });
                // an intercept-free model needs at least one other term to be expressible
                let intercept = intercept || (uniq.is_empty() && smooths.is_empty() && randoms.is_empty());
                ModelFormula { response: resp, intercept, fixed: uniq, smooths, randoms }
            })
    }

    proptest! {
        #[test]
        fn render_parse_is_identity(f in arb_formula()) {
            let text = render_formula(&f);
            let back = parse_formula(&text).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(render_formula(&back), text);
        }

        #[test]
        fn parser_is_total(s in "\\PC{0,40}") {
            match parse_formula(&s) {
                Ok(f) => { let _ = render_formula(&f); }
                Err(Error::Parse { offset, .. }) => prop_assert!(offset <= s.len()),
                Err(Error::Formula(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error kind {e:?}"),
            }
        }

        #[test]
        fn reduction_never_adds_components(f in arb_formula(), mask in prop::collection::vec(any::<bool>(), 0..12)) {
            let mut bit = mask.into_iter().chain(std::iter::repeat(true));
            let kept: Vec<Vec<String>> = f.randoms.iter()
                .map(|t| t.component_names().into_iter().filter(|_| bit.next().unwrap()).collect())
                .collect();
            let r = reduce_by_component_names(&f, &kept).unwrap();
            prop_assert!(r.component_count() <= f.component_count());
            for t in &r.randoms {
                let orig = f.randoms.iter().find(|o| o.group == t.group && t.component_names().iter().all(|c| o.component_names().contains(c)));
                prop_assert!(orig.is_some());
            }
        }
    }
}
