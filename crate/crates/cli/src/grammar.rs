//! The expression grammar shared by the CLI and the HTTP service.

use std::sync::OnceLock;

use neurocalc::data::{Operator, Triple};
use regex::Regex;

pub const GRAMMAR: &str = r"^-?\d{1,2}[+-]-?\d{1,2}$";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarError {
    pub input: String,
}

impl std::fmt::Display for GrammarError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "invalid expression {:?}: expected `a+b` or `a-b` with integers in [-99, 99] (pattern {GRAMMAR})",
            self.input
        )
    }
}

impl std::error::Error for GrammarError {}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(GRAMMAR).expect("valid grammar"))
}

/// Parses `a+b` / `a-b`. Operands have one or two digits and an optional
/// leading minus.
pub fn parse_expr(input: &str) -> Result<Triple, GrammarError> {
    let err = || GrammarError {
        input: input.to_string(),
    };
    if !grammar().is_match(input) {
        return Err(err());
    }
    // The operator is the first sign after the first operand's digits.
    let start = usize::from(input.starts_with('-'));
    let op_at = input[start..]
        .find(['+', '-'])
        .map(|i| i + start)
        .ok_or_else(err)?;
    let a: i64 = input[..op_at].parse().map_err(|_| err())?;
    let b: i64 = input[op_at + 1..].parse().map_err(|_| err())?;
    let op = if &input[op_at..=op_at] == "+" {
        Operator::Plus
    } else {
        Operator::Minus
    };
    Ok(Triple::new(a, b, op))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_and_rejects() {
        assert_eq!(
            parse_expr("5+2").unwrap(),
            Triple::new(5, 2, Operator::Plus)
        );
        assert_eq!(
            parse_expr("-99--99").unwrap(),
            Triple::new(-99, -99, Operator::Minus)
        );
        assert_eq!(parse_expr("12+34").unwrap().result(), 46);
        assert_eq!(
            parse_expr("7-+3"),
            Err(GrammarError {
                input: "7-+3".into()
            })
        );
        for bad in [
            "2*3", "1234+5", "", "5+", "+5+2", "100+1", " 5+2", "5 + 2", "--5+2", "5+2\n",
        ] {
            assert!(parse_expr(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn message_names_the_grammar() {
        let e = parse_expr("2*3").unwrap_err().to_string();
        assert!(e.contains("2*3") && e.contains(GRAMMAR), "{e}");
    }
}
