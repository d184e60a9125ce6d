//! Arithmetic triples and their cell layout on fixed-width canvases.
//!
//! Expression canvas, 7 cells: `[sign_a, tens_a, ones_a, operator, sign_b, tens_b, ones_b]`.
//! Answer canvas, 4 cells: `[sign, hundreds, tens, ones]`.
//!
//! Numbers are right-aligned inside their cells. Unused leading cells are
//! blank, and a negative number's minus sign sits in the cell immediately
//! left of its most significant digit (so `-7` renders as `[ , , -, 7]`).

use std::fmt;

use serde::{Deserialize, Serialize};

pub const OPERAND_MIN: i64 = -99;
pub const OPERAND_MAX: i64 = 99;
pub const RESULT_LIMIT: i64 = 198;
/// 199 * 199 * 2.
pub const TRIPLE_COUNT: usize = 79_202;

pub const MINUS_CLASS: usize = 10;
pub const BLANK_CLASS: usize = 11;

/// Content of one canvas cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Glyph {
    Digit(u8),
    Minus,
    Plus,
    Blank,
}

impl Glyph {
    /// Classifier class: digits 0-9, minus 10, blank 11. `Plus` has none.
    pub fn class(self) -> Option<usize> {
        match self {
            Glyph::Digit(d) => Some(d as usize),
            Glyph::Minus => Some(MINUS_CLASS),
            Glyph::Blank => Some(BLANK_CLASS),
            Glyph::Plus => None,
        }
    }

    pub fn from_class(class: usize) -> Option<Self> {
        match class {
            0..=9 => Some(Glyph::Digit(class as u8)),
            MINUS_CLASS => Some(Glyph::Minus),
            BLANK_CLASS => Some(Glyph::Blank),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Plus,
    Minus,
}

impl Operator {
    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Operator::Plus => a + b,
            Operator::Minus => a - b,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Operator::Plus => '+',
            Operator::Minus => '-',
        }
    }

    pub fn glyph(self) -> Glyph {
        match self {
            Operator::Plus => Glyph::Plus,
            Operator::Minus => Glyph::Minus,
        }
    }
}

/// An expression `a op b` with both operands in `[-99, 99]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub a: i64,
    pub b: i64,
    pub op: Operator,
}

impl Triple {
    pub fn new(a: i64, b: i64, op: Operator) -> Self {
        debug_assert!((OPERAND_MIN..=OPERAND_MAX).contains(&a));
        debug_assert!((OPERAND_MIN..=OPERAND_MAX).contains(&b));
        Self { a, b, op }
    }

    pub fn result(&self) -> i64 {
        self.op.apply(self.a, self.b)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.a, self.op.symbol(), self.b)
    }
}

/// Every triple, in `(op, a, b)` ascending order.
pub fn all_triples() -> impl Iterator<Item = Triple> {
    [Operator::Plus, Operator::Minus]
        .into_iter()
        .flat_map(|op| {
            (OPERAND_MIN..=OPERAND_MAX)
                .flat_map(move |a| (OPERAND_MIN..=OPERAND_MAX).map(move |b| Triple::new(a, b, op)))
        })
}

/// Right-aligned glyphs of `value` in `cells` cells.
pub fn number_glyphs(value: i64, cells: usize) -> Vec<Glyph> {
    let digits: Vec<Glyph> = value
        .unsigned_abs()
        .to_string()
        .bytes()
        .map(|b| Glyph::Digit(b - b'0'))
        .collect();
    let used = digits.len() + usize::from(value < 0);
    assert!(used <= cells, "{value} does not fit in {cells} cells");
    let mut out = vec![Glyph::Blank; cells - used];
    if value < 0 {
        out.push(Glyph::Minus);
    }
    out.extend(digits);
    out
}

pub fn expression_glyphs(t: &Triple) -> Vec<Glyph> {
    let mut g = number_glyphs(t.a, 3);
    g.push(t.op.glyph());
    g.extend(number_glyphs(t.b, 3));
    g
}

pub fn answer_glyphs(result: i64) -> Vec<Glyph> {
    number_glyphs(result, 4)
}

pub fn answer_classes(result: i64) -> [usize; 4] {
    let g = answer_glyphs(result);
    std::array::from_fn(|i| g[i].class().expect("answers have no plus"))
}
