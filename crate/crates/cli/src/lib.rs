//! Command-line and HTTP front ends for the neural calculator.

pub mod calc;
pub mod config;
pub mod grammar;
pub mod service;

pub use calc::{CalcResponse, Calculator};
pub use grammar::{parse_expr, GrammarError, GRAMMAR};
