//! Criterion checks shared by the per-module tests and the acceptance suite.
#![allow(dead_code)]

pub mod attention;
pub mod bruteforce;
pub mod crossover;
pub mod fuzzy;
pub mod gradient;
pub mod svm;

use std::fmt;

#[derive(Debug)]
pub struct Verdict {
    pub pass: bool,
    pub summary: String,
    pub problems: Vec<String>,
}

impl Verdict {
    pub fn new(pass: bool, summary: String, problems: Vec<String>) -> Self {
        Verdict {
            pass,
            summary,
            problems,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.summary)?;
        for p in self.problems.iter().take(5) {
            write!(f, "\n  {p}")?;
        }
        Ok(())
    }
}
