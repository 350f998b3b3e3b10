//! Checks shared by the integration suites and the acceptance harness.
#![allow(dead_code)]

pub mod criteria;
pub mod gen;
pub mod grad;
pub mod oracle;
