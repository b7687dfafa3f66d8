//! Independent brute-force oracles shared by integration tests.
#![allow(dead_code)]

pub mod chain;
pub mod golden;
pub mod gradsuite;
pub mod scores;
