#![allow(dead_code)]

pub mod gradcheck;
pub mod pruning_checks;
