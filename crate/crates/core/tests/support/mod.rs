#![allow(dead_code)]

pub mod criteria;
pub mod exprgen;
pub mod md5_reference;
pub mod reference_expr;
pub mod scenarios;
pub mod specgen;
