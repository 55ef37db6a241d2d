//! Robust maxmin utility maximization on finite scenario trees.

pub mod cli;
pub mod dp;
pub mod instances;
pub mod io;
pub mod lab;
pub mod lp;
pub mod maxmin;
pub mod model;
pub mod na;
pub mod oracle;
pub mod plf;
pub mod utility;
