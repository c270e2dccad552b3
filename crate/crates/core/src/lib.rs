//! Distributionally robust planning of power-to-hydrogen-and-heat (P2HH) and
//! electric-boiler flexibility in an integrated electricity and heat system.

pub mod cli;
pub mod conic_solver;
pub mod desk;
pub mod electrolyser;
pub mod evaluate;
pub mod ies_model;
pub mod reformulate;
pub mod scenarios;
