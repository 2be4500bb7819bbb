#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod io;
pub mod powertrain;
pub mod scenario;
pub mod sim;
pub mod trailer;
pub mod trajectory;
pub mod vehicle;
