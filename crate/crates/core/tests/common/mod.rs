#![allow(dead_code)]

pub mod dft;
pub mod gradcheck;
