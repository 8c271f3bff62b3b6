#![allow(dead_code)]
pub mod gradients;
