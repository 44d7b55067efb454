pub mod numerics;
pub mod dualquat;
pub mod gsplat;
pub mod attention;
pub mod nn;
pub mod scenegen;
pub mod model;
pub mod losses;
pub mod evalmetrics;
pub mod trainer;
pub mod selftest;
