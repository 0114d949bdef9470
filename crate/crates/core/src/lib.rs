pub mod domain;
pub mod math;
pub mod sensor;
pub mod assoc;
pub mod priors;
pub mod solver;
pub mod grid;
pub mod cluster;
pub mod synth;
pub mod eval;
pub mod baseline;
pub mod calibrate;
