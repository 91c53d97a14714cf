pub mod baselines;
pub mod dmc;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod paging;
