pub mod numerics;
pub mod conic;
pub mod channel;
pub mod perfect_csi;
pub mod robust_csi;
pub mod baselines;
