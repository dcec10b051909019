pub mod fixtures;
pub mod gradcheck;
pub mod oracles;
